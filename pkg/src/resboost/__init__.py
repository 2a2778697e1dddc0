"""Online gradient boosting of feature representations as a residual network.

Residual modules are neural decision trees (or dense blocks); a shared linear
classifier turns each module into a weak learner, and learnable shrinkage
factors damp the running partial sums.
"""

from .boosting import (
    CompositeLoss,
    LogisticLoss,
    MaxNormBound,
    OnlineGradientBoosting,
    RegretLedger,
    ShrinkageState,
    SoftmaxCrossEntropy,
    bound_output,
    combine_partial,
    learner_descent_signal,
    loss_and_gradient,
    make_loss,
    record_regret,
    update_shrinkage,
)
from .core_math import finite_diff_grad, grad_check, matmul, relu, stable_log_softmax
from .data_io import ArrayStream, DatasetManifest, DatasetStream, scan_manifest, split_70_30
from .resnet import (
    BoostedResNet,
    DenseBlock,
    IdentityModule,
    PredictionOutput,
    TreeModule,
    evaluate,
    load_checkpoint,
    projection_shortcut,
    save_checkpoint,
    train_stream,
)
from .tree import (
    NeuralDecisionTree,
    TreeTopology,
    build_routing_matrix,
    classical_predict,
    export_tree,
    import_tree,
)

__version__ = "0.1.0"
