"""Executable property checks for the boosting view of residual networks.

Each check returns a :class:`CheckReport` whose ``to_dict`` is the JSON
record ``{check_name, passed, measured, tolerance, seed}`` (plus free-form
``details``).  Everything is seeded; nothing reads global random state.
"""

from dataclasses import dataclass, field

import numpy as np

from .boosting import LogisticLoss, MaxNormBound, ShrinkageState, combine_partial, make_loss
from .core_math import DTYPE, sigmoid
from .data_io import ArrayStream, split_70_30
from .resnet import BoostedResNet, DenseBlock, IdentityModule, TreeModule, train_stream
from .tree import NeuralDecisionTree, TreeTopology

DEFAULT_SEED = 0


class IdentityParameterizationError(RuntimeError):
    """The requested temperature cannot hide the off-target leaves."""

    def __init__(self, gap, tol, temperature):
        super().__init__(f"identity gap {gap:.3e} exceeds tolerance {tol:.1e} at temperature {temperature}")
        self.gap = gap


class DegenerateDatasetError(ValueError):
    pass


@dataclass
class CheckReport:
    check_name: str
    passed: bool
    measured: float
    tolerance: float
    seed: int
    details: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "check_name": self.check_name,
            "passed": bool(self.passed),
            "measured": _jsonable(self.measured),
            "tolerance": _jsonable(self.tolerance),
            "seed": self.seed,
            "details": {k: _jsonable(v) for k, v in self.details.items()},
        }


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    return v


# -- identity parameterizations ------------------------------------------------


def _grid(k, points=5, lo=-1.0, hi=1.0):
    axes = [np.linspace(lo, hi, points)] * k
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, k)


def identity_parameterization_ndt(k=3, depth=1, temperature=1e3, target_leaf=0, bias=1.0,
                                  tol=1e-6, probe=None):
    """Tree module whose output is the identity map on its input.

    All node weights are zero and every bias points along the path to
    ``target_leaf``, so routing ignores ``x`` and, at a large temperature,
    puts all mass on that leaf.  The target leaf's value row is zero and the
    module's linear term is the identity, so ``f(x) = x`` on that path.  The
    other leaves hold ones, which makes any routing leak visible.

    Raises :class:`IdentityParameterizationError` when the worst deviation
    over ``probe`` (default: a 5-point grid on [-1, 1]^k) exceeds ``tol``.
    """
    topo = TreeTopology.complete(depth)
    b = np.full(topo.n_nodes, bias)
    for node, went_pos in topo.paths()[target_leaf]:
        b[node] = bias if went_pos else -bias
    pi = np.ones((topo.n_leaves, k))
    pi[target_leaf] = 0.0
    tree = NeuralDecisionTree(np.zeros((k, topo.n_nodes)), b, pi, topo, temperature)
    module = TreeModule(tree, np.eye(k))
    X = _grid(k) if probe is None else np.atleast_2d(probe)
    gap = identity_gap(module, X)
    if gap > tol:
        raise IdentityParameterizationError(gap, tol, temperature)
    return module


def identity_gap(module, X):
    """max |f(x) - x| over the rows of ``X``."""
    X = np.asarray(X, dtype=DTYPE)
    return float(np.max(np.abs(module(X) - X)))


def _identity_network(modules, width):
    # unbounded max-norm: 2^(k-1) growth must not be clipped
    return BoostedResNet(modules, np.zeros((width, 2)), ShrinkageState.zeros(len(modules)),
                         "vanilla", bound=MaxNormBound(np.inf), loss=make_loss("softmax", 2))


def check_doubling_recursion(k_max=8, module="identity", width=3, seed=DEFAULT_SEED, tol=None,
                             n_inputs=20):
    """Feature recursion through identity residual blocks doubles: g_k = 2^(k-1) x.

    ``module`` is ``"identity"`` (exact, default tolerance 1e-9) or ``"ndt"``
    (temperature-tuned tree identity, default tolerance 1e-5).
    """
    if module == "identity":
        modules = [IdentityModule(width) for _ in range(max(k_max - 1, 1))]
        tol = 1e-9 if tol is None else tol
    elif module == "ndt":
        modules = [identity_parameterization_ndt(width) for _ in range(max(k_max - 1, 1))]
        tol = 1e-5 if tol is None else tol
    else:
        raise ValueError(f"module must be 'identity' or 'ndt', got {module!r}")
    net = _identity_network(modules, width)
    X = np.random.default_rng(seed).uniform(-1, 1, (n_inputs, width))
    g = net.features(X)
    errors = []
    for k in range(1, k_max + 1):
        expected = 2.0 ** (k - 1) * X
        errors.append(float(np.max(np.abs(g[k - 1] - expected) / np.abs(expected))))
    worst = max(errors)
    return CheckReport(f"doubling_{module}", worst <= tol, worst, tol, seed,
                       {"k_max": k_max, "per_k_relative_error": errors})


def check_injection_proportionality(n_blocks=4, width=3, seed=DEFAULT_SEED, tol=1e-12):
    """With identity blocks the vanilla score is w^T g_{N+1} = 2^N w^T x."""
    rng = np.random.default_rng(seed)
    net = _identity_network([IdentityModule(width) for _ in range(n_blocks)], width)
    net.w[...] = rng.standard_normal(net.w.shape)
    X = rng.uniform(-1, 1, (20, width))
    expected = 2.0 ** n_blocks * (X @ net.w)
    err = float(np.max(np.abs(net.final_scores(X) - expected) / np.maximum(np.abs(expected), 1e-300)))
    return CheckReport("injection_proportionality", err <= tol, err, tol, seed, {"n_blocks": n_blocks})


def check_identity_ndt(k=3, temperature=1e3, seed=DEFAULT_SEED, tol=1e-6):
    """Tree identity gap on the grid, plus the leak that appears at temperature 1."""
    module = identity_parameterization_ndt(k, temperature=temperature, tol=np.inf)
    gap = identity_gap(module, _grid(k))
    zero_exact = bool(np.all(module(np.zeros((1, k))) == 0.0))
    leak = identity_gap(identity_parameterization_ndt(k, temperature=1.0, tol=np.inf), _grid(k))
    return CheckReport("identity_ndt", gap <= tol and zero_exact, gap, tol, seed,
                       {"temperature": temperature, "f0_exactly_zero": zero_exact,
                        "leak_at_temperature_1": leak})


def check_identity_dense(width=3, offset=2.0, seed=DEFAULT_SEED, tol=1e-12):
    """Dense block with W = V = I and Vb = -Wb = offset is the identity for x > -offset."""
    block = DenseBlock.identity(width, offset)
    X = np.random.default_rng(seed).uniform(-1, 1, (200, width))
    gap = identity_gap(block, X)
    return CheckReport("identity_dense", gap <= tol, gap, tol, seed, {"offset": offset})


# -- weak learning ----------------------------------------------------------------


def make_threshold_data(n=500, seed=DEFAULT_SEED, threshold=0.1):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, 1))
    return X, (X[:, 0] > threshold).astype(int)


def make_noise_data(n=500, k=2, seed=DEFAULT_SEED):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, (n, k)), rng.integers(0, 2, n)


def make_xor_data(n=600, seed=DEFAULT_SEED):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-1, 1, (n, 2))
    return X, ((X[:, 0] > 0) ^ (X[:, 1] > 0)).astype(int)


def identity_module_factory(width, rng):
    return IdentityModule(width)


def tree_module_factory(depth=2):
    def factory(width, rng):
        return TreeModule(NeuralDecisionTree.init(TreeTopology.complete(depth), width, width, rng))
    return factory


def check_weak_learner(module_factory, dataset, margin=0.05, seed=DEFAULT_SEED, n_modules=1,
                       epochs=60, lr=0.5, batch_size=16, name="weak_learner"):
    """Held-out accuracy of a logistic classifier on top of the given modules.

    The edge over random guessing is ``accuracy - 0.5``; the check passes when
    it exceeds ``margin``.  A failed check is reported, not raised.
    """
    X, y = (np.asarray(a) for a in dataset)
    y = y.astype(int)
    if np.unique(y).size < 2:
        raise DegenerateDatasetError("weak-learner check needs both classes present")
    train = np.array([split_70_30(i, seed) == "train" for i in range(len(y))])
    rng = np.random.default_rng(seed)
    width = X.shape[1]
    modules = [module_factory(width, rng) for _ in range(n_modules)]
    net = BoostedResNet(modules, np.zeros((width, 1)), ShrinkageState.zeros(n_modules), "vanilla",
                        loss=LogisticLoss())
    train_stream(net, ArrayStream(X[train], y[train], batch_size), epochs, seed=seed, lr=lr)
    acc = float(np.mean(net.predict(X[~train]) == y[~train]))
    edge = acc - 0.5
    return CheckReport(name, edge > margin, acc, 0.5 + margin, seed,
                       {"edge": edge, "verdict": "edge" if edge > margin else "no edge",
                        "n_test": int((~train).sum())})


# -- Lipschitz composition -----------------------------------------------------------


def sample_pairs(n_pairs, seed, radius=10.0):
    """Pairs (a, b) mixing wide separations with very close ones (down to 1e-6)."""
    rng = np.random.default_rng(seed)
    a = rng.uniform(-radius, radius, n_pairs)
    gap = 10.0 ** rng.uniform(-6, np.log10(2 * radius), n_pairs) * rng.choice([-1.0, 1.0], n_pairs)
    return a, a + gap


def empirical_lipschitz(fn, a, b):
    num = np.abs(fn(a) - fn(b))
    den = np.abs(a - b)
    keep = den > 0
    return float(np.max(num[keep] / den[keep]))


def clipped_linear(c=10.0):
    return lambda z: np.clip(z, -c, c)


def logistic_composite(y=1.0):
    """F -> log(1 + exp(-y F)), the logistic loss as a function of the raw score."""
    return lambda F: np.logaddexp(0.0, -y * F)


def check_lipschitz_composition(outer, inner, L1, L2, n_pairs=100_000, seed=DEFAULT_SEED,
                                slack=1e-9, name="lipschitz", radius=10.0):
    """Sampled Lipschitz ratio of ``outer(inner(.))`` against ``L1 * L2 + slack``."""
    a, b = sample_pairs(n_pairs, seed, radius)
    ratio = empirical_lipschitz(lambda z: outer(inner(z)), a, b)
    bound = L1 * L2
    return CheckReport(name, ratio <= bound + slack, ratio, bound + slack, seed,
                       {"L1": L1, "L2": L2, "n_pairs": n_pairs})


def check_logistic_lipschitz(n_pairs=100_000, seed=DEFAULT_SEED, slack=1e-9):
    """Both label signs of the logistic composite loss, through a clipped linear map."""
    reports = [check_lipschitz_composition(logistic_composite(s), clipped_linear(), 1.0, 1.0,
                                           n_pairs, seed + i, slack)
               for i, s in enumerate((1.0, -1.0))]
    ratio = max(r.measured for r in reports)
    return CheckReport("lipschitz_logistic", all(r.passed for r in reports), ratio, 1.0 + slack, seed,
                       {"n_pairs_per_label": n_pairs})


# -- vanilla reduction -------------------------------------------------------------


def check_vanilla_reduction(n_modules=5, width=4, n_classes=3, seed=DEFAULT_SEED, tol=1e-12):
    """theta = 0, eta = 1: chained partial sums equal the plain sum of module scores."""
    rng = np.random.default_rng(seed)
    net = BoostedResNet.build(width, n_classes, n_modules, depth=3, mode="vanilla", seed=seed)
    for m in net.modules:
        m.tree.pi[...] = rng.standard_normal(m.tree.pi.shape)
    net.w[...] = rng.standard_normal(net.w.shape)
    X = rng.standard_normal((50, width))
    g = net.features(X)
    bound = net.bound
    summed = X @ net.w
    F = np.zeros_like(summed)
    for t, m in enumerate(net.modules):
        contrib = bound.apply(m(g[t])) @ net.w
        summed = summed + contrib
        F = combine_partial(F, contrib + (X @ net.w if t == 0 else 0.0), 0.0, 1.0)
    out = net.final_scores(X)
    err = float(max(np.max(np.abs(out - summed)), np.max(np.abs(out - F))))
    return CheckReport("vanilla_reduction", err <= tol, err, tol, seed, {"n_modules": n_modules})


# -- suite -----------------------------------------------------------------------


def _suite(seed):
    return {
        "identity_ndt": lambda: check_identity_ndt(seed=seed),
        "identity_dense": lambda: check_identity_dense(seed=seed),
        "doubling_identity": lambda: check_doubling_recursion(8, "identity", seed=seed),
        "doubling_ndt": lambda: check_doubling_recursion(3, "ndt", seed=seed),
        "injection_proportionality": lambda: check_injection_proportionality(seed=seed),
        "weak_learner_threshold": lambda: check_weak_learner(
            identity_module_factory, make_threshold_data(seed=seed), seed=seed,
            name="weak_learner_threshold"),
        "weak_learner_xor": lambda: check_weak_learner(
            tree_module_factory(2), make_xor_data(seed=seed), seed=seed, name="weak_learner_xor"),
        "lipschitz_sigmoid": lambda: check_lipschitz_composition(
            sigmoid, sigmoid, 0.25, 0.25, seed=seed, name="lipschitz_sigmoid"),
        "lipschitz_identity": lambda: check_lipschitz_composition(
            lambda z: z, lambda z: z, 1.0, 1.0, seed=seed, name="lipschitz_identity"),
        "lipschitz_logistic": lambda: check_logistic_lipschitz(seed=seed),
        "vanilla_reduction": lambda: check_vanilla_reduction(seed=seed),
    }


CHECK_NAMES = tuple(_suite(0))


def select_checks(only=None):
    """Names matching ``only`` exactly or as a group prefix (``doubling`` -> both doubling checks)."""
    if not only:
        return list(CHECK_NAMES)
    chosen = []
    for key in only:
        hits = [n for n in CHECK_NAMES if n == key or n.startswith(key + "_")]
        if not hits:
            raise KeyError(f"unknown check {key!r}; known: {', '.join(CHECK_NAMES)}")
        chosen += [h for h in hits if h not in chosen]
    return chosen


def run_checks(seed=DEFAULT_SEED, only=None, force_fail=False):
    """Run the selected checks in a fixed order; ``force_fail`` appends a failing record."""
    suite = _suite(seed)
    reports = [suite[name]() for name in select_checks(only)]
    if force_fail:
        reports.append(CheckReport("forced_failure", False, 1.0, 0.0, seed, {"reason": "test hook"}))
    return reports
