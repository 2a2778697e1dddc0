"""Online gradient boosting with learnable shrinkage over N weak learners.

Partial sums follow ``F^i = (1 - theta_i) F^{i-1} + eta * A^i(x)`` with
``F^0 = 0``.  Learner ``i`` is trained against the loss gradient at
``F^{i-1}`` and every ``theta_i`` is kept inside ``[0, eta]``.
"""

from dataclasses import dataclass, field

import numpy as np

from .core_math import DTYPE, DimensionError, log_sigmoid, sigmoid, stable_log_softmax


class InvalidLabelError(ValueError):
    pass


# -- composite losses ----------------------------------------------------------


class CompositeLoss:
    """Base loss precomposed with an inverse link, differentiated in score space.

    Scores are batched as ``(B, C)`` arrays; ``value_and_grad`` returns the
    per-example losses ``(B,)`` and their gradients ``(B, C)``.
    """

    name = "composite"
    n_scores = None

    def inverse_link(self, F):
        raise NotImplementedError

    def value_and_grad(self, F, y):
        raise NotImplementedError

    def value(self, F, y):
        return self.value_and_grad(F, y)[0]


class LogisticLoss(CompositeLoss):
    """log(1 + exp(-y F)) with the sigmoid link; one score per example.

    Labels may be given as +-1 or as class indices 0/1.
    """

    name = "logistic"
    n_scores = 1

    def _signed(self, y):
        y = np.asarray(y)
        ok = np.isin(y, (-1, 0, 1))
        if not np.all(ok):
            raise InvalidLabelError(f"logistic labels must be +-1 or 0/1, got {y[~ok][:5].tolist()}")
        return np.where(y == 0, -1.0, y.astype(DTYPE))

    def inverse_link(self, F):
        return sigmoid(F)

    def value_and_grad(self, F, y):
        F = np.asarray(F, dtype=DTYPE)
        s = self._signed(y).reshape(-1, 1)
        m = -s * F
        value = np.logaddexp(0.0, m).sum(axis=1)
        grad = -s * sigmoid(m)
        return value, grad


class SoftmaxCrossEntropy(CompositeLoss):
    name = "softmax"

    def __init__(self, n_classes):
        if n_classes < 2:
            raise ValueError("softmax cross-entropy needs at least two classes")
        self.n_scores = n_classes

    def inverse_link(self, F):
        return np.exp(stable_log_softmax(F, axis=-1))

    def _index(self, y):
        y = np.asarray(y)
        if y.dtype.kind == "f":
            if not np.all(y == np.round(y)):
                raise InvalidLabelError("class labels must be integers")
            y = y.astype(int)
        if y.dtype.kind not in "iu" or np.any(y < 0) or np.any(y >= self.n_scores):
            raise InvalidLabelError(f"class labels must lie in 0..{self.n_scores - 1}")
        return y

    def value_and_grad(self, F, y):
        F = np.asarray(F, dtype=DTYPE)
        y = self._index(y).reshape(-1)
        logp = stable_log_softmax(F, axis=1)
        rows = np.arange(F.shape[0])
        value = -logp[rows, y]
        grad = np.exp(logp)
        grad[rows, y] -= 1.0
        return value, grad


def make_loss(name, n_classes):
    if name == "logistic":
        if n_classes > 2:
            raise ValueError("logistic loss is binary only")
        return LogisticLoss()
    if name == "softmax":
        return SoftmaxCrossEntropy(n_classes)
    raise ValueError(f"unknown loss {name!r}")


def _batched(F, y):
    F = np.asarray(F, dtype=DTYPE)
    single = F.ndim == 1
    return (F[None, :], np.atleast_1d(y)) if single else (F, np.asarray(y)), single


def loss_and_gradient(loss, F, y):
    """Value and score-gradient of ``loss`` for one example or a batch."""
    (Fb, yb), single = _batched(F, y)
    value, grad = loss.value_and_grad(Fb, yb)
    if single:
        return float(value[0]), grad[0]
    return value, grad


def learner_descent_signal(loss, F_prev, y):
    """Gradient of the loss at the previous partial sum, the signal learner i descends."""
    return loss_and_gradient(loss, F_prev, y)[1]


# -- partial sums, shrinkage, bounds --------------------------------------------


def combine_partial(F_prev, module_out, theta, eta):
    F_prev = np.asarray(F_prev, dtype=DTYPE)
    module_out = np.asarray(module_out, dtype=DTYPE)
    if F_prev.shape != module_out.shape:
        raise DimensionError(f"partial sum shape {F_prev.shape} != module output shape {module_out.shape}")
    return (1.0 - theta) * F_prev + eta * module_out


@dataclass(frozen=True)
class MaxNormBound:
    D: float = 5.0

    def __post_init__(self):
        if not self.D > 0:
            raise ValueError("max-norm bound must be positive")

    def apply(self, v):
        return bound_output(v, self)

    def backward(self, v, d_out):
        """Vector-Jacobian product of :meth:`apply` for a batch ``(B, d)``."""
        v = np.asarray(v, dtype=DTYPE)
        d_out = np.asarray(d_out, dtype=DTYPE)
        norms = np.linalg.norm(v, axis=1)
        clipped = norms > self.D
        d_in = d_out.copy()
        if np.any(clipped):
            vc, dc, nc = v[clipped], d_out[clipped], norms[clipped][:, None]
            proj = np.sum(vc * dc, axis=1, keepdims=True) / nc**2
            d_in[clipped] = (self.D / nc) * (dc - vc * proj)
        return d_in


def bound_output(v, bound):
    """Rescale ``v`` (or each row of a batch) onto the ball of radius ``bound.D``."""
    v = np.asarray(v, dtype=DTYPE)
    if v.ndim == 1:
        n = np.linalg.norm(v)
        return v * (bound.D / n) if n > bound.D else v.copy()
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return np.where(norms > bound.D, v * (bound.D / np.where(norms > 0, norms, 1.0)), v)


@dataclass
class ShrinkageState:
    theta: np.ndarray
    eta: float = 1.0
    lr: float = 0.01

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=DTYPE).copy()
        n = self.theta.size
        if not (1.0 / n - 1e-12 <= self.eta <= 1.0):
            raise ValueError(f"eta must lie in [1/N, 1] = [{1.0 / n:.4g}, 1], got {self.eta}")
        np.clip(self.theta, 0.0, self.eta, out=self.theta)

    @classmethod
    def zeros(cls, n, eta=1.0, lr=0.01):
        return cls(np.zeros(n), eta, lr)

    def update(self, i, grad):
        self.theta[i] = min(max(self.theta[i] - self.lr * grad, 0.0), self.eta)
        return self


def update_shrinkage(state, i, grad_theta):
    """One projected gradient step on theta_i; returns the (mutated) state."""
    if not 0 <= i < state.theta.size:
        raise IndexError(f"learner index {i} out of range")
    return state.update(i, float(grad_theta))


def shrinkage_backward(theta, partials, d_final=None, d_heads=None):
    """Backpropagate through the partial-sum chain.

    ``partials`` is the list ``[F^0, ..., F^N]`` of ``(B, C)`` arrays.  Loss
    gradients enter at the last sum (``d_final``) and/or at every head
    (``d_heads[i-1]`` for ``F^i``).  Returns ``(deltas, grad_theta)`` where
    ``deltas[i-1]`` is the total gradient at ``F^i`` and ``grad_theta`` is
    summed over the batch.
    """
    n = len(partials) - 1
    deltas = [None] * n
    grad_theta = np.zeros(n)
    carry = np.zeros_like(partials[-1])
    for i in range(n, 0, -1):
        d = carry.copy()
        if d_heads is not None:
            d += d_heads[i - 1]
        if d_final is not None and i == n:
            d += d_final
        deltas[i - 1] = d
        grad_theta[i - 1] = -np.sum(d * partials[i - 1])
        carry = (1.0 - theta[i - 1]) * d
    return deltas, grad_theta


# -- regret accounting ---------------------------------------------------------


@dataclass
class RegretLedger:
    n_learners: int
    steps: int = 0
    ensemble_loss: float = 0.0
    zero_loss: float = 0.0
    learner_loss: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.learner_loss is None:
            self.learner_loss = np.zeros(self.n_learners)

    def record(self, ensemble, learners, zero):
        ensemble = np.atleast_1d(np.asarray(ensemble, dtype=DTYPE))
        learners = np.atleast_2d(np.asarray(learners, dtype=DTYPE))
        zero = np.atleast_1d(np.asarray(zero, dtype=DTYPE))
        for arr, name in ((ensemble, "ensemble"), (learners, "learner"), (zero, "zero-score")):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite {name} loss")
        self.steps += ensemble.size
        self.ensemble_loss += float(ensemble.sum())
        self.learner_loss += learners.sum(axis=0)
        self.zero_loss += float(zero.sum())
        return self

    def regret(self, comparator_total):
        """Empirical regret against a comparator's total loss on the same stream."""
        return self.ensemble_loss - comparator_total

    def delta0(self, comparator_total):
        """Initial error: total zero-score loss minus the comparator's total loss."""
        return self.zero_loss - comparator_total

    def best_learner(self):
        i = int(np.argmin(self.learner_loss))
        return i, float(self.learner_loss[i])

    def to_dict(self):
        return {"steps": self.steps, "ensemble_loss": self.ensemble_loss,
                "zero_loss": self.zero_loss, "learner_loss": self.learner_loss.tolist()}


def record_regret(ledger, ensemble, learners, zero):
    return ledger.record(ensemble, learners, zero)


# -- weak learners and the engine ------------------------------------------------


class LinearLearner:
    """Online linear weak learner ``A(x) = x V + c``."""

    def __init__(self, n_features, n_outputs, lr=0.05, rng=None, scale=0.0):
        rng = rng or np.random.default_rng(0)
        self.V = scale * rng.standard_normal((n_features, n_outputs))
        self.c = np.zeros(n_outputs)
        self.lr = lr

    def predict(self, X):
        return np.asarray(X, dtype=DTYPE) @ self.V + self.c

    def update(self, X, signal):
        X = np.asarray(X, dtype=DTYPE)
        B = X.shape[0]
        self.V -= self.lr * (X.T @ signal) / B
        self.c -= self.lr * signal.sum(axis=0) / B


class TreeLearner:
    """Neural decision tree used directly as a weak learner."""

    def __init__(self, tree, lr=0.05):
        self.tree = tree
        self.lr = lr
        self._cache = None

    def predict(self, X):
        out, self._cache = self.tree.forward_train(X)
        return out

    def update(self, X, signal):
        if self._cache is None or self._cache.x.shape[0] != len(X):
            self.predict(X)
        grads, _ = self.tree.backward(self._cache, signal / len(X))
        for name, g in grads.items():
            getattr(self.tree, name)[...] -= self.lr * g
        self._cache = None


class OnlineGradientBoosting:
    """Online boosting over ``N`` weak learners with learnable shrinkage.

    Each ``step`` receives a mini-batch, predicts with the final partial sum,
    hands learner ``i`` the loss gradient at ``F^{i-1}`` and takes one
    projected gradient step on every ``theta_i``.  State is O(model).
    """

    def __init__(self, learners, loss, eta=None, theta_lr=0.01, bound=None):
        self.learners = list(learners)
        n = len(self.learners)
        if n == 0:
            raise ValueError("need at least one weak learner")
        self.loss = loss
        self.shrinkage = ShrinkageState.zeros(n, 1.0 if eta is None else eta, theta_lr)
        self.bound = bound or MaxNormBound()
        self.ledger = RegretLedger(n)

    @property
    def eta(self):
        return self.shrinkage.eta

    def partial_sums(self, X):
        raw = [np.asarray(l.predict(X), dtype=DTYPE) for l in self.learners]
        outs = [bound_output(r, self.bound) for r in raw]
        F = [np.zeros_like(outs[0])]
        for i, out in enumerate(outs):
            F.append(combine_partial(F[-1], out, self.shrinkage.theta[i], self.eta))
        return F, outs, raw

    def predict(self, X):
        F, _, _ = self.partial_sums(X)
        return self.loss.inverse_link(F[-1])

    def step(self, X, y):
        X = np.atleast_2d(np.asarray(X, dtype=DTYPE))
        y = np.atleast_1d(y)
        F, outs, raw = self.partial_sums(X)
        value, d_final = self.loss.value_and_grad(F[-1], y)
        B = X.shape[0]
        _, grad_theta = shrinkage_backward(self.shrinkage.theta, F, d_final=d_final)
        for i, learner in enumerate(self.learners):
            signal = self.loss.value_and_grad(F[i], y)[1]
            learner.update(X, self.bound.backward(raw[i], signal))
        for i in range(len(self.learners)):
            self.shrinkage.update(i, grad_theta[i] / B)
        learner_vals = np.stack([self.loss.value(self.eta * o, y) for o in outs], axis=1)
        self.ledger.record(value, learner_vals, self.loss.value(np.zeros_like(F[-1]), y))
        return float(value.mean())
