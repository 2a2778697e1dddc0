"""Boosted residual network: residual modules, shrinkage chain, shared classifier.

Feature recursion (identity or projected shortcuts)::

    g_1 = x
    g_{i+1} = bound(f_i(g_i)) + shortcut_i(g_i)

Score recursion over the shared classifier ``w``::

    c_1 = w^T g_2            # first learner carries the input injection
    c_i = w^T bound(f_i(g_i))   for i >= 2
    F^0 = 0,  F^i = (1 - theta_i) F^{i-1} + eta c_i

With identity shortcuts, theta = 0 and eta = 1 this gives
``F^N = w^T g_{N+1} = sum_t w^T f_t(g_t)`` (the plain ResNet output).
"""

import json
import os
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .boosting import (
    MaxNormBound,
    ShrinkageState,
    RegretLedger,
    bound_output,
    make_loss,
    shrinkage_backward,
    update_shrinkage,
)
from .core_math import DTYPE, DimensionError, relu
from .tree import NeuralDecisionTree, TreeTopology

MODES = ("vanilla", "shrinkage", "shared")


class ModeError(ValueError):
    pass


def projection_shortcut(proj, g):
    """Apply the linear map ``proj`` (out x in) to ``g`` (vector or row batch)."""
    proj = np.asarray(proj, dtype=DTYPE)
    g = np.asarray(g, dtype=DTYPE)
    if proj.ndim != 2 or proj.shape[1] != g.shape[-1]:
        raise DimensionError(f"projection {proj.shape} cannot act on width {g.shape[-1]}")
    return g @ proj.T


# -- residual modules ----------------------------------------------------------


class TreeModule:
    """Neural decision tree residual module, optionally plus a linear map of its input.

    ``f(g) = tree(g) [+ g @ proj.T]``.  The linear term is off by default; it
    is what lets a tree that routes everything to a zero leaf realize f(g) = g.
    """

    kind = "neural_decision_tree"

    def __init__(self, tree, proj=None):
        self.tree = tree
        self.proj = None if proj is None else np.asarray(proj, dtype=DTYPE)
        if self.proj is not None and self.proj.shape != (tree.out_width, tree.n_features):
            raise DimensionError(f"module projection must be {(tree.out_width, tree.n_features)}")

    @property
    def in_width(self):
        return self.tree.n_features

    @property
    def out_width(self):
        return self.tree.out_width

    def params(self):
        p = self.tree.params()
        if self.proj is not None:
            p["proj"] = self.proj
        return p

    def forward_train(self, X):
        out, cache = self.tree.forward_train(X)
        if self.proj is not None:
            out = out + X @ self.proj.T
        return out, (X, cache)

    def __call__(self, X):
        return self.forward_train(np.atleast_2d(X))[0]

    def backward(self, cache, d_out):
        X, tree_cache = cache
        grads, d_in = self.tree.backward(tree_cache, d_out)
        if self.proj is not None:
            grads["proj"] = d_out.T @ X
            d_in = d_in + d_out @ self.proj
        return grads, d_in

    def to_dict(self):
        d = {"kind": self.kind, "tree": self.tree.to_dict()}
        if self.proj is not None:
            d["proj"] = self.proj.tolist()
        return d

    @classmethod
    def from_dict(cls, d):
        proj = d.get("proj")
        tree = NeuralDecisionTree.from_dict(d["tree"])
        return cls(tree, None if proj is None else np.array(proj, dtype=DTYPE).reshape(tree.out_width, -1))


class DenseBlock:
    """``f(x) = relu(x V + Vb) W + Wb``."""

    kind = "dense_block"

    def __init__(self, V, Vb, W, Wb):
        self.V = np.asarray(V, dtype=DTYPE)
        self.Vb = np.asarray(Vb, dtype=DTYPE)
        self.W = np.asarray(W, dtype=DTYPE)
        self.Wb = np.asarray(Wb, dtype=DTYPE)
        if self.V.shape[1] != self.Vb.shape[0] or self.W.shape[0] != self.V.shape[1] or self.W.shape[1] != self.Wb.shape[0]:
            raise DimensionError("inconsistent dense block shapes")

    @classmethod
    def init(cls, in_width, hidden, out_width, rng):
        V = rng.standard_normal((in_width, hidden)) * np.sqrt(2.0 / in_width)
        return cls(V, np.zeros(hidden), np.zeros((hidden, out_width)), np.zeros(out_width))

    @classmethod
    def identity(cls, width, offset):
        """W = V = I, Vb = offset, Wb = -offset: the identity wherever x > -offset."""
        eye = np.eye(width)
        return cls(eye, np.full(width, float(offset)), eye.copy(), np.full(width, -float(offset)))

    @property
    def in_width(self):
        return self.V.shape[0]

    @property
    def out_width(self):
        return self.W.shape[1]

    def params(self):
        return {"V": self.V, "Vb": self.Vb, "W": self.W, "Wb": self.Wb}

    def forward_train(self, X):
        pre = X @ self.V + self.Vb
        h = relu(pre)
        return h @ self.W + self.Wb, (X, pre, h)

    def __call__(self, X):
        return self.forward_train(np.atleast_2d(X))[0]

    def backward(self, cache, d_out):
        X, pre, h = cache
        grads = {"W": h.T @ d_out, "Wb": d_out.sum(axis=0)}
        d_pre = (d_out @ self.W.T) * (pre > 0)
        grads["V"] = X.T @ d_pre
        grads["Vb"] = d_pre.sum(axis=0)
        return grads, d_pre @ self.V.T

    def to_dict(self):
        return {"kind": self.kind, **{k: v.tolist() for k, v in self.params().items()}}

    @classmethod
    def from_dict(cls, d):
        V = np.array(d["V"], dtype=DTYPE)
        W = np.array(d["W"], dtype=DTYPE).reshape(V.shape[1], -1)
        return cls(V, np.array(d["Vb"], dtype=DTYPE), W, np.array(d["Wb"], dtype=DTYPE))


class IdentityModule:
    kind = "identity"

    def __init__(self, width):
        self.width = int(width)

    in_width = property(lambda self: self.width)
    out_width = property(lambda self: self.width)

    def params(self):
        return {}

    def forward_train(self, X):
        return np.array(X, dtype=DTYPE, copy=True), None

    def __call__(self, X):
        return np.array(X, dtype=DTYPE, copy=True)

    def backward(self, cache, d_out):
        return {}, d_out

    def to_dict(self):
        return {"kind": self.kind, "width": self.width}

    @classmethod
    def from_dict(cls, d):
        return cls(d["width"])


MODULE_KINDS = {cls.kind: cls for cls in (TreeModule, DenseBlock, IdentityModule)}


def module_from_dict(d):
    try:
        return MODULE_KINDS[d["kind"]].from_dict(d)
    except KeyError:
        raise ValueError(f"unknown module kind {d.get('kind')!r}") from None


# -- the network -----------------------------------------------------------------


class PredictionOutput(NamedTuple):
    scores: list
    probabilities: list
    prediction: np.ndarray


@dataclass
class Gradients:
    w: np.ndarray
    modules: list
    shortcuts: list
    theta: np.ndarray = None
    x: np.ndarray = None
    loss: float = 0.0


@dataclass
class _Trace:
    X: np.ndarray
    g: list
    raw: list
    caches: list
    z: list
    F: list


class BoostedResNet:
    def __init__(self, modules, w, shrinkage=None, mode="shrinkage", shortcuts=None,
                 bound=None, loss=None):
        if mode not in MODES:
            raise ModeError(f"mode must be one of {MODES}, got {mode!r}")
        self.modules = list(modules)
        n = len(self.modules)
        if n == 0:
            raise ValueError("need at least one residual module")
        self.w = np.asarray(w, dtype=DTYPE)
        self.mode = mode
        self.shortcuts = list(shortcuts) if shortcuts is not None else [None] * n
        if len(self.shortcuts) != n:
            raise ValueError("one shortcut entry per module")
        self.shortcuts = [None if s is None else np.asarray(s, dtype=DTYPE) for s in self.shortcuts]
        if shrinkage is None:
            shrinkage = ShrinkageState.zeros(n)
        if mode == "vanilla":
            shrinkage = ShrinkageState(np.zeros(n), 1.0, shrinkage.lr)
        self.shrinkage = shrinkage
        self.bound = bound or MaxNormBound()
        self.loss = loss or make_loss("softmax", self.w.shape[1])
        self._check_widths()

    def _check_widths(self):
        width = self.modules[0].in_width
        for i, (m, s) in enumerate(zip(self.modules, self.shortcuts)):
            if m.in_width != width:
                raise DimensionError(f"module {i} expects width {m.in_width}, feature width is {width}")
            if s is None:
                if m.out_width != width:
                    raise DimensionError(f"module {i} changes width {width}->{m.out_width} without a projection")
            elif s.shape != (m.out_width, width):
                raise DimensionError(f"shortcut {i} must be {(m.out_width, width)}, got {s.shape}")
            width = m.out_width
        if self.w.shape[0] != width:
            raise DimensionError(f"classifier expects width {self.w.shape[0]}, features have {width}")
        if self.w.shape[1] != self.loss.n_scores:
            raise DimensionError(f"classifier has {self.w.shape[1]} outputs, loss needs {self.loss.n_scores}")

    @classmethod
    def build(cls, n_features, n_classes, n_modules=15, depth=5, width=None, mode="shrinkage",
              eta=None, theta_lr=0.01, max_norm=5.0, temperature=1.0, module_kind="tree",
              module_projection=False, hidden=None, loss="softmax", seed=0):
        """Fresh network with randomly initialized modules and zero classifier."""
        rng = np.random.default_rng(seed)
        width = n_features if width is None else width
        topo = TreeTopology.complete(depth) if module_kind == "tree" else None
        modules, shortcuts = [], []
        in_w = n_features
        for _ in range(n_modules):
            if module_kind == "tree":
                tree = NeuralDecisionTree.init(topo, in_w, width, rng, temperature)
                proj = np.zeros((width, in_w)) if module_projection else None
                modules.append(TreeModule(tree, proj))
            elif module_kind == "dense":
                modules.append(DenseBlock.init(in_w, hidden or width, width, rng))
            elif module_kind == "identity":
                modules.append(IdentityModule(width))
            else:
                raise ValueError(f"unknown module kind {module_kind!r}")
            if in_w != width:
                shortcuts.append(rng.standard_normal((width, in_w)) / np.sqrt(in_w))
            else:
                shortcuts.append(None)
            in_w = width
        loss_fn = make_loss(loss, n_classes)
        eta = 1.0 if eta is None else eta
        shrink = ShrinkageState.zeros(n_modules, eta, theta_lr)
        return cls(modules, np.zeros((width, loss_fn.n_scores)), shrink, mode, shortcuts,
                   MaxNormBound(max_norm), loss_fn)

    # -- forward ---------------------------------------------------------------

    @property
    def n_modules(self):
        return len(self.modules)

    @property
    def eta(self):
        return self.shrinkage.eta

    @property
    def theta(self):
        return self.shrinkage.theta

    @property
    def in_width(self):
        return self.modules[0].in_width

    def _shortcut(self, i, g):
        s = self.shortcuts[i]
        return g if s is None else projection_shortcut(s, g)

    def _trace(self, X):
        X = np.asarray(X, dtype=DTYPE)
        if X.ndim != 2 or X.shape[1] != self.in_width:
            raise DimensionError(f"expected {self.in_width} input features, got shape {X.shape}")
        g, raw, caches, z = [X], [], [], []
        F = [np.zeros((X.shape[0], self.w.shape[1]))]
        theta, eta = self.shrinkage.theta, self.shrinkage.eta
        for i, module in enumerate(self.modules):
            u, cache = module.forward_train(g[-1])
            a = bound_output(u, self.bound)
            nxt = a + self._shortcut(i, g[-1])
            raw.append(u)
            caches.append(cache)
            z.append(nxt if i == 0 else a)
            g.append(nxt)
            F.append((1.0 - theta[i]) * F[-1] + eta * (z[-1] @ self.w))
        return _Trace(X, g, raw, caches, z, F)

    def forward(self, x):
        X = np.asarray(x, dtype=DTYPE)
        single = X.ndim == 1
        tr = self._trace(X[None, :] if single else X)
        scores = tr.F[1:]
        probs = [self.loss.inverse_link(F) for F in scores]
        pred = self._decide(scores[-1], probs[-1])
        if single:
            return PredictionOutput([s[0] for s in scores], [p[0] for p in probs], int(pred[0]))
        return PredictionOutput(scores, probs, pred)

    def _decide(self, F, p):
        if F.shape[1] == 1:
            return (F[:, 0] > 0).astype(int)
        return np.argmax(p, axis=1)  # ties -> lowest class index

    def features(self, x):
        """Feature recursion ``[g_1, ..., g_{N+1}]`` for a row batch."""
        return self._trace(np.atleast_2d(x)).g

    def final_scores(self, X):
        return self._trace(np.atleast_2d(X)).F[-1]

    def predict(self, X):
        F = self.final_scores(X)
        return self._decide(F, self.loss.inverse_link(F))

    def predict_proba(self, X):
        return self.loss.inverse_link(self.final_scores(X))

    # -- backward --------------------------------------------------------------

    def loss_value(self, X, y, heads=None):
        """Mean over the batch of the training objective for ``heads``."""
        tr = self._trace(np.atleast_2d(X))
        heads = heads or self._heads()
        return float(sum(self.loss.value(tr.F[i], y).mean() for i in heads))

    def _heads(self):
        n = self.n_modules
        return list(range(1, n + 1)) if self.mode == "shared" else [n]

    def backward_shared(self, X, y):
        if self.mode != "shared":
            raise ModeError(f"backward_shared needs mode 'shared', network is {self.mode!r}")
        return self._backward(X, y, self._heads())

    def backward_final(self, X, y):
        if self.mode not in ("vanilla", "shrinkage"):
            raise ModeError(f"backward_final needs mode vanilla or shrinkage, network is {self.mode!r}")
        return self._backward(X, y, [self.n_modules])

    def backward(self, X, y, trace=None):
        if self.mode == "shared":
            return self._backward(X, y, self._heads(), trace)
        return self._backward(X, y, [self.n_modules], trace)

    def _backward(self, X, y, heads, trace=None):
        X = np.atleast_2d(np.asarray(X, dtype=DTYPE))
        y = np.atleast_1d(y)
        tr = trace if trace is not None else self._trace(X)
        B = X.shape[0]
        n = self.n_modules
        d_heads = [np.zeros_like(tr.F[0]) for _ in range(n)]
        total = 0.0
        for i in heads:
            value, grad = self.loss.value_and_grad(tr.F[i], y)
            total += float(value.mean())
            d_heads[i - 1] += grad / B
        deltas, grad_theta = shrinkage_backward(self.shrinkage.theta, tr.F, d_heads=d_heads)
        eta = self.shrinkage.eta
        dw = np.zeros_like(self.w)
        dz = []
        for i in range(n):
            dc = eta * deltas[i]
            dw += tr.z[i].T @ dc
            dz.append(dc @ self.w.T)
        module_grads = [None] * n
        shortcut_grads = [None] * n
        dg = np.zeros_like(tr.g[-1])
        for i in range(n - 1, -1, -1):
            if i == 0:
                dg = dg + dz[0]
                da = dg
            else:
                da = dg + dz[i]
            du = self.bound.backward(tr.raw[i], da)
            module_grads[i], d_in = self.modules[i].backward(tr.caches[i], du)
            s = self.shortcuts[i]
            if s is None:
                d_short = dg
            else:
                shortcut_grads[i] = dg.T @ tr.g[i]
                d_short = dg @ s
            dg = d_in + d_short
        theta = None if self.mode == "vanilla" else grad_theta
        return Gradients(dw, module_grads, shortcut_grads, theta, dg, total)

    # -- parameter access --------------------------------------------------------

    def parameters(self):
        """Flat list of (name, array) for every trainable array (views, not copies)."""
        out = [("w", self.w)]
        for i, m in enumerate(self.modules):
            out += [(f"module{i}.{k}", v) for k, v in m.params().items()]
        out += [(f"shortcut{i}", s) for i, s in enumerate(self.shortcuts) if s is not None]
        return out

    def gradient_list(self, grads):
        """Gradients aligned with :meth:`parameters`."""
        out = [grads.w]
        for i, m in enumerate(self.modules):
            out += [grads.modules[i][k] for k in m.params()]
        out += [grads.shortcuts[i] for i, s in enumerate(self.shortcuts) if s is not None]
        return out

    def sgd_step(self, grads, lr):
        for (_, p), g in zip(self.parameters(), self.gradient_list(grads)):
            p -= lr * g
        if grads.theta is not None and self.mode != "vanilla":
            for i, gt in enumerate(grads.theta):
                update_shrinkage(self.shrinkage, i, gt)

    # -- persistence ---------------------------------------------------------------

    def to_dict(self):
        return {
            "mode": self.mode,
            "eta": self.shrinkage.eta,
            "theta": self.shrinkage.theta.tolist(),
            "theta_lr": self.shrinkage.lr,
            "max_norm": None if np.isinf(self.bound.D) else self.bound.D,
            "loss": self.loss.name,
            "w": self.w.tolist(),
            "modules": [m.to_dict() for m in self.modules],
            "shortcuts": [None if s is None else s.tolist() for s in self.shortcuts],
        }

    @classmethod
    def from_dict(cls, d):
        w = np.array(d["w"], dtype=DTYPE)
        modules = [module_from_dict(m) for m in d["modules"]]
        shrink = ShrinkageState(np.array(d["theta"], dtype=DTYPE), d["eta"], d["theta_lr"])
        shortcuts = [None if s is None else np.array(s, dtype=DTYPE) for s in d["shortcuts"]]
        n_classes = 2 if d["loss"] == "logistic" else w.shape[1]
        return cls(modules, w, shrink, d["mode"], shortcuts, MaxNormBound(np.inf if d["max_norm"] is None else d["max_norm"]),
                   make_loss(d["loss"], n_classes))


CHECKPOINT_FORMAT = "resboost-checkpoint"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def dump_checkpoint(net, extra=None):
    """Checkpoint document as canonical JSON text (sorted keys, exact float repr)."""
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "model": net.to_dict()}
    doc.update(extra or {})
    return json.dumps(doc, sort_keys=True, indent=1, allow_nan=False) + "\n"


def save_checkpoint(net, path, extra=None):
    """Write the checkpoint atomically; ``extra`` adds top-level keys (e.g. the manifest)."""
    text = dump_checkpoint(net, extra)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns ``(net, document)``."""
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} document")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {doc.get('version')!r}")
    try:
        net = BoostedResNet.from_dict(doc["model"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt model in {path}: {exc}") from exc
    return net, doc


# -- training --------------------------------------------------------------------


@dataclass
class TrainingReport:
    per_epoch_loss: list = field(default_factory=list)
    per_epoch_acc: list = field(default_factory=list)
    theta_final: list = field(default_factory=list)
    ledger: RegretLedger = None

    def to_dict(self):
        return {
            "per_epoch_loss": self.per_epoch_loss,
            "per_epoch_acc": self.per_epoch_acc,
            "theta_final": self.theta_final,
            "regret_ledger": None if self.ledger is None else self.ledger.to_dict(),
        }


def train_stream(net, stream, epochs, seed=0, lr=0.05, callback=None):
    """Plain-SGD training over a batch stream; one step per mini-batch.

    ``stream`` must provide ``epoch(index, seed)`` yielding ``(X, y)`` batches
    (see :class:`resboost.data_io.DatasetStream`).
    """
    report = TrainingReport(ledger=RegretLedger(net.n_modules))
    for epoch in range(epochs):
        seen = correct = 0
        loss_sum = 0.0
        for X, y in stream.epoch(epoch, seed):
            tr = net._trace(X)
            F_final = tr.F[-1]
            values = net.loss.value(F_final, y)
            learner_vals = np.stack([net.loss.value(net.eta * (z @ net.w), y) for z in tr.z], axis=1)
            report.ledger.record(values, learner_vals, net.loss.value(np.zeros_like(F_final), y))
            correct += int(np.sum(net._decide(F_final, net.loss.inverse_link(F_final)) == y))
            grads = net.backward(X, y, trace=tr)
            net.sgd_step(grads, lr)
            loss_sum += float(values.sum())
            seen += len(y)
        if seen == 0:
            raise ValueError("stream produced no training rows")
        report.per_epoch_loss.append(loss_sum / seen)
        report.per_epoch_acc.append(correct / seen)
        if callback is not None:
            callback(epoch, report)
    report.theta_final = net.theta.tolist()
    return report


def evaluate(net, batches):
    """Accuracy and confusion counts (rows = true class) over ``(X, y)`` batches."""
    n_classes = max(net.w.shape[1], 2)
    confusion = np.zeros((n_classes, n_classes), dtype=int)
    for X, y in batches:
        pred = net.predict(X)
        np.add.at(confusion, (np.asarray(y, dtype=int), pred), 1)
    total = int(confusion.sum())
    acc = float(np.trace(confusion) / total) if total else 0.0
    return acc, confusion
