"""Neural decision tree: decision-node layer, frozen routing layer, leaf layer.

For ``k`` input features, ``n`` decision nodes and ``n + 1`` leaves:

* ``h1 = [x W + b, -(x W + b)]`` holds the signed node logits.
* Every node turns its (+, -) logit pair into log routing probabilities with a
  pairwise log-softmax at ``temperature``. ``leaf_logprob = phi @ Q.T`` sums
  those along each root-to-leaf path, with ``Q`` the binary ``(n+1, 2n)``
  routing matrix.
* ``output = exp(leaf_logprob) @ pi``.

Node ``i`` sends ``x`` to its ``pos`` child when ``x @ W[:, i] + b[i] >= 0``.
"""

import json
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .core_math import DTYPE, DimensionError, log_sigmoid, sigmoid


class TreeSpecError(ValueError):
    """Malformed topology or import document."""


class Child(NamedTuple):
    kind: str  # "node" or "leaf"
    index: int


def node(i):
    return Child("node", i)


def leaf(j):
    return Child("leaf", j)


@dataclass(frozen=True)
class TreeTopology:
    """Proper binary tree over ``n`` decision nodes and ``n + 1`` leaves."""

    pos: tuple
    neg: tuple
    root: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def n_nodes(self):
        return len(self.pos)

    @property
    def n_leaves(self):
        return len(self.pos) + 1

    def validate(self):
        n = len(self.pos)
        if n == 0:
            raise TreeSpecError("tree has no decision nodes")
        if len(self.neg) != n:
            raise TreeSpecError("pos/neg child lists differ in length")
        if not 0 <= self.root < n:
            raise TreeSpecError(f"root {self.root} is not a node")
        node_parents = [0] * n
        leaf_parents = [0] * (n + 1)
        for i, children in enumerate(zip(self.pos, self.neg)):
            for child in children:
                kind, idx = child
                if kind == "node" and 0 <= idx < n:
                    node_parents[idx] += 1
                elif kind == "leaf" and 0 <= idx <= n:
                    leaf_parents[idx] += 1
                else:
                    raise TreeSpecError(f"node {i} has invalid child {child}")
        if node_parents[self.root] != 0:
            raise TreeSpecError("root has a parent")
        bad = [i for i, c in enumerate(node_parents) if i != self.root and c != 1]
        if bad:
            raise TreeSpecError(f"nodes {bad} do not have exactly one parent")
        bad = [j for j, c in enumerate(leaf_parents) if c != 1]
        if bad:
            raise TreeSpecError(f"leaves {bad} do not have exactly one parent")
        seen = set()
        stack = [self.root]
        while stack:
            i = stack.pop()
            if i in seen:
                raise TreeSpecError("cycle in topology")
            seen.add(i)
            stack.extend(c.index for c in (self.pos[i], self.neg[i]) if c.kind == "node")
        if len(seen) != n:
            raise TreeSpecError(f"nodes {sorted(set(range(n)) - seen)} unreachable from root")

    def paths(self):
        """Map leaf index -> list of (node, took_positive) from the root."""
        out = {}
        stack = [(self.root, [])]
        while stack:
            i, path = stack.pop()
            for child, sign in ((self.pos[i], True), (self.neg[i], False)):
                step = path + [(i, sign)]
                if child.kind == "leaf":
                    out[child.index] = step
                else:
                    stack.append((child.index, step))
        return out

    def depths(self):
        paths = self.paths()
        return np.array([len(paths[j]) for j in range(self.n_leaves)])

    @classmethod
    def complete(cls, depth):
        """Balanced tree; nodes in breadth-first order, leaves left to right."""
        if depth < 1:
            raise TreeSpecError("depth must be at least 1")
        n = 2**depth - 1
        pos, neg = [], []
        for i in range(n):
            a, b = 2 * i + 1, 2 * i + 2
            if a < n:
                pos.append(node(a))
                neg.append(node(b))
            else:
                pos.append(leaf(a - n))
                neg.append(leaf(b - n))
        return cls(tuple(pos), tuple(neg))

    @classmethod
    def chain(cls, n):
        """Degenerate tree: every node's negative child is a leaf."""
        pos = [node(i + 1) for i in range(n - 1)] + [leaf(n)]
        neg = [leaf(i) for i in range(n)]
        return cls(tuple(pos), tuple(neg))

    @classmethod
    def random(cls, n, rng):
        """Random proper binary tree with ``n`` nodes, grown by splitting leaves."""
        pos, neg = [leaf(0)], [leaf(1)]
        n_leaves = 2
        for i in range(1, n):
            slots = [(p, s) for p in range(i) for s in (0, 1) if (pos, neg)[s][p].kind == "leaf"]
            p, s = slots[rng.integers(len(slots))]
            old = (pos, neg)[s][p]
            (pos, neg)[s][p] = node(i)
            pos.append(old)
            neg.append(leaf(n_leaves))
            n_leaves += 1
        return cls(tuple(pos), tuple(neg))


def build_routing_matrix(topology):
    """Binary ``(n_leaves, 2 * n_nodes)`` matrix; columns are [node+ ..., node- ...]."""
    n = topology.n_nodes
    q = np.zeros((topology.n_leaves, 2 * n), dtype=DTYPE)
    for j, path in topology.paths().items():
        for i, positive in path:
            q[j, i if positive else n + i] = 1.0
    q.setflags(write=False)
    return q


class TreeForward(NamedTuple):
    h1: np.ndarray
    leaf_logprob: np.ndarray
    output: np.ndarray


@dataclass
class _Cache:
    x: np.ndarray
    p_pos: np.ndarray
    mu: np.ndarray


@dataclass
class NeuralDecisionTree:
    W: np.ndarray
    b: np.ndarray
    pi: np.ndarray
    topology: TreeTopology
    temperature: float = 1.0
    Q: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=DTYPE)
        self.b = np.asarray(self.b, dtype=DTYPE)
        self.pi = np.asarray(self.pi, dtype=DTYPE)
        if not self.temperature > 0:
            raise ValueError("routing temperature must be positive")
        n = self.topology.n_nodes
        if self.W.ndim != 2 or self.W.shape[1] != n:
            raise DimensionError(f"W must be (k, {n}), got {self.W.shape}")
        if self.b.shape != (n,):
            raise DimensionError(f"b must be ({n},), got {self.b.shape}")
        if self.pi.ndim != 2 or self.pi.shape[0] != n + 1:
            raise DimensionError(f"pi must be ({n + 1}, c), got {self.pi.shape}")
        self.Q = build_routing_matrix(self.topology)

    @classmethod
    def init(cls, topology, n_features, out_width, rng, temperature=1.0):
        bound = 1.0 / np.sqrt(n_features)
        W = rng.uniform(-bound, bound, size=(n_features, topology.n_nodes))
        return cls(W, np.zeros(topology.n_nodes), np.zeros((topology.n_leaves, out_width)),
                   topology, temperature)

    @property
    def n_features(self):
        return self.W.shape[0]

    @property
    def out_width(self):
        return self.pi.shape[1]

    def params(self):
        return {"W": self.W, "b": self.b, "pi": self.pi}

    def _check_input(self, x):
        x = np.asarray(x, dtype=DTYPE)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise DimensionError(f"expected {self.n_features} features, got shape {x.shape}")
        return X, single

    def _forward(self, X):
        z = X @ self.W + self.b
        t2z = 2.0 * self.temperature * z
        # pairwise log-softmax of (T z, -T z) is log sigmoid(+-2 T z)
        phi = np.concatenate([log_sigmoid(t2z), log_sigmoid(-t2z)], axis=1)
        leaf_logprob = phi @ self.Q.T
        mu = np.exp(leaf_logprob)
        out = mu @ self.pi
        h1 = np.concatenate([z, -z], axis=1)
        return TreeForward(h1, leaf_logprob, out), _Cache(X, sigmoid(t2z), mu)

    def forward(self, x):
        X, single = self._check_input(x)
        res, _ = self._forward(X)
        if single:
            return TreeForward(res.h1[0], res.leaf_logprob[0], res.output[0])
        return res

    def __call__(self, x):
        return self.forward(x).output

    def forward_train(self, X):
        """Batched forward that also returns the cache ``backward`` needs."""
        X, _ = self._check_input(X)
        res, cache = self._forward(X)
        return res.output, cache

    def backward(self, cache, d_out):
        """Gradients of ``sum(d_out * output)`` w.r.t. W, b, pi and the input."""
        d_out = np.asarray(d_out, dtype=DTYPE)
        grads = {"pi": cache.mu.T @ d_out}
        d_logmu = (d_out @ self.pi.T) * cache.mu
        d_phi = d_logmu @ self.Q
        n = self.topology.n_nodes
        two_t = 2.0 * self.temperature
        p = cache.p_pos
        dz = two_t * (d_phi[:, :n] * (1.0 - p) - d_phi[:, n:] * p)
        grads["W"] = cache.x.T @ dz
        grads["b"] = dz.sum(axis=0)
        return grads, dz @ self.W.T

    def node_margins(self, x):
        X, _ = self._check_input(x)
        return X @ self.W + self.b

    def forward_deterministic(self, x):
        """Hard routing; exact zero margins go to the positive child.

        Returns ``(leaf_index, output)``; arrays when ``x`` is a batch.
        """
        X, single = self._check_input(x)
        go_pos = (X @ self.W + self.b) >= 0.0
        chosen = np.concatenate([go_pos, ~go_pos], axis=1).astype(DTYPE)
        hits = chosen @ self.Q.T
        depth = self.Q.sum(axis=1)
        leaf_idx = np.argmax(hits == depth, axis=1)
        out = self.pi[leaf_idx]
        if single:
            return int(leaf_idx[0]), out[0]
        return leaf_idx, out

    def copy(self):
        return NeuralDecisionTree(self.W.copy(), self.b.copy(), self.pi.copy(),
                                  self.topology, self.temperature)

    def to_dict(self):
        return {
            "W": self.W.tolist(),
            "b": self.b.tolist(),
            "pi": self.pi.tolist(),
            "temperature": self.temperature,
            "pos": [list(c) for c in self.topology.pos],
            "neg": [list(c) for c in self.topology.neg],
            "root": self.topology.root,
        }

    @classmethod
    def from_dict(cls, d):
        topo = TreeTopology(tuple(Child(*c) for c in d["pos"]),
                            tuple(Child(*c) for c in d["neg"]), d["root"])
        k = len(d["W"])
        W = np.array(d["W"], dtype=DTYPE).reshape(k, topo.n_nodes)
        pi = np.array(d["pi"], dtype=DTYPE).reshape(topo.n_leaves, -1)
        return cls(W, np.array(d["b"], dtype=DTYPE), pi, topo, float(d["temperature"]))


# -- classical trees ---------------------------------------------------------
#
# Import documents follow the usual CART convention: a node sends x to
# ``left`` when x[feature_index] <= threshold.  With w = e_f and b = -t the
# neural node's positive branch (x_f - t > 0) is therefore the classical
# ``right`` child.


def validate_import_spec(spec):
    if not isinstance(spec, dict):
        raise TreeSpecError("tree spec must be a JSON object")
    for key in ("n_features", "nodes", "leaves"):
        if key not in spec:
            raise TreeSpecError(f"tree spec missing '{key}'")
    k = spec["n_features"]
    if not isinstance(k, int) or k < 1:
        raise TreeSpecError(f"n_features must be a positive integer, got {k!r}")
    nodes, leaves = spec["nodes"], spec["leaves"]
    if not nodes:
        raise TreeSpecError("tree spec has no decision nodes")
    ids = {}
    for kind, items in (("node", nodes), ("leaf", leaves)):
        for pos, item in enumerate(items):
            if "id" not in item:
                raise TreeSpecError(f"{kind} at position {pos} has no id")
            if item["id"] in ids:
                raise TreeSpecError(f"duplicate id {item['id']!r}")
            ids[item["id"]] = (kind, pos)
    for item in nodes:
        for key in ("feature_index", "threshold", "left", "right"):
            if key not in item:
                raise TreeSpecError(f"node {item['id']!r} missing '{key}'")
        f = item["feature_index"]
        if not isinstance(f, int) or not 0 <= f < k:
            raise TreeSpecError(f"node {item['id']!r} feature_index {f!r} out of range")
        for key in ("left", "right"):
            if item[key] not in ids:
                raise TreeSpecError(f"node {item['id']!r} {key} reference {item[key]!r} does not resolve")
    widths = {len(np.atleast_1d(l["value"])) for l in leaves}
    if len(widths) > 1:
        raise TreeSpecError(f"leaf values have differing lengths {sorted(widths)}")
    return ids


def import_tree(spec, temperature=1.0):
    """Convert a classical axis-aligned tree document into a NeuralDecisionTree."""
    ids = validate_import_spec(spec)
    nodes, leaves = spec["nodes"], spec["leaves"]

    def child(ref):
        kind, pos = ids[ref]
        return Child(kind, pos)

    referenced = {item[key] for item in nodes for key in ("left", "right")}
    roots = [i for i, item in enumerate(nodes) if item["id"] not in referenced]
    if len(roots) != 1:
        raise TreeSpecError(f"expected exactly one root node, found {len(roots)}")
    try:
        topo = TreeTopology(tuple(child(item["right"]) for item in nodes),
                            tuple(child(item["left"]) for item in nodes), roots[0])
    except TreeSpecError as exc:
        raise TreeSpecError(f"malformed tree: {exc}") from None
    n, k = len(nodes), spec["n_features"]
    W = np.zeros((k, n))
    b = np.zeros(n)
    for i, item in enumerate(nodes):
        W[item["feature_index"], i] = 1.0
        b[i] = -float(item["threshold"])
    pi = np.array([np.atleast_1d(np.asarray(l["value"], dtype=DTYPE)) for l in leaves])
    return NeuralDecisionTree(W, b, pi, topo, temperature)


def export_tree(tree):
    """Inverse of :func:`import_tree`; every W column must be axis-aligned."""
    nodes = []
    n = tree.topology.n_nodes
    for i in range(n):
        nz = np.flatnonzero(tree.W[:, i])
        if nz.size != 1:
            raise TreeSpecError(f"node {i} is not axis-aligned ({nz.size} nonzero weights)")
        f = int(nz[0])
        w = tree.W[f, i]
        pos, neg = tree.topology.pos[i], tree.topology.neg[i]
        # w > 0: positive side is x_f > t (classical right); w < 0 flips it
        right, left = (pos, neg) if w > 0 else (neg, pos)
        nodes.append({
            "id": f"n{i}",
            "feature_index": f,
            "threshold": float(-tree.b[i] / w),
            "left": _ref_id(left),
            "right": _ref_id(right),
        })
    leaves = [{"id": f"l{j}", "value": tree.pi[j].tolist()} for j in range(n + 1)]
    return {"n_features": tree.n_features, "nodes": nodes, "leaves": leaves}


def _ref_id(c):
    return f"n{c.index}" if c.kind == "node" else f"l{c.index}"


def classical_predict(spec, X):
    """Reference evaluator that walks the import document directly.

    Returns ``(leaf_positions, values)`` where ``leaf_positions`` index
    ``spec["leaves"]``.  Shares no code with the neural routing path.
    """
    ids = validate_import_spec(spec)
    by_id = {item["id"]: item for item in spec["nodes"]}
    referenced = {item[key] for item in spec["nodes"] for key in ("left", "right")}
    root = next(item["id"] for item in spec["nodes"] if item["id"] not in referenced)
    X = np.atleast_2d(np.asarray(X, dtype=DTYPE))
    positions = []
    for row in X:
        cur = root
        while cur in by_id:
            item = by_id[cur]
            cur = item["left"] if row[item["feature_index"]] <= item["threshold"] else item["right"]
        positions.append(ids[cur][1])
    positions = np.array(positions, dtype=int)
    values = np.array([np.atleast_1d(spec["leaves"][p]["value"]) for p in positions], dtype=DTYPE)
    return positions, values


def load_import_spec(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
