"""Streaming CSV ingestion: schema scan, hashed 70:30 split, normalization, batches.

Nothing here holds more than ``shuffle_buffer`` rows in memory; every epoch
re-reads the file.
"""

import csv
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .core_math import DTYPE

TRAIN_FRACTION = 0.70
STD_FLOOR = 1e-8


class DataError(ValueError):
    pass


def split_70_30(row_index, seed):
    """Stable train/test assignment of a row from a hash of (seed, row_index)."""
    digest = hashlib.blake2b(struct.pack("<qq", int(seed), int(row_index)), digest_size=8).digest()
    u = int.from_bytes(digest, "little") / 2.0**64
    return "train" if u < TRAIN_FRACTION else "test"


class _OffsetLines:
    """Line iterator that remembers how many bytes have been consumed."""

    def __init__(self, fh):
        self.fh = fh
        self.offset = 0

    def __iter__(self):
        return self

    def __next__(self):
        try:
            line = self.fh.readline()
        except (OSError, UnicodeDecodeError) as exc:
            raise DataError(f"read failure at byte offset {self.offset}: {exc}") from exc
        if not line:
            raise StopIteration
        self.offset += len(line.encode("utf-8"))
        return line


def _rows(path, delimiter):
    """Yield (line_number, byte_offset, fields) for every non-blank record."""
    try:
        fh = open(path, encoding="utf-8", newline="")
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    with fh:
        lines = _OffsetLines(fh)
        reader = csv.reader(lines, delimiter=delimiter)
        while True:
            start = lines.offset
            try:
                fields = next(reader)
            except StopIteration:
                return
            except csv.Error as exc:
                raise DataError(f"CSV error at line {reader.line_num} (byte {start}): {exc}") from exc
            if not fields or all(not f.strip() for f in fields):
                continue
            yield reader.line_num, start, fields


def _label_sort_key(values):
    try:
        nums = [float(v) for v in values]
    except ValueError:
        return sorted(values)
    return [v for _, v in sorted(zip(nums, values))]


@dataclass
class DatasetManifest:
    path: str
    delimiter: str
    has_header: bool
    label_column: int
    feature_columns: list
    feature_names: list
    classes: list
    mean: np.ndarray
    std: np.ndarray
    seed: int
    n_rows: int
    n_train: int
    class_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self.class_index = {c: i for i, c in enumerate(self.classes)}

    @property
    def n_features(self):
        return len(self.feature_columns)

    @property
    def n_classes(self):
        return len(self.classes)

    def normalize(self, X):
        return (X - self.mean) / np.maximum(self.std, STD_FLOOR)

    def to_dict(self):
        return {
            "path": self.path, "delimiter": self.delimiter, "has_header": self.has_header,
            "label_column": self.label_column, "feature_columns": self.feature_columns,
            "feature_names": self.feature_names, "classes": self.classes,
            "mean": self.mean.tolist(), "std": self.std.tolist(), "seed": self.seed,
            "n_rows": self.n_rows, "n_train": self.n_train,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["mean"] = np.array(d["mean"], dtype=DTYPE)
        d["std"] = np.array(d["std"], dtype=DTYPE)
        return cls(**d)

    def with_path(self, path):
        d = self.to_dict()
        d["path"] = str(path)
        return DatasetManifest.from_dict(d)


def _parse_features(fields, cols, line_no, names):
    out = np.empty(len(cols))
    for j, c in enumerate(cols):
        cell = fields[c].strip()
        try:
            out[j] = float(cell)
        except ValueError:
            raise DataError(f"row {line_no}: column {names[j]!r} value {cell!r} is not numeric") from None
        if not np.isfinite(out[j]):
            raise DataError(f"row {line_no}: column {names[j]!r} is not finite")
    return out


def scan_manifest(path, label_column=-1, delimiter=",", has_header=True, seed=0, classes=None):
    """One pass over ``path`` collecting schema, classes and train-split statistics.

    ``label_column`` is a header name or an index (negative counts from the
    end).  ``classes`` pins the label encoding instead of discovering it.
    """
    rows = _rows(path, delimiter)
    header = None
    width = None
    if has_header:
        try:
            _, _, header = next(rows)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        header = [h.strip() for h in header]
        width = len(header)
    label_idx = None
    seen_labels = set()
    count = n_train = 0
    mean = m2 = None
    names = None
    feat_cols = None
    for line_no, _, fields in rows:
        if width is None:
            width = len(fields)
        if len(fields) != width:
            raise DataError(f"row {line_no} has {len(fields)} fields, expected {width}")
        if label_idx is None:
            label_idx = _resolve_label(label_column, header, width)
            feat_cols = [c for c in range(width) if c != label_idx]
            names = [header[c] for c in feat_cols] if header else [f"x{c}" for c in feat_cols]
            mean = np.zeros(len(feat_cols))
            m2 = np.zeros(len(feat_cols))
        x = _parse_features(fields, feat_cols, line_no, names)
        label = fields[label_idx].strip()
        if not label:
            raise DataError(f"row {line_no}: missing label")
        seen_labels.add(label)
        if split_70_30(count, seed) == "train":
            n_train += 1
            delta = x - mean
            mean += delta / n_train
            m2 += delta * (x - mean)
        count += 1
    if count == 0:
        raise DataError(f"{path} has no data rows")
    if classes is None:
        classes = _label_sort_key(sorted(seen_labels))
    else:
        classes = [str(c) for c in classes]
        unknown = seen_labels - set(classes)
        if unknown:
            raise DataError(f"labels {sorted(unknown)} not in the pinned class list")
    std = np.sqrt(m2 / n_train) if n_train else np.ones_like(mean)
    return DatasetManifest(str(path), delimiter, has_header, label_idx, feat_cols, names,
                           list(classes), mean, std, seed, count, n_train)


def _resolve_label(label_column, header, width):
    if isinstance(label_column, str) and not _is_int(label_column):
        if header is None or label_column not in header:
            raise DataError(f"label column {label_column!r} not found in header")
        return header.index(label_column)
    idx = int(label_column)
    if not -width <= idx < width:
        raise DataError(f"label column index {idx} out of range for {width} columns")
    return idx % width


def _is_int(s):
    try:
        int(s)
        return True
    except ValueError:
        return False


class DatasetStream:
    """Mini-batches of one split, normalized with the manifest's statistics.

    Rows are shuffled inside consecutive windows of ``shuffle_buffer`` rows
    (seeded by stream seed and epoch), so memory stays bounded by the buffer
    while a buffer at least as large as the split gives a full shuffle.
    ``shuffle=False`` keeps file order.
    """

    def __init__(self, manifest, batch_size=32, split="train", seed=0, shuffle=True,
                 shuffle_buffer=8192):
        if split not in ("train", "test", "all"):
            raise ValueError(f"split must be train, test or all, got {split!r}")
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        self.manifest = manifest
        self.batch_size = batch_size
        self.split = split
        self.seed = seed
        self.shuffle = shuffle
        self.shuffle_buffer = shuffle_buffer
        self._iter = None
        self._epoch = 0

    def _records(self):
        m = self.manifest
        count = 0
        rows = _rows(m.path, m.delimiter)
        if m.has_header:
            next(rows, None)
        for line_no, offset, fields in rows:
            if len(fields) != len(m.feature_columns) + 1:
                raise DataError(f"row {line_no} (byte {offset}) has {len(fields)} fields, "
                                f"expected {len(m.feature_columns) + 1}")
            idx = count
            count += 1
            if self.split != "all" and split_70_30(idx, m.seed) != self.split:
                continue
            label = fields[m.label_column].strip()
            if label not in m.class_index:
                raise DataError(f"row {line_no}: unknown label {label!r}")
            yield _parse_features(fields, m.feature_columns, line_no, m.feature_names), m.class_index[label]

    def _windows(self, rng):
        buf_x, buf_y = [], []
        for x, y in self._records():
            buf_x.append(x)
            buf_y.append(y)
            if len(buf_x) == self.shuffle_buffer:
                yield from self._emit(buf_x, buf_y, rng)
                buf_x, buf_y = [], []
        if buf_x:
            yield from self._emit(buf_x, buf_y, rng)

    def _emit(self, xs, ys, rng):
        order = rng.permutation(len(xs)) if rng is not None else range(len(xs))
        for i in order:
            yield xs[i], ys[i]

    def epoch(self, index=None, seed=None):
        """Generator over the batches of one epoch."""
        index = self._epoch if index is None else index
        seed = self.seed if seed is None else seed
        rng = np.random.default_rng([int(seed), int(index)]) if self.shuffle else None
        xs, ys = [], []
        m = self.manifest
        for x, y in self._windows(rng):
            xs.append(x)
            ys.append(y)
            if len(xs) == self.batch_size:
                yield m.normalize(np.array(xs)), np.array(ys, dtype=int)
                xs, ys = [], []
        if xs:
            yield m.normalize(np.array(xs)), np.array(ys, dtype=int)

    def __iter__(self):
        return self.epoch()

    def next_batch(self):
        """Next ``(X, y)`` batch, or ``None`` once the current epoch is exhausted."""
        if self._iter is None:
            self._iter = self.epoch(self._epoch)
        try:
            return next(self._iter)
        except StopIteration:
            self._iter = None
            self._epoch += 1
            return None


def load_split(manifest, split, batch_size=4096):
    """Whole split as arrays in file order, for evaluating small tables."""
    stream = DatasetStream(manifest, batch_size, split, shuffle=False)
    xs, ys = [], []
    for X, y in stream.epoch(0):
        xs.append(X)
        ys.append(y)
    if not xs:
        return np.empty((0, manifest.n_features)), np.empty(0, dtype=int)
    return np.concatenate(xs), np.concatenate(ys)


class ArrayStream:
    """In-memory counterpart of :class:`DatasetStream` for synthetic arrays.

    Same ``epoch(index, seed)`` contract; rows are fully reshuffled each epoch.
    """

    def __init__(self, X, y, batch_size=32, shuffle=True):
        self.X = np.asarray(X, dtype=DTYPE)
        self.y = np.asarray(y)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise ValueError(f"X {self.X.shape} and y {self.y.shape} do not line up")
        self.batch_size = batch_size
        self.shuffle = shuffle

    def epoch(self, index=0, seed=0):
        n = len(self.y)
        order = np.random.default_rng([int(seed), int(index)]).permutation(n) if self.shuffle else np.arange(n)
        for start in range(0, n, self.batch_size):
            idx = order[start:start + self.batch_size]
            yield self.X[idx], self.y[idx]

    def __iter__(self):
        return self.epoch()


def iter_feature_rows(path, n_features, delimiter=",", has_header=True, drop_column=None, chunk=1024):
    """Raw (unnormalized) numeric rows in chunks, optionally dropping one column.

    Every row must end up with exactly ``n_features`` values.
    """
    rows = _rows(path, delimiter)
    if has_header:
        next(rows, None)
    buf = []
    for line_no, offset, fields in rows:
        if drop_column is not None:
            fields = [f for j, f in enumerate(fields) if j != drop_column % len(fields)]
        if len(fields) != n_features:
            raise DataError(f"row {line_no} (byte {offset}) has {len(fields)} feature values, "
                            f"expected {n_features}")
        buf.append(_parse_features(fields, range(n_features), line_no, [f"x{j}" for j in range(n_features)]))
        if len(buf) == chunk:
            yield np.array(buf)
            buf = []
    if buf:
        yield np.array(buf)
