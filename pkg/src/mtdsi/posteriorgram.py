"""Posteriorgrams: container, binary/CSV file formats, triphone grouping and
a softmax frame classifier used as a small self-contained acoustic model.

Binary layout (little endian)::

    b"PSTG"  u16 version=1  u32 T  u32 K  f32 frame_shift
    K x (u16 byte length, UTF-8 label)
    T*K f32 values, row major

The same container stores feature matrices; only posteriorgram loading
checks that rows are probability distributions.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import log_softmax, softmax

from .errors import MatrixFormatError, PosteriorValidationError, ShapeError
from .features import FeatureMatrix

MAGIC = b"PSTG"
VERSION = 1
ROW_SUM_TOL = 1e-4
_HEADER = struct.Struct("<4sHIIf")


@dataclass(frozen=True)
class Posteriorgram:
    """T x K matrix of per-frame class probabilities."""

    probs: np.ndarray
    labels: tuple = None
    frame_shift: float = 0.01

    def __post_init__(self):
        p = np.array(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise ShapeError(f"posteriorgram must be 2-D, got shape {p.shape}")
        labels = self.labels
        if labels is None:
            labels = tuple(str(k) for k in range(p.shape[1]))
        labels = tuple(str(lab) for lab in labels)
        if len(labels) != p.shape[1]:
            raise ShapeError(f"{len(labels)} labels for {p.shape[1]} classes")
        validate_rows(p)
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)
        object.__setattr__(self, "labels", labels)

    @property
    def n_frames(self) -> int:
        return self.probs.shape[0]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]


def validate_rows(p: np.ndarray, tol: float = ROW_SUM_TOL) -> None:
    """Raise PosteriorValidationError naming the first row that is not a distribution."""
    bad = ~np.all(np.isfinite(p), axis=1) | np.any(p < 0, axis=1)
    bad |= np.abs(p.sum(axis=1) - 1.0) > tol
    if np.any(bad):
        row = int(np.flatnonzero(bad)[0])
        raise PosteriorValidationError(
            f"row {row} is not a probability distribution (sum={p[row].sum():.6g})", row=row
        )


@dataclass(frozen=True)
class TriphoneMap:
    """Maps each triphone-state index to the index of its central monophone."""

    mapping: np.ndarray
    monophones: tuple

    def __post_init__(self):
        m = np.asarray(self.mapping, dtype=np.int64).reshape(-1)
        n_mono = len(self.monophones)
        if m.size == 0 or m.min() < 0 or m.max() >= n_mono:
            raise ValueError("triphone map refers to monophones outside the inventory")
        if np.unique(m).size != n_mono:
            raise ValueError("triphone map is not surjective onto the monophone inventory")
        object.__setattr__(self, "mapping", m)
        object.__setattr__(self, "monophones", tuple(self.monophones))

    @property
    def n_triphones(self) -> int:
        return self.mapping.size

    @property
    def n_monophones(self) -> int:
        return len(self.monophones)

    @classmethod
    def from_file(cls, path) -> "TriphoneMap":
        """Read ``<triphone index> <monophone label>`` lines."""
        pairs = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                idx, label = line.split()
                pairs.append((int(idx), label))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ValueError(f"{path}: triphone indices must be 0..N-1, each exactly once")
        monophones = tuple(dict.fromkeys(label for _, label in pairs))
        index = {label: k for k, label in enumerate(monophones)}
        return cls(np.array([index[label] for _, label in pairs]), monophones)


def group_to_monophones(tri: Posteriorgram, tmap: TriphoneMap) -> Posteriorgram:
    """Sum triphone-state posteriors that share a central phone."""
    if tri.n_classes != tmap.n_triphones:
        raise ShapeError(f"posteriorgram has {tri.n_classes} classes, map expects {tmap.n_triphones}")
    out = np.zeros((tri.n_frames, tmap.n_monophones))
    np.add.at(out.T, tmap.mapping, tri.probs.T)
    return Posteriorgram(out, tmap.monophones, tri.frame_shift)


# -- binary container ---------------------------------------------------------

def write_matrix(path, data: np.ndarray, labels, frame_shift: float) -> None:
    data = np.asarray(data)
    t, k = data.shape
    if len(labels) != k:
        raise ShapeError(f"{len(labels)} labels for {k} columns")
    parts = [_HEADER.pack(MAGIC, VERSION, t, k, frame_shift)]
    for label in labels:
        raw = str(label).encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    parts.append(np.ascontiguousarray(data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_matrix(path):
    """Return ``(data float64 (T, K), labels, frame_shift)`` from a PSTG file."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise MatrixFormatError(f"{path}: truncated header")
    magic, version, t, k, frame_shift = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise MatrixFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise MatrixFormatError(f"{path}: unsupported version {version}")
    pos = _HEADER.size
    labels = []
    for _ in range(k):
        if pos + 2 > len(raw):
            raise MatrixFormatError(f"{path}: truncated label table")
        (n,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        if pos + n > len(raw):
            raise MatrixFormatError(f"{path}: truncated label table")
        try:
            labels.append(raw[pos:pos + n].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise MatrixFormatError(f"{path}: label is not UTF-8") from exc
        pos += n
    expected = 4 * t * k
    if len(raw) - pos != expected:
        raise MatrixFormatError(f"{path}: expected {expected} data bytes, found {len(raw) - pos}")
    data = np.frombuffer(raw, dtype="<f4", offset=pos, count=t * k).reshape(t, k)
    # f32 header field; 7 significant digits recovers the written value
    return data.astype(np.float64), tuple(labels), float(f"{frame_shift:.7g}")


def save_posteriorgram(p: Posteriorgram, path) -> None:
    """Write a posteriorgram; values are stored as float32."""
    write_matrix(path, p.probs, p.labels, p.frame_shift)


def load_posteriorgram(path) -> Posteriorgram:
    data, labels, frame_shift = read_matrix(path)
    try:
        validate_rows(data)
    except PosteriorValidationError as exc:
        raise PosteriorValidationError(f"{path}: {exc}", row=exc.row) from None
    return Posteriorgram(data, labels, frame_shift)


def save_features(features: FeatureMatrix, path) -> None:
    labels = [f"{features.kind}:{d}" for d in range(features.dim)]
    write_matrix(path, features.data, labels, features.frame_shift)


def load_features(path) -> FeatureMatrix:
    data, labels, frame_shift = read_matrix(path)
    kind = labels[0].split(":", 1)[0] if labels else "MFSC"
    return FeatureMatrix(data, kind, frame_shift)


def import_csv(path, frame_shift: float = 0.01) -> Posteriorgram:
    """Read a CSV posteriorgram: header row of class labels, one row per frame."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise MatrixFormatError(f"{path}: empty CSV") from None
        rows = [[float(v) for v in row] for row in reader if row]
    if any(len(r) != len(header) for r in rows):
        raise MatrixFormatError(f"{path}: ragged CSV rows")
    data = np.array(rows, dtype=np.float64).reshape(-1, len(header))
    validate_rows(data)
    return Posteriorgram(data, tuple(header), frame_shift)


# -- frame classifier ----------------------------------------------------------

@dataclass
class FrameClassifier:
    """Multinomial logistic regression over (spliced) feature frames.

    Inputs are standardized with global statistics of the training set
    (``offset``/``scale``) before the affine layer.
    """

    weights: np.ndarray
    bias: np.ndarray
    offset: np.ndarray = None
    scale: np.ndarray = None
    labels: tuple = None
    frame_shift: float = 0.01

    def __post_init__(self):
        d = self.weights.shape[0]
        if self.offset is None:
            self.offset = np.zeros(d)
        if self.scale is None:
            self.scale = np.ones(d)

    @property
    def n_classes(self) -> int:
        return self.bias.size

    @property
    def input_dim(self) -> int:
        return self.weights.shape[0]

    def logits(self, x: np.ndarray) -> np.ndarray:
        return ((x - self.offset) / self.scale) @ self.weights + self.bias

    def save(self, path) -> None:
        np.savez(path, weights=self.weights, bias=self.bias, offset=self.offset, scale=self.scale,
                 labels=np.array(self.labels if self.labels else [], dtype=str),
                 frame_shift=self.frame_shift)

    @classmethod
    def load(cls, path) -> "FrameClassifier":
        with np.load(path) as z:
            labels = tuple(str(s) for s in z["labels"]) or None
            return cls(z["weights"], z["bias"], z["offset"], z["scale"], labels, float(z["frame_shift"]))


def train_frame_classifier(features, labels, n_classes: int, *, seed=0, learning_rate=1.0,
                           l2=1e-4, max_epochs=500, tol=1e-5, class_labels=None) -> FrameClassifier:
    """Fit a softmax classifier by full-batch gradient descent.

    Stops when the relative improvement of the regularized cross entropy
    drops below ``tol`` or after ``max_epochs``; the step size is halved
    whenever a step increases the loss.
    """
    feats = [f.data if isinstance(f, FeatureMatrix) else np.asarray(f, float) for f in features]
    labs = [np.asarray(y, dtype=np.int64).reshape(-1) for y in labels]
    if not feats or sum(f.shape[0] for f in feats) == 0:
        raise ValueError("no training frames")
    if len(feats) != len(labs) or any(f.shape[0] != y.size for f, y in zip(feats, labs)):
        raise ShapeError("features and frame labels are not aligned")
    x = np.vstack(feats)
    y = np.concatenate(labs)
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"frame labels must lie in [0, {n_classes})")
    frame_shift = features[0].frame_shift if isinstance(features[0], FeatureMatrix) else 0.01

    n, d = x.shape
    offset = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-8] = 1.0
    x = (x - offset) / scale
    if n_classes == 1:
        return FrameClassifier(np.zeros((d, 1)), np.zeros(1), offset, scale, class_labels, frame_shift)

    rng = np.random.default_rng(seed)
    w = 0.01 * rng.standard_normal((d, n_classes))
    b = np.zeros(n_classes)
    rows = np.arange(n)

    def objective(w, b):
        logp = log_softmax(x @ w + b, axis=1)
        return -np.mean(logp[rows, y]) + 0.5 * l2 * np.sum(w * w), logp

    loss, logp = objective(w, b)
    lr = learning_rate
    for _ in range(max_epochs):
        err = np.exp(logp)
        err[rows, y] -= 1.0
        err /= n
        grad_w = x.T @ err + l2 * w
        grad_b = err.sum(axis=0)
        while True:
            w_new, b_new = w - lr * grad_w, b - lr * grad_b
            new_loss, new_logp = objective(w_new, b_new)
            if new_loss <= loss or lr < 1e-8:
                break
            lr *= 0.5
        improvement = (loss - new_loss) / max(abs(loss), 1e-12)
        w, b, loss, logp = w_new, b_new, new_loss, new_logp
        if improvement < tol:
            break
    return FrameClassifier(w, b, offset, scale, class_labels, frame_shift)


def predict_posteriors(model: FrameClassifier, features) -> Posteriorgram:
    x = features.data if isinstance(features, FeatureMatrix) else np.asarray(features, float)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"classifier expects {model.input_dim}-dim frames, got shape {x.shape}")
    shift = features.frame_shift if isinstance(features, FeatureMatrix) else model.frame_shift
    probs = softmax(model.logits(x), axis=1)
    return Posteriorgram(probs, model.labels, shift)
