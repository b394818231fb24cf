"""L2-regularized linear hinge-loss classifiers, one per (attribute, representation).

Training minimizes ``0.5 * |w~|^2 + C * sum(max(0, 1 - y * w~ . x~))`` over
standardized features ``x~ = [standardize(x), 1]``; the bias is the last
coordinate of ``w~`` and is therefore lightly regularized.  The solver is
dual coordinate descent: each step exactly minimizes the dual objective
along one coordinate, so the recorded per-epoch dual objective is
non-increasing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .binio import Reader, Writer, check_crc
from .errors import ArgumentError, DataError, DegenerateDataError, FormatError

BIAS_MODE = "augmented-feature"


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    def apply(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.mean.shape[0]:
            raise ArgumentError(f"feature length {x.shape[-1]} != standardizer length {self.mean.shape[0]}")
        return (x - self.mean) / self.scale


def standardize_fit(features) -> Standardizer:
    """Per-dimension mean and (population) standard deviation; zero-variance dims get scale 1."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ArgumentError("standardize_fit needs a non-empty (n, d) matrix")
    if x.shape[0] < 2:
        raise ArgumentError("standardize_fit needs at least 2 samples")
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale <= 1e-12 * np.maximum(1.0, np.abs(mean))] = 1.0
    return Standardizer(mean, scale)


def standardize_apply(standardizer: Standardizer, x) -> np.ndarray:
    return standardizer.apply(x)


@dataclass
class SvmModel:
    w: np.ndarray
    b: float
    C: float
    standardizer: Standardizer
    attribute: str = ""
    representation: str = ""
    history: list = field(default_factory=list, repr=False)
    meta: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.w.shape[0]

    def decision(self, x) -> np.ndarray:
        xs = self.standardizer.apply(x)
        return xs @ self.w.astype(np.float64) + np.float64(self.b)

    def identical(self, other: "SvmModel") -> bool:
        def same(a, b):
            return np.asarray(a).tobytes() == np.asarray(b).tobytes()

        return (
            same(self.w, other.w) and same(np.float32(self.b), np.float32(other.b))
            and same(np.float32(self.C), np.float32(other.C))
            and same(self.standardizer.mean, other.standardizer.mean)
            and same(self.standardizer.scale, other.standardizer.scale)
            and self.attribute == other.attribute and self.representation == other.representation
        )


def _check_data(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ArgumentError(f"expected (n, d) features and n labels, got {x.shape} and {y.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("features contain non-finite values")
    if not np.all(np.isin(y, (-1, 1))):
        raise DataError("labels must be -1 or +1")
    return x, y.astype(np.float64)


def primal_objective(w_aug: np.ndarray, xs_aug: np.ndarray, y: np.ndarray, C: float) -> float:
    margins = 1.0 - y * (xs_aug @ w_aug)
    return 0.5 * float(w_aug @ w_aug) + C * float(np.maximum(margins, 0).sum())


def _gap(w, xs, y, C, dual) -> float:
    primal = primal_objective(w, xs, y, C)
    return (primal + dual) / max(abs(primal), 1e-12)


def train(x, y, C: float = 1.0, *, seed: int = 0, tol: float = 1e-6, gap_tol: float | None = 5e-4,
          max_epochs: int = 1000, attribute: str = "", representation: str = "") -> SvmModel:
    """Fit one linear SVM.

    Stops after a full pass in which the relative decrease of the dual
    objective is below ``tol`` (and, if ``gap_tol`` is given, the relative
    duality gap is below it), or after ``max_epochs``.
    """
    x, y = _check_data(x, y)
    if not (np.any(y > 0) and np.any(y < 0)):
        raise DegenerateDataError("training data needs both +1 and -1 labels")
    if C <= 0:
        raise ArgumentError(f"C must be positive, got {C}")
    std = standardize_fit(x)
    xs = np.hstack([std.apply(x), np.ones((x.shape[0], 1))])
    n = xs.shape[0]
    qdiag = np.einsum("ij,ij->i", xs, xs)
    alpha = np.zeros(n)
    w = np.zeros(xs.shape[1])
    rng = np.random.default_rng(seed)
    history = []
    prev = 0.0
    converged = False
    # shrinking: variables stuck at a bound with a gradient pointing outward
    # are skipped until the active set stalls, then everything is revisited
    active = np.arange(n)
    pg_hi, pg_lo = np.inf, -np.inf
    for _ in range(max_epochs):
        full = active.size == n
        hi, lo = -np.inf, np.inf
        keep = []
        for i in active[rng.permutation(active.size)]:
            g = y[i] * (w @ xs[i]) - 1.0
            a = alpha[i]
            pg = g
            if a == 0.0:
                if g > pg_hi:
                    continue
                pg = min(g, 0.0)
            elif a == C:
                if g < pg_lo:
                    continue
                pg = max(g, 0.0)
            keep.append(i)
            hi, lo = max(hi, pg), min(lo, pg)
            if pg != 0.0:
                new = min(max(a - g / qdiag[i], 0.0), C)
                if new != a:
                    w += (new - a) * y[i] * xs[i]
                    alpha[i] = new
        dual = 0.5 * float(w @ w) - float(alpha.sum())
        history.append(dual)
        decrease = (prev - dual) / max(abs(dual), 1e-12)
        prev = dual
        if full and len(history) > 1 and decrease < tol and (gap_tol is None or _gap(w, xs, y, C, dual) < gap_tol):
            converged = True
            break
        stalled = not keep or hi - lo < 1e-3 or (len(history) > 1 and decrease < tol)
        if stalled and active.size < n:
            active, pg_hi, pg_lo = np.arange(n), np.inf, -np.inf
        else:
            active = np.asarray(keep, dtype=np.int64) if keep else np.arange(n)
            pg_hi = hi if hi > 0 else np.inf
            pg_lo = lo if lo < 0 else -np.inf
    return SvmModel(
        w[:-1].astype(np.float32), float(np.float32(w[-1])), float(np.float32(C)),
        Standardizer(std.mean.astype(np.float32), std.scale.astype(np.float32)),
        attribute, representation, history,
        {"bias_mode": BIAS_MODE, "epochs": len(history), "converged": converged, "seed": seed},
    )


def predict(model: SvmModel, x):
    """``(score, label)`` for one vector or row-wise for a matrix; zero scores map to +1."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.dim:
        raise ArgumentError(f"feature length {x.shape[-1]} != model dimension {model.dim}")
    score = model.decision(x)
    label = np.where(score >= 0, 1, -1)
    if np.ndim(score) == 0:
        return float(score), int(label)
    return score, label


def accuracy(model: SvmModel, x, y, balanced: bool = False) -> float:
    """Plain accuracy, or the mean of per-class recalls when ``balanced``."""
    y = np.asarray(y)
    if y.size == 0:
        raise ArgumentError("accuracy of empty data is undefined")
    _, pred = predict(model, np.atleast_2d(np.asarray(x, dtype=np.float64)))
    return label_accuracy(pred, y, balanced)


def label_accuracy(pred, y, balanced: bool = False) -> float:
    pred, y = np.asarray(pred), np.asarray(y)
    if y.size == 0:
        raise ArgumentError("accuracy of empty data is undefined")
    if not balanced:
        return float(np.mean(pred == y))
    recalls = [np.mean(pred[y == c] == c) for c in (-1, 1) if np.any(y == c)]
    return float(np.mean(recalls))


# --------------------------------------------------------------------------
# model file

MODEL_MAGIC = b"MSVM"
MODEL_VERSION = 1


def dump_model(model: SvmModel) -> bytes:
    w = Writer()
    w.raw(MODEL_MAGIC)
    w.u16(MODEL_VERSION)
    w.string(model.attribute)
    w.string(model.representation)
    w.u32(model.dim)
    w.floats(model.w)
    w.f32(model.b)
    w.floats(model.standardizer.mean)
    w.floats(model.standardizer.scale)
    w.f32(model.C)
    return w.getvalue(with_crc=True)


def parse_model(data: bytes) -> SvmModel:
    r = Reader(data, end=max(len(data) - 4, 0))
    r.expect_magic(MODEL_MAGIC)
    at = r.pos
    if r.u16("version") != MODEL_VERSION:
        raise FormatError("unsupported model file version", at)
    attribute = r.string("attribute name")
    rep = r.string("representation name")
    dim_at = r.pos
    dim = r.u32("dimension")
    if dim == 0:
        raise FormatError("model dimension is zero", dim_at)
    wv = r.floats(dim, "weights")
    b = r.f32("bias")
    mean = r.floats(dim, "means")
    scale_at = r.pos
    scale = r.floats(dim, "scales")
    c = r.f32("C")
    if r.remaining:
        raise FormatError(f"{r.remaining} unexpected bytes before CRC trailer", r.pos)
    check_crc(data, "model file")
    if not np.all(scale > 0):
        raise FormatError("non-positive standardizer scale", scale_at)
    return SvmModel(wv, b, c, Standardizer(mean, scale), attribute, rep, meta={"bias_mode": BIAS_MODE})


def save_model(model: SvmModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_model(model))


def load_model(path) -> SvmModel:
    with open(path, "rb") as fh:
        return parse_model(fh.read())
