"""Fixed-size representations from tapped activations.

Each conv tap is reduced to a 3x3 grid by an average stage that brings the
map to 7 (or 8) cells per side, then an overlapping 3x3/stride-2 max stage.
Representations are averaged over the patch and its horizontal mirror; conv
maps from the mirrored pass are flipped back along width before averaging.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .binio import Reader, Writer
from .errors import ArgumentError, DataError, FormatError
from .netdef import NetworkSpec, WeightStore, forward

REP_NAMES = ("C2", "C3", "C4", "C5", "C6", "F1", "F2")
CONV_REPS = REP_NAMES[:5]
REP_TO_TAP = dict(zip(REP_NAMES, ("Conv2", "Conv3", "Conv4", "Conv5", "Conv6", "FC1", "FC2")))
# ids used in the feature cache file; 7/8 are the condensed C6 regions
REP_IDS = {name: i for i, name in enumerate(REP_NAMES)} | {"C6U": 7, "C6L": 8}
REP_BY_ID = {i: name for name, i in REP_IDS.items()}
GRID = 3


@dataclass(frozen=True)
class PoolStage:
    mode: str
    window: int
    stride: int

    def out_side(self, side: int) -> int:
        return T.pool_output_side(side, self.window, self.stride)


def derive_schedule(spatial_side: int) -> tuple[PoolStage, ...]:
    """Pooling stages that reduce a ``spatial_side`` map to 3x3.

    28 -> avg(4,4) -> 7 -> max(3,2) -> 3, and 14 -> avg(2,2) -> 7 -> max(3,2) -> 3.
    When no non-overlapping average lands on 7 or 8, the average window is
    widened (stride ``side // 7``, window ``side - 6 * stride``) so it does.
    Sides 4-6 use one stride-1 max stage; side 3 is the identity.
    """
    side = int(spatial_side)
    if side < GRID:
        raise ArgumentError(f"spatial side {side} is below {GRID}")
    if side == GRID:
        return ()
    if side < 7:
        return (PoolStage("max", side - GRID + 1, 1),)
    final = PoolStage("max", 3, 2)
    if side in (7, 8):
        return (final,)
    w = side // 7
    if side // w in (7, 8):
        return (PoolStage("average", w, w), final)
    return (PoolStage("average", side - 6 * w, w), final)


def schedule_out_side(side: int, schedule) -> int:
    for stage in schedule:
        side = stage.out_side(side)
    return side


def apply_schedule(maps: np.ndarray, schedule) -> np.ndarray:
    for stage in schedule:
        maps = T.pool2d(maps, stage.mode, stage.window, stage.stride)
    return maps


@dataclass
class RepresentationSet:
    features: dict[str, np.ndarray]
    provenance: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.features[name]


def weights_hash(weights: WeightStore) -> str:
    h = hashlib.sha256()
    for name, arr in weights.records():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def mirror(x: np.ndarray) -> np.ndarray:
    """Horizontal mirror (reverse the width axis)."""
    return np.ascontiguousarray(x[..., ::-1])


def extract_batch(spec: NetworkSpec, weights: WeightStore, patches: np.ndarray, reps=REP_NAMES) -> dict[str, np.ndarray]:
    """Flip-averaged representations for a batch ``(N, 3, S, S)``; returns name -> (N, dim)."""
    taps = [REP_TO_TAP[r] for r in reps]
    both = np.concatenate([patches, mirror(patches)])
    acts = forward(spec, weights, both, taps=taps).taps
    n = patches.shape[0]
    out = {}
    for rep, tap in zip(reps, taps):
        a = acts[tap]
        direct, flipped = a[:n], a[n:]
        if a.ndim == 4:
            avg = (direct + mirror(flipped)) / 2
            avg = apply_schedule(avg, derive_schedule(avg.shape[-1]))
        else:
            avg = (direct + flipped) / 2
        out[rep] = avg.reshape(n, -1)
    return out


def extract(spec: NetworkSpec, weights: WeightStore, center_patch: np.ndarray, reps=REP_NAMES,
            input_id=None) -> RepresentationSet:
    """Representations C2..F2 for one preprocessed ``(3, S, S)`` patch.

    At a side other than the build geometry only conv representations are
    available; pass ``reps=CONV_REPS``.
    """
    feats = extract_batch(spec, weights, center_patch[None], reps)
    return RepresentationSet(
        {k: v[0] for k, v in feats.items()},
        {"weights_hash": weights_hash(weights), "input_id": input_id, "flip_averaged": True},
    )


def condense_c6(rep_set, region: str) -> np.ndarray:
    """Keep two of the three grid rows of C6: rows 0-1 (``upper``) or 1-2 (``lower``)."""
    feats = rep_set.features if isinstance(rep_set, RepresentationSet) else rep_set
    if "C6" not in feats:
        raise ArgumentError("representation set has no C6")
    if region not in ("upper", "lower"):
        raise ArgumentError(f"region must be 'upper' or 'lower', got {region!r}")
    c6 = np.asarray(feats["C6"])
    grid = c6.reshape(c6.shape[:-1] + (-1, GRID, GRID))
    rows = slice(0, 2) if region == "upper" else slice(1, 3)
    kept = grid[..., rows, :]
    return np.ascontiguousarray(kept).reshape(c6.shape[:-1] + (-1,))


# --------------------------------------------------------------------------
# feature cache


@dataclass
class FeatureSet:
    """Per-representation feature rows keyed by integer image id."""

    reps: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def add(self, rep: str, ids, matrix) -> None:
        ids = np.asarray(ids, dtype=np.int64)
        matrix = np.asarray(matrix, dtype=np.float32)
        if matrix.shape[0] != ids.shape[0]:
            raise DataError(f"{rep}: {ids.shape[0]} ids for {matrix.shape[0]} rows")
        if rep in self.reps:
            old_ids, old = self.reps[rep]
            if old.shape[1] != matrix.shape[1]:
                raise DataError(f"{rep}: feature length {matrix.shape[1]} != {old.shape[1]}")
            ids, matrix = np.concatenate([old_ids, ids]), np.concatenate([old, matrix])
        self.reps[rep] = (ids, matrix)

    def matrix(self, rep: str, ids, names=None) -> np.ndarray:
        """Rows for ``ids`` in order; a missing entry raises ``DataError`` naming image and representation."""
        if rep not in self.reps:
            raise DataError(f"no cached features for representation {rep}")
        have, mat = self.reps[rep]
        index = {int(i): k for k, i in enumerate(have)}
        rows = []
        for i in np.asarray(ids):
            k = index.get(int(i))
            if k is None:
                label = names[int(i)] if names is not None else f"image id {int(i)}"
                raise DataError(f"missing cached {rep} features for {label}")
            rows.append(k)
        return mat[np.asarray(rows, dtype=np.int64)]

    def records(self):
        for rep, (ids, mat) in self.reps.items():
            for i, row in zip(ids, mat):
                yield int(i), rep, row


def dump_feature_cache(features: FeatureSet) -> bytes:
    w = Writer()
    for image_id, rep, row in features.records():
        w.u32(image_id)
        w.u8(REP_IDS[rep])
        w.u32(row.shape[0])
        w.floats(row)
    return w.getvalue()


def parse_feature_cache(data: bytes) -> FeatureSet:
    r = Reader(data)
    ids: dict[str, list[int]] = {}
    rows: dict[str, list[np.ndarray]] = {}
    seen = set()
    while r.remaining:
        at = r.pos
        image_id = r.u32("image id")
        rep_at = r.pos
        rep_id = r.u8("representation id")
        if rep_id not in REP_BY_ID:
            raise FormatError(f"unknown representation id {rep_id}", rep_at)
        rep = REP_BY_ID[rep_id]
        len_at = r.pos
        length = r.u32("feature length")
        if length == 0 or (rep in rows and length != rows[rep][0].shape[0]):
            raise FormatError(f"inconsistent {rep} feature length {length}", len_at)
        vec = r.floats(length, f"{rep} features")
        if (image_id, rep) in seen:
            raise FormatError(f"duplicate record for image {image_id} / {rep}", at)
        seen.add((image_id, rep))
        ids.setdefault(rep, []).append(image_id)
        rows.setdefault(rep, []).append(vec)
    fs = FeatureSet()
    for rep in rows:
        fs.reps[rep] = (np.asarray(ids[rep], dtype=np.int64), np.stack(rows[rep]))
    return fs


def save_feature_cache(features: FeatureSet, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_feature_cache(features))


def load_feature_cache(path) -> FeatureSet:
    with open(path, "rb") as fh:
        return parse_feature_cache(fh.read())
