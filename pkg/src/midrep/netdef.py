"""Layer-stack definition, shape inference, tapped forward/backward and weight storage.

The ``table1`` preset is the face-classification network whose intermediate
activations feed the attribute classifiers.  Where the published layer table
is internally inconsistent, the resolutions are pinned in ``TABLE1_ROWS``:

* Conv4/Conv5 emit 384 channels (the Output column wins over "conv3-256").
* Pool2/Pool3 sit between the 1x1 reduction and the 3x3 conv, so the tapped
  Conv2 map is 28x28 and Conv3 is 14x14.
* Conv6 has stride 2 (14 -> 7); Pool6 is a global average over the Conv6 map.
* 3x3 convs use padding 1, 1x1 convs padding 0.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .binio import Reader, Writer, check_crc
from .errors import ArgumentError, FormatError, GeometryError, ShapeError, StateError, ValidationError

TAP_NAMES = ("Conv2", "Conv3", "Conv4", "Conv5", "Conv6", "FC1", "FC2")
CONV_TAPS = TAP_NAMES[:5]
FC_TAPS = TAP_NAMES[5:]
MIN_SIDE = 29
DEFAULT_SIDE = 112


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str  # conv | pool | lrn | fc | dropout
    out: int = 0  # output channels (conv) or units (fc)
    in_: int = 0  # input channels/units; 0 means "take from the previous layer"
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    mode: str = ""  # pool: "max" or "average"
    window: int = 0  # pool window; 0 means global over the map at build geometry
    rate: float = 0.0  # dropout
    prelu: bool = True  # conv/fc are followed by PReLU unless disabled
    head: bool = False  # layer belongs to the fixed-geometry classifier path

    @property
    def parameterized(self) -> bool:
        return self.kind in ("conv", "fc")


# (name, kind, hyperparameters); channel widths are scaled by ``width`` in build_network
TABLE1_ROWS = (
    ("Conv1", "conv", dict(out=64, kernel=3, padding=1)),
    ("Pool1", "pool", dict(mode="max", window=2, stride=2)),
    ("RNorm1", "lrn", {}),
    ("Conv2a", "conv", dict(out=64, kernel=1)),
    ("Pool2", "pool", dict(mode="max", window=2, stride=2)),
    ("Conv2", "conv", dict(out=192, kernel=3, padding=1)),
    ("RNorm2", "lrn", {}),
    ("Conv3a", "conv", dict(out=192, kernel=1)),
    ("Pool3", "pool", dict(mode="max", window=2, stride=2)),
    ("Conv3", "conv", dict(out=384, kernel=3, padding=1)),
    ("Conv4a", "conv", dict(out=384, kernel=1)),
    ("Conv4", "conv", dict(out=384, kernel=3, padding=1)),
    ("Conv5a", "conv", dict(out=256, kernel=1)),
    ("Conv5", "conv", dict(out=384, kernel=3, padding=1)),
    ("Conv6a", "conv", dict(out=256, kernel=1)),
    ("Conv6", "conv", dict(out=256, kernel=3, stride=2, padding=1)),
    ("Pool6", "pool", dict(mode="average", window=0, head=True)),
    ("FC1", "fc", dict(out=512, head=True)),
    ("Drop1", "dropout", dict(rate=0.5, head=True)),
    ("FC2", "fc", dict(out=512, head=True)),
    ("Drop2", "dropout", dict(rate=0.5, head=True)),
)

# tap name -> layer after which the activation is snapshotted
TABLE1_TAP_LAYERS = {
    "Conv2": "RNorm2",
    "Conv3": "Conv3",
    "Conv4": "Conv4",
    "Conv5": "Conv5",
    "Conv6": "Conv6",
    "FC1": "FC1",
    "FC2": "FC2",
}


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple[LayerSpec, ...]
    in_channels: int = 3
    input_side: int = DEFAULT_SIDE
    tap_layers: dict = field(default_factory=dict)
    lrn: T.LrnParams = T.LrnParams()
    num_classes: int = 0

    def layer(self, name: str) -> LayerSpec:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def index(self, name: str) -> int:
        for i, layer in enumerate(self.layers):
            if layer.name == name:
                return i
        raise KeyError(name)

    @property
    def tap_names(self) -> tuple[str, ...]:
        return tuple(self.tap_layers)

    def tap_shapes(self, side: int | None = None) -> dict[str, tuple[int, ...] | None]:
        table = dict(infer_shapes(self, self.input_side if side is None else side))
        return {tap: table[layer] for tap, layer in self.tap_layers.items()}


def _scaled(c: int, width: float) -> int:
    return max(1, int(round(c * width)))


def build_network(
    preset: str | None = "table1",
    *,
    side: int = DEFAULT_SIDE,
    width: float = 1.0,
    num_classes: int = 0,
    layers=None,
    in_channels: int = 3,
    tap_layers: dict | None = None,
    lrn: T.LrnParams = T.LrnParams(),
) -> NetworkSpec:
    """Build and validate a network spec.

    ``preset="table1"`` gives the reference stack at input side ``side``;
    ``width`` scales every channel/unit count (used for toy training and
    gradient checks).  ``num_classes > 0`` appends a linear ``Logits`` head.
    Passing ``layers`` (a sequence of :class:`LayerSpec`) with ``preset=None``
    builds a custom stack instead.
    """
    if layers is None:
        if preset != "table1":
            raise ValidationError(f"unknown preset {preset!r}")
        stack = []
        for name, kind, hyper in TABLE1_ROWS:
            hyper = dict(hyper)
            if "out" in hyper:
                hyper["out"] = _scaled(hyper["out"], width)
            stack.append(LayerSpec(name, kind, **hyper))
        taps = dict(TABLE1_TAP_LAYERS) if tap_layers is None else dict(tap_layers)
    else:
        stack = list(layers)
        taps = dict(tap_layers or {})
    if num_classes:
        if num_classes < 2:
            raise ValidationError("a classifier head needs at least 2 classes")
        stack.append(LayerSpec("Logits", "fc", out=num_classes, prelu=False, head=True))
    if side < MIN_SIDE:
        raise ArgumentError(f"input side {side} below minimum {MIN_SIDE}")

    # resolve in_ and global pools by propagating shapes at the build geometry
    resolved = []
    shape: tuple[int, ...] = (in_channels, side, side)
    names = set()
    for layer in stack:
        if layer.name in names:
            raise ValidationError(f"duplicate layer name {layer.name!r}")
        names.add(layer.name)
        if layer.kind == "conv":
            if len(shape) != 3:
                raise ValidationError(f"layer {layer.name}: conv after flattening")
            if layer.in_ and layer.in_ != shape[0]:
                raise ValidationError(
                    f"layer {layer.name}: declares {layer.in_} input channels, receives {shape[0]}")
            if layer.kernel not in (1, 3) or layer.out < 1:
                raise ValidationError(f"layer {layer.name}: kernel must be 1 or 3 with out >= 1")
            layer = dataclasses.replace(layer, in_=shape[0])
        elif layer.kind == "pool":
            if len(shape) != 3:
                raise ValidationError(f"layer {layer.name}: pool after flattening")
            if layer.mode not in ("max", "average"):
                raise ValidationError(f"layer {layer.name}: unknown pool mode {layer.mode!r}")
            if layer.window == 0:
                layer = dataclasses.replace(layer, window=shape[1], stride=shape[1])
        elif layer.kind == "fc":
            nin = int(np.prod(shape))
            if layer.in_ and layer.in_ != nin:
                raise ValidationError(f"layer {layer.name}: declares {layer.in_} inputs, receives {nin}")
            if layer.out < 1:
                raise ValidationError(f"layer {layer.name}: needs out >= 1")
            layer = dataclasses.replace(layer, in_=nin)
        elif layer.kind == "dropout":
            if not 0 <= layer.rate < 1:
                raise ValidationError(f"layer {layer.name}: dropout rate {layer.rate} outside [0, 1)")
        elif layer.kind != "lrn":
            raise ValidationError(f"layer {layer.name}: unknown kind {layer.kind!r}")
        try:
            shape = _layer_shape(layer, shape)
        except ShapeError as exc:
            raise ValidationError(f"layer {layer.name}: {exc}") from None
        resolved.append(layer)

    for tap, lname in taps.items():
        if lname not in names:
            raise ValidationError(f"tap {tap!r} refers to unknown layer {lname!r}")
    seen_head = False
    for layer in resolved:
        if seen_head and not layer.head:
            raise ValidationError(f"layer {layer.name}: conv-stage layer after the fixed-geometry head")
        seen_head = seen_head or layer.head
    return NetworkSpec(tuple(resolved), in_channels, side, taps, lrn, num_classes)


def _layer_shape(layer: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if layer.kind == "conv":
        c, h, w = shape
        oh = T.conv_output_side(h, layer.kernel, layer.stride, layer.padding)
        ow = T.conv_output_side(w, layer.kernel, layer.stride, layer.padding)
        if oh < 1 or ow < 1:
            raise ShapeError(f"conv output extent non-positive at input {h}x{w}")
        return (layer.out, oh, ow)
    if layer.kind == "pool":
        c, h, w = shape
        if layer.window > h or layer.window > w:
            raise ShapeError(f"pool window {layer.window} exceeds extent {h}x{w}")
        return (c, T.pool_output_side(h, layer.window, layer.stride),
                T.pool_output_side(w, layer.window, layer.stride))
    if layer.kind == "fc":
        return (layer.out,)
    return shape


def infer_shapes(spec: NetworkSpec, side: int) -> list[tuple[str, tuple[int, ...] | None]]:
    """Per-layer output shapes at input side ``side``.

    Head layers report ``None`` ("unavailable") unless ``side`` equals the
    geometry the network was built for.
    """
    if side < MIN_SIDE:
        raise ArgumentError(f"input side {side} below minimum {MIN_SIDE}")
    shape: tuple[int, ...] = (spec.in_channels, side, side)
    rows = []
    for layer in spec.layers:
        if layer.head and side != spec.input_side:
            rows.append((layer.name, None))
            continue
        shape = _layer_shape(layer, shape)
        rows.append((layer.name, shape))
    return rows


# --------------------------------------------------------------------------
# weights


@dataclass
class WeightStore:
    params: dict[str, dict[str, np.ndarray]]
    meta: dict = field(default_factory=dict)

    def records(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{layer}.{pname}", arr) for layer, blobs in self.params.items() for pname, arr in blobs.items()]

    def astype(self, dtype) -> "WeightStore":
        return WeightStore(
            {layer: {k: v.astype(dtype) for k, v in blobs.items()} for layer, blobs in self.params.items()},
            dict(self.meta),
        )

    def copy(self) -> "WeightStore":
        return WeightStore(
            {layer: {k: v.copy() for k, v in blobs.items()} for layer, blobs in self.params.items()},
            dict(self.meta),
        )

    def identical(self, other: "WeightStore") -> bool:
        """Bit-level equality of every blob and the metadata."""
        if self.meta != other.meta or self.params.keys() != other.params.keys():
            return False
        for layer, blobs in self.params.items():
            if blobs.keys() != other.params[layer].keys():
                return False
            for k, v in blobs.items():
                o = other.params[layer][k]
                if v.dtype != o.dtype or v.shape != o.shape or v.tobytes() != o.tobytes():
                    return False
        return True

    def validate(self, spec: NetworkSpec) -> None:
        expected = expected_param_shapes(spec)
        for layer in expected:
            if layer not in self.params:
                raise ValidationError(f"weight store has no entry for layer {layer!r}")
        for layer in self.params:
            if layer not in expected:
                raise ValidationError(f"weight store has unexpected layer {layer!r}")
        for layer, shapes in expected.items():
            blobs = self.params[layer]
            if blobs.keys() != shapes.keys():
                raise ValidationError(f"layer {layer!r} has blobs {sorted(blobs)}, expected {sorted(shapes)}")
            for k, shp in shapes.items():
                if blobs[k].shape != shp:
                    raise ValidationError(f"layer {layer!r} blob {k!r} has shape {blobs[k].shape}, expected {shp}")


def expected_param_shapes(spec: NetworkSpec) -> dict[str, dict[str, tuple[int, ...]]]:
    out = {}
    for layer in spec.layers:
        if layer.kind == "conv":
            shapes = {"kernel": (layer.out, layer.in_, layer.kernel, layer.kernel), "bias": (layer.out,)}
        elif layer.kind == "fc":
            shapes = {"weights": (layer.out, layer.in_), "bias": (layer.out,)}
        else:
            continue
        if layer.prelu:
            shapes["slopes"] = (layer.out,)
        out[layer.name] = shapes
    return out


def init_weights(spec: NetworkSpec, seed: int, prelu_init: float = 0.25) -> WeightStore:
    """He-normal kernels (variance 2/fan_in), zero biases, PReLU slopes at ``prelu_init``."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shapes in expected_param_shapes(spec).items():
        main = "kernel" if "kernel" in shapes else "weights"
        fan_in = int(np.prod(shapes[main][1:]))
        blobs = {main: rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shapes[main]).astype(np.float32)}
        blobs["bias"] = np.zeros(shapes["bias"], dtype=np.float32)
        if "slopes" in shapes:
            blobs["slopes"] = np.full(shapes["slopes"], prelu_init, dtype=np.float32)
        params[name] = blobs
    return WeightStore(params, {"input_side": spec.input_side, "seed": seed})


# --------------------------------------------------------------------------
# forward / backward


@dataclass
class Activations:
    taps: dict[str, np.ndarray]
    logits: np.ndarray | None = None
    caches: list | None = None


def _readonly(a: np.ndarray) -> np.ndarray:
    a = a.copy()
    a.flags.writeable = False
    return a


def forward(
    spec: NetworkSpec,
    weights: WeightStore,
    x: np.ndarray,
    taps=None,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
    logits: bool = False,
    cache: bool = False,
) -> Activations:
    """Run the stack on one map ``(C,S,S)`` or a batch ``(N,C,S,S)``.

    Each requested tap is snapshotted after its layer (and that layer's PReLU).
    Head layers (Pool6 onward) only run when ``S`` equals the build geometry;
    requesting an FC tap or logits at another size raises ``GeometryError``.
    """
    if mode not in ("infer", "train"):
        raise ArgumentError(f"mode must be 'infer' or 'train', got {mode!r}")
    taps = tuple(spec.tap_names if taps is None else taps)
    for tap in taps:
        if tap not in spec.tap_layers:
            raise ArgumentError(f"unknown tap {tap!r}")
    if x.ndim not in (3, 4) or x.shape[-3] != spec.in_channels or x.shape[-1] != x.shape[-2]:
        raise ShapeError(f"expected ({spec.in_channels},S,S) input, got {x.shape}")
    side = x.shape[-1]
    if side < MIN_SIDE:
        raise GeometryError(f"input side {side} below minimum {MIN_SIDE}")
    if logits and not spec.num_classes:
        raise ArgumentError("spec has no classifier head")

    wanted = {spec.index(spec.tap_layers[t]): t for t in taps}
    last = max(wanted, default=-1)
    if logits:
        last = len(spec.layers) - 1
    if last >= 0 and spec.layers[last].head and side != spec.input_side:
        raise GeometryError(
            f"head layers need input side {spec.input_side}, got {side}; request conv taps only")

    dtype = x.dtype
    h = x
    out = Activations({})
    caches = [] if cache else None
    for i in range(last + 1):
        layer = spec.layers[i]
        p = weights.params.get(layer.name, {})
        layer_caches = []
        if layer.kind == "conv":
            cp = T.ConvParams(p["kernel"].astype(dtype, copy=False), p["bias"].astype(dtype, copy=False),
                              layer.stride, layer.padding)
            h, c = T.conv2d_forward(h, cp)
            layer_caches.append(c)
        elif layer.kind == "pool":
            h, c = T.pool2d_forward(h, layer.mode, layer.window, layer.stride)
            layer_caches.append(c)
        elif layer.kind == "lrn":
            h, c = T.lrn_forward(h, spec.lrn)
            layer_caches.append(c)
        elif layer.kind == "fc":
            flat = h.reshape(-1) if x.ndim == 3 else h.reshape(h.shape[0], -1)
            layer_caches.append({"kind": "flatten", "shape": h.shape})
            h, c = T.affine_forward(flat, p["weights"].astype(dtype, copy=False), p["bias"].astype(dtype, copy=False))
            layer_caches.append(c)
        elif layer.kind == "dropout":
            h, c = T.dropout_forward(h, layer.rate, rng, mode)
            layer_caches.append(c)
        if layer.prelu and layer.parameterized:
            h, c = T.prelu_forward(h, T.PreluParams(p["slopes"].astype(dtype, copy=False)))
            layer_caches.append(c)
        if cache:
            caches.append(layer_caches)
        if i in wanted:
            out.taps[wanted[i]] = _readonly(h)
    if logits:
        out.logits = h
    out.caches = caches
    return out


def backward(spec: NetworkSpec, weights: WeightStore, acts: Activations, dlogits: np.ndarray):
    """Parameter gradients of a loss given its gradient w.r.t. the logits.

    Returns ``(input_grad, grads)`` with ``grads`` shaped like ``weights.params``.
    """
    if acts.caches is None or len(acts.caches) != len(spec.layers):
        raise StateError("backward needs a full forward pass run with cache=True and logits=True")
    grads: dict[str, dict[str, np.ndarray]] = {}
    g = dlogits
    for layer, layer_caches in zip(reversed(spec.layers), reversed(acts.caches)):
        lg: dict[str, np.ndarray] = {}
        for c in reversed(layer_caches):
            if c["kind"] == "flatten":
                g = g.reshape(c["shape"])
                continue
            g, pg = T.backward(c["kind"], c, g)
            lg.update(pg)
        if layer.parameterized:
            grads[layer.name] = lg
    return g, grads


# --------------------------------------------------------------------------
# weight file

WEIGHT_MAGIC = b"MRW1"
WEIGHT_VERSION = 1
DTYPE_F32 = 0
DTYPE_U32 = 1
META_RECORD = "@meta"
MAX_NDIM = 8


def dump_weights(store: WeightStore) -> bytes:
    records = store.records()
    meta = [int(store.meta.get("input_side", 0)), int(store.meta.get("seed", 0)) & 0xFFFFFFFF,
            (int(store.meta.get("seed", 0)) >> 32) & 0xFFFFFFFF]
    w = Writer()
    w.raw(WEIGHT_MAGIC)
    w.u16(WEIGHT_VERSION)
    w.u16(0)
    w.u32(len(records) + 1)
    for name, arr in records:
        w.string(name)
        w.u8(DTYPE_F32)
        w.u8(arr.ndim)
        for e in arr.shape:
            w.u32(e)
        w.floats(arr)
    w.string(META_RECORD)
    w.u8(DTYPE_U32)
    w.u8(1)
    w.u32(len(meta))
    w.raw(np.asarray(meta, dtype="<u4").tobytes())
    return w.getvalue(with_crc=True)


def parse_weights(data: bytes) -> WeightStore:
    r = Reader(data, end=max(len(data) - 4, 0))
    r.expect_magic(WEIGHT_MAGIC)
    version_at = r.pos
    if r.u16("version") != WEIGHT_VERSION:
        raise FormatError("unsupported weight file version", version_at)
    r.u16("flags")
    count = r.u32("layer count")
    params: dict[str, dict[str, np.ndarray]] = {}
    meta = {}
    for _ in range(count):
        at = r.pos
        name = r.string("record name")
        dtype = r.u8("dtype")
        ndim = r.u8("ndim")
        if not 1 <= ndim <= MAX_NDIM:
            raise FormatError(f"record {name!r} has {ndim} dimensions", r.pos - 1)
        extents = [r.u32("extent") for _ in range(ndim)]
        n = math.prod(extents)
        if name == META_RECORD:
            if dtype != DTYPE_U32 or ndim != 1:
                raise FormatError("malformed metadata record", at)
            vals = np.frombuffer(r.take(4 * n, "metadata"), dtype="<u4")
            if n < 3:
                raise FormatError("metadata record too short", at)
            meta = {"input_side": int(vals[0]), "seed": int(vals[1]) | (int(vals[2]) << 32)}
            continue
        if dtype != DTYPE_F32:
            raise FormatError(f"record {name!r} has unsupported dtype code {dtype}", r.pos - 2 - 4 * ndim)
        layer, _, pname = name.rpartition(".")
        if not layer or not pname:
            raise FormatError(f"record name {name!r} is not 'layer.blob'", at)
        arr = r.floats(n, f"payload of {name!r}").reshape(extents)
        if pname in params.setdefault(layer, {}):
            raise FormatError(f"duplicate record {name!r}", at)
        params[layer][pname] = arr
    if r.remaining:
        raise FormatError(f"{r.remaining} unexpected bytes before CRC trailer", r.pos)
    check_crc(data, "weight file")
    return WeightStore(params, meta)


def save_weights(store: WeightStore, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_weights(store))


def load_weights(path, spec: NetworkSpec | None = None) -> WeightStore:
    """Load a weight file; with ``spec`` the store is also validated against it."""
    with open(path, "rb") as fh:
        store = parse_weights(fh.read())
    if spec is not None:
        store.validate(spec)
    return store
