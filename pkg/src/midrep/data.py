"""Attribute tables, image decoding, center-patch preprocessing and training augmentation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .binio import Reader, Writer
from .errors import DataError, FormatError, GeometryError, ParseError

ALIGNED_SIDE = 120
PATCH_SIDE = 112
SPLITS = ("train", "val", "test")

CELEBA_ATTRIBUTES = (
    "5_o_Clock_Shadow", "Arched_Eyebrows", "Attractive", "Bags_Under_Eyes", "Bald", "Bangs",
    "Big_Lips", "Big_Nose", "Black_Hair", "Blond_Hair", "Blurry", "Brown_Hair", "Bushy_Eyebrows",
    "Chubby", "Double_Chin", "Eyeglasses", "Goatee", "Gray_Hair", "Heavy_Makeup", "High_Cheekbones",
    "Male", "Mouth_Slightly_Open", "Mustache", "Narrow_Eyes", "No_Beard", "Oval_Face", "Pale_Skin",
    "Pointy_Nose", "Receding_Hairline", "Rosy_Cheeks", "Sideburns", "Smiling", "Straight_Hair",
    "Wavy_Hair", "Wearing_Earrings", "Wearing_Hat", "Wearing_Lipstick", "Wearing_Necklace",
    "Wearing_Necktie", "Young",
)


@dataclass
class AttributeTable:
    names: list[str]
    filenames: list[str]
    labels: np.ndarray  # (rows, attributes) of int8 in {-1, +1}
    partition: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.filenames)

    def column(self, attribute: str) -> np.ndarray:
        return self.labels[:, self.names.index(attribute)]

    def with_partition(self, partition: dict[str, str]) -> "AttributeTable":
        known = set(self.filenames)
        for fname, split in partition.items():
            if fname not in known:
                raise DataError(f"partition lists {fname!r}, which is not in the attribute table")
            if split not in SPLITS:
                raise DataError(f"unknown split {split!r} for {fname!r}")
        return AttributeTable(self.names, self.filenames, self.labels, dict(partition))

    def split_ids(self, split: str) -> np.ndarray:
        """Row indices assigned to ``split``, in table order."""
        if split not in SPLITS:
            raise DataError(f"unknown split {split!r}")
        return np.array([i for i, f in enumerate(self.filenames) if self.partition.get(f) == split], dtype=np.int64)


def parse_attr_list(path) -> AttributeTable:
    """Parse a CelebA-style ``list_attr`` file.

    Line 1 holds the row count, line 2 the attribute names, then one line per
    image: filename followed by one ``1``/``-1`` token per attribute.
    """
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise ParseError("empty attribute file", 1)
    try:
        count = int(lines[0].strip())
    except ValueError:
        raise ParseError(f"row count {lines[0].strip()!r} is not an integer", 1) from None
    if count < 0:
        raise ParseError("negative row count", 1)
    if len(lines) < 2:
        raise ParseError("missing attribute-name line", 2)
    names = lines[1].split()
    if not names:
        raise ParseError("no attribute names", 2)
    if len(set(names)) != len(names):
        raise ParseError("duplicate attribute names", 2)
    rows = lines[2:]
    if len(rows) != count:
        raise ParseError(f"header declares {count} rows, file has {len(rows)}", min(len(lines), count + 2) + 1)
    labels = np.empty((count, len(names)), dtype=np.int8)
    filenames = []
    for k, line in enumerate(rows):
        lineno = k + 3
        tokens = line.split()
        if len(tokens) != len(names) + 1:
            raise ParseError(f"expected filename and {len(names)} labels, got {len(tokens)} tokens", lineno)
        for j, tok in enumerate(tokens[1:]):
            if tok == "1":
                labels[k, j] = 1
            elif tok == "-1":
                labels[k, j] = -1
            else:
                raise ParseError(f"label token {tok!r} for {names[j]} is not 1 or -1", lineno)
        filenames.append(tokens[0])
    if len(set(filenames)) != len(filenames):
        raise ParseError("duplicate filenames", 3)
    return AttributeTable(names, filenames, labels)


def parse_partition(path) -> dict[str, str]:
    """Parse ``filename idx`` lines with idx 0=train, 1=val, 2=test."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != 2 or tokens[1] not in ("0", "1", "2"):
                raise ParseError(f"expected 'filename 0|1|2', got {line.strip()!r}", lineno)
            out[tokens[0]] = SPLITS[int(tokens[1])]
    return out


def write_attr_list(table: AttributeTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{len(table)}\n{' '.join(table.names)}\n")
        for fname, row in zip(table.filenames, table.labels):
            fh.write(fname + " " + " ".join(f"{int(v):2d}" for v in row) + "\n")


def write_partition(partition: dict[str, str], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for fname, split in partition.items():
            fh.write(f"{fname} {SPLITS.index(split)}\n")


# --------------------------------------------------------------------------
# images

RAW_MAGIC = b"MRT1"
MAX_NDIM = 8


def dump_raw_tensor(arr: np.ndarray) -> bytes:
    w = Writer()
    w.raw(RAW_MAGIC)
    w.u8(arr.ndim)
    for e in arr.shape:
        w.u32(e)
    w.floats(arr)
    return w.getvalue()


def parse_raw_tensor(data: bytes) -> np.ndarray:
    r = Reader(data)
    r.expect_magic(RAW_MAGIC)
    at = r.pos
    ndim = r.u8("ndim")
    if not 1 <= ndim <= MAX_NDIM:
        raise FormatError(f"raw tensor has {ndim} dimensions", at)
    extents = []
    for _ in range(ndim):
        e_at = r.pos
        e = r.u32("extent")
        if e == 0:
            raise FormatError("zero extent", e_at)
        extents.append(e)
    n = math.prod(extents)
    arr = r.floats(n, "payload").reshape(extents)
    if r.remaining:
        raise FormatError(f"{r.remaining} trailing bytes", r.pos)
    return arr


def write_raw_tensor(arr: np.ndarray, path) -> None:
    Path(path).write_bytes(dump_raw_tensor(arr))


def read_raw_tensor(path) -> np.ndarray:
    return parse_raw_tensor(Path(path).read_bytes())


def encode_pnm(image: np.ndarray, maxval: int = 255) -> bytes:
    """Binary PGM (1 channel) or PPM (3 channels) from a ``(C, H, W)`` array of integer levels."""
    c, h, w = image.shape
    if c not in (1, 3):
        raise DataError(f"PNM needs 1 or 3 channels, got {c}")
    dtype = ">u1" if maxval < 256 else ">u2"
    body = np.ascontiguousarray(np.transpose(image, (1, 2, 0))).astype(dtype).tobytes()
    magic = b"P6" if c == 3 else b"P5"
    return magic + f"\n{w} {h}\n{maxval}\n".encode() + body


def _parse_pnm(data: bytes) -> np.ndarray:
    magic = data[:2]
    pos = 2
    values = []
    while len(values) < 3:
        while pos < len(data) and (data[pos : pos + 1].isspace() or data[pos : pos + 1] == b"#"):
            if data[pos : pos + 1] == b"#":
                end = data.find(b"\n", pos)
                pos = len(data) if end < 0 else end + 1
            else:
                pos += 1
        start = pos
        while pos < len(data) and data[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed PNM header", start)
        values.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after PNM header", pos)
    pos += 1
    w, h, maxval = values
    if w == 0 or h == 0 or not 0 < maxval < 65536:
        raise FormatError(f"invalid PNM geometry {w}x{h} maxval {maxval}", pos - 1)
    channels = 3 if magic == b"P6" else 1
    bps = 1 if maxval < 256 else 2
    need = w * h * channels * bps
    if len(data) - pos < need:
        raise FormatError(f"truncated PNM payload: need {need} bytes, have {len(data) - pos}", len(data))
    raw = np.frombuffer(data, dtype=">u1" if bps == 1 else ">u2", count=w * h * channels, offset=pos)
    img = raw.astype(np.float32).reshape(h, w, channels).transpose(2, 0, 1)
    if maxval != 255:
        img = img * np.float32(255.0 / maxval)
    if channels == 1:
        img = np.repeat(img, 3, axis=0)
    return np.ascontiguousarray(img)


def decode_image(path) -> np.ndarray:
    """Decode P6/P5 or a raw ``MRT1`` tensor into a ``(3, H, W)`` float32 array on [0, 255]."""
    data = Path(path).read_bytes()
    if data[:2] in (b"P5", b"P6"):
        return _parse_pnm(data)
    if data[:4] == RAW_MAGIC:
        arr = parse_raw_tensor(data)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[0] not in (1, 3):
            raise FormatError(f"raw tensor of shape {arr.shape} is not an image", 4)
        return np.ascontiguousarray(np.repeat(arr, 3, axis=0) if arr.shape[0] == 1 else arr)
    raise FormatError(f"unknown image magic {data[:4]!r}", 0)


# --------------------------------------------------------------------------
# patches


@dataclass
class FacePatch:
    data: np.ndarray  # (3, side, side) on [-1, 1]
    source_id: object = None
    flipped: bool = False


def scale_pixels(v: np.ndarray) -> np.ndarray:
    return ((v - np.float32(127.5)) / np.float32(128.0)).astype(np.float32)


def _crop(image: np.ndarray, top: int, left: int, size: int) -> np.ndarray:
    return image[:, top : top + size, left : left + size]


def preprocess(image: np.ndarray, doubled: bool = False, source_id=None) -> FacePatch:
    """Center-crop an aligned 120x120 face (240 when ``doubled``) to 112 (224) and scale to [-1, 1]."""
    side = ALIGNED_SIDE * (2 if doubled else 1)
    size = PATCH_SIDE * (2 if doubled else 1)
    if image.ndim != 3 or image.shape[1:] != (side, side):
        raise GeometryError(f"expected (C, {side}, {side}) aligned face, got {image.shape}")
    off = (side - size) // 2
    return FacePatch(scale_pixels(_crop(image, off, off, size)), source_id, False)


@dataclass(frozen=True)
class AugmentDraw:
    dy: int = 0
    dx: int = 0
    flip: bool = False
    angle: float = 0.0


def sample_augmentation(rng: np.random.Generator, jitter: int = 4, flip_prob: float = 0.5,
                        max_rotation: float = 5.0) -> AugmentDraw:
    dy, dx = rng.integers(-jitter, jitter + 1, size=2)
    flip = bool(rng.random() < flip_prob)
    angle = float(rng.uniform(-max_rotation, max_rotation)) if max_rotation > 0 else 0.0
    return AugmentDraw(int(dy), int(dx), flip, angle)


def apply_augmentation(image: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    side = image.shape[-1]
    if image.shape[1:] != (ALIGNED_SIDE, ALIGNED_SIDE):
        raise GeometryError(f"augmentation expects a {ALIGNED_SIDE}x{ALIGNED_SIDE} face, got {image.shape}")
    img = image.astype(np.float32)
    if draw.angle:
        img = ndimage.rotate(img, draw.angle, axes=(2, 1), reshape=False, order=1, mode="nearest")
    off = (side - PATCH_SIDE) // 2
    patch = _crop(img, off + draw.dy, off + draw.dx, PATCH_SIDE)
    if draw.flip:
        patch = patch[..., ::-1]
    return np.clip(scale_pixels(np.ascontiguousarray(patch)), -1.0, 1.0)


def augment(image: np.ndarray, rng: np.random.Generator, **kwargs) -> np.ndarray:
    """Random crop jitter, horizontal flip and slight rotation of an aligned 120x120 face."""
    return apply_augmentation(image, sample_augmentation(rng, **kwargs))
