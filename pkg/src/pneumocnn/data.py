"""Manifests, PGM/PPM codec, preprocessing, augmentation, splitting and synthetic data.

Manifest grammar, one record per line (``#`` lines ignored)::

    path,label[,age_months[,key=value;key=value]]

``label`` is NORMAL/PNEUMONIA (any case) or 0/1.
"""
from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError, DecodeError, ParseError
from .ontology import apply_mappings, case_fields
from .tensor import PCG32

NORMAL, PNEUMONIA = 0, 1
LABEL_NAMES = {NORMAL: "NORMAL", PNEUMONIA: "PNEUMONIA"}
_LABEL_TOKENS = {"NORMAL": NORMAL, "0": NORMAL, "PNEUMONIA": PNEUMONIA, "1": PNEUMONIA}
IMAGE_SIZE = 150
SPLIT_STREAM = 7
SYNTH_STREAM = 11


@dataclass(frozen=True)
class SampleRecord:
    image_path: str
    label: int
    age_months: int | None = None
    metadata: tuple = ()

    def __post_init__(self):
        if self.label not in (NORMAL, PNEUMONIA):
            raise ValueError(f"label must be 0 or 1, got {self.label}")
        if self.age_months is not None and self.age_months < 0:
            raise ValueError("age_months must be non-negative")


@dataclass
class Manifest:
    records: list = field(default_factory=list)
    source: str | None = None

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def resolve(self, record: SampleRecord) -> Path:
        """Image path, taken relative to the manifest's directory when not absolute."""
        path = Path(record.image_path)
        if not path.is_absolute() and self.source is not None:
            path = Path(self.source).parent / path
        return path

    def labels(self) -> np.ndarray:
        return np.array([r.label for r in self.records], dtype=np.int64)


@dataclass(frozen=True)
class AugmentConfig:
    rotation_max_degrees: float = 15.0
    horizontal_flip_prob: float = 0.5

    def validate(self) -> "AugmentConfig":
        if not 0.0 <= self.rotation_max_degrees <= 45.0:
            raise ConfigError("rotation_max_degrees must lie in [0, 45]")
        if not 0.0 <= self.horizontal_flip_prob <= 1.0:
            raise ConfigError("horizontal_flip_prob must lie in [0, 1]")
        return self


# --- manifest ------------------------------------------------------------

def load_manifest(text: str, source: str | None = None) -> Manifest:
    records = []
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",", 3)]
        if len(parts) < 2 or not parts[0]:
            raise ParseError(f"expected 'path,label[,age[,meta]]', got {line!r}", lineno)
        path, label_tok = parts[0], parts[1].upper()
        if label_tok not in _LABEL_TOKENS:
            raise ParseError(f"unknown label {parts[1]!r}", lineno)
        age = None
        if len(parts) > 2 and parts[2]:
            if not re.fullmatch(r"\d+", parts[2]):
                raise ParseError(f"age_months must be a non-negative integer, got {parts[2]!r}", lineno)
            age = int(parts[2])
        meta = []
        if len(parts) > 3 and parts[3]:
            for item in parts[3].split(";"):
                item = item.strip()
                if not item:
                    continue
                key, sep, value = item.partition("=")
                if not sep or not key.strip():
                    raise ParseError(f"metadata item {item!r} is not key=value", lineno)
                meta.append((key.strip(), value.strip()))
        if path in seen:
            raise ParseError(f"duplicate path {path!r} (first on line {seen[path]})", lineno)
        seen[path] = lineno
        records.append(SampleRecord(path, _LABEL_TOKENS[label_tok], age, tuple(meta)))
    return Manifest(records, source)


def read_manifest(path: str | os.PathLike) -> Manifest:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from exc
    except UnicodeDecodeError as exc:
        raise DataError(f"manifest {path} is not UTF-8 text") from exc
    return load_manifest(text, str(path))


def dump_manifest(manifest: Manifest | Sequence[SampleRecord]) -> str:
    lines = []
    for r in manifest:
        age = "" if r.age_months is None else str(r.age_months)
        meta = ";".join(f"{k}={v}" for k, v in r.metadata)
        lines.append(f"{r.image_path},{LABEL_NAMES[r.label]},{age},{meta}")
    return "".join(line + "\n" for line in lines)


# --- PGM / PPM -------------------------------------------------------------

def _pnm_header(data: bytes):
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DecodeError("malformed PNM header")
        fields.append(int(data[start:pos]))
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise DecodeError("malformed PNM header: missing separator before pixel data")
    return fields, pos + 1


def decode_image(data: bytes) -> np.ndarray:
    """Decode binary PGM (P5) or PPM (P6) with maxval 255 into a [C, H, W] float32 tensor."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise DecodeError(f"unsupported image magic {magic!r}; expected P5 or P6")
    channels = 1 if magic == b"P5" else 3
    (width, height, maxval), offset = _pnm_header(data)
    if width < 1 or height < 1:
        raise DecodeError(f"invalid image size {width}x{height}")
    if maxval != 255:
        raise DecodeError(f"only 8-bit images (maxval 255) are supported, got {maxval}")
    need = width * height * channels
    if len(data) - offset < need:
        raise DecodeError(f"truncated pixel data: {len(data) - offset} of {need} bytes")
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=offset)
    return pixels.reshape(height, width, channels).transpose(2, 0, 1).astype(np.float32)


def encode_image(img) -> bytes:
    """Inverse of ``decode_image``: 1 channel -> P5, 3 channels -> P6."""
    img = np.asarray(img)
    c, h, w = img.shape
    if c not in (1, 3):
        raise DecodeError(f"cannot encode {c}-channel image")
    magic = b"P5" if c == 1 else b"P6"
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8).transpose(1, 2, 0).tobytes()
    return magic + f"\n{w} {h}\n255\n".encode() + pixels


def read_image(path) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            return decode_image(fh.read())
    except OSError as exc:
        raise DecodeError(f"cannot read image {path}: {exc.strerror}") from exc


# --- preprocessing ---------------------------------------------------------

def _axis_coords(n_in, n_out):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(img, out_h: int = IMAGE_SIZE, out_w: int = IMAGE_SIZE) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping."""
    c, h, w = img.shape
    if min(h, w, out_h, out_w) < 1:
        raise ConfigError("image and target sizes must be positive")
    y0, y1, wy = _axis_coords(h, out_h)
    x0, x1, wx = _axis_coords(w, out_w)
    a = np.asarray(img, dtype=np.float64)
    top = a[:, y0][:, :, x0] * (1 - wx) + a[:, y0][:, :, x1] * wx
    bottom = a[:, y1][:, :, x0] * (1 - wx) + a[:, y1][:, :, x1] * wx
    out = top * (1 - wy)[:, None] + bottom * wy[:, None]
    return out.astype(np.float32)


def normalize(img) -> np.ndarray:
    return (np.asarray(img, dtype=np.float64) / 255.0).astype(np.float32)


def to_three_channels(img) -> np.ndarray:
    if img.shape[0] == 3:
        return img
    if img.shape[0] == 1:
        return np.repeat(img, 3, axis=0)
    raise DecodeError(f"expected 1 or 3 channels, got {img.shape[0]}")


def preprocess(img, size: int = IMAGE_SIZE) -> np.ndarray:
    """Decoded 0..255 image -> [3, size, size] float32 in [0, 1]."""
    out = normalize(resize_bilinear(to_three_channels(img), size, size))
    return np.clip(out, 0.0, 1.0)


def load_images(manifest: Manifest, size: int = IMAGE_SIZE):
    """Decode and preprocess every record; returns ``(images [n, 3, size, size], labels [n])``."""
    images = np.empty((len(manifest), 3, size, size), dtype=np.float32)
    for i, rec in enumerate(manifest):
        images[i] = preprocess(read_image(manifest.resolve(rec)), size)
    return images, manifest.labels()


# --- augmentation ----------------------------------------------------------

def flip_horizontal(img) -> np.ndarray:
    return np.ascontiguousarray(img[:, :, ::-1])


def rotate(img, degrees: float) -> np.ndarray:
    """Rotate counter-clockwise (as displayed) about the image centre.

    Inverse-mapped bilinear sampling; taps outside the image read as 0.
    """
    c, h, w = img.shape
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    sx = cx + dx * cos_t - dy * sin_t
    sy = cy + dx * sin_t + dy * cos_t
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0
    src = np.asarray(img, dtype=np.float64)
    out = np.zeros((c, h, w))
    for oy, ox, weight in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx),
                           (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        ys, xs = y0 + oy, x0 + ox
        ok = (ys >= 0) & (ys < h) & (xs >= 0) & (xs < w)
        out[:, ok] += weight[ok] * src[:, ys[ok], xs[ok]]
    return out.astype(img.dtype)


def augment(img, cfg: AugmentConfig, rng: PCG32) -> np.ndarray:
    """Random horizontal flip, then a random rotation in [-max, +max] degrees.

    Always consumes exactly two draws from ``rng``.
    """
    flip_draw = rng.random()
    angle = (2.0 * rng.random() - 1.0) * cfg.rotation_max_degrees
    out = img
    if flip_draw < cfg.horizontal_flip_prob:
        out = flip_horizontal(out)
    if angle != 0.0:
        out = rotate(out, angle)
    return out if out is not img else img.copy()


# --- splitting -------------------------------------------------------------

def _largest_remainder(n: int, ratios) -> list:
    quotas = [round(n * r, 9) for r in ratios]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(m: Manifest, ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Stratified (train, val, test) split: per-class seeded shuffle, contiguous slices.

    Each subset keeps the manifest's original record order.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be three positive numbers summing to 1, got {tuple(ratios)}")
    buckets: list[list[int]] = [[], [], []]
    for label in (NORMAL, PNEUMONIA):
        idx = [i for i, r in enumerate(m.records) if r.label == label]
        if len(idx) < 3:
            raise ConfigError(f"class {LABEL_NAMES[label]} has {len(idx)} samples; need at least 3")
        perm = PCG32(seed, SPLIT_STREAM + label).permutation(len(idx))
        shuffled = [idx[p] for p in perm]
        start = 0
        for b, count in enumerate(_largest_remainder(len(idx), ratios)):
            buckets[b] += shuffled[start:start + count]
            start += count
    return tuple(Manifest([m.records[i] for i in sorted(b)], m.source) for b in buckets)


# --- synthetic data ----------------------------------------------------------

def _ellipse(yy, xx, cy, cx, ry, rx):
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def _synth_pair(rng: PCG32, size: int):
    """Base (normal) image and an additive opacity layer, both float [size, size]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = 20.0 + 15.0 * rng.uniform(size * size).reshape(size, size)
    jitter = (rng.uniform(4) - 0.5) * 0.06 * size
    lungs = np.zeros((size, size), dtype=bool)
    for k, cx_frac in enumerate((0.3, 0.7)):
        lungs |= _ellipse(yy, xx, 0.5 * size + jitter[2 * k], cx_frac * size + jitter[2 * k + 1],
                          0.32 * size, 0.14 * size)
    base[lungs] += 90.0
    opacity = np.zeros((size, size))
    n_blotches = 3 + rng.below(3)
    for _ in range(n_blotches):
        u = rng.uniform(4)
        cy = (0.3 + 0.4 * u[0]) * size
        cx = (0.2 + 0.2 * u[1] + (0.4 if u[2] >= 0.5 else 0.0)) * size
        sigma = 0.05 * size
        opacity += (70.0 + 40.0 * u[3]) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma ** 2))
    return base, opacity


def _quantize(gray):
    g = np.clip(np.rint(gray), 0, 255).astype(np.uint8)
    return np.repeat(g[None], 3, axis=0)


def _synth_meta(rng: PCG32, label: int):
    age = 12 + rng.below(49)
    p_yes = 0.75 if label == PNEUMONIA else 0.25
    fever = "yes" if rng.random() < p_yes else "no"
    cough = "yes" if rng.random() < p_yes else "no"
    return age, (("fever", fever), ("cough", cough))


def synth_dataset(n_per_class: int, seed: int = 0, out_dir=None, size: int = 128):
    """Generate a separable two-class chest-film stand-in.

    Pair ``i`` shares one base image: the NORMAL member is the base, the
    PNEUMONIA member adds bright blotches inside the lung fields. Returns
    ``(manifest, images)`` with ``images`` mapping file name to a uint8
    [3, size, size] array; with ``out_dir`` the PPM files and
    ``manifest.txt`` are written there too.
    """
    if n_per_class < 1:
        raise ConfigError("n_per_class must be >= 1")
    normal, pneumonia, images = [], [], {}
    for i in range(n_per_class):
        rng = PCG32(seed, SYNTH_STREAM + i)
        base, opacity = _synth_pair(rng, size)
        for label, gray, bucket in ((NORMAL, base, normal), (PNEUMONIA, base + opacity, pneumonia)):
            name = f"{LABEL_NAMES[label].lower()}_{i:03d}.ppm"
            images[name] = _quantize(gray)
            age, meta = _synth_meta(rng, label)
            bucket.append(SampleRecord(name, label, age, meta))
    manifest = Manifest(normal + pneumonia)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for name, img in images.items():
            (out / name).write_bytes(encode_image(img))
        (out / "manifest.txt").write_text(dump_manifest(manifest))
        manifest.source = str(out / "manifest.txt")
    return manifest, images


def map_metadata_to_findings(rec: SampleRecord, mappings, concepts=None) -> frozenset:
    """Concepts whose mapping predicate holds on the record's age/metadata fields."""
    return apply_mappings(mappings, case_fields(rec), concepts)
