"""Feature-map files, dataset manifests, region sampling and pooling.

File format (little-endian): magic ``DPFM`` | version u32=1 | H u32 | W u32 |
D u32 | img_h u32 | img_w u32 | id_len u32 | image id (UTF-8) | H*W*D float32
payload in (h, w, d) order. Payload values are widened to float64 on load.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DataError, FormatError
from .numerics import NORM_EPS, l2_normalize
from .rng import Xoshiro256StarStar, derive_seed

MAGIC = b"DPFM"
VERSION = 1

# R per the small-dataset / large-dataset training profiles.
REGIONS_SMALL_PROFILE = 500
REGIONS_LARGE_PROFILE = 100


@dataclass
class FeatureMap:
    """One image's backbone activation grid plus its pixel geometry."""

    image_id: str
    data: np.ndarray  # (H, W, D) float64
    image_px: tuple[int, int]  # original (height, width) in pixels

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ContractError(f"feature map must be H x W x D with all dims >= 1, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ContractError(f"feature map '{self.image_id}' contains non-finite values")
        if self.image_px[0] < 1 or self.image_px[1] < 1:
            raise ContractError(f"image_px must be positive, got {self.image_px}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def depth(self) -> int:
        return self.data.shape[2]


def write_feature_map(fm: FeatureMap, path: str | os.PathLike) -> None:
    ident = fm.image_id.encode("utf-8")
    h, w, d = fm.data.shape
    header = struct.pack(
        "<4sIIIIIII", MAGIC, VERSION, h, w, d, fm.image_px[0], fm.image_px[1], len(ident)
    )
    payload = np.ascontiguousarray(fm.data, dtype=np.float32)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(ident)
        f.write(payload.tobytes())
    os.replace(tmp, path)


def read_feature_map(path: str | os.PathLike) -> FeatureMap:
    with open(path, "rb") as f:
        raw = f.read()
    head_size = struct.calcsize("<4sIIIIIII")
    if len(raw) < head_size:
        raise FormatError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, h, w, d, img_h, img_w, id_len = struct.unpack_from("<4sIIIIIII", raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}, expected {VERSION}")
    offset = head_size
    if len(raw) < offset + id_len:
        raise FormatError(f"{path}: truncated image id")
    image_id = raw[offset : offset + id_len].decode("utf-8")
    offset += id_len
    expected = h * w * d * 4
    if len(raw) != offset + expected:
        raise FormatError(
            f"{path}: truncated payload, expected {expected} bytes, found {len(raw) - offset}"
        )
    data = np.frombuffer(raw, dtype="<f4", count=h * w * d, offset=offset)
    if not np.isfinite(data).all():
        raise FormatError(f"{path}: payload contains non-finite values")
    data = data.astype(np.float64).reshape(h, w, d)
    if min(h, w, d) < 1:
        raise FormatError(f"{path}: degenerate grid {h}x{w}x{d}")
    return FeatureMap(image_id=image_id, data=data, image_px=(img_h, img_w))


@dataclass(frozen=True)
class Region:
    """Rectangle on the feature grid; [h0, h1) x [w0, w1), area >= 1 cell."""

    h0: int
    w0: int
    h1: int
    w1: int

    def __post_init__(self):
        if not (0 <= self.h0 < self.h1 and 0 <= self.w0 < self.w1):
            raise ContractError(f"degenerate region {self}")

    def cells(self) -> int:
        return (self.h1 - self.h0) * (self.w1 - self.w0)

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.h0, self.w0, self.h1, self.w1)


@dataclass(frozen=True)
class SamplerConfig:
    """Size distribution of sampled regions, as fractions of the grid."""

    min_frac: float = 0.25
    max_frac: float = 1.0
    normalize_descriptors: bool = True

    def __post_init__(self):
        if not (0.0 < self.min_frac <= self.max_frac <= 1.0):
            raise ConfigError(
                f"sampler fractions must satisfy 0 < min_frac <= max_frac <= 1, got "
                f"min_frac={self.min_frac}, max_frac={self.max_frac}"
            )

    def side_range(self, extent: int) -> tuple[int, int]:
        lo = max(1, math.ceil(self.min_frac * extent))
        hi = max(lo, math.floor(self.max_frac * extent))
        return lo, hi


@dataclass
class RegionSet:
    """Sampled regions of one image and their pooled descriptor columns."""

    regions: list[Region]
    x: np.ndarray  # (D, R), column r describes region r
    seed: int


def sample_regions(
    h: int, w: int, r: int, seed: int, cfg: SamplerConfig | None = None
) -> list[Region]:
    """Draw `r` rectangles; deterministic in (h, w, r, seed, cfg).

    Heights and widths are uniform over the configured fraction range,
    positions uniform over valid placements. Draw order per region is
    height, width, top, left.
    """
    if h < 1 or w < 1 or r < 1:
        raise ContractError(f"grid {h}x{w} and region count {r} must be positive")
    cfg = cfg or SamplerConfig()
    h_lo, h_hi = cfg.side_range(h)
    w_lo, w_hi = cfg.side_range(w)
    rng = Xoshiro256StarStar(seed)
    out = []
    for _ in range(r):
        rh = rng.next_int(h_lo, h_hi)
        rw = rng.next_int(w_lo, w_hi)
        h0 = rng.next_below(h - rh + 1)
        w0 = rng.next_below(w - rw + 1)
        out.append(Region(h0, w0, h0 + rh, w0 + rw))
    return out


def pool_regions(
    fm: FeatureMap,
    regions: list[Region],
    normalize_descriptors: bool = True,
    seed: int = 0,
    eps: float = NORM_EPS,
) -> RegionSet:
    """Average-pool each region's cells into a descriptor column.

    Cell accumulation runs in row-major order over a fixed memory layout,
    so the result is bit-deterministic.
    """
    h, w, _ = fm.data.shape
    cols = []
    for region in regions:
        if region.h1 > h or region.w1 > w:
            raise ContractError(f"region {region} out of bounds for grid {h}x{w}")
        patch = fm.data[region.h0 : region.h1, region.w0 : region.w1, :]
        col = patch.reshape(-1, fm.depth).sum(axis=0) / region.cells()
        if normalize_descriptors:
            col = l2_normalize(col, eps)
        cols.append(col)
    x = np.stack(cols, axis=1)
    return RegionSet(regions=list(regions), x=x, seed=seed)


def sample_and_pool(
    fm: FeatureMap, r: int, seed: int, cfg: SamplerConfig | None = None
) -> RegionSet:
    cfg = cfg or SamplerConfig()
    regions = sample_regions(fm.height, fm.width, r, seed, cfg)
    return pool_regions(fm, regions, cfg.normalize_descriptors, seed=seed)


def region_to_pixels(region: Region, fm: FeatureMap) -> tuple[int, int, int, int]:
    """Map grid coordinates to pixels, rounding outward and clamping."""
    img_h, img_w = fm.image_px
    sh = img_h / fm.height
    sw = img_w / fm.width
    y0 = max(0, math.floor(region.h0 * sh))
    x0 = max(0, math.floor(region.w0 * sw))
    y1 = min(img_h, math.ceil(region.h1 * sh))
    x1 = min(img_w, math.ceil(region.w1 * sw))
    return (y0, x0, y1, x1)


def image_seed(dataset_seed: int, image_id: str, epoch: int | None = None) -> int:
    """Per-image sampling seed; mixing in `epoch` resamples across epochs."""
    if epoch is None:
        return derive_seed(dataset_seed, image_id)
    return derive_seed(dataset_seed, image_id, epoch)


@dataclass
class ManifestEntry:
    image_id: str
    path: str
    label: int
    class_name: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    num_classes: int
    class_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def require_all_classes(self) -> None:
        counts = np.bincount(self.labels(), minlength=self.num_classes)
        missing = np.flatnonzero(counts == 0)
        if missing.size:
            raise DataError(f"classes without any image: {missing.tolist()}")


def save_manifest(entries: list[ManifestEntry], path: str | os.PathLike) -> None:
    rows = [
        {"id": e.image_id, "path": e.path, "label": e.label, "class_name": e.class_name}
        for e in entries
    ]
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as f:
        json.dump(rows, f, indent=1)
        f.write("\n")
    os.replace(tmp, path)


def load_manifest(path: str | os.PathLike) -> DatasetManifest:
    try:
        with open(path, "r", encoding="utf-8") as f:
            rows = json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(rows, list) or not rows:
        raise DataError(f"{path}: manifest must be a nonempty JSON array")
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    for i, row in enumerate(rows):
        try:
            entry = ManifestEntry(
                image_id=str(row["id"]),
                path=os.path.join(base, row["path"]) if not os.path.isabs(row["path"]) else row["path"],
                label=int(row["label"]),
                class_name=str(row["class_name"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: entry {i} is malformed: {exc}") from exc
        entries.append(entry)
    labels = [e.label for e in entries]
    if min(labels) < 0:
        raise DataError(f"{path}: negative label found")
    num_classes = max(labels) + 1
    by_label: dict[int, str] = {}
    for e in entries:
        known = by_label.setdefault(e.label, e.class_name)
        if known != e.class_name:
            raise DataError(
                f"{path}: label {e.label} maps to both '{known}' and '{e.class_name}'"
            )
    names = [by_label.get(c, "") for c in range(num_classes)]
    present = [n for n in names if n]
    if len(set(present)) != len(present):
        raise DataError(f"{path}: class names are not unique across labels")
    ids = [e.image_id for e in entries]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate image ids")
    return DatasetManifest(entries=entries, num_classes=num_classes, class_names=names)
