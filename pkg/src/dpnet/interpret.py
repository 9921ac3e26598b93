"""Interpretability statistics: part importance, frequency, discriminative
power, top regions, and heatmap explanations.

Part frequency counts how many classes rank a part among their most
activated ones; discriminative power divides the summed per-class
contribution by a log of that frequency, rewarding parts that fire for few
classes (the TF-IDF idea carried over to parts).
"""

from __future__ import annotations

import heapq
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DataError
from .feature_store import (
    DatasetManifest,
    FeatureMap,
    Region,
    image_seed,
    read_feature_map,
    region_to_pixels,
    sample_and_pool,
)
from .numerics import matmul
from .part_model import ForwardTrace, PartModel, forward
from .trainer import TrainConfig

DPC_MODE_LOG1P = "log1p"  # d = sum / ln(1 + f)
DPC_MODE_LITERAL = "literal"  # d = sum / ln(f); f == 1 rows left unscaled


@dataclass
class DatasetBags:
    """Per-image normalized bags plus labels, in manifest order."""

    image_ids: list[str]
    labels: np.ndarray  # (n,)
    bags: np.ndarray  # (n, P)
    num_classes: int


@dataclass
class PartStats:
    freq: np.ndarray  # (P,) classes counting the part among their top-K
    dpc: np.ndarray  # (C, P) discriminative power d(p, c)
    top_k_per_class: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "freq": self.freq.tolist(),
                "dpc": [row.tolist() for row in self.dpc],
                "top_k_per_class": self.top_k_per_class,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "PartStats":
        data = json.loads(text)
        return cls(
            freq=np.asarray(data["freq"], dtype=np.int64),
            dpc=np.asarray(data["dpc"], dtype=np.float64),
            top_k_per_class=int(data["top_k_per_class"]),
        )


def part_importance(trace: ForwardTrace, model: PartModel, c: int, p: int) -> float:
    """Contribution v[c,p] * b[p] of one part to one class's logit."""
    if not 0 <= c < model.num_classes:
        raise ContractError(f"class {c} out of range")
    if not 0 <= p < model.num_parts:
        raise ContractError(f"part {p} out of range")
    return float(model.v[c, p] * trace.b[p])


def collect_bags(
    model: PartModel,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    threads: int = 1,
) -> DatasetBags:
    """Forward every image with its fixed per-image regions; keep the bags."""
    if len(manifest) == 0:
        raise DataError("dataset is empty")

    def one(entry):
        fm = read_feature_map(entry.path)
        rs = sample_and_pool(fm, cfg.num_regions, image_seed(cfg.seed, entry.image_id), cfg.sampler)
        return forward(model, rs.x).b

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            bags = list(pool.map(one, manifest.entries))
    else:
        bags = [one(e) for e in manifest.entries]
    return DatasetBags(
        image_ids=[e.image_id for e in manifest.entries],
        labels=manifest.labels(),
        bags=np.stack(bags, axis=0),
        num_classes=manifest.num_classes,
    )


def part_frequency(model: PartModel, bags: DatasetBags, top_k_per_class: int) -> np.ndarray:
    """f(p): number of classes with p among their top-K mean activations.

    Per-class activation of part p is the mean of v[c,p] * b_p over the
    class's images (mean, so class imbalance does not distort popularity).
    Every part counts at least once.
    """
    counts = np.bincount(bags.labels, minlength=bags.num_classes)
    if (counts == 0).any():
        raise DataError(f"classes without any image: {np.flatnonzero(counts == 0).tolist()}")
    p = model.num_parts
    k = min(top_k_per_class, p)
    freq = np.zeros(p, dtype=np.int64)
    for c in range(bags.num_classes):
        mask = bags.labels == c
        mean_act = model.v[c] * bags.bags[mask].mean(axis=0)
        ranked = sorted(range(p), key=lambda i: (-mean_act[i], i))
        freq[ranked[:k]] += 1
    return np.maximum(freq, 1)


def discriminative_power(
    model: PartModel,
    bags: DatasetBags,
    freq: np.ndarray,
    mode: str = DPC_MODE_LOG1P,
) -> np.ndarray:
    """d(p,c): class-summed part contributions, frequency-discounted.

    The default denominator is ln(1 + f(p)); ln(f(p)) is zero exactly for
    parts popular in a single class, so the literal form is kept behind a
    flag with f == 1 rows reported unscaled.
    """
    c_count, p_count = model.v.shape
    dpc = np.zeros((c_count, p_count))
    for c in range(c_count):
        mask = bags.labels == c
        if not mask.any():
            continue
        dpc[c] = model.v[c] * bags.bags[mask].sum(axis=0)
    if mode == DPC_MODE_LOG1P:
        denom = np.log1p(freq.astype(np.float64))
    elif mode == DPC_MODE_LITERAL:
        denom = np.where(freq > 1, np.log(np.maximum(freq, 2).astype(np.float64)), 1.0)
    else:
        raise ContractError(f"unknown discriminative-power mode '{mode}'")
    return dpc / denom[None, :]


def compute_stats(
    model: PartModel,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    top_k_per_class: int | None = None,
    mode: str = DPC_MODE_LOG1P,
    threads: int = 1,
) -> PartStats:
    k = top_k_per_class if top_k_per_class is not None else model.parts_per_class
    bags = collect_bags(model, manifest, cfg, threads)
    freq = part_frequency(model, bags, k)
    dpc = discriminative_power(model, bags, freq, mode)
    return PartStats(freq=freq, dpc=dpc, top_k_per_class=k)


def top_regions_for_part(
    model: PartModel,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    p: int,
    k: int,
) -> list[tuple[str, Region, float]]:
    """The k highest-scoring (image, region) pairs for one part, descending.

    Ties break lexicographically on (image_id, region index).
    """
    if not 0 <= p < model.num_parts:
        raise ContractError(f"part {p} out of range")
    if k < 1:
        raise ContractError("k must be >= 1")

    def entries():
        for entry in manifest.entries:
            fm = read_feature_map(entry.path)
            rs = sample_and_pool(
                fm, cfg.num_regions, image_seed(cfg.seed, entry.image_id), cfg.sampler
            )
            row = part_scores(model, p, rs.x)
            for ridx, region in enumerate(rs.regions):
                yield (-row[ridx], entry.image_id, ridx, region)

    best = heapq.nsmallest(k, entries())
    return [(image_id, region, float(-neg)) for neg, image_id, ridx, region in best]


def part_scores(model: PartModel, p: int, x: np.ndarray) -> np.ndarray:
    """One part's scores against every column of X (one row of S)."""
    return matmul(model.u[p : p + 1, :], x).ravel()


@dataclass
class Explanation:
    image_id: str
    class_index: int
    parts: list[tuple[int, float]]  # (part, d(p, c)), descending d
    selections: list[dict]  # part, region, pixel rect, score
    heat: np.ndarray  # (H, W) in [0, 1]

    def to_json(self) -> str:
        return json.dumps(
            {
                "image_id": self.image_id,
                "class_index": self.class_index,
                "parts": [{"part": p, "d": d} for p, d in self.parts],
                "regions": self.selections,
                "heat": [row.tolist() for row in self.heat],
            },
            sort_keys=True,
        )


def explain(
    model: PartModel,
    stats: PartStats,
    fm: FeatureMap,
    c: int,
    n_parts: int,
    m_regions: int,
    cfg: TrainConfig,
) -> Explanation:
    """Heatmap evidence: top-N parts for the class, top-M regions per part.

    Region scores accumulate into the grid cells they cover; the grid is
    then min-max normalized (all-equal grids become 1 on covered cells).
    """
    if n_parts < 1 or m_regions < 1:
        raise ContractError("N and M must be >= 1")
    if not 0 <= c < model.num_classes:
        raise ContractError(f"class {c} out of range")
    rs = sample_and_pool(fm, cfg.num_regions, image_seed(cfg.seed, fm.image_id), cfg.sampler)
    s = forward(model, rs.x).s
    d_row = stats.dpc[c]
    ranked_parts = sorted(range(model.num_parts), key=lambda p: (-d_row[p], p))
    chosen_parts = ranked_parts[: min(n_parts, model.num_parts)]

    heat = np.zeros((fm.height, fm.width))
    covered = np.zeros((fm.height, fm.width), dtype=bool)
    selections = []
    for p in chosen_parts:
        ranked_regions = sorted(
            range(len(rs.regions)), key=lambda ridx: (-s[p, ridx], ridx)
        )
        for ridx in ranked_regions[: min(m_regions, len(rs.regions))]:
            region = rs.regions[ridx]
            score = float(s[p, ridx])
            heat[region.h0 : region.h1, region.w0 : region.w1] += score
            covered[region.h0 : region.h1, region.w0 : region.w1] = True
            selections.append(
                {
                    "part": int(p),
                    "region": list(region.as_tuple()),
                    "pixels": list(region_to_pixels(region, fm)),
                    "score": score,
                }
            )
    mn, mx = float(heat.min()), float(heat.max())
    if mx > mn:
        heat = (heat - mn) / (mx - mn)
    else:
        heat = covered.astype(np.float64)
    return Explanation(
        image_id=fm.image_id,
        class_index=c,
        parts=[(int(p), float(d_row[p])) for p in chosen_parts],
        selections=selections,
        heat=heat,
    )


def write_heat_pgm(expl: Explanation, image_px: tuple[int, int], path: str | os.PathLike) -> None:
    """Render the heat grid as a P5 PGM at the original pixel size
    (nearest-neighbor upsampling, maxval 255)."""
    img_h, img_w = image_px
    grid_h, grid_w = expl.heat.shape
    rows = (np.arange(img_h) * grid_h) // img_h
    cols = (np.arange(img_w) * grid_w) // img_w
    img = np.rint(expl.heat[np.ix_(rows, cols)] * 255.0).astype(np.uint8)
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(f"P5\n{img_w} {img_h}\n255\n".encode("ascii"))
        f.write(img.tobytes())
    os.replace(tmp, path)
