"""Synthetic datasets with planted part structure.

Each class owns a few mutually orthonormal "true part" directions. Images
are noise grids with a handful of cells replaced by a noisy copy of one of
the class's parts. Files use the standard feature-map format, so the whole
pipeline (sampling, pooling, training, stats) runs on them unchanged.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .feature_store import FeatureMap, ManifestEntry, save_manifest, write_feature_map
from .rng import Xoshiro256StarStar, derive_seed

# Synthetic grids pretend to come from a stride-32 backbone.
_CELL_PX = 32


@dataclass(frozen=True)
class SynthSpec:
    num_classes: int = 5
    q_true: int = 3
    descriptor_dim: int = 16
    grid_h: int = 8
    grid_w: int = 8
    train_per_class: int = 40
    test_per_class: int = 20
    planted: int = 6
    noise_sigma: float = 0.15
    seed: int = 7

    def __post_init__(self):
        if self.num_classes * self.q_true > self.descriptor_dim:
            raise ContractError(
                f"need C*q_true <= D for orthogonal parts, got "
                f"{self.num_classes}*{self.q_true} > {self.descriptor_dim}"
            )
        if self.planted > self.grid_h * self.grid_w:
            raise ContractError("more planted cells than grid cells")
        if min(self.num_classes, self.q_true, self.descriptor_dim, self.grid_h,
               self.grid_w, self.train_per_class, self.test_per_class, self.planted) < 1:
            raise ContractError("all spec counts must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        return cls(**d)


def true_parts(spec: SynthSpec) -> np.ndarray:
    """(C*q_true, D) orthonormal rows, class c owning rows [c*q, (c+1)*q)."""
    rng = Xoshiro256StarStar(derive_seed(spec.seed, "parts"))
    n = spec.num_classes * spec.q_true
    d = spec.descriptor_dim
    rows = np.array(rng.gaussians(n * d)).reshape(n, d)
    # Modified Gram-Schmidt with one re-orthogonalization pass.
    for i in range(n):
        for _ in range(2):
            for j in range(i):
                rows[i] -= np.dot(rows[i], rows[j]) * rows[j]
        norm = np.sqrt(np.sum(rows[i] * rows[i]))
        if norm < 1e-8:
            raise ContractError("degenerate random basis; change the seed")
        rows[i] /= norm
    return rows


def _make_image(
    spec: SynthSpec, parts: np.ndarray, label: int, image_id: str
) -> FeatureMap:
    rng = Xoshiro256StarStar(derive_seed(spec.seed, "image", image_id))
    h, w, d = spec.grid_h, spec.grid_w, spec.descriptor_dim
    data = spec.noise_sigma * np.array(rng.gaussians(h * w * d)).reshape(h, w, d)
    # Partial Fisher-Yates draw of `planted` distinct cells.
    cells = list(range(h * w))
    for i in range(spec.planted):
        j = i + rng.next_below(len(cells) - i)
        cells[i], cells[j] = cells[j], cells[i]
    for cell in cells[: spec.planted]:
        part_row = label * spec.q_true + rng.next_below(spec.q_true)
        data[cell // w, cell % w, :] += parts[part_row]
    # Feature files hold float32; keep the in-memory map exactly representable.
    data = data.astype(np.float32).astype(np.float64)
    return FeatureMap(image_id=image_id, data=data, image_px=(h * _CELL_PX, w * _CELL_PX))


def generate(spec: SynthSpec, out_dir: str | os.PathLike) -> dict[str, str]:
    """Write train/test feature files, manifests, and the ground-truth parts.

    Returns the paths of the two manifests and the ground-truth JSON.
    """
    out_dir = os.fspath(out_dir)
    parts = true_parts(spec)
    paths = {}
    for split, per_class in (("train", spec.train_per_class), ("test", spec.test_per_class)):
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        entries = []
        for label in range(spec.num_classes):
            for i in range(per_class):
                image_id = f"{split}_c{label}_{i:03d}"
                fm = _make_image(spec, parts, label, image_id)
                fname = f"{image_id}.dpfm"
                write_feature_map(fm, os.path.join(split_dir, fname))
                entries.append(
                    ManifestEntry(
                        image_id=image_id,
                        path=os.path.join(split, fname),
                        label=label,
                        class_name=f"class_{label}",
                    )
                )
        manifest_path = os.path.join(out_dir, f"{split}.json")
        save_manifest(entries, manifest_path)
        paths[split] = manifest_path
    truth_path = os.path.join(out_dir, "ground_truth.json")
    truth = {
        "num_classes": spec.num_classes,
        "q_true": spec.q_true,
        "parts": [row.tolist() for row in parts],
    }
    with open(truth_path, "w", encoding="utf-8") as f:
        json.dump(truth, f)
        f.write("\n")
    paths["ground_truth"] = truth_path
    return paths
