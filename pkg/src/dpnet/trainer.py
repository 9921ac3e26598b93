"""Training loop: Adam updates, step-decay schedule, mega-batch regime.

The dataset is processed in "mega-batches" (large chunks loaded into memory
at once); each loaded chunk gets several full optimization passes before the
next chunk is loaded. Per-image gradients are accumulated in dataset index
order, so a run is bit-reproducible for any worker-thread count.
"""

from __future__ import annotations

import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Callable, Iterable

import numpy as np

from .errors import ConfigError, ContractError, DataError, TrainingError
from .feature_store import (
    DatasetManifest,
    SamplerConfig,
    image_seed,
    read_feature_map,
    sample_and_pool,
    REGIONS_SMALL_PROFILE,
)
from .objective import (
    LossWeights,
    assign_penalty,
    batch_loss_and_grads,
    cce,
    cce_backward,
    cs_penalty,
    orth_penalty,
)
from .part_model import (
    PartModel,
    forward,
    init_u_from_descriptors,
    init_v,
    spherical_kmeans_rows,
)
from .rng import Xoshiro256StarStar, derive_seed

_AUTO_MEGA_BATCH = 2048


U_INIT_KMEANS = "class_kmeans"
U_INIT_DESCRIPTORS = "random_descriptors"
V_INIT_BLOCKS = "class_blocks"
V_INIT_GAUSSIAN = "gaussian"


@dataclass
class TrainConfig:
    epochs: int = 40
    base_lr: float = 1e-3
    lr_decay_every: int = 10
    batch_level_epochs: int = 32
    mini_batch_size: int = 32
    mega_batch_images: int | None = None  # None: whole dataset, capped at 2048
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    q: int = 20  # parts per class (small-dataset profile; 10 for the large one)
    num_regions: int = REGIONS_SMALL_PROFILE
    resample_each_epoch: bool = True
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    checkpoint_every: int = 10
    u_init: str = U_INIT_KMEANS
    v_init: str = V_INIT_BLOCKS
    v_init_scale: float = 12.0

    def __post_init__(self):
        if self.epochs < 1 or self.mini_batch_size < 1 or self.base_lr <= 0:
            raise ConfigError("epochs and mini_batch_size must be >= 1 and base_lr > 0")
        if self.lr_decay_every < 1 or self.batch_level_epochs < 1:
            raise ConfigError("lr_decay_every and batch_level_epochs must be >= 1")
        if self.q < 1 or self.num_regions < 1:
            raise ConfigError("q and num_regions must be >= 1")
        if self.u_init not in (U_INIT_KMEANS, U_INIT_DESCRIPTORS):
            raise ConfigError(f"unknown u_init '{self.u_init}'")
        if self.v_init not in (V_INIT_BLOCKS, V_INIT_GAUSSIAN):
            raise ConfigError(f"unknown v_init '{self.v_init}'")
        if self.v_init_scale <= 0:
            raise ConfigError("v_init_scale must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "weights" in d and isinstance(d["weights"], dict):
            try:
                d["weights"] = LossWeights(**d["weights"])
            except TypeError as exc:
                raise ConfigError(f"bad weights block: {exc}") from exc
        if "sampler" in d and isinstance(d["sampler"], dict):
            try:
                d["sampler"] = SamplerConfig(**d["sampler"])
            except TypeError as exc:
                raise ConfigError(f"bad sampler block: {exc}") from exc
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad training config: {exc}") from exc

    @classmethod
    def from_json_file(cls, path: str | os.PathLike) -> "TrainConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(data)


@dataclass
class AdamState:
    m_u: np.ndarray
    v_u: np.ndarray
    m_v: np.ndarray
    v_v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def like(cls, model: PartModel) -> "AdamState":
        return cls(
            m_u=np.zeros_like(model.u),
            v_u=np.zeros_like(model.u),
            m_v=np.zeros_like(model.v),
            v_v=np.zeros_like(model.v),
        )


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step-decay learning rate: divided by 10 after each decay interval."""
    if not 0 <= epoch < cfg.epochs:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.base_lr * 10.0 ** (-(epoch // cfg.lr_decay_every))


def adam_step(
    model: PartModel, du: np.ndarray, dv: np.ndarray, state: AdamState, lr: float
) -> None:
    """One bias-corrected Adam update of (U, V) in place."""
    if not np.isfinite(du).all():
        raise TrainingError("non-finite gradient for U")
    if not np.isfinite(dv).all():
        raise TrainingError("non-finite gradient for V")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for param, grad, m, v in (
        (model.u, du, state.m_u, state.v_u),
        (model.v, dv, state.m_v, state.v_v),
    ):
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * (grad * grad)
        param -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    cce: float
    orth: float
    assign: float
    cs: float
    total: float
    train_acc: float


METRICS_HEADER = ["epoch", "lr", "cce", "orth", "assign", "cs", "total", "train_acc"]


def metrics_to_csv(rows: Iterable[EpochMetrics]) -> str:
    """CSV with full float64 round-trip formatting."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRICS_HEADER)
    for r in rows:
        writer.writerow(
            [r.epoch, repr(r.lr), repr(r.cce), repr(r.orth), repr(r.assign),
             repr(r.cs), repr(r.total), repr(r.train_acc)]
        )
    return buf.getvalue()


def write_metrics_csv(rows: Iterable[EpochMetrics], path: str | os.PathLike) -> None:
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(metrics_to_csv(rows))
    os.replace(tmp, path)


def _load_block(
    manifest: DatasetManifest,
    indices: list[int],
    cfg: TrainConfig,
    epoch: int | None,
    threads: int,
) -> list[np.ndarray]:
    """Load, sample, and pool one mega-batch; order follows `indices`."""

    def one(idx: int) -> np.ndarray:
        entry = manifest.entries[idx]
        fm = read_feature_map(entry.path)
        seed = image_seed(cfg.seed, entry.image_id, epoch)
        return sample_and_pool(fm, cfg.num_regions, seed, cfg.sampler).x

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            xs = list(pool.map(one, indices))
    else:
        xs = [one(i) for i in indices]
    d = xs[0].shape[0]
    for x, idx in zip(xs, indices):
        if x.shape[0] != d:
            raise DataError(
                f"inconsistent descriptor dim: '{manifest.entries[idx].image_id}' has "
                f"{x.shape[0]}, expected {d}"
            )
    return xs


def _mega_batches(n: int, cfg: TrainConfig) -> list[list[int]]:
    size = cfg.mega_batch_images if cfg.mega_batch_images else min(n, _AUTO_MEGA_BATCH)
    return [list(range(lo, min(lo + size, n))) for lo in range(0, n, size)]


def _shuffle(indices: list[int], seed: int) -> list[int]:
    rng = Xoshiro256StarStar(seed)
    out = list(indices)
    for i in range(len(out) - 1, 0, -1):
        j = rng.next_below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def init_model(
    manifest: DatasetManifest, cfg: TrainConfig, threads: int = 1
) -> PartModel:
    """Build the initial model from the first mega-batch's descriptors.

    Parts warm-start on the data manifold: either spherical k-means centers
    of each class's own descriptors (default) or uniformly drawn descriptor
    columns. The classifier starts on class blocks scaled by `v_init_scale`,
    or on small Gaussian noise.
    """
    first = _mega_batches(len(manifest), cfg)[0]
    epoch0 = 0 if cfg.resample_each_epoch else None
    xs = _load_block(manifest, first, cfg, epoch0, threads)
    labels = manifest.labels()
    c = manifest.num_classes
    p = cfg.q * c
    if cfg.u_init == U_INIT_KMEANS:
        rng = Xoshiro256StarStar(derive_seed(cfg.seed, "init_u"))
        blocks = []
        for cls in range(c):
            pool = np.concatenate(
                [x for x, i in zip(xs, first) if labels[i] == cls], axis=1
            )
            blocks.append(spherical_kmeans_rows(pool, cfg.q, rng))
        u = np.concatenate(blocks, axis=0)
    else:
        u = init_u_from_descriptors(np.concatenate(xs, axis=1), p, cfg.seed)
    v = init_v(
        c, p, cfg.q,
        class_specific=cfg.v_init == V_INIT_BLOCKS,
        seed=cfg.seed,
        block_scale=cfg.v_init_scale,
    )
    return PartModel(
        u=u, v=v, parts_per_class=cfg.q, num_classes=c, descriptor_dim=xs[0].shape[0]
    )


def train(
    manifest: DatasetManifest,
    cfg: TrainConfig,
    threads: int = 1,
    progress: Callable[[str], None] | None = None,
    checkpoint_callback: Callable[[int, PartModel], None] | None = None,
) -> tuple[PartModel, list[EpochMetrics]]:
    """Run the full schedule and return the final model plus per-epoch metrics."""
    if len(manifest) == 0:
        raise DataError("training manifest is empty")
    manifest.require_all_classes()
    labels = manifest.labels()
    model = init_model(manifest, cfg, threads)
    state = AdamState.like(model)
    weights = cfg.weights
    blocks = _mega_batches(len(manifest), cfg)
    metrics: list[EpochMetrics] = []

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        cce_sum = assign_sum = orth_sum = cs_sum = 0.0
        seen = 0
        steps = 0
        correct = 0
        for block_no, block in enumerate(blocks):
            epoch_tag = epoch if cfg.resample_each_epoch else None
            xs = _load_block(manifest, block, cfg, epoch_tag, threads)
            for pass_no in range(cfg.batch_level_epochs):
                order = _shuffle(
                    list(range(len(block))),
                    derive_seed(cfg.seed, "shuffle", epoch, block_no, pass_no),
                )
                for lo in range(0, len(order), cfg.mini_batch_size):
                    batch = order[lo : lo + cfg.mini_batch_size]
                    nb = len(batch)
                    ys = labels[[block[local] for local in batch]]
                    result = batch_loss_and_grads(
                        model, [xs[local] for local in batch], ys, weights
                    )
                    if not (np.isfinite(result.du).all() and np.isfinite(result.dv).all()):
                        _raise_naming_term(model, xs, labels, block, batch, weights)
                    adam_step(model, result.du, result.dv, state, lr)
                    cce_sum += result.cce * nb
                    assign_sum += result.assign * nb
                    correct += result.correct
                    orth_sum += result.orth
                    cs_sum += result.cs
                    seen += nb
                    steps += 1
        row = EpochMetrics(
            epoch=epoch,
            lr=lr,
            cce=cce_sum / seen,
            orth=orth_sum / steps,
            assign=assign_sum / seen,
            cs=cs_sum / steps,
            total=(
                cce_sum / seen
                + weights.lambda1 * orth_sum / steps
                + weights.lambda2 * assign_sum / seen
                + weights.lambda3 * cs_sum / steps
            ),
            train_acc=correct / seen,
        )
        metrics.append(row)
        if progress:
            progress(
                f"epoch {epoch}: lr={lr:g} total={row.total:.6f} train_acc={row.train_acc:.4f}"
            )
        if checkpoint_callback and (epoch + 1) % cfg.checkpoint_every == 0:
            checkpoint_callback(epoch, model)
    return model, metrics


def _raise_naming_term(model, xs, labels, block, batch, weights) -> None:
    """Re-derive per-term gradients to name the one that went non-finite."""
    for local in batch:
        trace = forward(model, xs[local])
        y = int(labels[block[local]])
        _, grad_logits = cce(trace.o, y)
        du_c, dv_c = cce_backward(model, trace, grad_logits)
        if not (np.isfinite(du_c).all() and np.isfinite(dv_c).all()):
            raise TrainingError("non-finite gradient in term 'cce'")
        if weights.enable_assign:
            _, du_a = assign_penalty(model.u, trace.x, weights.assign_normalized_by_r)
            if not np.isfinite(du_a).all():
                raise TrainingError("non-finite gradient in term 'assign'")
    if weights.enable_orth:
        _, du_o = orth_penalty(model.u)
        if not np.isfinite(du_o).all():
            raise TrainingError("non-finite gradient in term 'orth'")
    if weights.enable_cs:
        _, dv_s = cs_penalty(model.v, model.parts_per_class, weights.cs_mode)
        if not np.isfinite(dv_s).all():
            raise TrainingError("non-finite gradient in term 'cs'")
    raise TrainingError("non-finite combined gradient")


@dataclass
class EvalResult:
    accuracy: float
    per_class_correct: np.ndarray
    per_class_total: np.ndarray
    predictions: list[int]

    def per_class_accuracy(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.where(
                self.per_class_total > 0, self.per_class_correct / self.per_class_total, 0.0
            )


def evaluate(
    model: PartModel,
    manifest: DatasetManifest,
    cfg: TrainConfig,
    threads: int = 1,
) -> EvalResult:
    """Top-1 accuracy with each image's fixed (epoch-independent) regions."""
    if len(manifest) == 0:
        raise DataError("evaluation manifest is empty")
    if manifest.num_classes > model.num_classes:
        raise DataError(
            f"manifest has {manifest.num_classes} classes but model knows {model.num_classes}"
        )
    xs = _load_block(manifest, list(range(len(manifest))), cfg, None, threads)
    if xs[0].shape[0] != model.descriptor_dim:
        raise DataError(
            f"descriptor dim {xs[0].shape[0]} does not match model dim {model.descriptor_dim}"
        )
    labels = manifest.labels()
    correct = np.zeros(model.num_classes, dtype=np.int64)
    totals = np.zeros(model.num_classes, dtype=np.int64)
    predictions = []
    for x, y in zip(xs, labels):
        trace = forward(model, x)
        pred = int(np.argmax(trace.o))  # ties resolve to the lowest class index
        predictions.append(pred)
        totals[y] += 1
        if pred == y:
            correct[y] += 1
    return EvalResult(
        accuracy=float(correct.sum() / totals.sum()),
        per_class_correct=correct,
        per_class_total=totals,
        predictions=predictions,
    )
