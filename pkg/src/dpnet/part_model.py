"""The learnable head: part matrix U, classifier V, and the forward pass.

Checkpoint format (little-endian): magic ``DPCK`` | version u32=1 | P u32 |
D u32 | C u32 | q u32 | P*D float64 (U, row-major) | C*P float64 (V,
row-major) | trailer_len u32 | JSON trailer. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError
from .numerics import NORM_EPS, l2_normalize, matvec, matmul, softmax
from .rng import Xoshiro256StarStar, derive_seed

CKPT_MAGIC = b"DPCK"
CKPT_VERSION = 1


@dataclass
class PartModel:
    u: np.ndarray  # (P, D) part vectors, one per row
    v: np.ndarray  # (C, P) classifier weights
    parts_per_class: int
    num_classes: int
    descriptor_dim: int

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        self.v = np.asarray(self.v, dtype=np.float64)
        p, d = self.u.shape
        c, p2 = self.v.shape
        if p2 != p:
            raise ContractError(f"U has {p} parts but V has {p2} columns")
        if c != self.num_classes or d != self.descriptor_dim:
            raise ContractError("model dimensions disagree with declared shapes")
        if p < 1:
            raise ContractError("model needs at least one part")
        if not (np.isfinite(self.u).all() and np.isfinite(self.v).all()):
            raise ContractError("model weights must be finite")

    @property
    def num_parts(self) -> int:
        return self.u.shape[0]


@dataclass
class ForwardTrace:
    """Every intermediate of one forward pass, kept for backprop."""

    x: np.ndarray  # (D, R) region descriptors
    s: np.ndarray  # (P, R) part/region scores
    argmax_r: np.ndarray  # (P,) winning region per part (lowest index on ties)
    b_raw: np.ndarray  # (P,) max-pooled scores
    b: np.ndarray  # (P,) L2-normalized bag of parts
    logits: np.ndarray  # (C,)
    o: np.ndarray  # (C,) class probabilities


def score(model: PartModel, x: np.ndarray) -> np.ndarray:
    """S = U x X; s[p, r] is the match of part p against region r."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] != model.descriptor_dim:
        raise ContractError(
            f"descriptor matrix must be {model.descriptor_dim} x R, got {x.shape}"
        )
    return matmul(model.u, x)


def bag_of_parts(
    s: np.ndarray, eps: float = NORM_EPS
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-wise max pool then L2 normalization; ties go to the lowest index."""
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 2 or s.size == 0:
        raise ContractError(f"score matrix must be a nonempty 2-d array, got {s.shape}")
    argmax_r = np.argmax(s, axis=1)
    b_raw = s[np.arange(s.shape[0]), argmax_r]
    b = l2_normalize(b_raw, eps)
    return b_raw, argmax_r, b


def predict(model: PartModel, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """logits = V x b and o = softmax(logits)."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape != (model.num_parts,):
        raise ContractError(f"bag must have length {model.num_parts}, got {b.shape}")
    logits = matvec(model.v, b)
    return logits, softmax(logits)


def forward(model: PartModel, x: np.ndarray, eps: float = NORM_EPS) -> ForwardTrace:
    """Compose score -> bag_of_parts -> predict into a full trace."""
    s = score(model, x)
    b_raw, argmax_r, b = bag_of_parts(s, eps)
    logits, o = predict(model, b)
    return ForwardTrace(
        x=np.asarray(x, dtype=np.float64),
        s=s,
        argmax_r=argmax_r,
        b_raw=b_raw,
        b=b,
        logits=logits,
        o=o,
    )


def init_u_from_descriptors(
    columns: np.ndarray, num_parts: int, seed: int
) -> np.ndarray:
    """Warm-start parts from L2-normalized descriptors drawn from the data.

    `columns` is (D, N). Falls back to unit Gaussian rows when the pool has
    fewer distinct columns than parts.
    """
    d, n = columns.shape
    rng = Xoshiro256StarStar(derive_seed(seed, "init_u"))
    if n >= num_parts:
        chosen: list[int] = []
        seen: set[int] = set()
        while len(chosen) < num_parts:
            idx = rng.next_below(n)
            if idx not in seen:
                seen.add(idx)
                chosen.append(idx)
        rows = [l2_normalize(columns[:, i]) for i in chosen]
        return np.stack(rows, axis=0)
    rows = []
    for _ in range(num_parts):
        g = np.array(rng.gaussians(d))
        rows.append(l2_normalize(g))
    return np.stack(rows, axis=0)


def spherical_kmeans_rows(
    columns: np.ndarray, k: int, rng: Xoshiro256StarStar, iters: int = 15
) -> np.ndarray:
    """k diverse unit directions from descriptor columns (D, N).

    k-means++ seeding on cosine distance followed by Lloyd iterations with
    renormalized centroids. Deterministic given the generator state. Used to
    warm-start each class's parts on mutually distinct recurring directions;
    a uniformly random draw tends to start all of a class's parts near the
    same dominant direction, which the optimizer never unmixes.
    """
    n = columns.shape[1]
    if n < k:
        d = columns.shape[0]
        return np.stack([l2_normalize(np.array(rng.gaussians(d))) for _ in range(k)])
    norms = np.maximum(np.linalg.norm(columns, axis=0, keepdims=True), NORM_EPS)
    cols = columns / norms
    centers = [cols[:, rng.next_below(n)].copy()]
    for _ in range(k - 1):
        sims = np.stack([c @ cols for c in centers], axis=0).max(axis=0)
        dist2 = np.maximum(1.0 - sims, 0.0) ** 2
        total = float(dist2.sum())
        if total <= 0.0:
            centers.append(cols[:, rng.next_below(n)].copy())
            continue
        pick = rng.next_double() * total
        idx = int(np.searchsorted(np.cumsum(dist2), pick))
        centers.append(cols[:, min(idx, n - 1)].copy())
    centers_arr = np.stack(centers, axis=0)
    for _ in range(iters):
        assign = np.argmax(centers_arr @ cols, axis=0)
        for j in range(k):
            members = cols[:, assign == j]
            if members.shape[1] == 0:
                centers_arr[j] = cols[:, rng.next_below(n)]
            else:
                centers_arr[j] = l2_normalize(members.sum(axis=1))
    return centers_arr


def init_v(
    num_classes: int,
    num_parts: int,
    parts_per_class: int,
    class_specific: bool,
    seed: int,
    sigma: float = 0.01,
    block_scale: float = 1.0,
) -> np.ndarray:
    """Class-block init (each class's own parts weighted) or plain Gaussian.

    `block_scale` sets the initial logit scale. The bag is unit-norm and the
    optimizer's per-coordinate travel is bounded by lr x steps, so the block
    value, not training, determines the reachable softmax confidence.
    """
    if class_specific:
        if num_parts != parts_per_class * num_classes:
            raise ContractError(
                f"class-specific init needs P == q*C, got P={num_parts}, "
                f"q={parts_per_class}, C={num_classes}"
            )
        v = np.zeros((num_classes, num_parts))
        for c in range(num_classes):
            v[c, c * parts_per_class : (c + 1) * parts_per_class] = block_scale
        return v
    rng = Xoshiro256StarStar(derive_seed(seed, "init_v"))
    g = np.array(rng.gaussians(num_classes * num_parts))
    return sigma * g.reshape(num_classes, num_parts)


def save_checkpoint(model: PartModel, path: str | os.PathLike, trailer: dict) -> None:
    """Write the model plus a JSON trailer (class names, config echo, ...)."""
    p, d = model.u.shape
    c = model.v.shape[0]
    blob = json.dumps(trailer, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(struct.pack("<4sIIIII", CKPT_MAGIC, CKPT_VERSION, p, d, c, model.parts_per_class))
        f.write(np.ascontiguousarray(model.u).tobytes())
        f.write(np.ascontiguousarray(model.v).tobytes())
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[PartModel, dict]:
    with open(path, "rb") as f:
        raw = f.read()
    head = struct.calcsize("<4sIIIII")
    if len(raw) < head:
        raise FormatError(f"{path}: truncated checkpoint header")
    magic, version, p, d, c, q = struct.unpack_from("<4sIIIII", raw)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CKPT_MAGIC!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    offset = head
    need = (p * d + c * p) * 8 + 4
    if len(raw) < offset + need:
        raise FormatError(f"{path}: truncated checkpoint payload")
    u = np.frombuffer(raw, dtype="<f8", count=p * d, offset=offset).reshape(p, d).copy()
    offset += p * d * 8
    v = np.frombuffer(raw, dtype="<f8", count=c * p, offset=offset).reshape(c, p).copy()
    offset += c * p * 8
    (trailer_len,) = struct.unpack_from("<I", raw, offset)
    offset += 4
    if len(raw) != offset + trailer_len:
        raise FormatError(f"{path}: truncated checkpoint trailer")
    try:
        trailer = json.loads(raw[offset:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed checkpoint trailer: {exc}") from exc
    model = PartModel(
        u=u, v=v, parts_per_class=q, num_classes=c, descriptor_dim=d
    )
    return model, trailer
