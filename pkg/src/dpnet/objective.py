"""Loss terms and hand-derived gradients for the part head.

The combined objective is cross-entropy plus three optional penalties:
pairwise part alignment (kept positive so minimizing it spreads parts out),
column entropy of the softmaxed score matrix, and an L1 push on classifier
weight sitting outside each class's own block of parts. Gradients are
analytic and checked against central finite differences in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError
from .numerics import (
    NORM_EPS,
    column_softmax,
    l2_norm,
    matmul,
    matvec,
    normalize_rows,
    normalize_rows_backward,
)
from .part_model import ForwardTrace, PartModel

CS_MODE_L1 = "l1_abs"
CS_MODE_RAW = "raw_sum"


@dataclass
class LossWeights:
    lambda1: float = 1e-2  # part alignment penalty
    lambda2: float = 1e-3  # assignment entropy
    lambda3: float = 1e-3  # class-specific weight mass
    enable_orth: bool = True
    enable_assign: bool = True
    enable_cs: bool = True
    cs_mode: str = CS_MODE_L1
    assign_normalized_by_r: bool = False

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.cs_mode not in (CS_MODE_L1, CS_MODE_RAW):
            raise ConfigError(f"unknown cs_mode '{self.cs_mode}'")

    @classmethod
    def disabled(cls) -> "LossWeights":
        return cls(lambda1=0.0, lambda2=0.0, lambda3=0.0,
                   enable_orth=False, enable_assign=False, enable_cs=False)


@dataclass
class LossBreakdown:
    cce: float
    orth: float
    assign: float
    cs: float
    total: float
    du: np.ndarray = field(repr=False)  # (P, D), gradient of `total`
    dv: np.ndarray = field(repr=False)  # (C, P), gradient of `total`


def cce(o: np.ndarray, y: int) -> tuple[float, np.ndarray]:
    """Cross-entropy -ln o_y and its gradient with respect to the logits."""
    o = np.asarray(o, dtype=np.float64)
    if not 0 <= y < o.shape[0]:
        raise ContractError(f"label {y} out of range for {o.shape[0]} classes")
    value = -np.log(o[y])
    grad_logits = o.copy()
    grad_logits[y] -= 1.0
    return float(value), grad_logits


def orth_penalty(u: np.ndarray, eps: float = NORM_EPS) -> tuple[float, np.ndarray]:
    """Mean squared pairwise alignment of unit-normalized part vectors.

    Zero exactly when normalized rows are pairwise orthogonal. The gradient
    flows through the row normalization.
    """
    u = np.asarray(u, dtype=np.float64)
    p = u.shape[0]
    if p == 1:
        return 0.0, np.zeros_like(u)
    normed, norms = normalize_rows(u, eps)
    gram = matmul(normed, normed.T)
    off = gram.copy()
    np.fill_diagonal(off, 0.0)
    value = float(np.sum(off * off)) / (p * p)
    d_normed = (4.0 / (p * p)) * matmul(off, normed)
    du = normalize_rows_backward(d_normed, normed, norms, eps)
    return value, du


def assign_penalty(
    u: np.ndarray,
    x: np.ndarray,
    normalized_by_r: bool = False,
    eps: float = NORM_EPS,
) -> tuple[float, np.ndarray]:
    """Summed column entropy of softmax(U_hat x X), with U_hat row-normalized.

    Low entropy means each region commits to one part. 0*ln 0 counts as 0.
    """
    u = np.asarray(u, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if u.shape[1] != x.shape[0]:
        raise ContractError(f"assign shapes disagree: U is {u.shape}, X is {x.shape}")
    r = x.shape[1]
    normed, norms = normalize_rows(u, eps)
    a = column_softmax(matmul(normed, x))
    logs = np.where(a > 0.0, np.log(np.where(a > 0.0, a, 1.0)), 0.0)
    col_entropy = -np.sum(a * logs, axis=0)
    value = float(np.sum(col_entropy))
    # d entropy / d pre-softmax z: -a * (ln a + H_col)
    dz = -a * (logs + col_entropy[None, :])
    if normalized_by_r:
        value /= r
        dz = dz / r
    d_normed = matmul(dz, x.T)
    du = normalize_rows_backward(d_normed, normed, norms, eps)
    return value, du


def cs_penalty(v: np.ndarray, q: int, mode: str = CS_MODE_L1) -> tuple[float, np.ndarray]:
    """Weight mass outside each class's own block of q parts.

    Default is the L1 of off-block entries; `raw_sum` keeps the signed sum.
    """
    v = np.asarray(v, dtype=np.float64)
    c, p = v.shape
    if q < 1 or q * c != p:
        raise ContractError(f"V of shape {v.shape} does not split into {c} blocks of {q}")
    if mode not in (CS_MODE_L1, CS_MODE_RAW):
        raise ConfigError(f"unknown cs_mode '{mode}'")
    if c == 1:
        return 0.0, np.zeros_like(v)
    off_block = np.ones((c, p), dtype=bool)
    for i in range(c):
        off_block[i, i * q : (i + 1) * q] = False
    scale = 1.0 / (p * (c - 1))
    if mode == CS_MODE_L1:
        value = scale * float(np.sum(np.abs(v[off_block])))
        dv = np.where(off_block, scale * np.sign(v), 0.0)
    else:
        value = scale * float(np.sum(v[off_block]))
        dv = np.where(off_block, scale, 0.0)
    return value, dv


def cce_backward(
    model: PartModel, trace: ForwardTrace, grad_logits: np.ndarray, eps: float = NORM_EPS
) -> tuple[np.ndarray, np.ndarray]:
    """Backpropagate a logits gradient to (dU, dV) through the forward trace.

    The max-pool subgradient routes entirely to the recorded argmax region.
    """
    dv = grad_logits[:, None] * trace.b[None, :]
    db = matvec(model.v.T, grad_logits)
    n = l2_norm(trace.b_raw)
    if n > eps:
        db_raw = (db - float(np.sum(db * trace.b)) * trace.b) / n
    else:
        db_raw = db
    # dS is nonzero only at (p, argmax_r[p]); contract it against X directly.
    du = db_raw[:, None] * trace.x[:, trace.argmax_r].T
    return du, dv


def total_loss(
    model: PartModel,
    trace: ForwardTrace,
    y: int,
    weights: LossWeights,
    eps: float = NORM_EPS,
) -> LossBreakdown:
    """Weighted sum of the enabled terms plus the combined (dU, dV)."""
    cce_val, grad_logits = cce(trace.o, y)
    du, dv = cce_backward(model, trace, grad_logits, eps)

    orth_val = 0.0
    if weights.enable_orth:
        orth_val, du_orth = orth_penalty(model.u, eps)
        if weights.lambda1 != 0.0:
            du = du + weights.lambda1 * du_orth

    assign_val = 0.0
    if weights.enable_assign:
        assign_val, du_assign = assign_penalty(
            model.u, trace.x, weights.assign_normalized_by_r, eps
        )
        if weights.lambda2 != 0.0:
            du = du + weights.lambda2 * du_assign

    cs_val = 0.0
    if weights.enable_cs:
        cs_val, dv_cs = cs_penalty(model.v, model.parts_per_class, weights.cs_mode)
        if weights.lambda3 != 0.0:
            dv = dv + weights.lambda3 * dv_cs

    total = (
        cce_val
        + weights.lambda1 * orth_val
        + weights.lambda2 * assign_val
        + weights.lambda3 * cs_val
    )
    return LossBreakdown(
        cce=cce_val, orth=orth_val, assign=assign_val, cs=cs_val, total=total, du=du, dv=dv
    )


@dataclass
class BatchResult:
    """Mini-batch means of the loss terms, combined gradients, and hits."""

    cce: float
    orth: float
    assign: float
    cs: float
    du: np.ndarray
    dv: np.ndarray
    correct: int

    def total(self, weights: LossWeights) -> float:
        return (
            self.cce
            + weights.lambda1 * self.orth
            + weights.lambda2 * self.assign
            + weights.lambda3 * self.cs
        )


def batch_loss_and_grads(
    model: PartModel,
    xs: list[np.ndarray],
    ys: np.ndarray,
    weights: LossWeights,
    eps: float = NORM_EPS,
) -> BatchResult:
    """Mini-batch version of `total_loss`, vectorized across images.

    All images must share the same region count. Gradients are averaged over
    the batch; summations run over concatenated region columns in dataset
    index order, so results are bit-deterministic (and agree with the
    per-image path up to float reassociation).
    """
    nb = len(xs)
    r = xs[0].shape[1]
    if any(x.shape != xs[0].shape for x in xs):
        raise ContractError("batched images must share one descriptor shape")
    p = model.num_parts
    x_cat = np.concatenate(xs, axis=1)  # (D, nb*r)
    s_cat = matmul(model.u, x_cat)  # (P, nb*r)
    s3 = s_cat.reshape(p, nb, r)
    b_raw = s3.max(axis=2)  # (P, nb)
    argmax = s3.argmax(axis=2)  # (P, nb)
    norms = np.sqrt(np.sum(b_raw * b_raw, axis=0))  # (nb,)
    safe = np.where(norms > eps, norms, 1.0)
    b_all = b_raw / safe[None, :]
    logits = matmul(model.v, b_all)  # (C, nb)
    o = column_softmax(logits)
    idx = np.arange(nb)
    cce_mean = float(np.sum(-np.log(o[ys, idx]))) / nb
    correct = int(np.sum(np.argmax(o, axis=0) == ys))

    dlogits = o.copy()
    dlogits[ys, idx] -= 1.0
    dv = matmul(dlogits, b_all.T) / nb
    db_all = matmul(model.v.T, dlogits)  # (P, nb)
    dots = np.sum(db_all * b_all, axis=0)
    db_raw = (db_all - dots[None, :] * b_all) / safe[None, :]
    db_raw = np.where((norms > eps)[None, :], db_raw, db_all)
    du = np.zeros_like(model.u)
    for i in range(nb):  # dataset index order
        du += db_raw[:, i, None] * xs[i][:, argmax[:, i]].T
    du /= nb

    orth_val = 0.0
    if weights.enable_orth:
        orth_val, du_orth = orth_penalty(model.u, eps)
        if weights.lambda1 != 0.0:
            du = du + weights.lambda1 * du_orth

    assign_mean = 0.0
    if weights.enable_assign:
        # Z = U_hat x X is a row rescaling of the scores already computed.
        normed_u, norms_u = normalize_rows(model.u, eps)
        z = s_cat / np.where(norms_u > eps, norms_u, 1.0)[:, None]
        a = column_softmax(z)
        logs = np.where(a > 0.0, np.log(np.where(a > 0.0, a, 1.0)), 0.0)
        col_entropy = -np.sum(a * logs, axis=0)
        assign_mean = float(np.sum(col_entropy)) / nb
        dz = -a * (logs + col_entropy[None, :])
        if weights.assign_normalized_by_r:
            assign_mean /= r
            dz = dz / r
        d_normed = matmul(dz, np.ascontiguousarray(x_cat.T)) / nb
        du_assign = normalize_rows_backward(d_normed, normed_u, norms_u, eps)
        if weights.lambda2 != 0.0:
            du = du + weights.lambda2 * du_assign

    cs_val = 0.0
    if weights.enable_cs:
        cs_val, dv_cs = cs_penalty(model.v, model.parts_per_class, weights.cs_mode)
        if weights.lambda3 != 0.0:
            dv = dv + weights.lambda3 * dv_cs

    return BatchResult(
        cce=cce_mean, orth=orth_val, assign=assign_mean, cs=cs_val,
        du=du, dv=dv, correct=correct,
    )
