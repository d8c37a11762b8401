"""
Loss stack for supervised contrastive training.

Two class-complete batches give embeddings E1, E2 whose row k belongs to class k,
so the target of every similarity matrix is the identity labeling. The
contrastive loss applies a row and a column focal loss to S11, S12 and S22;
S21 = S12^T is already covered by the column loss on S12.
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from modules.data_types import LossConfig
from modules.errors import ContractError, DimensionError
from modules.tensor_core import (
    ComputationRecord,
    Tensor,
    add,
    affine,
    clamp_max,
    exp,
    gather_rows,
    l2_normalize_rows,
    log_softmax_rows,
    matmul,
    mean,
    mul,
    power,
    scale,
    transpose,
)


@dataclass
class SimilarityTriple:
    s11: Tensor
    s12: Tensor
    s22: Tensor
    temperature: float

    def matrices(self):
        return (self.s11, self.s12, self.s22)


def focal_loss_mean(
    logits: Tensor,
    labels: Sequence[int],
    gamma: float,
    record: Optional[ComputationRecord] = None,
) -> Tensor:
    """Mean over rows of -(1 - p_y)^gamma * log(p_y), p = softmax(row)."""
    if logits.data.ndim != 2:
        raise DimensionError(f"focal loss expects [n, k] logits, got {logits.shape}")
    n, k = logits.shape
    if n < 1:
        raise ContractError("focal loss needs at least one row")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise DimensionError(f"{labels.size} labels for {n} rows")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ContractError(f"labels must lie in [0, {k})")
    if gamma < 0:
        raise ContractError(f"focal gamma must be non-negative, got {gamma}")

    log_p = log_softmax_rows(logits, record=record)
    log_p_y = gather_rows(log_p, labels, record=record)
    if gamma == 0:
        return affine(mean(log_p_y, record=record), -1.0, record=record)
    p_y = exp(log_p_y, record=record)
    modulator = power(affine(p_y, -1.0, 1.0, record=record), gamma, record=record)
    weighted = mul(modulator, log_p_y, record=record)
    return affine(mean(weighted, record=record), -1.0, record=record)


def similarity_triple(
    e1: Tensor,
    e2: Tensor,
    log_temp: Tensor,
    temp_max: float = 100.0,
    record: Optional[ComputationRecord] = None,
) -> SimilarityTriple:
    if e1.shape != e2.shape or e1.data.ndim != 2:
        raise DimensionError(f"embedding batches differ: {e1.shape} vs {e2.shape}")
    if e1.shape[0] < 2:
        raise ContractError("similarity matrices need at least two classes")

    n1 = l2_normalize_rows(e1, record=record)
    n2 = l2_normalize_rows(e2, record=record)
    t = clamp_max(exp(log_temp, record=record), temp_max, record=record)

    s11 = scale(matmul(n1, transpose(n1, record=record), record=record), t, record=record)
    s12 = scale(matmul(n1, transpose(n2, record=record), record=record), t, record=record)
    s22 = scale(matmul(n2, transpose(n2, record=record), record=record), t, record=record)
    return SimilarityTriple(s11, s12, s22, temperature=t.item())


def _check_identity_labels(y_gt: Sequence[int], k: int):
    y = np.asarray(y_gt)
    if y.shape != (k,) or not np.array_equal(y, np.arange(k)):
        raise ContractError(
            "contrastive targets must be the identity labeling [0..K-1] of class-complete batches"
        )


def contrastive_loss(
    triple: SimilarityTriple,
    y_gt: Sequence[int],
    gamma: float,
    record: Optional[ComputationRecord] = None,
) -> Tensor:
    """Sum of row and column focal losses over S11, S12 and S22."""
    _check_identity_labels(y_gt, triple.s12.shape[0])

    total: Optional[Tensor] = None
    for s in triple.matrices():
        for logits in (s, transpose(s, record=record)):
            term = focal_loss_mean(logits, y_gt, gamma, record=record)
            total = term if total is None else add(total, term, record=record)
    return total


def classification_loss(
    p1: Tensor,
    p2: Tensor,
    y_gt: Sequence[int],
    gamma: float,
    record: Optional[ComputationRecord] = None,
) -> Tensor:
    if p1.shape != p2.shape:
        raise DimensionError(f"logit batches differ: {p1.shape} vs {p2.shape}")
    return add(
        focal_loss_mean(p1, y_gt, gamma, record=record),
        focal_loss_mean(p2, y_gt, gamma, record=record),
        record=record,
    )


def total_loss(
    l_con: Tensor,
    l_cls: Tensor,
    cfg: LossConfig,
    record: Optional[ComputationRecord] = None,
) -> Tensor:
    """lambda1 * L_con + lambda2 * L_cls"""
    return add(
        affine(l_con, cfg.lambda1, record=record),
        affine(l_cls, cfg.lambda2, record=record),
        record=record,
    )
