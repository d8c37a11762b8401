"""
Classification metrics and embedding diagnostics.

Predictions are the row argmax with ties going to the lowest class index.
Recall and one-vs-rest AUC are macro averages over the classes that can be
scored on the given sample.
"""

from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import rankdata

from modules.data import DatasetContainer
from modules.data_types import ConfusedPair, MetricsReport, SeparationStats
from modules.errors import ContractError, DimensionError
from modules.model import ModelParams, predict
from modules.tensor_core import NORMALIZE_EPS, Tensor, softmax_rows
from modules.utils import derive_seed, to_json_file_pretty, write_csv

ArrayLike = Union[Tensor, np.ndarray]

EXACT_PAIR_LIMIT = 2000
SAMPLED_PAIRS = 2_000_000
PAIR_CHUNK = 250_000
TOP_CONFUSED = 5

PCA_TOLERANCE = 1e-9
PCA_MAX_ITERATIONS = 10_000


def _as_array(x: ArrayLike) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _check_labels(labels: Sequence[int], n: int, n_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise DimensionError(f"{y.size} labels for {n} rows")
    if y.size and not np.issubdtype(y.dtype, np.integer):
        raise ContractError("labels must be integers")
    y = y.astype(np.int64)
    if np.any(y < 0) or np.any(y >= n_classes):
        raise ContractError(f"labels must lie in [0, {n_classes})")
    return y


def top_confused_pairs(confusion: np.ndarray, limit: int = TOP_CONFUSED) -> List[ConfusedPair]:
    """Most frequent off-diagonal (true, predicted) cells, largest count first."""
    off = confusion.copy()
    np.fill_diagonal(off, 0)
    cells = [(int(off[i, j]), i, j) for i, j in zip(*np.nonzero(off))]
    cells.sort(key=lambda c: (-c[0], c[1], c[2]))
    return [ConfusedPair(true_class=i, predicted_class=j, count=c) for c, i, j in cells[:limit]]


def confusion_and_accuracy(
    logits: ArrayLike,
    labels: Sequence[int],
    class_names: Optional[List[str]] = None,
) -> MetricsReport:
    scores = _as_array(logits)
    if scores.ndim != 2:
        raise DimensionError(f"expected [n, K] logits, got shape {scores.shape}")
    n, k = scores.shape
    if n < 1:
        raise ContractError("metrics need at least one sample")
    y = _check_labels(labels, n, k)

    predicted = np.argmax(scores, axis=1)
    confusion = np.zeros((k, k), dtype=np.int64)
    np.add.at(confusion, (y, predicted), 1)

    true_counts = confusion.sum(axis=1)
    per_class: List[Optional[float]] = [
        float(confusion[c, c]) / float(true_counts[c]) if true_counts[c] > 0 else None
        for c in range(k)
    ]
    present = [r for r in per_class if r is not None]

    return MetricsReport(
        accuracy=float(np.trace(confusion)) / n,
        macro_recall=float(np.mean(present)),
        confusion=confusion.tolist(),
        per_class_recall=per_class,
        n_samples=n,
        class_names=list(class_names) if class_names else [str(c) for c in range(k)],
        top_confused_pairs=top_confused_pairs(confusion),
    )


def macro_ovr_auc(scores: ArrayLike, labels: Sequence[int]) -> float:
    """
    Mean over scorable classes of the Mann-Whitney AUC of column k,
    U / (n_pos * n_neg) with ties counted as one half.
    """
    s = _as_array(scores)
    if s.ndim != 2:
        raise DimensionError(f"expected [n, K] scores, got shape {s.shape}")
    n, k = s.shape
    if n < 2:
        raise ContractError("AUC needs at least two samples")
    y = _check_labels(labels, n, k)

    aucs = []
    for c in range(k):
        positive = y == c
        n_pos = int(positive.sum())
        n_neg = n - n_pos
        if n_pos == 0 or n_neg == 0:
            continue
        ranks = rankdata(s[:, c])
        u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
        aucs.append(u / (n_pos * n_neg))
    if not aucs:
        raise ContractError("no class has both positive and negative samples")
    return float(np.mean(aucs))


def _unit_rows(e: np.ndarray) -> np.ndarray:
    norms = np.sqrt(np.sum(e * e, axis=1, keepdims=True) + NORMALIZE_EPS)
    return e / norms


def _exact_pair_sums(unit: np.ndarray, y: np.ndarray) -> Tuple[float, int, float, int]:
    gram = np.clip(unit @ unit.T, -1.0, 1.0)
    iu, ju = np.triu_indices(len(y), k=1)
    cos = gram[iu, ju]
    same = y[iu] == y[ju]
    return float(cos[same].sum()), int(same.sum()), float(cos[~same].sum()), int((~same).sum())


def _sampled_pair_sums(
    unit: np.ndarray, y: np.ndarray, seed: int
) -> Tuple[float, int, float, int]:
    rng = np.random.default_rng(derive_seed(seed))
    n = len(y)
    intra_sum = inter_sum = 0.0
    n_intra = n_inter = 0
    remaining = SAMPLED_PAIRS
    while remaining > 0:
        size = min(PAIR_CHUNK, remaining)
        i = rng.integers(0, n, size=size)
        # offset in [1, n) keeps j uniform over the other rows
        j = (i + rng.integers(1, n, size=size)) % n
        cos = np.clip(np.sum(unit[i] * unit[j], axis=1), -1.0, 1.0)
        same = y[i] == y[j]
        intra_sum += float(cos[same].sum())
        inter_sum += float(cos[~same].sum())
        n_intra += int(same.sum())
        n_inter += int((~same).sum())
        remaining -= size
    return intra_sum, n_intra, inter_sum, n_inter


def embedding_separation(
    embeddings: ArrayLike, labels: Sequence[int], seed: int = 0
) -> SeparationStats:
    """Mean cosine similarity of same-class and different-class pairs, no self-pairs."""
    e = _as_array(embeddings)
    if e.ndim != 2:
        raise DimensionError(f"expected [n, D] embeddings, got shape {e.shape}")
    n = e.shape[0]
    if n < 2:
        raise ContractError("separation needs at least two embeddings")
    y = np.asarray(labels, dtype=np.int64)
    if y.shape != (n,):
        raise DimensionError(f"{y.size} labels for {n} rows")

    unit = _unit_rows(e)
    if n <= EXACT_PAIR_LIMIT:
        intra_sum, n_intra, inter_sum, n_inter = _exact_pair_sums(unit, y)
    else:
        intra_sum, n_intra, inter_sum, n_inter = _sampled_pair_sums(unit, y, seed)
    if n_intra == 0 or n_inter == 0:
        raise ContractError("separation needs both same-class and different-class pairs")

    intra = intra_sum / n_intra
    inter = inter_sum / n_inter
    return SeparationStats(
        mean_intra_cos=intra,
        mean_inter_cos=inter,
        separation_gap=intra - inter,
        n_intra_pairs=n_intra,
        n_inter_pairs=n_inter,
    )


def _leading_eigenvector(matrix: np.ndarray) -> Tuple[np.ndarray, float]:
    d = matrix.shape[0]
    v = np.linspace(1.0, 2.0, d)
    v /= np.linalg.norm(v)
    for _ in range(PCA_MAX_ITERATIONS):
        w = matrix @ v
        norm = np.linalg.norm(w)
        if norm <= PCA_TOLERANCE:
            return np.zeros(d), 0.0
        w /= norm
        converged = np.linalg.norm(w - v) < PCA_TOLERANCE
        v = w
        if converged:
            break
    eigenvalue = float(v @ matrix @ v)
    nonzero = np.flatnonzero(np.abs(v) > PCA_TOLERANCE)
    if nonzero.size and v[nonzero[0]] < 0:
        v = -v
    return v, max(eigenvalue, 0.0)


def pca_project_2d(embeddings: ArrayLike) -> Tuple[np.ndarray, Tuple[float, float]]:
    """
    Project onto the top two covariance eigenvectors.

    Power iteration from a fixed start vector with deflation, so the result is
    deterministic; returns ([n, 2] coordinates, explained-variance fractions).
    """
    e = _as_array(embeddings)
    if e.ndim != 2:
        raise DimensionError(f"expected [n, D] embeddings, got shape {e.shape}")
    n, d = e.shape
    if n < 3 or d < 2:
        raise ContractError(f"PCA needs n >= 3 and D >= 2, got n={n}, D={d}")

    centered = e - e.mean(axis=0)
    cov = centered.T @ centered / (n - 1)
    total = float(np.trace(cov))
    if total <= 0.0:
        return np.zeros((n, 2)), (0.0, 0.0)

    v1, l1 = _leading_eigenvector(cov)
    v2, l2 = _leading_eigenvector(cov - l1 * np.outer(v1, v1))
    if l2 <= PCA_TOLERANCE * total:
        v2, l2 = np.zeros(d), 0.0

    coords = np.stack([centered @ v1, centered @ v2], axis=1)
    return coords, (l1 / total, l2 / total)


def evaluate_model(
    ds: DatasetContainer, params: ModelParams, seed: int = 0
) -> Tuple[MetricsReport, np.ndarray]:
    """Full report for a model on a dataset; also returns the embeddings."""
    embeddings, logits = predict(ds.images, params)
    report = confusion_and_accuracy(logits, ds.labels, ds.class_names)
    scores = softmax_rows(Tensor(logits, dtype=np.float64)).data
    report.macro_ovr_auc = macro_ovr_auc(scores, ds.labels)
    report.separation = embedding_separation(embeddings, ds.labels, seed)
    return report, embeddings


def write_report_json(report: MetricsReport, path: str):
    to_json_file_pretty(path, report.model_dump())


def write_confusion_csv(report: MetricsReport, path: str):
    """The integer grid alone, one row per true class, columns in predicted-class order."""
    write_csv(path, None, report.confusion)


def write_projection_csv(path: str, coords: np.ndarray, labels: Sequence[int]):
    write_csv(
        path,
        ("x", "y", "label"),
        ((float(x), float(y), int(label)) for (x, y), label in zip(coords, labels)),
    )


def write_embeddings_csv(path: str, embeddings: np.ndarray, labels: Sequence[int]):
    header = ["label"] + [f"e{i}" for i in range(embeddings.shape[1])]
    write_csv(
        path,
        header,
        ([int(label)] + [float(v) for v in row] for row, label in zip(embeddings, labels)),
    )
