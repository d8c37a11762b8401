import numpy as np
import pytest

from modules.data import generate_synthetic_dataset
from modules.data_types import GeneratorSpec, ModelConfig
from modules.errors import ContractError
from modules.evaluation import (
    confusion_and_accuracy,
    embedding_separation,
    evaluate_model,
    macro_ovr_auc,
    pca_project_2d,
    write_confusion_csv,
    write_projection_csv,
)
from modules.model import init_params, predict
from modules.tensor_core import Tensor


def auc_oracle(scores: np.ndarray, labels: np.ndarray) -> float:
    aucs = []
    for c in range(scores.shape[1]):
        pos = scores[labels == c, c]
        neg = scores[labels != c, c]
        if len(pos) == 0 or len(neg) == 0:
            continue
        wins = np.sum(pos[:, None] > neg[None, :]) + 0.5 * np.sum(pos[:, None] == neg[None, :])
        aucs.append(wins / (len(pos) * len(neg)))
    return float(np.mean(aucs))


def separation_oracle(e: np.ndarray, labels: np.ndarray):
    unit = e / np.linalg.norm(e, axis=1, keepdims=True)
    intra, inter = [], []
    for i in range(len(e)):
        for j in range(len(e)):
            if i == j:
                continue
            cos = float(unit[i] @ unit[j])
            (intra if labels[i] == labels[j] else inter).append(cos)
    return np.mean(intra), np.mean(inter)


def test_perfect_logits_give_diagonal_confusion():
    labels = np.array([0, 1, 2, 2, 1])
    logits = np.eye(3)[labels] * 5.0
    report = confusion_and_accuracy(Tensor(logits), labels)
    assert report.accuracy == 1.0
    assert report.macro_recall == 1.0
    assert report.confusion == [[1, 0, 0], [0, 2, 0], [0, 0, 2]]
    assert report.top_confused_pairs == []


def test_constant_predictor_on_balanced_two_classes():
    labels = np.array([0, 1, 0, 1])
    logits = np.tile([1.0, 0.0], (4, 1))
    report = confusion_and_accuracy(logits, labels)
    assert report.accuracy == 0.5
    assert report.macro_recall == 0.5
    assert report.per_class_recall == [1.0, 0.0]


def test_confusion_matches_counting_oracle():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(50, 4))
    labels = rng.integers(0, 4, size=50)
    report = confusion_and_accuracy(logits, labels)

    expected = np.zeros((4, 4), dtype=int)
    for row, label in zip(logits, labels):
        expected[label, int(np.argmax(row))] += 1
    assert report.confusion == expected.tolist()
    assert sum(map(sum, report.confusion)) == report.n_samples == 50
    assert report.accuracy == np.trace(expected) / 50
    present = [expected[c, c] / expected[c].sum() for c in range(4) if expected[c].sum()]
    assert report.macro_recall == pytest.approx(np.mean(present))


def test_argmax_ties_go_to_lowest_index():
    rng = np.random.default_rng(1)
    for _ in range(50):
        k = int(rng.integers(2, 6))
        logits = np.zeros((3, k))
        report = confusion_and_accuracy(logits, [k - 1, 0, 0])
        assert [row[0] for row in report.confusion] == [
            sum(1 for label in [k - 1, 0, 0] if label == c) for c in range(k)
        ]


def test_macro_recall_skips_absent_classes():
    labels = np.array([0, 0, 1])
    logits = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 1.0, 0.0]])
    report = confusion_and_accuracy(logits, labels)
    assert report.per_class_recall == [0.5, 1.0, None]
    assert report.macro_recall == 0.75


def test_top_confused_pairs_are_ranked():
    labels = np.array([3, 3, 3, 2, 0])
    logits = np.eye(4)[[2, 2, 3, 3, 1]]
    report = confusion_and_accuracy(logits, labels)
    pairs = [(p.true_class, p.predicted_class, p.count) for p in report.top_confused_pairs]
    assert pairs == [(3, 2, 2), (0, 1, 1), (2, 3, 1)]


def test_confusion_rejects_bad_labels():
    with pytest.raises(ContractError):
        confusion_and_accuracy(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ContractError):
        confusion_and_accuracy(np.zeros((0, 3)), [])


def test_label_permutation_consistency():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(40, 4))
    labels = rng.integers(0, 4, size=40)
    perm = np.array([2, 0, 3, 1])
    inverse = np.argsort(perm)
    permuted_logits = logits[:, inverse]
    permuted_labels = perm[labels]

    base = confusion_and_accuracy(logits, labels)
    moved = confusion_and_accuracy(permuted_logits, permuted_labels)
    confusion = np.array(base.confusion)
    expected = np.zeros_like(confusion)
    expected[np.ix_(perm, perm)] = confusion
    assert moved.confusion == expected.tolist()
    assert moved.accuracy == base.accuracy
    assert moved.macro_recall == pytest.approx(base.macro_recall)
    assert macro_ovr_auc(permuted_logits, permuted_labels) == pytest.approx(
        macro_ovr_auc(logits, labels), abs=1e-12
    )


def test_auc_perfect_separation():
    labels = np.array([0, 0, 1, 1, 2])
    scores = np.eye(3)[labels] * 0.9 + 0.05
    assert macro_ovr_auc(scores, labels) == 1.0


def test_auc_all_ties_is_one_half():
    labels = np.array([0, 1, 2, 0, 1])
    assert macro_ovr_auc(np.full((5, 3), 1 / 3), labels) == 0.5


def test_auc_matches_pairwise_oracle():
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(2, 201))
        k = int(rng.integers(2, 7))
        labels = rng.integers(0, k, size=n)
        if len(set(labels.tolist())) < 2:
            labels[0], labels[1] = 0, 1
        # coarse scores so ties actually occur
        scores = np.round(rng.uniform(size=(n, k)), 1)
        assert macro_ovr_auc(scores, labels) == pytest.approx(auc_oracle(scores, labels), abs=1e-9)


def test_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(4)
    scores = rng.uniform(size=(60, 3))
    labels = rng.integers(0, 3, size=60)
    transformed = np.exp(3 * scores) + np.arange(3)
    assert macro_ovr_auc(transformed, labels) == pytest.approx(macro_ovr_auc(scores, labels), abs=1e-12)


def test_auc_skips_absent_classes_and_rejects_degenerate_input():
    labels = np.array([0, 0, 1, 1])
    scores = np.array([[0.9, 0.1, 0.0], [0.8, 0.2, 0.0], [0.1, 0.9, 0.0], [0.2, 0.8, 0.0]])
    assert macro_ovr_auc(scores, labels) == 1.0
    with pytest.raises(ContractError):
        macro_ovr_auc(np.ones((3, 2)), [0, 0, 0])
    with pytest.raises(ContractError):
        macro_ovr_auc(np.ones((1, 2)), [0])


def test_separation_identical_embeddings():
    stats = embedding_separation(np.ones((6, 3)), np.array([0, 0, 1, 1, 2, 2]))
    assert stats.mean_intra_cos == pytest.approx(1.0)
    assert stats.mean_inter_cos == pytest.approx(1.0)
    assert stats.separation_gap == pytest.approx(0.0)


def test_separation_orthogonal_one_hot_classes():
    labels = np.array([0, 0, 1, 1, 2, 2])
    stats = embedding_separation(np.eye(3)[labels] * 4.0, labels)
    assert stats.separation_gap == pytest.approx(1.0)
    assert stats.n_intra_pairs == 3
    assert stats.n_inter_pairs == 12


def test_separation_matches_double_loop_oracle():
    rng = np.random.default_rng(5)
    e = rng.normal(size=(60, 5))
    labels = rng.integers(0, 4, size=60)
    intra, inter = separation_oracle(e, labels)
    stats = embedding_separation(e, labels)
    assert stats.mean_intra_cos == pytest.approx(intra, abs=1e-6)
    assert stats.mean_inter_cos == pytest.approx(inter, abs=1e-6)
    assert -1.0 <= stats.mean_inter_cos <= 1.0
    assert -1.0 <= stats.mean_intra_cos <= 1.0


def test_separation_invariant_to_row_scaling():
    rng = np.random.default_rng(6)
    e = rng.normal(size=(30, 4))
    labels = rng.integers(0, 3, size=30)
    scaled = e * rng.uniform(0.1, 10.0, size=(30, 1))
    a, b = embedding_separation(e, labels), embedding_separation(scaled, labels)
    assert a.separation_gap == pytest.approx(b.separation_gap, abs=1e-9)


def test_separation_sampled_beyond_exact_limit():
    rng = np.random.default_rng(7)
    labels = np.repeat(np.arange(3), 700)
    e = np.eye(3)[labels] + rng.normal(scale=0.01, size=(2100, 3))
    stats = embedding_separation(e, labels, seed=1)
    assert stats.n_intra_pairs + stats.n_inter_pairs == 2_000_000
    assert stats.separation_gap == pytest.approx(1.0, abs=0.01)
    assert stats == embedding_separation(e, labels, seed=1)


def test_separation_needs_both_pair_kinds():
    with pytest.raises(ContractError):
        embedding_separation(np.ones((3, 2)), [0, 1, 2])
    with pytest.raises(ContractError):
        embedding_separation(np.ones((1, 2)), [0])


def test_pca_rank_one_data():
    t = np.linspace(-1.0, 1.0, 20)
    direction = np.array([1.0, 2.0, -1.0, 0.5])
    coords, (f1, f2) = pca_project_2d(np.outer(t, direction) + 3.0)
    assert f1 == pytest.approx(1.0)
    assert f2 < 1e-9
    np.testing.assert_array_equal(coords[:, 1], np.zeros(20))


def test_pca_isotropic_cloud():
    rng = np.random.default_rng(8)
    _, (f1, f2) = pca_project_2d(rng.normal(size=(2000, 6)))
    assert abs(f1 - f2) < 0.1


def test_pca_preserves_distances_of_planar_data():
    rng = np.random.default_rng(9)
    plane = rng.normal(size=(30, 2)) * [3.0, 1.0]
    basis, _ = np.linalg.qr(rng.normal(size=(5, 2)))
    points = plane @ basis.T + 1.5
    coords, (f1, f2) = pca_project_2d(points)
    assert f1 + f2 == pytest.approx(1.0)

    def distances(x):
        return np.linalg.norm(x[:, None, :] - x[None, :, :], axis=-1)

    np.testing.assert_allclose(distances(coords), distances(points), atol=1e-6)


def test_pca_sign_convention_and_determinism():
    rng = np.random.default_rng(10)
    e = rng.normal(size=(40, 4)) * [4.0, 2.0, 1.0, 0.5]
    a, _ = pca_project_2d(e)
    b, _ = pca_project_2d(e.copy())
    np.testing.assert_array_equal(a, b)
    centered = e - e.mean(axis=0)
    v1 = np.linalg.lstsq(centered, a[:, 0], rcond=None)[0]
    first = v1[np.flatnonzero(np.abs(v1) > 1e-6)[0]]
    assert first > 0


def test_pca_rejects_tiny_inputs():
    with pytest.raises(ContractError):
        pca_project_2d(np.ones((2, 3)))
    with pytest.raises(ContractError):
        pca_project_2d(np.ones((5, 1)))


def test_evaluate_model_report_and_csv_agree(tmp_path):
    ds = generate_synthetic_dataset(
        GeneratorSpec(n_classes=3, images_per_class=4, height=8, width=8, n_bands=4, confusable_pairs=1)
    )
    params = init_params(ModelConfig(input_height=8, input_width=8, embed_dim=4, hidden_dim=8, n_classes=3), 0)
    report, embeddings = evaluate_model(ds, params)
    assert embeddings.shape == (12, 4)
    assert 0.0 <= report.macro_ovr_auc <= 1.0
    _, logits = predict(ds.images, params)
    wide = logits.astype(np.float64)
    shifted = wide - wide.max(axis=1, keepdims=True)
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    assert report.macro_ovr_auc == pytest.approx(auc_oracle(probs, ds.labels), abs=1e-12)
    assert report.separation is not None

    path = tmp_path / "confusion.csv"
    write_confusion_csv(report, str(path))
    lines = path.read_text().splitlines()
    assert len(lines) == 3
    grid = np.array([[int(v) for v in line.split(",")] for line in lines])
    assert grid.tolist() == report.confusion
    assert report.accuracy == np.trace(grid) / grid.sum()


def test_projection_csv_layout(tmp_path):
    path = tmp_path / "proj.csv"
    write_projection_csv(str(path), np.array([[0.5, -1.25], [2.0, 0.0]]), [1, 0])
    assert path.read_text() == "x,y,label\n0.5,-1.25,1\n2,0,0\n"
