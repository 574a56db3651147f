"""Metrics and experiment runners: confusion matrix, mIoU, reports."""

import numpy as np
import pytest

from soilgen import dataset
from soilgen.errors import DataError, ParameterError, UndefinedMetricError
from soilgen.evaluation import (
    AUGMENTATION_REFERENCES,
    DEGRADATION_REFERENCES,
    ConfusionMatrix,
    ExperimentReport,
    ReportRow,
    accumulate,
    emit_report,
    miou,
    read_report_csv,
    run_augmentation_experiment,
    run_degradation_experiment,
)


def miou_bruteforce(gt, pred, num_classes):
    """Explicit pixel-set IoU, averaged over classes present anywhere."""
    ious = []
    for c in range(num_classes):
        gt_set = set(zip(*np.nonzero(gt == c)))
        pred_set = set(zip(*np.nonzero(pred == c)))
        union = gt_set | pred_set
        if not union:
            continue
        ious.append(len(gt_set & pred_set) / len(union))
    return float(np.mean(ious))


# --- confusion matrix ---------------------------------------------------------

def test_accumulate_perfect_prediction_hits_diagonal():
    cm = ConfusionMatrix(3)
    gt = np.array([[0, 1], [2, 1]])
    accumulate(cm, gt, gt)
    assert cm.counts[0, 0] == 1 and cm.counts[1, 1] == 2 and cm.counts[2, 2] == 1
    assert cm.counts.sum() == np.diag(cm.counts).sum()


def test_accumulate_empty_maps_unchanged():
    cm = ConfusionMatrix(3)
    accumulate(cm, np.zeros((0, 0), dtype=int), np.zeros((0, 0), dtype=int))
    assert cm.total == 0


def test_accumulate_hand_enumerated_counts():
    cm = ConfusionMatrix(2)
    gt = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 0]])
    accumulate(cm, gt, pred)
    # pairs: (0,0), (0,1), (1,1), (1,0)
    assert cm.counts.tolist() == [[1, 1], [1, 1]]


def test_accumulate_skips_void_only():
    cm = ConfusionMatrix(2)
    gt = np.array([[0, 255], [1, 255]])
    pred = np.array([[0, 1], [1, 0]])
    accumulate(cm, gt, pred)
    assert cm.total == 2


def test_accumulate_rejects_invalid_codes():
    cm = ConfusionMatrix(2)
    with pytest.raises(DataError):
        accumulate(cm, np.array([[3]]), np.array([[0]]))
    with pytest.raises(DataError):
        accumulate(cm, np.array([[0]]), np.array([[2]]))


# --- mIoU ------------------------------------------------------------------------

def test_miou_perfect_prediction_is_one():
    cm = ConfusionMatrix(3)
    gt = np.random.default_rng(0).integers(0, 3, size=(8, 8))
    accumulate(cm, gt, gt)
    value, per_class = miou(cm)
    assert value == 1.0
    assert all(v == 1.0 for v in per_class.values())


def test_miou_worked_example():
    # prediction all class A; ground truth half A, half B
    cm = ConfusionMatrix(2)
    gt = np.array([[0] * 4, [1] * 4])
    pred = np.zeros_like(gt)
    accumulate(cm, gt, pred)
    value, per_class = miou(cm)
    assert per_class[0] == pytest.approx(0.5)
    assert per_class[1] == 0.0
    assert value == pytest.approx(0.25)


def test_miou_invariant_under_label_permutation():
    rng = np.random.default_rng(5)
    gt = rng.integers(0, 3, size=(10, 10))
    pred = rng.integers(0, 3, size=(10, 10))
    cm = ConfusionMatrix(3)
    accumulate(cm, gt, pred)
    perm = np.array([2, 0, 1])
    cm_p = ConfusionMatrix(3)
    accumulate(cm_p, perm[gt], perm[pred])
    assert miou(cm)[0] == pytest.approx(miou(cm_p)[0], abs=1e-12)


def test_miou_matches_bruteforce_on_random_maps():
    rng = np.random.default_rng(17)
    for _ in range(200):
        gt = rng.integers(0, 3, size=(8, 8))
        pred = rng.integers(0, 3, size=(8, 8))
        cm = ConfusionMatrix(3)
        accumulate(cm, gt, pred)
        assert abs(miou(cm)[0] - miou_bruteforce(gt, pred, 3)) < 1e-12


def test_miou_excludes_absent_classes():
    cm = ConfusionMatrix(5)
    gt = np.array([[0, 1]])
    accumulate(cm, gt, gt)
    value, per_class = miou(cm)
    assert set(per_class) == {0, 1}
    assert value == 1.0


def test_miou_empty_accumulation_rejected():
    with pytest.raises(UndefinedMetricError):
        miou(ConfusionMatrix(2))


def test_miou_bounds_and_mean_below_max():
    rng = np.random.default_rng(23)
    for _ in range(50):
        cm = ConfusionMatrix(3)
        accumulate(cm, rng.integers(0, 3, size=(6, 6)), rng.integers(0, 3, size=(6, 6)))
        value, per_class = miou(cm)
        assert 0.0 <= value <= 1.0
        assert all(0.0 <= v <= 1.0 for v in per_class.values())
        assert value <= max(per_class.values()) + 1e-12


def test_per_class_iou_symmetric_in_gt_pred():
    rng = np.random.default_rng(29)
    gt = rng.integers(0, 3, size=(8, 8))
    pred = rng.integers(0, 3, size=(8, 8))
    cm_a = ConfusionMatrix(3)
    accumulate(cm_a, gt, pred)
    cm_b = ConfusionMatrix(3)
    accumulate(cm_b, pred, gt)
    _, per_a = miou(cm_a)
    _, per_b = miou(cm_b)
    assert per_a == per_b


# --- reports ----------------------------------------------------------------------

def sample_report():
    report = ExperimentReport(kind="augmentation", reference_values=dict(AUGMENTATION_REFERENCES))
    for seed in (0, 1):
        report.rows.append(ReportRow("real_only", "miou", 0.5 + 0.01 * seed, 10, seed))
        report.rows.append(ReportRow("real_plus_generated", "miou", 0.6 + 0.01 * seed, 20, seed))
    return report


def test_emit_empty_report_rejected():
    with pytest.raises(ParameterError):
        emit_report(ExperimentReport(kind="augmentation"), "csv")


def test_emit_unknown_format_rejected():
    with pytest.raises(ParameterError):
        emit_report(sample_report(), "xml")


def test_csv_round_trip_exact():
    report = sample_report()
    text = emit_report(report, "csv")
    assert text.splitlines()[0] == "condition,metric,value,n_images,seed"
    rows = read_report_csv(text)
    assert len(rows) == len(report.rows)
    for got, want in zip(rows, report.rows):
        assert got.condition == want.condition
        assert got.value == want.value  # exact, via repr round trip
        assert got.n_images == want.n_images and got.seed == want.seed


def test_markdown_degradation_renders_2x2_grid():
    report = ExperimentReport(kind="degradation", reference_values=dict(DEGRADATION_REFERENCES))
    for train in ("clean", "soiled"):
        for test in ("clean", "soiled"):
            report.rows.append(
                ReportRow(f"train_{train}/test_{test}", "miou", 0.4, 8, 0)
            )
    text = emit_report(report, "markdown")
    grid = [l for l in text.splitlines() if l.startswith("| Clean") or l.startswith("| Soiled")]
    # 2 data rows for the run plus 2 for each of the two reference grids
    assert len(grid) == 6
    assert grid[0].count("|") == 4  # 2 data columns
    assert "34.8" in text and "56.6" in text and "26.6" in text


def test_reference_values_are_frozen():
    assert AUGMENTATION_REFERENCES == {
        "generated_only": 47.41,
        "real_only": 73.95,
        "real_plus_classic_aug": 78.20,
        "real_plus_generated": 91.71,
    }
    assert DEGRADATION_REFERENCES["woodscape"]["train_clean/test_soiled"] == 34.8
    assert DEGRADATION_REFERENCES["cityscapes"]["train_soiled/test_soiled"] == 38.0


# --- experiment runners (smoke scale) -------------------------------------------------

@pytest.fixture(scope="module")
def tiny_corpora(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpora")
    spec = dataset.ProceduralSceneSpec(height=32, width=32)
    real = dataset.generate_procedural_corpus(spec, 14, master_seed=31)
    dataset.write_corpus(real, root / "real", seed=31)
    gen = dataset.generate_procedural_corpus(spec, 8, master_seed=77)
    dataset.write_corpus(gen, root / "gen", seed=77)
    return dataset.load_corpus(root / "real"), dataset.load_corpus(root / "gen")


def test_augmentation_runner_structure(tiny_corpora):
    real, gen = tiny_corpora
    report = run_augmentation_experiment(real, gen, seeds=(0,), steps=20, width=4)
    conditions = {r.condition for r in report.rows}
    assert conditions == set(AUGMENTATION_REFERENCES)
    assert report.reference_values == AUGMENTATION_REFERENCES
    assert all(0.0 <= r.value <= 1.0 for r in report.rows)
    n = {r.condition: r.n_images for r in report.rows}
    assert n["real_plus_classic_aug"] == 2 * n["real_only"]
    assert n["real_plus_generated"] == n["real_only"] + len(gen.ids())


def test_augmentation_runner_deterministic(tiny_corpora):
    real, gen = tiny_corpora
    a = run_augmentation_experiment(real, gen, seeds=(1,), steps=10, width=4)
    b = run_augmentation_experiment(real, gen, seeds=(1,), steps=10, width=4)
    assert [(r.condition, r.value) for r in a.rows] == [(r.condition, r.value) for r in b.rows]


def test_augmentation_runner_rejects_tiny_corpus(tmp_path, tiny_corpora):
    _, gen = tiny_corpora
    spec = dataset.ProceduralSceneSpec(height=32, width=32)
    single = dataset.generate_procedural_corpus(spec, 1, master_seed=1)
    dataset.write_corpus(single, tmp_path / "single", seed=1)
    with pytest.raises(DataError):
        run_augmentation_experiment(dataset.load_corpus(tmp_path / "single"), gen, seeds=(0,))


def test_degradation_runner_structure(tiny_corpora):
    real, _ = tiny_corpora
    report = run_degradation_experiment(real, real, seeds=(0,), steps=20, width=4)
    assert {r.condition for r in report.rows} == set(DEGRADATION_REFERENCES["woodscape"])
    text = emit_report(report, "markdown")
    assert "Train\\Test" in text


def test_degradation_runner_rejects_unpaired(tiny_corpora, tmp_path):
    real, gen = tiny_corpora
    with pytest.raises(DataError):
        run_degradation_experiment(real, gen, seeds=(0,))


def test_model_scores_its_training_split_at_least_as_well_as_test():
    from soilgen.evaluation import _train_and_score

    spec = dataset.ProceduralSceneSpec(height=32, width=32)
    entries = dataset.generate_procedural_corpus(spec, 24, master_seed=41)
    images = [e.clean for e in entries]
    labels = [e.semantic for e in entries]
    scores = _train_and_score(
        images[:18], labels[:18],
        {"train_split": (images[:18], labels[:18]), "test_split": (images[18:], labels[18:])},
        num_classes=3, seed=5, steps=500, width=16, batch_size=8, lr=1e-3,
    )
    assert scores["train_split"] >= scores["test_split"]
