"""Segmentation metrics and the two experiment runners.

Metrics: pixel confusion matrix and mean intersection-over-union (classes
absent from both prediction and ground truth are excluded from the mean).

Two experiment protocols run at desk scale:

* augmentation benefit: four soiling-segmentation models trained under an
  identical step budget on (generated only | real only | real + classic
  augmentation | real + generated), all evaluated on the real test split;
* soiling degradation: a 2x2 grid training on {clean, soiled} images and
  evaluating on {clean, soiled} test sets, with soiled-opaque pixels
  labeled void and excluded from loss and metric.

Reports embed the corresponding full-scale reference numbers for
side-by-side display.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .dataset import Corpus
from .errors import DataError, ParameterError, UndefinedMetricError
from .segmentation import VOID_LABEL, build_seg_model, infer_mask, train_seg
from .seeding import derive_seed

#: full-scale reference accuracies (mIoU, %) for the augmentation table
AUGMENTATION_REFERENCES = {
    "generated_only": 47.41,
    "real_only": 73.95,
    "real_plus_classic_aug": 78.20,
    "real_plus_generated": 91.71,
}

#: full-scale reference mIoU (%) grids for the degradation tables
DEGRADATION_REFERENCES = {
    "woodscape": {
        "train_clean/test_clean": 56.6,
        "train_clean/test_soiled": 34.8,
        "train_soiled/test_clean": 52.1,
        "train_soiled/test_soiled": 48.2,
    },
    "cityscapes": {
        "train_clean/test_clean": 38.1,
        "train_clean/test_soiled": 26.6,
        "train_soiled/test_clean": 35.5,
        "train_soiled/test_soiled": 38.0,
    },
}

SOILING_THRESHOLD = 0.25
VOID_THRESHOLD = 0.9


@dataclass
class ConfusionMatrix:
    """Pixel counts; rows are ground truth, columns are prediction."""

    num_classes: int
    counts: np.ndarray = None

    def __post_init__(self):
        if self.counts is None:
            self.counts = np.zeros((self.num_classes, self.num_classes), dtype=np.int64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.num_classes, self.num_classes):
            raise DataError(f"counts shape {self.counts.shape} != ({self.num_classes},)*2")
        if (self.counts < 0).any():
            raise DataError("negative confusion counts")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merged(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, gt: np.ndarray, pred: np.ndarray) -> ConfusionMatrix:
    """Add one (ground truth, prediction) pixel map pair to the matrix.

    Pixels whose ground truth is :data:`VOID_LABEL` are skipped; any other
    out-of-range code is an error.
    """
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise DataError(f"gt shape {gt.shape} != pred shape {pred.shape}")
    keep = gt != VOID_LABEL
    gt = gt[keep].astype(np.int64)
    pred = pred[keep].astype(np.int64)
    k = cm.num_classes
    if gt.size and (gt.min() < 0 or gt.max() >= k or pred.min() < 0 or pred.max() >= k):
        raise DataError("class codes outside [0, num_classes)")
    flat = np.bincount(gt * k + pred, minlength=k * k)
    cm.counts += flat.reshape(k, k)
    return cm


def miou(cm: ConfusionMatrix) -> tuple[float, dict[int, float]]:
    """Mean IoU over classes present in ground truth or prediction."""
    if cm.total == 0:
        raise UndefinedMetricError("no pixels accumulated")
    tp = np.diag(cm.counts).astype(np.float64)
    gt_total = cm.counts.sum(axis=1).astype(np.float64)
    pred_total = cm.counts.sum(axis=0).astype(np.float64)
    union = gt_total + pred_total - tp
    present = union > 0
    per_class = {int(c): float(tp[c] / union[c]) for c in np.nonzero(present)[0]}
    return float(np.mean([per_class[c] for c in per_class])), per_class


@dataclass
class ReportRow:
    condition: str
    metric: str
    value: float
    n_images: int
    seed: int


@dataclass
class ExperimentReport:
    kind: str
    rows: list[ReportRow] = field(default_factory=list)
    reference_values: dict = field(default_factory=dict)

    def values(self, condition: str) -> list[float]:
        return [r.value for r in self.rows if r.condition == condition and r.metric == "miou"]

    def median(self, condition: str) -> float:
        return float(np.median(self.values(condition)))


def emit_report(report: ExperimentReport, fmt: str, path=None) -> str:
    """Render a report as CSV or markdown; optionally write it to a file."""
    if not report.rows:
        raise ParameterError("refusing to emit an empty report")
    if fmt == "csv":
        text = _emit_csv(report)
    elif fmt == "markdown":
        text = _emit_markdown(report)
    else:
        raise ParameterError(f"unknown report format {fmt!r}")
    if path is not None:
        from pathlib import Path

        Path(path).write_text(text)
    return text


def _emit_csv(report: ExperimentReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["condition", "metric", "value", "n_images", "seed"])
    for row in report.rows:
        writer.writerow([row.condition, row.metric, repr(row.value), row.n_images, row.seed])
    return buf.getvalue()


def read_report_csv(text: str) -> list[ReportRow]:
    reader = csv.DictReader(io.StringIO(text))
    return [
        ReportRow(
            condition=r["condition"],
            metric=r["metric"],
            value=float(r["value"]),
            n_images=int(r["n_images"]),
            seed=int(r["seed"]),
        )
        for r in reader
    ]


def _emit_markdown(report: ExperimentReport) -> str:
    lines = []
    if report.kind == "degradation":
        lines.append("| Train\\Test | Clean | Soiled |")
        lines.append("| --- | --- | --- |")
        for train in ("clean", "soiled"):
            cells = []
            for test in ("clean", "soiled"):
                cells.append(f"{report.median(f'train_{train}/test_{test}'):.3f}")
            lines.append(f"| {train.capitalize()} | {cells[0]} | {cells[1]} |")
        for name, grid in report.reference_values.items():
            lines.append("")
            lines.append(f"Full-scale reference ({name}, mIoU %):")
            lines.append("| Train\\Test | Clean | Soiled |")
            lines.append("| --- | --- | --- |")
            lines.append(
                f"| Clean | {grid['train_clean/test_clean']} | {grid['train_clean/test_soiled']} |"
            )
            lines.append(
                f"| Soiled | {grid['train_soiled/test_clean']} | {grid['train_soiled/test_soiled']} |"
            )
    else:
        lines.append("| condition | mIoU (median) | reference (full scale, %) |")
        lines.append("| --- | --- | --- |")
        conditions = sorted({r.condition for r in report.rows})
        for cond in conditions:
            ref = report.reference_values.get(cond, "")
            lines.append(f"| {cond} | {report.median(cond):.3f} | {ref} |")
    lines.append("")
    lines.append("Per-seed rows:")
    lines.append("| condition | metric | value | n_images | seed |")
    lines.append("| --- | --- | --- | --- | --- |")
    for row in report.rows:
        lines.append(
            f"| {row.condition} | {row.metric} | {row.value:.6f} | {row.n_images} | {row.seed} |"
        )
    return "\n".join(lines) + "\n"


# --- shared experiment machinery ---------------------------------------------

def _binary_label(mask: np.ndarray) -> np.ndarray:
    return (np.asarray(mask) >= SOILING_THRESHOLD).astype(np.uint8)


def _flip_contrast_augment(images, labels, rng):
    """Classic augmentation: horizontal flip plus contrast jitter."""
    out_images, out_labels = [], []
    for image, label in zip(images, labels):
        flipped = image[:, ::-1].copy()
        c = rng.uniform(0.7, 1.3)
        jittered = np.clip((flipped - 0.5) * c + 0.5, 0.0, 1.0)
        out_images.append(jittered)
        out_labels.append(label[:, ::-1].copy())
    return out_images, out_labels


def _train_and_score(
    train_images,
    train_labels,
    test_sets,
    num_classes: int,
    seed: int,
    steps: int,
    width: int,
    batch_size: int,
    lr: float,
) -> dict[str, float]:
    """Train one segmentation model and return mIoU per named test set."""
    model = build_seg_model(
        num_classes=num_classes, working_size=train_images[0].shape[0],
        base_width=width, seed=seed,
    )
    model, _ = train_seg(
        model, train_images, train_labels,
        steps=steps, batch_size=batch_size, lr=lr, seed=derive_seed(seed, "train"),
    )
    scores = {}
    for name, (images, labels) in test_sets.items():
        cm = ConfusionMatrix(num_classes)
        for image, label in zip(images, labels):
            pred, _ = infer_mask(model, image)
            accumulate(cm, label, pred)
        scores[name] = miou(cm)[0]
    return scores


def run_augmentation_experiment(
    real_corpus: Corpus,
    generated_corpus: Corpus,
    seeds=(0, 1, 2),
    steps: int = 300,
    width: int = 8,
    batch_size: int = 8,
    lr: float = 1e-4,
) -> ExperimentReport:
    """Measure the benefit of generated soiling data for soiling segmentation.

    Real training images carry only their coarse polygon labels; generated
    images carry their exact automatic annotations.  Every condition gets
    the same training budget; evaluation is against the real test split's
    reference masks.  The classifier is the segmentation descriptor widened
    2x, binary soiling classes throughout.
    """
    real_train = real_corpus.ids("train")
    real_test = real_corpus.ids("test")
    if len(real_train) < 2 or len(real_test) < 1:
        raise DataError(
            f"real corpus too small for an 80:20 split: "
            f"{len(real_train)} train / {len(real_test)} test"
        )
    gen_ids = generated_corpus.ids()
    if not gen_ids:
        raise DataError("generated corpus is empty")

    real_imgs = [real_corpus.dirty_image(i) for i in real_train]
    real_weak = [_binary_label(real_corpus.weak_label_mask(i)) for i in real_train]
    gen_imgs = [generated_corpus.dirty_image(i) for i in gen_ids]
    gen_labels = [_binary_label(generated_corpus.mask(i)) for i in gen_ids]
    test_imgs = [real_corpus.dirty_image(i) for i in real_test]
    test_labels = [_binary_label(real_corpus.mask(i)) for i in real_test]
    test_sets = {"real_test": (test_imgs, test_labels)}

    report = ExperimentReport(kind="augmentation", reference_values=dict(AUGMENTATION_REFERENCES))
    for seed in seeds:
        aug_rng = np.random.default_rng(derive_seed(seed, "classic-aug"))
        aug_imgs, aug_labels = _flip_contrast_augment(real_imgs, real_weak, aug_rng)
        conditions = {
            "generated_only": (gen_imgs, gen_labels),
            "real_only": (real_imgs, real_weak),
            "real_plus_classic_aug": (real_imgs + aug_imgs, real_weak + aug_labels),
            "real_plus_generated": (real_imgs + gen_imgs, real_weak + gen_labels),
        }
        for name, (imgs, labels) in conditions.items():
            scores = _train_and_score(
                imgs, labels, test_sets, num_classes=2,
                seed=derive_seed(seed, "aug-exp", name),
                steps=steps, width=2 * width, batch_size=batch_size, lr=lr,
            )
            report.rows.append(
                ReportRow(name, "miou", scores["real_test"], len(imgs), seed)
            )
    return report


def _voided_labels(semantic: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Semantic labels with (near-)opaque soiling marked void."""
    labels = semantic.astype(np.uint8).copy()
    labels[np.asarray(mask) >= VOID_THRESHOLD] = VOID_LABEL
    return labels


def run_degradation_experiment(
    clean_corpus: Corpus,
    dirty_corpus: Corpus,
    seeds=(0, 1, 2),
    steps: int = 300,
    width: int = 8,
    batch_size: int = 8,
    lr: float = 1e-4,
    num_classes: int = 3,
) -> ExperimentReport:
    """2x2 degradation grid: train on {clean, soiled}, test on {clean, soiled}.

    Clean and soiled corpora must pair by id and share semantic labels; the
    soiled variant re-labels (near-)opaque soiling as void, which never
    enters loss or metric.
    """
    ids = clean_corpus.ids()
    missing = [i for i in ids if i not in set(dirty_corpus.ids())]
    if missing or len(dirty_corpus.ids()) != len(ids):
        raise DataError(f"corpora do not pair 1:1 by id (first mismatches: {missing[:5]})")

    splits = {"train": clean_corpus.ids("train"), "test": clean_corpus.ids("test")}
    if len(splits["train"]) < 2 or len(splits["test"]) < 1:
        raise DataError("corpus too small for an 80:20 split")

    data = {}
    for part, part_ids in splits.items():
        clean_imgs = [clean_corpus.clean_image(i) for i in part_ids]
        semantic = [clean_corpus.semantic(i) for i in part_ids]
        dirty_imgs = [dirty_corpus.dirty_image(i) for i in part_ids]
        voided = [
            _voided_labels(s, dirty_corpus.mask(i)) for s, i in zip(semantic, part_ids)
        ]
        data[part] = {
            "clean": (clean_imgs, semantic),
            "soiled": (dirty_imgs, voided),
        }

    report = ExperimentReport(kind="degradation", reference_values=dict(DEGRADATION_REFERENCES))
    test_sets = {
        "test_clean": data["test"]["clean"],
        "test_soiled": data["test"]["soiled"],
    }
    for seed in seeds:
        for train_name in ("clean", "soiled"):
            imgs, labels = data["train"][train_name]
            scores = _train_and_score(
                imgs, labels, test_sets, num_classes=num_classes,
                seed=derive_seed(seed, "degr-exp", train_name),
                steps=steps, width=width, batch_size=batch_size, lr=lr,
            )
            for test_name, value in scores.items():
                report.rows.append(
                    ReportRow(
                        f"train_{train_name}/{test_name}", "miou", value, len(imgs), seed
                    )
                )
    return report
