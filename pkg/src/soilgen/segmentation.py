"""Soiling segmentation: weak-label training, mask inference, label refinement.

The network predicts per-pixel soiling classes (clean / opaque /
semi-transparent, or a binary collapse) from which the compositing alpha
mask is derived.  It is trained from coarse polygonal annotations and ends
up fitting the actual soiling boundary more tightly than the polygons,
which is also the basis for refining weak labels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import archdsl, nn
from .errors import DataError, DependencyError, DivergenceError, ShapeError
from .imaging import DEFAULT_TRANSPARENT_ALPHA, mask_iou, to_network_range

#: label value excluded from loss and metrics
VOID_LABEL = 255


class SoilingClass(IntEnum):
    CLEAN = 0
    OPAQUE = 1
    TRANSPARENT = 2


@dataclass
class SegModel:
    """Segmentation network plus its class layout."""

    net: nn.Network
    num_classes: int
    working_size: int
    transparent_alpha: float = DEFAULT_TRANSPARENT_ALPHA
    trained: bool = False


@dataclass
class SegTrace:
    steps: list = field(default_factory=list)


def build_seg_model(
    num_classes: int = 3,
    working_size: int = 64,
    base_width: int = 32,
    channels: int = 3,
    seed: int = 0,
    transparent_alpha: float = DEFAULT_TRANSPARENT_ALPHA,
) -> SegModel:
    if num_classes not in (2, 3):
        raise DataError(f"num_classes must be 2 or 3, got {num_classes}")
    arch = archdsl.mask_seg_descriptor(
        channels=channels, num_classes=num_classes, base_width=base_width
    )
    net = nn.build_network(arch, seed=seed)
    return SegModel(net, num_classes, working_size, transparent_alpha)


def _image_tensor(image: np.ndarray) -> torch.Tensor:
    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None]
    return torch.as_tensor(
        to_network_range(image).transpose(2, 0, 1), dtype=torch.float32
    )


def _validate_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    valid = (labels < num_classes) | (labels == VOID_LABEL)
    if not valid.all():
        bad = np.unique(labels[~valid])
        raise DataError(f"label values outside class codes: {bad.tolist()}")
    return labels.astype(np.int64)


def train_seg(
    model: SegModel,
    images,
    label_maps,
    steps: int = 1000,
    batch_size: int = 8,
    lr: float = 1e-4,
    seed: int = 0,
) -> tuple[SegModel, SegTrace]:
    """Minimize per-pixel cross-entropy on (image, label) pairs with Adam.

    For two classes the softmax cross-entropy coincides with binary
    cross-entropy.  Pixels labeled :data:`VOID_LABEL` are excluded from the
    loss.  Deterministic for fixed (data, config, seed).
    """
    if len(images) != len(label_maps):
        raise DataError(f"{len(images)} images vs {len(label_maps)} label maps")
    if not images:
        raise DataError("empty training set")
    x = torch.stack([_image_tensor(im) for im in images])
    y = torch.stack(
        [torch.as_tensor(_validate_labels(lm, model.num_classes)) for lm in label_maps]
    )
    if x.shape[2:] != y.shape[1:]:
        raise ShapeError(f"image size {tuple(x.shape[2:])} vs labels {tuple(y.shape[1:])}")

    model.net.train()
    optim = torch.optim.Adam(model.net.parameters(), lr=lr)
    order = np.random.default_rng(seed)
    n = x.shape[0]
    trace = SegTrace()
    perm = order.permutation(n)
    cursor = 0
    for step in range(1, steps + 1):
        if cursor + batch_size > n and cursor > 0:
            perm = order.permutation(n)
            cursor = 0
        idx = perm[cursor : cursor + batch_size]
        cursor += batch_size
        logits = model.net(x[idx])
        loss = F.cross_entropy(logits, y[idx], ignore_index=VOID_LABEL)
        if not torch.isfinite(loss):
            raise DivergenceError(f"non-finite segmentation loss at step {step}", step=step)
        optim.zero_grad()
        loss.backward()
        optim.step()
        trace.steps.append({"step": step, "loss": float(loss.detach())})
    if steps > 0:
        model.trained = True
    return model, trace


def class_map_from_logits(logits: np.ndarray) -> np.ndarray:
    """Per-pixel argmax over class logits; ties resolve to the lowest code."""
    return np.argmax(np.asarray(logits), axis=0).astype(np.uint8)


def alpha_from_classes(class_map: np.ndarray, transparent_alpha: float) -> np.ndarray:
    """Map class codes to alphas: clean -> 0, opaque -> 1, transparent -> alpha."""
    alpha = np.zeros(class_map.shape, dtype=np.float64)
    alpha[class_map == SoilingClass.OPAQUE] = 1.0
    alpha[class_map == SoilingClass.TRANSPARENT] = transparent_alpha
    return alpha


def infer_mask(model: SegModel, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Predict the per-pixel class map and its alpha mask for one image.

    Smoothing of the alpha (the gamma filter of the compositing pipeline)
    is the caller's job.
    """
    if not model.trained:
        raise DependencyError("segmentation model is untrained")
    model.net.eval()
    with torch.no_grad():
        logits = model.net(_image_tensor(image).unsqueeze(0))[0].numpy()
    class_map = class_map_from_logits(logits)
    return class_map, alpha_from_classes(class_map, model.transparent_alpha)


def refine_weak_labels(
    model: SegModel, image: np.ndarray, polygon_mask: np.ndarray
) -> tuple[np.ndarray, float]:
    """Replace a coarse polygon mask with the network's prediction.

    Returns the predicted alpha plus its IoU against the weak polygon mask
    (both binarized at 0.5) as a drift diagnostic.
    """
    _, alpha = infer_mask(model, image)
    if alpha.shape != np.asarray(polygon_mask).shape:
        raise ShapeError(f"prediction {alpha.shape} vs polygon mask {np.shape(polygon_mask)}")
    return alpha, mask_iou(alpha, polygon_mask)


def save_seg(model: SegModel, out_dir, seed: int = 0) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "num_classes": model.num_classes,
        "working_size": model.working_size,
        "transparent_alpha": model.transparent_alpha,
        "trained": model.trained,
        "arch": model.net.arch.to_text(),
        "input_channels": model.net.arch.input_channels,
    }
    (out_dir / "seg.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    nn.save_checkpoint(out_dir / "seg.ckpt", model.net.arch, model.net, extra={"seed": seed})


def load_seg(in_dir) -> SegModel:
    in_dir = Path(in_dir)
    meta = json.loads((in_dir / "seg.json").read_text())
    arch = archdsl.parse_architecture(
        meta["arch"], name="mask_seg", input_channels=meta["input_channels"]
    )
    params, _, _, _ = nn.load_checkpoint(in_dir / "seg.ckpt", arch)
    net = nn.build_network(arch, params=params)
    return SegModel(
        net,
        meta["num_classes"],
        meta["working_size"],
        meta["transparent_alpha"],
        meta["trained"],
    )
