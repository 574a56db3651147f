"""Unpaired clean<->soiled translation and its mask-gated variant.

Two training regimes share the model:

* the baseline regime translates whole images (classic cycle-consistent
  adversarial training with identity losses and least-squares objectives);
* the mask-gated regime ("dirty" training) blends the generator output into
  the source image through a soiling mask, so only masked pixels change:
  clean->soiled uses masks sampled from the soiling VAE, soiled->clean uses
  masks predicted by the soiling segmentation network.  Backgrounds stay
  bit-identical by construction.

Generation composes translated soiling into arbitrary clean images and
returns the mask actually used, which doubles as the automatic annotation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import archdsl, nn, vae as vae_mod
from .errors import DependencyError, DivergenceError, ParameterError, ShapeError
from .imaging import (
    compose,
    downscale,
    from_network_range,
    gaussian_smooth,
    resize_mask,
    to_network_range,
)
from .seeding import derive_seed
from .segmentation import SegModel, infer_mask

#: decoded VAE masks below this alpha snap to exactly 0 so the
#: untouched-background guarantee is literal (a sigmoid never emits 0.0)
DEFAULT_MASK_FLOOR = 0.05

LAMBDA_CYCLE = 10.0
LAMBDA_IDENTITY = 5.0
GAN_LR = 2e-4
GAN_BETAS = (0.5, 0.999)


class ImagePool:
    """Replay buffer of previously generated fakes (training stabilizer).

    With capacity 0 the pool is pass-through.  Until full, images are
    stored and returned unchanged; afterwards each incoming image is either
    returned as-is or swapped against a random stored one (p = 0.5).
    """

    def __init__(self, capacity: int = 50):
        if capacity < 0:
            raise ParameterError(f"pool capacity must be >= 0, got {capacity}")
        self.capacity = capacity
        self.buffer: list[torch.Tensor] = []

    def query(self, batch: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
        if self.capacity == 0:
            return batch
        out = []
        for image in batch.detach():
            if len(self.buffer) < self.capacity:
                self.buffer.append(image.clone())
                out.append(image)
            elif rng.random() < 0.5:
                idx = int(rng.integers(len(self.buffer)))
                out.append(self.buffer[idx].clone())
                self.buffer[idx] = image.clone()
            else:
                out.append(image)
        return torch.stack(out)


@dataclass
class CycleGanModel:
    """Generator pair, discriminator pair and their fake pools."""

    g_c2s: nn.Network
    g_s2c: nn.Network
    d_soiled: nn.Network
    d_clean: nn.Network
    pool_soiled: ImagePool = field(default_factory=ImagePool)
    pool_clean: ImagePool = field(default_factory=ImagePool)
    trained: bool = False


@dataclass
class GanTrace:
    steps: list = field(default_factory=list)

    def series(self, key: str) -> list[float]:
        return [s[key] for s in self.steps]


def build_cyclegan(
    channels: int = 3,
    gen_width: int = 32,
    disc_width: int = 64,
    n_res: int = 4,
    pool_capacity: int = 50,
    seed: int = 0,
) -> CycleGanModel:
    """Construct an untrained translation model with seeded parameters.

    The normalization-free generators are rescaled to unit forward gain:
    the std-0.02 convention assumes normalization layers re-amplifying each
    block and otherwise leaves these generators with vanishing activations.
    """
    gen_arch = archdsl.generator_descriptor(channels=channels, base_width=gen_width, n_res=n_res)
    disc_arch = archdsl.discriminator_descriptor(channels=channels, base_width=disc_width)
    return CycleGanModel(
        g_c2s=nn.rescale_to_unit_gain(nn.build_network(gen_arch, seed=derive_seed(seed, "g_c2s"))),
        g_s2c=nn.rescale_to_unit_gain(nn.build_network(gen_arch, seed=derive_seed(seed, "g_s2c"))),
        d_soiled=nn.build_network(disc_arch, seed=derive_seed(seed, "d_soiled")),
        d_clean=nn.build_network(disc_arch, seed=derive_seed(seed, "d_clean")),
        pool_soiled=ImagePool(pool_capacity),
        pool_clean=ImagePool(pool_capacity),
    )


def _batch_tensor(images) -> torch.Tensor:
    """Stack storage-range numpy images into a network-range batch tensor."""
    arr = np.stack([np.asarray(im) for im in images])
    if arr.ndim == 3:
        arr = arr[:, :, :, None]
    return torch.as_tensor(
        to_network_range(arr).transpose(0, 3, 1, 2), dtype=torch.float32
    )


def cycle_loss(model: CycleGanModel, x: torch.Tensor, domain: str) -> torch.Tensor:
    """L1 between a batch and its round-trip reconstruction."""
    if domain == "clean":
        return nn.loss_l1(model.g_s2c(model.g_c2s(x)), x)
    if domain == "soiled":
        return nn.loss_l1(model.g_c2s(model.g_s2c(x)), x)
    raise ParameterError(f"unknown domain {domain!r}")


def identity_loss(model: CycleGanModel, x: torch.Tensor, domain: str) -> torch.Tensor:
    """L1 between a batch and the same-domain generator applied to it."""
    if domain == "clean":
        return nn.loss_l1(model.g_s2c(x), x)
    if domain == "soiled":
        return nn.loss_l1(model.g_c2s(x), x)
    raise ParameterError(f"unknown domain {domain!r}")


def masked_translate(g: nn.Network, image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Translate only the masked region of a storage-range image.

    out = (1 - m) * image + m * g(image); pixels with m == 0 are
    bit-identical to the input.
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    if mask.shape != image.shape[:2]:
        raise ShapeError(f"mask {mask.shape} does not match image {image.shape[:2]}")
    with torch.no_grad():
        translated = g(_batch_tensor([image]))[0]
    g_img = from_network_range(translated.double().numpy().transpose(1, 2, 0))
    if image.ndim == 2:
        g_img = g_img[:, :, 0]
        m = mask
    else:
        m = mask[:, :, None]
    return (1.0 - m) * image + m * np.clip(g_img, 0.0, 1.0)


def _masked_blend(g_out: torch.Tensor, x: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    """Network-range blend; exact passthrough where the mask is 0."""
    return (1.0 - m) * x + m * g_out


def apply_mask_floor(mask: np.ndarray, floor: float = DEFAULT_MASK_FLOOR) -> np.ndarray:
    """Snap near-zero alphas to exactly 0 (and near-one to exactly 1)."""
    out = np.asarray(mask, dtype=np.float64).copy()
    out[out < floor] = 0.0
    out[out > 1.0 - floor] = 1.0
    return out


def _check_finite(value: float, name: str, step: int):
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite {name} at step {step}", step=step)


def train_cyclegan(
    model: CycleGanModel,
    clean_images,
    soiled_images,
    steps: int = 2000,
    batch_size: int = 2,
    lr: float = GAN_LR,
    lambda_cycle: float = LAMBDA_CYCLE,
    lambda_identity: float = LAMBDA_IDENTITY,
    downscale_factor: int = 1,
    seed: int = 0,
) -> tuple[CycleGanModel, GanTrace]:
    """Alternating generator/discriminator least-squares training.

    Total generator objective: adversarial + lambda_cycle * cycle +
    lambda_identity * identity.  Training images are area-downscaled by
    ``downscale_factor`` first.  Deterministic for fixed inputs and seed.
    """
    if not len(clean_images) or not len(soiled_images):
        raise ParameterError("both corpora must be non-empty")
    clean = _batch_tensor([downscale(im, downscale_factor) for im in clean_images])
    soiled = _batch_tensor([downscale(im, downscale_factor) for im in soiled_images])

    opt_g = torch.optim.Adam(
        list(model.g_c2s.parameters()) + list(model.g_s2c.parameters()),
        lr=lr, betas=GAN_BETAS,
    )
    opt_d = torch.optim.Adam(
        list(model.d_soiled.parameters()) + list(model.d_clean.parameters()),
        lr=lr, betas=GAN_BETAS,
    )
    rng = np.random.default_rng(derive_seed(seed, "batches"))
    pool_rng = np.random.default_rng(derive_seed(seed, "pool"))

    trace = GanTrace()
    for step in range(1, steps + 1):
        x = clean[rng.integers(len(clean), size=batch_size)]
        y = soiled[rng.integers(len(soiled), size=batch_size)]

        fake_y = model.g_c2s(x)
        fake_x = model.g_s2c(y)
        adv = nn.loss_lsgan(model.d_soiled(fake_y), 1) + nn.loss_lsgan(model.d_clean(fake_x), 1)
        cyc_c = nn.loss_l1(model.g_s2c(fake_y), x)
        cyc_s = nn.loss_l1(model.g_c2s(fake_x), y)
        idt = nn.loss_l1(model.g_s2c(x), x) + nn.loss_l1(model.g_c2s(y), y)
        g_loss = adv + lambda_cycle * (cyc_c + cyc_s) + lambda_identity * idt
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()

        fake_y_replay = model.pool_soiled.query(fake_y, pool_rng)
        fake_x_replay = model.pool_clean.query(fake_x, pool_rng)
        d_loss_soiled = 0.5 * (
            nn.loss_lsgan(model.d_soiled(y), 1)
            + nn.loss_lsgan(model.d_soiled(fake_y_replay), 0)
        )
        d_loss_clean = 0.5 * (
            nn.loss_lsgan(model.d_clean(x), 1)
            + nn.loss_lsgan(model.d_clean(fake_x_replay), 0)
        )
        d_loss = d_loss_soiled + d_loss_clean
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        record = {
            "step": step,
            "g_adv": float(adv.detach()),
            "cycle": float((cyc_c + cyc_s).detach()),
            "identity": float(idt.detach()),
            "d_soiled": float(d_loss_soiled.detach()),
            "d_clean": float(d_loss_clean.detach()),
        }
        _check_finite(record["g_adv"] + record["cycle"] + record["d_soiled"], "loss", step)
        trace.steps.append(record)
    if steps > 0:
        model.trained = True
    return model, trace


class VaeMaskSampler:
    """Per-batch soiling masks: half fresh prior samples, half convex
    combinations of two encoded corpus masks at a uniform coefficient."""

    def __init__(self, vae_model: vae_mod.VaeModel, mask_corpus, seed: int = 0,
                 floor: float = DEFAULT_MASK_FLOOR):
        if not vae_model.trained:
            raise DependencyError("mask sampling requires a trained VAE")
        if len(mask_corpus) < 2:
            raise ParameterError("mask corpus needs at least 2 masks")
        self.vae = vae_model
        self.rng = np.random.default_rng(seed)
        self.floor = floor
        self.encoded = [
            vae_mod.encode(vae_model, np.asarray(m, dtype=np.float64))[0] for m in mask_corpus
        ]

    def sample(self, out_size: int) -> np.ndarray:
        if self.rng.random() < 0.5:
            z = self.rng.standard_normal(self.vae.latent_dim)
        else:
            i, j = self.rng.choice(len(self.encoded), size=2, replace=False)
            z = vae_mod.interpolate(
                self.encoded[i], self.encoded[j], float(self.rng.uniform())
            )
        mask = vae_mod.decode(self.vae, z)
        mask = resize_mask(mask, out_size)
        return apply_mask_floor(mask, self.floor)


def _seg_masks(seg: SegModel, batch: torch.Tensor, sigma: float, floor: float) -> torch.Tensor:
    """Predicted soiling alphas for a network-range batch, softened."""
    masks = []
    for sample in batch.detach():
        image = from_network_range(sample.numpy().transpose(1, 2, 0))
        _, alpha = infer_mask(seg, np.clip(image, 0.0, 1.0))
        masks.append(apply_mask_floor(gaussian_smooth(alpha, sigma), floor))
    return torch.as_tensor(np.stack(masks), dtype=torch.float32).unsqueeze(1)


def train_dirtygan(
    model: CycleGanModel,
    vae_model: vae_mod.VaeModel,
    seg_model: SegModel,
    clean_images,
    soiled_images,
    mask_corpus,
    steps: int = 2000,
    batch_size: int = 2,
    lr: float = GAN_LR,
    lambda_cycle: float = LAMBDA_CYCLE,
    lambda_identity: float = LAMBDA_IDENTITY,
    downscale_factor: int = 1,
    smooth_sigma: float = 1.0,
    mask_floor: float = DEFAULT_MASK_FLOOR,
    seed: int = 0,
) -> tuple[CycleGanModel, GanTrace]:
    """Mask-gated cycle training: translation limited to soiling regions.

    clean->soiled gates through VAE-sampled masks, soiled->clean through
    segmentation-predicted masks; each sample's forward mask also gates its
    cycle reconstruction.  All losses see the composited images, so the
    discriminators judge full frames including the blend boundary.
    """
    if not vae_model.trained:
        raise DependencyError("train_dirtygan requires a trained VAE")
    if not seg_model.trained:
        raise DependencyError("train_dirtygan requires a trained segmentation model")
    if not len(clean_images) or not len(soiled_images):
        raise ParameterError("both corpora must be non-empty")
    clean = _batch_tensor([downscale(im, downscale_factor) for im in clean_images])
    soiled = _batch_tensor([downscale(im, downscale_factor) for im in soiled_images])
    working = clean.shape[-1]

    sampler = VaeMaskSampler(
        vae_model, mask_corpus, seed=derive_seed(seed, "vae-masks"), floor=mask_floor
    )
    opt_g = torch.optim.Adam(
        list(model.g_c2s.parameters()) + list(model.g_s2c.parameters()),
        lr=lr, betas=GAN_BETAS,
    )
    opt_d = torch.optim.Adam(
        list(model.d_soiled.parameters()) + list(model.d_clean.parameters()),
        lr=lr, betas=GAN_BETAS,
    )
    rng = np.random.default_rng(derive_seed(seed, "batches"))
    pool_rng = np.random.default_rng(derive_seed(seed, "pool"))

    trace = GanTrace()
    for step in range(1, steps + 1):
        x = clean[rng.integers(len(clean), size=batch_size)]
        y = soiled[rng.integers(len(soiled), size=batch_size)]
        m_y = torch.as_tensor(
            np.stack([sampler.sample(working) for _ in range(batch_size)]),
            dtype=torch.float32,
        ).unsqueeze(1)
        m_x = _seg_masks(seg_model, y, smooth_sigma, mask_floor)

        fake_y = _masked_blend(model.g_c2s(x), x, m_y)
        fake_x = _masked_blend(model.g_s2c(y), y, m_x)
        adv = nn.loss_lsgan(model.d_soiled(fake_y), 1) + nn.loss_lsgan(model.d_clean(fake_x), 1)
        rec_x = _masked_blend(model.g_s2c(fake_y), fake_y, m_y)
        rec_y = _masked_blend(model.g_c2s(fake_x), fake_x, m_x)
        cyc = nn.loss_l1(rec_x, x) + nn.loss_l1(rec_y, y)
        idt = nn.loss_l1(model.g_s2c(x), x) + nn.loss_l1(model.g_c2s(y), y)
        g_loss = adv + lambda_cycle * cyc + lambda_identity * idt
        opt_g.zero_grad()
        g_loss.backward()
        opt_g.step()

        d_loss_soiled = 0.5 * (
            nn.loss_lsgan(model.d_soiled(y), 1)
            + nn.loss_lsgan(model.d_soiled(model.pool_soiled.query(fake_y, pool_rng)), 0)
        )
        d_loss_clean = 0.5 * (
            nn.loss_lsgan(model.d_clean(x), 1)
            + nn.loss_lsgan(model.d_clean(model.pool_clean.query(fake_x, pool_rng)), 0)
        )
        d_loss = d_loss_soiled + d_loss_clean
        opt_d.zero_grad()
        d_loss.backward()
        opt_d.step()

        record = {
            "step": step,
            "g_adv": float(adv.detach()),
            "cycle": float(cyc.detach()),
            "identity": float(idt.detach()),
            "d_soiled": float(d_loss_soiled.detach()),
            "d_clean": float(d_loss_clean.detach()),
        }
        _check_finite(record["g_adv"] + record["cycle"] + record["d_soiled"], "loss", step)
        trace.steps.append(record)
    if steps > 0:
        model.trained = True
    return model, trace


def generate_soiled(
    model: CycleGanModel,
    clean: np.ndarray,
    mask: np.ndarray | None = None,
    seg_model: SegModel | None = None,
    factor: int = 4,
    smooth_sigma: float = 1.0,
) -> tuple[np.ndarray, np.ndarray]:
    """Produce a soiled version of a clean image plus its annotation mask.

    Baseline path (``mask is None``): translate the downscaled image,
    extract the soiling mask with the segmentation network, soften it and
    compose at full resolution; the upscaled mask is returned.

    Mask-gated path (``mask`` given): translate only the masked region at
    full resolution; the given mask is returned unchanged.
    """
    if not model.trained:
        raise DependencyError("generation requires a trained translation model")
    clean = np.asarray(clean)
    if mask is not None:
        if mask.shape != clean.shape[:2]:
            raise ShapeError(f"mask {mask.shape} does not match image {clean.shape[:2]}")
        out = masked_translate(model.g_c2s, clean, mask)
        return out, np.asarray(mask, dtype=np.float64).copy()
    if seg_model is None:
        raise DependencyError("baseline generation requires a segmentation model")
    small = downscale(clean, factor)
    with torch.no_grad():
        translated = model.g_c2s(_batch_tensor([small]))[0]
    soiled_small = np.clip(
        from_network_range(translated.double().numpy().transpose(1, 2, 0)), 0.0, 1.0
    )
    _, alpha = infer_mask(seg_model, soiled_small)
    m = gaussian_smooth(alpha, smooth_sigma)
    return compose(clean, soiled_small, m, factor)


def save_cyclegan(model: CycleGanModel, out_dir, seed: int = 0, step: int = 0) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    nets = {
        "g_c2s": model.g_c2s,
        "g_s2c": model.g_s2c,
        "d_soiled": model.d_soiled,
        "d_clean": model.d_clean,
    }
    meta = {
        "trained": model.trained,
        "step": step,
        "nets": {name: net.arch.to_text() for name, net in nets.items()},
        "input_channels": model.g_c2s.arch.input_channels,
        "pool_capacity": model.pool_soiled.capacity,
    }
    (out_dir / "cyclegan.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    for name, net in nets.items():
        nn.save_checkpoint(out_dir / f"{name}.ckpt", net.arch, net,
                           step=step, extra={"seed": seed})


def load_cyclegan(in_dir) -> CycleGanModel:
    in_dir = Path(in_dir)
    meta = json.loads((in_dir / "cyclegan.json").read_text())
    nets = {}
    for name, text in meta["nets"].items():
        arch = archdsl.parse_architecture(
            text, name=name, input_channels=meta["input_channels"]
        )
        params, _, _, _ = nn.load_checkpoint(in_dir / f"{name}.ckpt", arch)
        nets[name] = nn.build_network(arch, params=params)
    model = CycleGanModel(
        g_c2s=nets["g_c2s"], g_s2c=nets["g_s2c"],
        d_soiled=nets["d_soiled"], d_clean=nets["d_clean"],
        pool_soiled=ImagePool(meta.get("pool_capacity", 50)),
        pool_clean=ImagePool(meta.get("pool_capacity", 50)),
        trained=meta["trained"],
    )
    return model
