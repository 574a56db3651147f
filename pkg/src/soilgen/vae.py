"""Variational autoencoder over soiling masks.

Learns a low-dimensional manifold of soiling patterns from (weak) mask
annotations.  New patterns come from decoding prior samples or convex
combinations of encoded masks; walking the combination coefficient from one
mask to another yields smoothly morphing (animatable) soiling.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import archdsl, nn
from .errors import DataError, DivergenceError, ParameterError, ShapeError

LOG_VAR_CLAMP = 20.0


@dataclass
class VaeModel:
    """Encoder/decoder pair with the latent geometry they were built for."""

    encoder: nn.Network
    decoder: nn.Network
    latent_dim: int
    mask_size: int
    trained: bool = False


@dataclass
class VaeTrace:
    """Per-step and per-epoch loss records of one training run."""

    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    @property
    def final_total(self) -> float:
        return self.steps[-1]["total"] if self.steps else float("nan")


def build_vae(
    latent_dim: int = 32,
    mask_size: int = 32,
    seed: int = 0,
    encoder_width: int = 32,
    decoder_width: int = 64,
) -> VaeModel:
    """Construct an untrained VAE with deterministically seeded parameters."""
    enc_arch = archdsl.vae_encoder_descriptor(latent_dim=latent_dim, base_width=encoder_width)
    dec_arch = archdsl.vae_decoder_descriptor(
        latent_dim=latent_dim, mask_size=mask_size, base_width=decoder_width
    )
    encoder = nn.build_network(enc_arch, seed=seed, input_size=mask_size)
    decoder = nn.build_network(dec_arch, seed=seed + 1)
    return VaeModel(encoder, decoder, latent_dim, mask_size)


def _mask_tensor(model: VaeModel, mask: np.ndarray) -> torch.Tensor:
    mask = np.asarray(mask)
    if mask.shape != (model.mask_size, model.mask_size):
        raise ShapeError(
            f"mask shape {mask.shape} does not match model mask_size {model.mask_size}"
        )
    return torch.as_tensor(mask, dtype=torch.float32).reshape(1, 1, *mask.shape)


def encode(model: VaeModel, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Project a mask to the latent posterior parameters (mu, log-variance)."""
    with torch.no_grad():
        out = model.encoder(_mask_tensor(model, mask))[0]
    d = model.latent_dim
    mu = out[:d].double().numpy()
    log_var = out[d:].clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP).double().numpy()
    return mu, log_var


def reparameterize(mu: np.ndarray, log_var: np.ndarray, noise: np.ndarray) -> np.ndarray:
    """Sample z = mu + exp(log_var / 2) * noise."""
    mu, log_var, noise = np.asarray(mu), np.asarray(log_var), np.asarray(noise)
    if not (mu.shape == log_var.shape == noise.shape):
        raise ShapeError(
            f"shape mismatch: mu {mu.shape}, log_var {log_var.shape}, noise {noise.shape}"
        )
    return mu + np.exp(log_var / 2.0) * noise


def kl_divergence(mu: np.ndarray, log_var: np.ndarray) -> float:
    """KL divergence of N(mu, exp(log_var)) from the standard normal prior."""
    mu, log_var = np.asarray(mu, dtype=np.float64), np.asarray(log_var, dtype=np.float64)
    return float(0.5 * np.sum(mu * mu + np.exp(log_var) - 1.0 - log_var))


def interpolate(z1: np.ndarray, z2: np.ndarray, alpha: float) -> np.ndarray:
    """Convex combination alpha * z1 + (1 - alpha) * z2.

    Endpoints are exact: alpha 1 returns z1, alpha 0 returns z2, and equal
    inputs pass through unchanged for any alpha.
    """
    z1, z2 = np.asarray(z1), np.asarray(z2)
    if z1.shape != z2.shape:
        raise ShapeError(f"latent shapes {z1.shape} and {z2.shape} disagree")
    if not (0.0 <= alpha <= 1.0):
        raise ParameterError(f"alpha must be in [0,1], got {alpha}")
    if alpha == 1.0:
        return z1.copy()
    return z2 + alpha * (z1 - z2)


def decode(model: VaeModel, z: np.ndarray) -> np.ndarray:
    """Decode a latent vector into a mask in (0,1)."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (model.latent_dim,):
        raise ShapeError(f"latent shape {z.shape} != ({model.latent_dim},)")
    with torch.no_grad():
        out = model.decoder(torch.as_tensor(z, dtype=torch.float32).unsqueeze(0))
    return out[0, 0].double().numpy()


def sample_masks(model: VaeModel, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Decode ``n`` fresh prior samples into masks."""
    return [decode(model, rng.standard_normal(model.latent_dim)) for _ in range(n)]


def train_vae(
    model: VaeModel,
    masks,
    steps: int = 2000,
    batch_size: int = 16,
    lr: float = 1e-3,
    beta: float = 1.0,
    seed: int = 0,
) -> tuple[VaeModel, VaeTrace]:
    """Fit the VAE to a mask corpus by Adam on reconstruction BCE + beta * KL.

    Reconstruction is summed per sample (mean over the batch); the KL term
    is likewise a per-sample sum over latent dimensions.  Deterministic for
    a fixed (corpus, config, seed).
    """
    masks = [np.asarray(m, dtype=np.float32) for m in masks]
    if len(masks) < 2:
        raise DataError(f"need at least 2 masks to train, got {len(masks)}")
    for m in masks:
        if m.shape != (model.mask_size, model.mask_size):
            raise DataError(f"mask shape {m.shape} != ({model.mask_size},)*2")
    data = torch.as_tensor(np.stack(masks)).unsqueeze(1)
    n = data.shape[0]
    npix = model.mask_size * model.mask_size
    d = model.latent_dim

    params = list(model.encoder.parameters()) + list(model.decoder.parameters())
    optim = torch.optim.Adam(params, lr=lr)
    order_rng = np.random.default_rng(seed)
    noise_gen = torch.Generator().manual_seed(seed + 1)

    trace = VaeTrace()
    steps_per_epoch = max(1, n // batch_size)  # partial trailing batches are dropped
    epoch_acc: list[dict] = []
    perm = order_rng.permutation(n)
    cursor = 0
    for step in range(1, steps + 1):
        if cursor + batch_size > n and cursor > 0:
            perm = order_rng.permutation(n)
            cursor = 0
        idx = perm[cursor : cursor + batch_size]
        cursor += batch_size
        batch = data[idx]

        out = model.encoder(batch)
        mu, log_var = out[:, :d], out[:, d:].clamp(-LOG_VAR_CLAMP, LOG_VAR_CLAMP)
        noise = torch.randn(mu.shape, generator=noise_gen)
        z = mu + torch.exp(log_var / 2.0) * noise
        recon = model.decoder(z)

        recon_loss = nn.loss_bce(recon, batch) * npix
        kl = 0.5 * (mu.pow(2) + log_var.exp() - 1.0 - log_var).sum(dim=1).mean()
        total = recon_loss + beta * kl
        if not torch.isfinite(total):
            raise DivergenceError(f"non-finite VAE loss at step {step}", step=step)

        optim.zero_grad()
        total.backward()
        optim.step()

        record = {
            "step": step,
            "recon": float(recon_loss.detach()),
            "kl": float(kl.detach()),
            "total": float(total.detach()),
        }
        trace.steps.append(record)
        epoch_acc.append(record)
        if len(epoch_acc) == steps_per_epoch:
            trace.epochs.append(
                {
                    "epoch": len(trace.epochs),
                    "recon": float(np.mean([r["recon"] for r in epoch_acc])),
                    "kl": float(np.mean([r["kl"] for r in epoch_acc])),
                    "total": float(np.mean([r["total"] for r in epoch_acc])),
                }
            )
            epoch_acc = []
    if steps > 0:
        model.trained = True
    return model, trace


def reconstruct(model: VaeModel, mask: np.ndarray) -> np.ndarray:
    """Encode then decode a mask using the posterior mean."""
    mu, _ = encode(model, mask)
    return decode(model, mu)


def manifold_walk(
    model: VaeModel,
    mask_a: np.ndarray,
    mask_b: np.ndarray,
    steps: int,
    sample: bool = False,
    seed: int = 0,
) -> list[np.ndarray]:
    """Decode the latent path from mask_a to mask_b.

    Encodes both masks, then decodes convex combinations at alpha values
    from 1 down to 0, so the first frame is the reconstruction of ``mask_a``
    and the last the reconstruction of ``mask_b``.  Interpolation uses the
    posterior means for reproducibility; pass ``sample=True`` to draw
    reparameterized samples instead.
    """
    if steps < 2:
        raise ParameterError(f"walk needs at least 2 steps, got {steps}")
    if not model.trained:
        warnings.warn("walking the manifold of an untrained model", stacklevel=2)
    mu_a, lv_a = encode(model, mask_a)
    mu_b, lv_b = encode(model, mask_b)
    if sample:
        rng = np.random.default_rng(seed)
        z_a = reparameterize(mu_a, lv_a, rng.standard_normal(model.latent_dim))
        z_b = reparameterize(mu_b, lv_b, rng.standard_normal(model.latent_dim))
    else:
        z_a, z_b = mu_a, mu_b
    alphas = np.linspace(1.0, 0.0, steps)
    return [decode(model, interpolate(z_a, z_b, float(a))) for a in alphas]


def export_walk_frames(frames, out_dir, prefix: str = "walk") -> list[Path]:
    """Write walk masks as zero-padded numbered PNGs (walk_000.png, ...)."""
    from .imaging import save_mask

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        path = out_dir / f"{prefix}_{i:03d}.png"
        save_mask(path, np.clip(frame, 0.0, 1.0))
        paths.append(path)
    return paths


def save_vae(model: VaeModel, out_dir, seed: int = 0) -> None:
    """Persist encoder/decoder checkpoints plus the latent geometry."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "latent_dim": model.latent_dim,
        "mask_size": model.mask_size,
        "trained": model.trained,
        "encoder_arch": model.encoder.arch.to_text(),
        "decoder_arch": model.decoder.arch.to_text(),
    }
    (out_dir / "vae.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    nn.save_checkpoint(out_dir / "encoder.ckpt", model.encoder.arch, model.encoder,
                       extra={"seed": seed})
    nn.save_checkpoint(out_dir / "decoder.ckpt", model.decoder.arch, model.decoder,
                       extra={"seed": seed})


def load_vae(in_dir) -> VaeModel:
    """Load a VAE saved by :func:`save_vae`."""
    in_dir = Path(in_dir)
    meta = json.loads((in_dir / "vae.json").read_text())
    enc_arch = archdsl.parse_architecture(
        meta["encoder_arch"], name="vae_encoder", input_channels=1
    )
    dec_arch = archdsl.parse_architecture(
        meta["decoder_arch"], name="vae_decoder", input_channels=meta["latent_dim"]
    )
    enc_params, _, _, _ = nn.load_checkpoint(in_dir / "encoder.ckpt", enc_arch)
    dec_params, _, _, _ = nn.load_checkpoint(in_dir / "decoder.ckpt", dec_arch)
    encoder = nn.build_network(enc_arch, params=enc_params, input_size=meta["mask_size"])
    decoder = nn.build_network(dec_arch, params=dec_params)
    return VaeModel(encoder, decoder, meta["latent_dim"], meta["mask_size"], meta["trained"])
