"""Network instantiation, losses, optimizer step and checkpointing.

Networks are built from :class:`~soilgen.archdsl.ArchDescriptor` stacks on
top of torch modules.  Layer semantics:

* convolutions use implicit zero padding of (k-1)//2 except directly after
  an explicit reflection-pad layer, which disables the implicit padding;
* transposed convolutions support stride 2 and exactly double the spatial
  size (output padding chosen accordingly);
* a residual block is two 3x3 stride-1 convs (each optionally normalized,
  ReLU between) plus the identity skip;
* instance norm normalizes per sample and channel; batch norm uses batch
  statistics in train mode and running averages in eval mode.

Training runs in single precision; gradient verification switches networks
to double precision (see :mod:`soilgen.gradcheck`).
"""

from __future__ import annotations

import json
import zipfile
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch
from torch import nn as tnn

from . import archdsl
from .archdsl import ArchDescriptor, LayerSpec
from .errors import (
    ArchitectureError,
    CheckpointError,
    DivergenceError,
    ShapeError,
    StateError,
)

INIT_STD = 0.02
BCE_EPS = 1e-7

_ACT_MODULES = {
    "relu": lambda: tnn.ReLU(),
    "leaky_relu": lambda: tnn.LeakyReLU(archdsl.LEAKY_RELU_SLOPE),
    "tanh": lambda: tnn.Tanh(),
    "sigmoid": lambda: tnn.Sigmoid(),
}


def _norm_module(norm: str, channels: int) -> tnn.Module | None:
    if norm == "instance":
        return tnn.InstanceNorm2d(channels, affine=True, track_running_stats=False)
    if norm == "batch":
        return tnn.BatchNorm2d(channels)
    return None


class _ConvBlock(tnn.Module):
    def __init__(self, in_ch, spec: LayerSpec, implicit_pad: bool, transposed: bool):
        super().__init__()
        k, s = spec.kernel, spec.stride
        bias = spec.norm == "none"  # a norm layer cancels any constant shift
        if transposed:
            if s != 2:
                raise ArchitectureError(f"transposed conv supports stride 2 only, got {s}")
            p = (k - 1) // 2
            out_pad = 2 * p - k + 2
            self.conv = tnn.ConvTranspose2d(in_ch, spec.out_channels, k, s, p, out_pad, bias=bias)
        else:
            p = (k - 1) // 2 if implicit_pad else 0
            self.conv = tnn.Conv2d(in_ch, spec.out_channels, k, s, p, bias=bias)
        self.norm = _norm_module(spec.norm, spec.out_channels)
        self.act = _ACT_MODULES[spec.activation]() if spec.activation != "none" else None

    def forward(self, x):
        x = self.conv(x)
        if self.norm is not None:
            x = self.norm(x)
        if self.act is not None:
            x = self.act(x)
        return x


class _ResidualBlock(tnn.Module):
    """conv3x3 (+norm) + ReLU, conv3x3 (+norm), identity skip."""

    def __init__(self, channels: int, norm: str):
        super().__init__()
        bias = norm == "none"
        self.conv1 = tnn.Conv2d(channels, channels, 3, 1, 1, bias=bias)
        self.norm1 = _norm_module(norm, channels)
        self.conv2 = tnn.Conv2d(channels, channels, 3, 1, 1, bias=bias)
        self.norm2 = _norm_module(norm, channels)
        self.relu = tnn.ReLU()

    def forward(self, x):
        y = self.conv1(x)
        if self.norm1 is not None:
            y = self.norm1(y)
        y = self.relu(y)
        y = self.conv2(y)
        if self.norm2 is not None:
            y = self.norm2(y)
        return x + y


class _Dense(tnn.Module):
    def __init__(self, in_features, spec: LayerSpec):
        super().__init__()
        self.linear = tnn.Linear(in_features, spec.out_channels)
        self.act = _ACT_MODULES[spec.activation]() if spec.activation != "none" else None

    def forward(self, x):
        x = self.linear(x)
        if self.act is not None:
            x = self.act(x)
        return x


class _Reshape(tnn.Module):
    def __init__(self, channels, height, width):
        super().__init__()
        self.shape = (channels, height, width)

    def forward(self, x):
        return x.reshape(x.shape[0], *self.shape)


class Network(tnn.Module):
    """A descriptor-instantiated network.

    ``input_size`` (H, W) is only required when the stack flattens spatial
    input into dense layers, so the dense input width can be inferred.
    """

    def __init__(self, arch: ArchDescriptor, input_size: int | tuple[int, int] | None = None):
        super().__init__()
        diags = archdsl.validate_descriptor(arch)
        if diags:
            raise ArchitectureError(f"invalid architecture {arch.name!r}: " + "; ".join(diags))
        self.arch = arch
        self.input_is_flat = arch.layers[0].kind == archdsl.DENSE
        if isinstance(input_size, int):
            input_size = (input_size, input_size)
        blocks: list[tnn.Module] = []
        channels = arch.input_channels
        size = input_size
        features = arch.input_channels if self.input_is_flat else None
        after_pad = False
        for spec in arch.layers:
            kind = spec.kind
            if kind in (archdsl.CONV, archdsl.TRANSPOSED_CONV):
                blocks.append(
                    _ConvBlock(
                        channels,
                        spec,
                        implicit_pad=not after_pad,
                        transposed=kind == archdsl.TRANSPOSED_CONV,
                    )
                )
                size = _conv_size(size, spec, implicit_pad=not after_pad)
                channels = spec.out_channels
            elif kind == archdsl.RESIDUAL_BLOCK:
                blocks.append(_ResidualBlock(spec.out_channels, spec.norm))
                channels = spec.out_channels
            elif kind == archdsl.REFLECTION_PAD:
                blocks.append(tnn.ReflectionPad2d(spec.pad_size))
                if size is not None:
                    size = (size[0] + 2 * spec.pad_size, size[1] + 2 * spec.pad_size)
            elif kind == archdsl.UPSAMPLE_NEAREST:
                blocks.append(tnn.Upsample(scale_factor=spec.scale, mode="nearest"))
                if size is not None:
                    size = (size[0] * spec.scale, size[1] * spec.scale)
            elif kind == archdsl.FLATTEN:
                blocks.append(tnn.Flatten())
                if size is None:
                    raise ArchitectureError(
                        f"architecture {arch.name!r} flattens spatial input; "
                        "pass input_size to instantiate it"
                    )
                features = channels * size[0] * size[1]
            elif kind == archdsl.DENSE:
                blocks.append(_Dense(features, spec))
                features = spec.out_channels
            elif kind == archdsl.RESHAPE:
                blocks.append(_Reshape(spec.out_channels, spec.height, spec.width))
                channels = spec.out_channels
                size = (spec.height, spec.width)
            else:
                raise ArchitectureError(f"unsupported layer kind {kind!r}")
            after_pad = kind == archdsl.REFLECTION_PAD
        self.blocks = tnn.ModuleList(blocks)

    def forward(self, x):
        x = self._check_input(x)
        for block in self.blocks:
            x = block(x)
        return x

    def _check_input(self, x):
        if not torch.is_tensor(x):
            first = next(self.parameters(), None)
            dtype = torch.float32 if first is None else first.dtype
            x = torch.as_tensor(np.asarray(x), dtype=dtype)
        if self.input_is_flat:
            if x.ndim == 1:
                x = x.unsqueeze(0)
            if x.ndim != 2 or x.shape[1] != self.arch.input_channels:
                raise ShapeError(
                    f"{self.arch.name!r} expects (N, {self.arch.input_channels}) input, "
                    f"got {tuple(x.shape)}"
                )
        else:
            if x.ndim == 3:
                x = x.unsqueeze(0)
            if x.ndim != 4 or x.shape[1] != self.arch.input_channels:
                raise ShapeError(
                    f"{self.arch.name!r} expects (N, {self.arch.input_channels}, H, W) input, "
                    f"got {tuple(x.shape)}"
                )
        return x


def _conv_size(size, spec, implicit_pad):
    if size is None:
        return None
    k, s = spec.kernel, spec.stride
    if spec.kind == archdsl.TRANSPOSED_CONV:
        return (size[0] * 2, size[1] * 2)
    p = (k - 1) // 2 if implicit_pad else 0
    return ((size[0] + 2 * p - k) // s + 1, (size[1] + 2 * p - k) // s + 1)


@dataclass
class ParamStore:
    """Named parameter (and buffer) arrays for one network."""

    arrays: "OrderedDict[str, torch.Tensor]"
    rng_seed: int
    buffers: "OrderedDict[str, torch.Tensor]" = field(default_factory=OrderedDict)

    def copy(self) -> "ParamStore":
        return ParamStore(
            OrderedDict((k, v.clone()) for k, v in self.arrays.items()),
            self.rng_seed,
            OrderedDict((k, v.clone()) for k, v in self.buffers.items()),
        )

    def keys(self):
        return self.arrays.keys()

    def __getitem__(self, key):
        return self.arrays[key]

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)


def init_params(
    arch: ArchDescriptor, seed: int, input_size: int | tuple[int, int] | None = None
) -> ParamStore:
    """Deterministically initialize parameters for a descriptor.

    Conv/dense weights are zero-mean Gaussian with std 0.02, biases zero,
    normalization scales 1 and offsets 0.  The same (arch, seed) pair always
    yields bit-identical arrays.
    """
    net = Network(arch, input_size=input_size)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (tnn.Conv2d, tnn.ConvTranspose2d, tnn.Linear)):
                module.weight.normal_(0.0, INIT_STD, generator=g)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, (tnn.InstanceNorm2d, tnn.BatchNorm2d)):
                if module.weight is not None:
                    module.weight.fill_(1.0)
                if module.bias is not None:
                    module.bias.zero_()
    arrays = OrderedDict((k, v.detach().clone()) for k, v in net.named_parameters())
    buffers = OrderedDict((k, v.detach().clone()) for k, v in net.named_buffers())
    return ParamStore(arrays, rng_seed=seed, buffers=buffers)


def build_network(
    arch: ArchDescriptor,
    params: ParamStore | None = None,
    seed: int = 0,
    input_size: int | tuple[int, int] | None = None,
) -> Network:
    """Instantiate a network and load ``params`` (or a fresh seeded init)."""
    if params is None:
        params = init_params(arch, seed, input_size=input_size)
    net = Network(arch, input_size=input_size)
    state = OrderedDict(params.arrays)
    state.update(params.buffers)
    net.load_state_dict(state, strict=True)
    return net


def rescale_to_unit_gain(net: Network) -> Network:
    """Rescale conv/dense weights to He-style magnitudes in place.

    Networks without normalization layers lose their signal under the
    std-0.02 convention (each layer shrinks activations by roughly
    0.02*sqrt(fan_in)), which stalls training from scratch.  Multiplying
    every weight tensor by sqrt(2/fan_in)/0.02 keeps the seeded random
    directions but restores unit forward gain.
    """
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, tnn.Conv2d):
                fan_in = module.weight[0].numel()
            elif isinstance(module, tnn.ConvTranspose2d):
                fan_in = module.weight.shape[0] * module.weight.shape[2] * module.weight.shape[3]
            elif isinstance(module, tnn.Linear):
                fan_in = module.weight.shape[1]
            else:
                continue
            module.weight.mul_(np.sqrt(2.0 / fan_in) / INIT_STD)
    return net


def forward(net: Network, x) -> torch.Tensor:
    """Apply the network's layers in order."""
    return net(x)


def snapshot_params(net: Network, rng_seed: int = 0) -> ParamStore:
    """Copy a network's current parameters/buffers into a ParamStore."""
    return ParamStore(
        OrderedDict((k, v.detach().clone()) for k, v in net.named_parameters()),
        rng_seed=rng_seed,
        buffers=OrderedDict((k, v.detach().clone()) for k, v in net.named_buffers()),
    )


def loss_l1(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).abs().mean()


def loss_lsgan(d_out: torch.Tensor, target: float) -> torch.Tensor:
    """Least-squares adversarial loss: mean of (d_out - target)^2."""
    return ((d_out - float(target)) ** 2).mean()


def loss_bce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy, predictions clamped to [eps, 1-eps]."""
    p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)
    t = target if torch.is_tensor(target) else torch.as_tensor(target, dtype=p.dtype)
    return -(t * p.log() + (1.0 - t) * (1.0 - p).log()).mean()


def backward(net: Network, loss: torch.Tensor) -> "OrderedDict[str, torch.Tensor]":
    """Reverse-mode gradients of a scalar loss w.r.t. every network parameter.

    Parameters the loss does not depend on get exact zero gradients.
    """
    if not torch.is_tensor(loss) or loss.grad_fn is None:
        raise StateError("backward requires a loss produced by a forward pass")
    names, params = zip(*net.named_parameters())
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    out = OrderedDict()
    for name, p, g in zip(names, params, grads):
        out[name] = torch.zeros_like(p) if g is None else g.detach()
    return out


@dataclass
class AdamState:
    """First/second moment estimates plus the step counter."""

    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(
    params: ParamStore,
    grads: Mapping[str, torch.Tensor],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    state: AdamState | None = None,
) -> tuple[ParamStore, AdamState]:
    """One bias-corrected Adam update; returns new params and state.

    Inputs are not mutated; identical inputs yield identical outputs.
    """
    b1, b2 = betas
    state = state or AdamState()
    new_state = AdamState(step=state.step + 1, m=dict(state.m), v=dict(state.v))
    t = new_state.step
    new_arrays = OrderedDict()
    for key, p in params.arrays.items():
        g = grads.get(key)
        if g is None:
            new_arrays[key] = p.clone()
            continue
        if not torch.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for {key!r}", step=t)
        m = b1 * state.m.get(key, torch.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(key, torch.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_arrays[key] = p - lr * m_hat / (v_hat.sqrt() + eps)
        new_state.m[key] = m
        new_state.v[key] = v
    return ParamStore(new_arrays, params.rng_seed, OrderedDict(params.buffers)), new_state


CHECKPOINT_FORMAT = "soilgen-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(
    path,
    arch: ArchDescriptor,
    net_or_params: Network | ParamStore,
    optimizer_state: dict | None = None,
    step: int = 0,
    extra: dict | None = None,
) -> None:
    """Write a self-describing checkpoint container.

    The container stores the canonical architecture text, every parameter
    and buffer as little-endian float32, optional optimizer state arrays and
    the step counter.
    """
    if isinstance(net_or_params, Network):
        store = snapshot_params(net_or_params)
    else:
        store = net_or_params
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arch": {
            "name": arch.name,
            "input_channels": arch.input_channels,
            "layers": arch.to_text(),
        },
        "params": [{"key": k, "shape": list(v.shape)} for k, v in store.arrays.items()],
        "buffers": [{"key": k, "shape": list(v.shape)} for k, v in store.buffers.items()],
        "optimizer": _optimizer_manifest(optimizer_state),
        "step": int(step),
        "extra": extra or {},
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, indent=2, sort_keys=True))
        for key, tensor in store.arrays.items():
            zf.writestr(f"params/{key}", _tensor_bytes(tensor))
        for key, tensor in store.buffers.items():
            zf.writestr(f"buffers/{key}", _tensor_bytes(tensor))
        if optimizer_state:
            for section in ("m", "v"):
                for key, tensor in optimizer_state.get(section, {}).items():
                    zf.writestr(f"opt/{section}/{key}", _tensor_bytes(tensor))


def load_checkpoint(path, arch: ArchDescriptor):
    """Load a checkpoint, rejecting architecture mismatches.

    Returns ``(params, optimizer_state_or_None, step, extra)``.
    """
    try:
        zf = zipfile.ZipFile(path, "r")
    except (OSError, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise CheckpointError(f"{path} is not a checkpoint (no manifest)") from None
        if manifest.get("format") != CHECKPOINT_FORMAT:
            raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} container")
        stored = manifest["arch"]
        if stored["layers"] != arch.to_text() or stored["input_channels"] != arch.input_channels:
            raise CheckpointError(
                f"checkpoint architecture {stored['name']!r} does not match "
                f"requested descriptor {arch.name!r}"
            )
        arrays = OrderedDict(
            (e["key"], _read_tensor(zf, f"params/{e['key']}", e["shape"]))
            for e in manifest["params"]
        )
        buffers = OrderedDict(
            (e["key"], _read_tensor(zf, f"buffers/{e['key']}", e["shape"]))
            for e in manifest["buffers"]
        )
        opt = None
        if manifest.get("optimizer"):
            opt = {"step_counts": manifest["optimizer"]["step_counts"], "m": {}, "v": {}}
            shapes = {e["key"]: e["shape"] for e in manifest["params"]}
            for section in ("m", "v"):
                for key in manifest["optimizer"][section]:
                    opt[section][key] = _read_tensor(zf, f"opt/{section}/{key}", shapes[key])
        store = ParamStore(arrays, rng_seed=manifest.get("extra", {}).get("seed", 0), buffers=buffers)
        return store, opt, manifest["step"], manifest.get("extra", {})


def _optimizer_manifest(opt_state):
    if not opt_state:
        return None
    return {
        "step_counts": opt_state.get("step_counts", {}),
        "m": sorted(opt_state.get("m", {})),
        "v": sorted(opt_state.get("v", {})),
    }


def _tensor_bytes(tensor: torch.Tensor) -> bytes:
    return np.ascontiguousarray(tensor.detach().cpu().numpy().astype("<f4")).tobytes()


def _read_tensor(zf, name, shape) -> torch.Tensor:
    data = np.frombuffer(zf.read(name), dtype="<f4").reshape(shape)
    return torch.from_numpy(data.copy())


def optimizer_state_from_torch(optim: torch.optim.Adam, net: Network) -> dict:
    """Extract a torch Adam optimizer's moments keyed by parameter name."""
    name_by_param = {id(p): n for n, p in net.named_parameters()}
    out = {"step_counts": {}, "m": {}, "v": {}}
    for group in optim.param_groups:
        for p in group["params"]:
            st = optim.state.get(p)
            name = name_by_param.get(id(p))
            if not st or name is None:
                continue
            out["step_counts"][name] = int(st["step"])
            out["m"][name] = st["exp_avg"].detach().clone()
            out["v"][name] = st["exp_avg_sq"].detach().clone()
    return out
