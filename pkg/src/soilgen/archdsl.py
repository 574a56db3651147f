"""Layer-descriptor notation: parsing, formatting and the builtin registry.

Every network in the package is instantiated from a textual architecture
description made of compact layer tokens, e.g. ``c7s1-32-R`` (7x7 conv,
stride 1, 32 output channels, ReLU) or ``tc3s2-256-R`` (transposed conv).
Grammar:

    c<k>s<s>-<out>[-<act>][-<norm>]   2-D convolution
    tc<k>s<s>-<out>[-<act>]          transposed convolution
    rp-<n>                           reflection padding of size n
    r-<c>[-<norm>]                   residual block with c channels
    up<f>                            nearest-neighbor upsampling, scale f
    flatten                          collapse (C,H,W) to a vector
    fc-<out>[-<act>]                 dense layer
    rs-<c>x<h>x<w>                   reshape a vector to (c,h,w)

Activation codes: R=relu, LR=leaky_relu, T=tanh, S=sigmoid.
Normalization codes: IN=instance, BN=batch.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

from .errors import ParseError

CONV = "conv"
TRANSPOSED_CONV = "transposed_conv"
REFLECTION_PAD = "reflection_pad"
RESIDUAL_BLOCK = "residual_block"
UPSAMPLE_NEAREST = "upsample_nearest"
FLATTEN = "flatten"
DENSE = "dense"
RESHAPE = "reshape"

ACTIVATIONS = {"R": "relu", "LR": "leaky_relu", "T": "tanh", "S": "sigmoid"}
NORMS = {"IN": "instance", "BN": "batch"}
_ACT_CODES = {v: k for k, v in ACTIVATIONS.items()}
_NORM_CODES = {v: k for k, v in NORMS.items()}

#: negative slope used by every leaky ReLU
LEAKY_RELU_SLOPE = 0.2

_ACT_RE = "|".join(ACTIVATIONS)
_NORM_RE = "|".join(NORMS)
_TOKEN_RES = [
    (CONV, re.compile(rf"^c(\d+)s(\d+)-(\d+)(?:-({_ACT_RE}))?(?:-({_NORM_RE}))?$")),
    (TRANSPOSED_CONV, re.compile(rf"^tc(\d+)s(\d+)-(\d+)(?:-({_ACT_RE}))?$")),
    (REFLECTION_PAD, re.compile(r"^rp-(\d+)$")),
    (RESIDUAL_BLOCK, re.compile(rf"^r-(\d+)(?:-({_NORM_RE}))?$")),
    (UPSAMPLE_NEAREST, re.compile(r"^up(\d+)$")),
    (FLATTEN, re.compile(r"^flatten$")),
    (DENSE, re.compile(rf"^fc-(\d+)(?:-({_ACT_RE}))?$")),
    (RESHAPE, re.compile(r"^rs-(\d+)x(\d+)x(\d+)$")),
]


@dataclass(frozen=True)
class LayerSpec:
    """Canonical form of a single layer token."""

    kind: str
    kernel: int | None = None
    stride: int | None = None
    out_channels: int | None = None
    activation: str = "none"
    norm: str = "none"
    pad_size: int | None = None
    scale: int | None = None
    height: int | None = None
    width: int | None = None

    def __post_init__(self):
        required = {
            CONV: ("kernel", "stride", "out_channels"),
            TRANSPOSED_CONV: ("kernel", "stride", "out_channels"),
            REFLECTION_PAD: ("pad_size",),
            RESIDUAL_BLOCK: ("out_channels",),
            UPSAMPLE_NEAREST: ("scale",),
            FLATTEN: (),
            DENSE: ("out_channels",),
            RESHAPE: ("out_channels", "height", "width"),
        }
        if self.kind not in required:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        for name in required[self.kind]:
            value = getattr(self, name)
            if value is None or value < 1:
                raise ValueError(f"{self.kind} layer requires positive {name}, got {value}")
        if self.activation not in ("none", *ACTIVATIONS.values()):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.norm not in ("none", *NORMS.values()):
            raise ValueError(f"unknown norm {self.norm!r}")


def parse_layer_spec(token: str) -> LayerSpec:
    """Parse one layer token into a :class:`LayerSpec`.

    Raises :class:`ParseError` naming the offending token for anything the
    grammar does not produce.
    """
    tok = token.strip()
    if not tok:
        raise ParseError("empty layer token", token=token)
    for kind, pattern in _TOKEN_RES:
        m = pattern.match(tok)
        if m is None:
            continue
        try:
            return _spec_from_match(kind, m)
        except ValueError as exc:
            raise ParseError(f"invalid layer token {tok!r}: {exc}", token=tok) from exc
    raise ParseError(f"unrecognized layer token {tok!r}", token=tok)


def _spec_from_match(kind, m):
    g = m.groups()
    if kind == CONV:
        return LayerSpec(
            kind,
            kernel=int(g[0]),
            stride=int(g[1]),
            out_channels=int(g[2]),
            activation=ACTIVATIONS.get(g[3], "none"),
            norm=NORMS.get(g[4], "none"),
        )
    if kind == TRANSPOSED_CONV:
        return LayerSpec(
            kind,
            kernel=int(g[0]),
            stride=int(g[1]),
            out_channels=int(g[2]),
            activation=ACTIVATIONS.get(g[3], "none"),
        )
    if kind == REFLECTION_PAD:
        return LayerSpec(kind, pad_size=int(g[0]))
    if kind == RESIDUAL_BLOCK:
        return LayerSpec(kind, out_channels=int(g[0]), norm=NORMS.get(g[1], "none"))
    if kind == UPSAMPLE_NEAREST:
        return LayerSpec(kind, scale=int(g[0]))
    if kind == FLATTEN:
        return LayerSpec(kind)
    if kind == DENSE:
        return LayerSpec(kind, out_channels=int(g[0]), activation=ACTIVATIONS.get(g[1], "none"))
    if kind == RESHAPE:
        return LayerSpec(kind, out_channels=int(g[0]), height=int(g[1]), width=int(g[2]))
    raise AssertionError(kind)


def canonical_format(spec: LayerSpec) -> str:
    """Format a :class:`LayerSpec` as its token; inverse of :func:`parse_layer_spec`."""
    act = f"-{_ACT_CODES[spec.activation]}" if spec.activation != "none" else ""
    norm = f"-{_NORM_CODES[spec.norm]}" if spec.norm != "none" else ""
    if spec.kind == CONV:
        return f"c{spec.kernel}s{spec.stride}-{spec.out_channels}{act}{norm}"
    if spec.kind == TRANSPOSED_CONV:
        return f"tc{spec.kernel}s{spec.stride}-{spec.out_channels}{act}"
    if spec.kind == REFLECTION_PAD:
        return f"rp-{spec.pad_size}"
    if spec.kind == RESIDUAL_BLOCK:
        return f"r-{spec.out_channels}{norm}"
    if spec.kind == UPSAMPLE_NEAREST:
        return f"up{spec.scale}"
    if spec.kind == FLATTEN:
        return "flatten"
    if spec.kind == DENSE:
        return f"fc-{spec.out_channels}{act}"
    if spec.kind == RESHAPE:
        return f"rs-{spec.out_channels}x{spec.height}x{spec.width}"
    raise ValueError(f"unknown layer kind {spec.kind!r}")


@dataclass(frozen=True)
class ArchDescriptor:
    """Named, ordered stack of layer specs plus the input channel count.

    ``input_channels`` is the image channel count for spatial networks and
    the vector dimension when the first layer is dense.
    """

    name: str
    layers: tuple[LayerSpec, ...]
    input_channels: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    def to_text(self) -> str:
        """One canonical token per line."""
        return "\n".join(canonical_format(s) for s in self.layers) + "\n"


def validate_descriptor(arch: ArchDescriptor) -> list[str]:
    """Return diagnostics for structural problems; empty list means valid.

    Checks that the stack is non-empty, that spatial/vector layer kinds are
    not mixed illegally and that residual blocks declare the channel count
    actually reaching them.
    """
    diags: list[str] = []
    if not arch.layers:
        return ["empty architecture"]
    if arch.input_channels < 1:
        diags.append(f"input_channels must be positive, got {arch.input_channels}")

    flat = bool(arch.layers) and arch.layers[0].kind == DENSE
    channels = None if flat else arch.input_channels
    for i, spec in enumerate(arch.layers):
        if spec.kind in (CONV, TRANSPOSED_CONV, REFLECTION_PAD, RESIDUAL_BLOCK, UPSAMPLE_NEAREST):
            if flat:
                diags.append(f"layer {i} ({canonical_format(spec)}): spatial layer after flatten")
                continue
            if spec.kind == RESIDUAL_BLOCK and channels is not None and spec.out_channels != channels:
                diags.append(
                    f"layer {i} ({canonical_format(spec)}): residual block declares "
                    f"{spec.out_channels} channels but receives {channels}"
                )
            if spec.kind in (CONV, TRANSPOSED_CONV, RESIDUAL_BLOCK):
                channels = spec.out_channels
        elif spec.kind == FLATTEN:
            if flat:
                diags.append(f"layer {i} (flatten): input is already flat")
            flat, channels = True, None
        elif spec.kind == DENSE:
            if not flat:
                diags.append(f"layer {i} ({canonical_format(spec)}): dense layer on spatial input")
        elif spec.kind == RESHAPE:
            if not flat:
                diags.append(f"layer {i} ({canonical_format(spec)}): reshape on spatial input")
            flat, channels = False, spec.out_channels
    return diags


def parse_architecture(
    text: str, name: str = "custom", input_channels: int = 3
) -> ArchDescriptor:
    """Parse an architecture from text: one layer token per line, ``#`` comments."""
    layers = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            layers.append(parse_layer_spec(line))
        except ParseError as exc:
            raise ParseError(f"line {lineno}: {exc}", token=line, position=lineno) from exc
    return ArchDescriptor(name=name, layers=tuple(layers), input_channels=input_channels)


def load_architecture(path, input_channels: int = 3) -> ArchDescriptor:
    """Load an architecture file (one token per line, ``#`` comments)."""
    path = Path(path)
    return parse_architecture(path.read_text(), name=path.stem, input_channels=input_channels)


def _tokens(*tokens: str) -> tuple[LayerSpec, ...]:
    return tuple(parse_layer_spec(t) for t in tokens)


def generator_descriptor(
    channels: int = 3, base_width: int = 32, n_res: int = 4, name: str = "generator"
) -> ArchDescriptor:
    """Image-to-image translation generator: encoder, residual trunk, decoder.

    No normalization anywhere; tanh output in network range.
    """
    w = base_width
    tokens = [f"c7s1-{w}-R", f"c3s2-{2 * w}-R", f"c3s2-{4 * w}-R"]
    tokens += [f"r-{4 * w}"] * n_res
    tokens += [f"tc3s2-{2 * w}-R", f"tc3s2-{w}-R", "rp-3", f"c7s1-{channels}-T"]
    return ArchDescriptor(name=name, layers=_tokens(*tokens), input_channels=channels)


def discriminator_descriptor(
    channels: int = 3, base_width: int = 64, name: str = "discriminator"
) -> ArchDescriptor:
    """Patch discriminator: strided leaky-ReLU convs, sigmoid score map."""
    w = base_width
    tokens = [f"c4s2-{w}-LR", f"c4s2-{2 * w}-LR", f"c4s2-{4 * w}-LR", "c4s1-1-S"]
    return ArchDescriptor(name=name, layers=_tokens(*tokens), input_channels=channels)


def mask_seg_descriptor(
    channels: int = 3, num_classes: int = 3, base_width: int = 32, name: str = "mask_seg"
) -> ArchDescriptor:
    """Soiling segmentation network: instance-norm conv blocks, batch-norm
    residual block, nearest-neighbor upsampling back to input resolution."""
    w = base_width
    tokens = [
        f"c3s2-{w}-R-IN",
        f"c3s2-{2 * w}-R-IN",
        f"r-{2 * w}-BN",
        "up2",
        f"c3s1-{w}-R-IN",
        "up2",
        f"c3s1-{num_classes}",
    ]
    return ArchDescriptor(name=name, layers=_tokens(*tokens), input_channels=channels)


def vae_encoder_descriptor(
    latent_dim: int = 32, base_width: int = 32, name: str = "vae_encoder"
) -> ArchDescriptor:
    """Mask encoder; the final dense layer holds both heads (mean then
    log-variance, ``latent_dim`` values each)."""
    w = base_width
    tokens = [f"c3s2-{w}-R", f"c3s2-{2 * w}-R", "flatten", f"fc-{2 * latent_dim}"]
    return ArchDescriptor(name=name, layers=_tokens(*tokens), input_channels=1)


def vae_decoder_descriptor(
    latent_dim: int = 32, mask_size: int = 32, base_width: int = 64, name: str = "vae_decoder"
) -> ArchDescriptor:
    """Mask decoder: dense + reshape, transposed convs, sigmoid mask output."""
    if mask_size % 4:
        raise ValueError(f"mask_size must be divisible by 4, got {mask_size}")
    s = mask_size // 4
    w = base_width
    tokens = [
        f"fc-{2 * w * s * s}",
        f"rs-{2 * w}x{s}x{s}",
        f"tc3s2-{4 * w}-R",
        f"tc3s2-{w}-R",
        "rp-1",
        "c3s1-1-S",
    ]
    return ArchDescriptor(name=name, layers=_tokens(*tokens), input_channels=latent_dim)


BUILTIN_DESCRIPTORS = {
    "generator": generator_descriptor,
    "discriminator": discriminator_descriptor,
    "mask_seg": mask_seg_descriptor,
    "vae_encoder": vae_encoder_descriptor,
    "vae_decoder": vae_decoder_descriptor,
}


def get_builtin(name: str, **overrides) -> ArchDescriptor:
    """Instantiate a builtin descriptor, optionally overriding widths/sizes."""
    try:
        factory = BUILTIN_DESCRIPTORS[name]
    except KeyError:
        raise ParseError(
            f"unknown builtin architecture {name!r}; "
            f"available: {', '.join(sorted(BUILTIN_DESCRIPTORS))}",
            token=name,
        ) from None
    return factory(**overrides)


def resolve_architecture(ref: str, input_channels: int = 3, **overrides) -> ArchDescriptor:
    """Resolve ``builtin:<name>`` or a file path into a descriptor."""
    if ref.startswith("builtin:"):
        return get_builtin(ref.split(":", 1)[1], **overrides)
    return load_architecture(ref, input_channels=input_channels)
