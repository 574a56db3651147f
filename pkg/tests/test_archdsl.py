"""Layer-token grammar: parsing, formatting, descriptor validation."""

import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from soilgen import archdsl
from soilgen.archdsl import (
    ArchDescriptor,
    LayerSpec,
    canonical_format,
    parse_architecture,
    parse_layer_spec,
    validate_descriptor,
)
from soilgen.errors import ParseError


def test_conv_token():
    spec = parse_layer_spec("c7s1-32-R")
    assert spec == LayerSpec("conv", kernel=7, stride=1, out_channels=32, activation="relu")


def test_conv_token_leaky_relu():
    spec = parse_layer_spec("c4s2-64-LR")
    assert spec == LayerSpec("conv", kernel=4, stride=2, out_channels=64, activation="leaky_relu")


def test_transposed_conv_token():
    spec = parse_layer_spec("tc3s2-256-R")
    assert spec == LayerSpec(
        "transposed_conv", kernel=3, stride=2, out_channels=256, activation="relu"
    )


def test_reflection_pad_token():
    assert parse_layer_spec("rp-1") == LayerSpec("reflection_pad", pad_size=1)


def test_residual_token():
    assert parse_layer_spec("r-128") == LayerSpec("residual_block", out_channels=128)
    assert parse_layer_spec("r-64-BN") == LayerSpec("residual_block", out_channels=64, norm="batch")


def test_upsample_flatten_dense_reshape_tokens():
    assert parse_layer_spec("up2") == LayerSpec("upsample_nearest", scale=2)
    assert parse_layer_spec("flatten") == LayerSpec("flatten")
    assert parse_layer_spec("fc-64-S") == LayerSpec("dense", out_channels=64, activation="sigmoid")
    assert parse_layer_spec("rs-128x8x8") == LayerSpec(
        "reshape", out_channels=128, height=8, width=8
    )


def test_conv_with_norm_suffix():
    spec = parse_layer_spec("c3s2-32-R-IN")
    assert spec.norm == "instance"
    assert parse_layer_spec("c3s1-16-BN").norm == "batch"


@pytest.mark.parametrize(
    "bad",
    ["c7x1-32", "", "conv", "c7s1", "r-", "up0x", "fc", "rs-8x8", "c7s1-32-Q", "c0s1-3", "rp-0"],
)
def test_malformed_tokens_raise_parse_error(bad):
    with pytest.raises(ParseError):
        parse_layer_spec(bad)


def test_parse_error_names_token():
    with pytest.raises(ParseError) as err:
        parse_layer_spec("c7x1-32")
    assert "c7x1-32" in str(err.value)


def test_canonical_format_examples():
    assert canonical_format(LayerSpec("conv", kernel=7, stride=1, out_channels=32, activation="relu")) == "c7s1-32-R"
    assert canonical_format(LayerSpec("reflection_pad", pad_size=1)) == "rp-1"
    assert canonical_format(LayerSpec("residual_block", out_channels=128)) == "r-128"


def _grammar_specs():
    """Systematic + randomized sweep of the grammar space (>= 10^4 specs)."""
    acts = ["none", "relu", "leaky_relu", "tanh", "sigmoid"]
    norms = ["none", "instance", "batch"]
    for k, s, out, act, norm in itertools.product(
        [1, 2, 3, 4, 5, 7, 9], [1, 2, 3], [1, 3, 8, 32, 64, 128, 256, 512], acts, norms
    ):
        yield LayerSpec("conv", kernel=k, stride=s, out_channels=out, activation=act, norm=norm)
    for k, s, out, act in itertools.product([2, 3, 4, 5], [1, 2], [1, 16, 64, 256, 1024], acts):
        yield LayerSpec("transposed_conv", kernel=k, stride=s, out_channels=out, activation=act)
    for pad in range(1, 40):
        yield LayerSpec("reflection_pad", pad_size=pad)
    for out, norm in itertools.product([1, 2, 16, 64, 128, 333, 4096], norms):
        yield LayerSpec("residual_block", out_channels=out, norm=norm)
    for scale in range(1, 17):
        yield LayerSpec("upsample_nearest", scale=scale)
    yield LayerSpec("flatten")
    for out, act in itertools.product([1, 10, 64, 100, 8192], acts):
        yield LayerSpec("dense", out_channels=out, activation=act)
    for c, h, w in itertools.product([1, 16, 128], [1, 4, 8, 17], [1, 4, 8, 32]):
        yield LayerSpec("reshape", out_channels=c, height=h, width=w)
    # randomized tail to cover the integer space beyond the grid
    import numpy as np

    rng = np.random.default_rng(2024)
    kinds = ["conv", "transposed_conv", "reflection_pad", "residual_block",
             "upsample_nearest", "dense", "reshape"]
    for _ in range(8000):
        kind = kinds[rng.integers(len(kinds))]
        act = acts[rng.integers(len(acts))]
        norm = norms[rng.integers(len(norms))]
        big = lambda: int(rng.integers(1, 10_000))
        if kind == "conv":
            yield LayerSpec(kind, kernel=big(), stride=big(), out_channels=big(),
                            activation=act, norm=norm)
        elif kind == "transposed_conv":
            yield LayerSpec(kind, kernel=big(), stride=big(), out_channels=big(), activation=act)
        elif kind == "reflection_pad":
            yield LayerSpec(kind, pad_size=big())
        elif kind == "residual_block":
            yield LayerSpec(kind, out_channels=big(), norm=norm)
        elif kind == "upsample_nearest":
            yield LayerSpec(kind, scale=big())
        elif kind == "dense":
            yield LayerSpec(kind, out_channels=big(), activation=act)
        else:
            yield LayerSpec(kind, out_channels=big(), height=big(), width=big())


def test_round_trip_over_grammar_sweep():
    count = 0
    for spec in _grammar_specs():
        token = canonical_format(spec)
        assert parse_layer_spec(token) == spec, token
        count += 1
    assert count >= 10_000


@settings(max_examples=500, deadline=None)
@given(st.text(max_size=20))
def test_parsing_is_total(token):
    try:
        spec = parse_layer_spec(token)
    except ParseError:
        return
    assert isinstance(spec, LayerSpec)


@settings(max_examples=300, deadline=None)
@given(
    st.sampled_from(["c", "tc", "r", "rp", "up", "fc", "rs", "flatten"]),
    st.integers(min_value=-5, max_value=500),
    st.integers(min_value=-5, max_value=500),
    st.sampled_from(["", "-R", "-LR", "-T", "-S", "-IN", "-BN", "-XX", "x8"]),
)
def test_parsing_near_miss_tokens_is_total(prefix, a, b, suffix):
    token = f"{prefix}{a}s{b}-{abs(b)}{suffix}"
    try:
        spec = parse_layer_spec(token)
    except ParseError:
        return
    assert isinstance(spec, LayerSpec)
    assert canonical_format(spec) == token.strip()


def test_builtin_descriptors_validate_clean():
    for name in archdsl.BUILTIN_DESCRIPTORS:
        arch = archdsl.get_builtin(name)
        assert validate_descriptor(arch) == [], name


def test_validate_flags_residual_channel_mismatch():
    arch = ArchDescriptor(
        "bad",
        (parse_layer_spec("c3s1-32-R"), parse_layer_spec("r-64")),
        input_channels=3,
    )
    diags = validate_descriptor(arch)
    assert len(diags) == 1
    assert "layer 1" in diags[0]


def test_validate_flags_empty_architecture():
    assert validate_descriptor(ArchDescriptor("empty", (), 3)) == ["empty architecture"]


def test_validate_flags_spatial_after_flatten():
    arch = ArchDescriptor(
        "bad",
        (parse_layer_spec("flatten"), parse_layer_spec("c3s1-8")),
        input_channels=3,
    )
    assert any("spatial layer after flatten" in d for d in validate_descriptor(arch))


def test_parse_architecture_text_with_comments():
    text = "# generator trunk\nc7s1-32-R\n\nr-32  # residual\n"
    arch = parse_architecture(text, name="t", input_channels=3)
    assert [s.kind for s in arch.layers] == ["conv", "residual_block"]


def test_parse_architecture_reports_line():
    with pytest.raises(ParseError) as err:
        parse_architecture("c7s1-32-R\nbogus\n")
    assert err.value.position == 2


def test_architecture_file_round_trip(tmp_path):
    arch = archdsl.get_builtin("generator")
    path = tmp_path / "gen.arch"
    path.write_text(arch.to_text())
    loaded = archdsl.load_architecture(path, input_channels=3)
    assert loaded.layers == arch.layers


def test_resolve_builtin_reference():
    arch = archdsl.resolve_architecture("builtin:discriminator")
    assert arch.name == "discriminator"
    with pytest.raises(ParseError):
        archdsl.resolve_architecture("builtin:nope")


def test_builtin_generator_matches_registry_tokens():
    arch = archdsl.get_builtin("generator")
    tokens = [canonical_format(s) for s in arch.layers]
    assert tokens == [
        "c7s1-32-R", "c3s2-64-R", "c3s2-128-R",
        "r-128", "r-128", "r-128", "r-128",
        "tc3s2-64-R", "tc3s2-32-R", "rp-3", "c7s1-3-T",
    ]


def test_builtin_vae_decoder_contains_registry_tokens():
    arch = archdsl.get_builtin("vae_decoder")
    tokens = [canonical_format(s) for s in arch.layers]
    assert "tc3s2-256-R" in tokens
    assert "rp-1" in tokens
    assert tokens[-1] == "c3s1-1-S"
