"""Run configuration: plain-text key=value files, typed schema, stable digest.

Configuration precedence is file values first, then overrides left to
right.  Unknown keys are rejected; every numeric key is range-checked at
parse time.  The digest is computed over the fully resolved mapping and is
independent of key order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError
from .seeding import stable_digest


@dataclass(frozen=True)
class _Key:
    kind: type
    default: object
    lo: float | None = None
    hi: float | None = None
    choices: tuple | None = None

    def describe(self) -> str:
        if self.choices:
            return f"one of {sorted(self.choices)}"
        if self.lo is None and self.hi is None:
            return self.kind.__name__
        lo = "-inf" if self.lo is None else self.lo
        hi = "inf" if self.hi is None else self.hi
        return f"{self.kind.__name__} in [{lo}, {hi}]"


SCHEMA: dict[str, _Key] = {
    # global
    "seed": _Key(int, 0, lo=0),
    "out": _Key(str, "out"),
    # corpora (paths; empty means unset)
    "corpus": _Key(str, ""),
    "clean_corpus": _Key(str, ""),
    "soiled_corpus": _Key(str, ""),
    "real_corpus": _Key(str, ""),
    "generated_corpus": _Key(str, ""),
    # model checkpoint directories
    "vae_dir": _Key(str, ""),
    "gan_dir": _Key(str, ""),
    "seg_dir": _Key(str, ""),
    # procedural corpus
    "size": _Key(int, 64, lo=8, hi=4096),
    "corpus_n": _Key(int, 60, lo=1),
    # imaging
    "sigma": _Key(float, 1.0, lo=0.0, hi=64.0),
    "transparent_alpha": _Key(float, 0.5, lo=0.0, hi=1.0),
    "factor": _Key(int, 4, lo=1, hi=64),
    "mask_floor": _Key(float, 0.05, lo=0.0, hi=0.5),
    # VAE
    "latent_dim": _Key(int, 32, lo=1),
    "mask_size": _Key(int, 32, lo=8, hi=1024),
    "vae_steps": _Key(int, 2000, lo=0),
    "vae_batch": _Key(int, 16, lo=1),
    "vae_lr": _Key(float, 1e-3, lo=1e-8, hi=1.0),
    "beta_kl": _Key(float, 1.0, lo=0.0),
    "vae_encoder_width": _Key(int, 32, lo=1),
    "vae_decoder_width": _Key(int, 64, lo=1),
    "vae_mask_source": _Key(str, "weak", choices=("weak", "true")),
    # translation GAN
    "gan_steps": _Key(int, 2000, lo=0),
    "gan_batch": _Key(int, 2, lo=1),
    "gan_lr": _Key(float, 2e-4, lo=1e-8, hi=1.0),
    "lambda_cycle": _Key(float, 10.0, lo=0.0),
    "lambda_identity": _Key(float, 5.0, lo=0.0),
    "gan_width": _Key(int, 32, lo=1),
    "gan_disc_width": _Key(int, 64, lo=1),
    "gan_n_res": _Key(int, 4, lo=1),
    "pool_capacity": _Key(int, 50, lo=0),
    "gan_downscale": _Key(int, 1, lo=1, hi=16),
    # segmentation
    "seg_steps": _Key(int, 1000, lo=0),
    "seg_batch": _Key(int, 8, lo=1),
    "seg_lr": _Key(float, 1e-4, lo=1e-8, hi=1.0),
    "seg_width": _Key(int, 32, lo=1),
    "num_classes": _Key(int, 3, choices=(2, 3)),
    # generation
    "mode": _Key(str, "baseline", choices=("baseline", "dirtygan")),
    # walks
    "walk_steps": _Key(int, 12, lo=2),
    "walk_from": _Key(str, ""),
    "walk_to": _Key(str, ""),
    # experiments
    "eval_seeds": _Key(str, "0,1,2"),
    "exp_steps": _Key(int, 300, lo=1),
    "exp_width": _Key(int, 8, lo=1),
    "exp_batch": _Key(int, 8, lo=1),
    "exp_lr": _Key(float, 1e-4, lo=1e-8, hi=1.0),
}


@dataclass
class RunConfig:
    """Resolved configuration values plus their stable digest."""

    values: dict

    def __getitem__(self, key):
        return self.values[key]

    @property
    def digest(self) -> str:
        # the output directory is a sink, not a parameter: identical runs
        # to different directories share a digest
        return stable_digest({k: v for k, v in self.values.items() if k != "out"})

    def seeds(self) -> tuple[int, ...]:
        try:
            parts = tuple(int(s) for s in str(self.values["eval_seeds"]).split(",") if s.strip())
        except ValueError:
            raise ConfigError(
                f"eval_seeds must be comma-separated integers, got {self.values['eval_seeds']!r}"
            ) from None
        if not parts:
            raise ConfigError("eval_seeds must name at least one seed")
        return parts


def _convert(key: str, raw: str):
    spec = SCHEMA[key]
    try:
        if spec.kind is int:
            value = int(raw)
        elif spec.kind is float:
            value = float(raw)
        else:
            value = raw
    except ValueError:
        raise ConfigError(f"{key}: expected {spec.describe()}, got {raw!r}") from None
    if key == "eval_seeds":
        try:
            if not [int(s) for s in str(value).split(",") if s.strip()]:
                raise ValueError
        except ValueError:
            raise ConfigError(
                f"eval_seeds: expected comma-separated integers, got {value!r}"
            ) from None
    if spec.choices is not None and value not in spec.choices:
        raise ConfigError(f"{key}: must be {spec.describe()}, got {value!r}")
    if spec.lo is not None and isinstance(value, (int, float)) and value < spec.lo:
        raise ConfigError(f"{key}: must be {spec.describe()}, got {value}")
    if spec.hi is not None and isinstance(value, (int, float)) and value > spec.hi:
        raise ConfigError(f"{key}: must be {spec.describe()}, got {value}")
    return value


def _parse_line(line: str, where: str):
    stripped = line.split("#", 1)[0].strip()
    if not stripped:
        return None
    if "=" not in stripped:
        raise ConfigError(f"{where}: expected key=value, got {stripped!r}")
    key, raw = (part.strip() for part in stripped.split("=", 1))
    if key not in SCHEMA:
        raise ConfigError(f"{where}: unknown config key {key!r}")
    return key, _convert(key, raw)


def parse_config(path=None, overrides=()) -> RunConfig:
    """Resolve defaults, then a config file, then key=value overrides."""
    values = {key: spec.default for key, spec in SCHEMA.items()}
    if path:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            item = _parse_line(line, f"{path}:{lineno}")
            if item:
                values[item[0]] = item[1]
    for i, override in enumerate(overrides):
        item = _parse_line(override, f"override #{i + 1}")
        if item is None:
            raise ConfigError(f"override #{i + 1}: empty assignment {override!r}")
        values[item[0]] = item[1]
    return RunConfig(values)
