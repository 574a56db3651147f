"""Command-line entry points.

Commands: gen-corpus, train-vae, train-gan, train-dirtygan, train-seg,
generate, walk, evaluate-augmentation, evaluate-degradation.  Every run
resolves a configuration (defaults -> --config file -> --set overrides),
writes its artifacts under --out together with a provenance record, and
never touches its input corpora.  Exit codes: 0 success, 1 runtime
failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, cyclegan, dataset, evaluation, segmentation, vae
from .config import RunConfig, parse_config
from .errors import ConfigError, SoilgenError
from .imaging import resize_mask
from .seeding import derive_seed
from .segmentation import SoilingClass

COMMANDS = {}


def command(name):
    def register(fn):
        COMMANDS[name] = fn
        return fn

    return register


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_provenance(cfg: RunConfig, command_name: str, out: Path) -> None:
    # `out` stays out of the record so identical runs to different sinks
    # produce byte-identical trees, provenance included
    record = {
        "command": command_name,
        "config": {k: v for k, v in sorted(cfg.values.items()) if k != "out"},
        "config_digest": cfg.digest,
        "seed": cfg["seed"],
        "version": __version__,
    }
    (out / "provenance.json").write_text(json.dumps(record, indent=2, sort_keys=True))


def _require_corpus(cfg: RunConfig, *keys) -> dataset.Corpus:
    for key in keys:
        if cfg[key]:
            return dataset.load_corpus(cfg[key])
    raise ConfigError(f"set one of {'/'.join(keys)} to a corpus directory")


def _write_trace_csv(path: Path, steps: list[dict]) -> None:
    if not steps:
        return
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(steps[0].keys()), lineterminator="\n")
        writer.writeheader()
        writer.writerows(steps)


def _scene_spec(cfg: RunConfig) -> dataset.ProceduralSceneSpec:
    return dataset.ProceduralSceneSpec(
        height=cfg["size"],
        width=cfg["size"],
        transparent_alpha=cfg["transparent_alpha"],
        smooth_sigma=cfg["sigma"],
    )


def _corpus_masks(cfg: RunConfig, corpus: dataset.Corpus) -> list[np.ndarray]:
    """Mask corpus for VAE work: weak polygon rasters by default."""
    masks = []
    for entry_id in corpus.ids():
        entry = corpus.manifest.entry(entry_id)
        if cfg["vae_mask_source"] == "weak" and entry.annotation_path is not None:
            mask = corpus.weak_label_mask(entry_id, transparent_alpha=cfg["transparent_alpha"])
        else:
            mask = corpus.mask(entry_id)
        masks.append(resize_mask(mask, cfg["mask_size"]))
    return masks


def _seg_labels(alpha: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.zeros(alpha.shape, dtype=np.uint8)
    if num_classes == 2:
        labels[alpha >= 0.25] = 1
    else:
        labels[alpha >= 0.25] = SoilingClass.TRANSPARENT
        labels[alpha >= 0.75] = SoilingClass.OPAQUE
    return labels


@command("gen-corpus")
def cmd_gen_corpus(cfg: RunConfig, out: Path) -> None:
    entries = dataset.generate_procedural_corpus(
        _scene_spec(cfg), cfg["corpus_n"], master_seed=derive_seed(cfg["seed"], "corpus")
    )
    dataset.write_corpus(entries, out, seed=cfg["seed"], config_digest=cfg.digest)
    print(f"wrote {len(entries)} scenes to {out}")


@command("train-vae")
def cmd_train_vae(cfg: RunConfig, out: Path) -> None:
    corpus = _require_corpus(cfg, "corpus")
    masks = _corpus_masks(cfg, corpus)
    model = vae.build_vae(
        latent_dim=cfg["latent_dim"],
        mask_size=cfg["mask_size"],
        seed=derive_seed(cfg["seed"], "vae-init"),
        encoder_width=cfg["vae_encoder_width"],
        decoder_width=cfg["vae_decoder_width"],
    )
    model, trace = vae.train_vae(
        model,
        masks,
        steps=cfg["vae_steps"],
        batch_size=cfg["vae_batch"],
        lr=cfg["vae_lr"],
        beta=cfg["beta_kl"],
        seed=derive_seed(cfg["seed"], "vae-train"),
    )
    vae.save_vae(model, out / "vae", seed=cfg["seed"])
    _write_trace_csv(out / "vae_trace.csv", trace.steps)
    print(f"trained VAE on {len(masks)} masks for {cfg['vae_steps']} steps -> {out / 'vae'}")


def _domain_images(cfg: RunConfig):
    if cfg["clean_corpus"] and cfg["soiled_corpus"]:
        clean_corpus = dataset.load_corpus(cfg["clean_corpus"])
        soiled_corpus = dataset.load_corpus(cfg["soiled_corpus"])
    else:
        clean_corpus = soiled_corpus = _require_corpus(cfg, "corpus")
    clean = [clean_corpus.clean_image(i) for i in clean_corpus.ids()]
    soiled = [soiled_corpus.dirty_image(i) for i in soiled_corpus.ids()]
    return clean, soiled, soiled_corpus


def _build_gan(cfg: RunConfig) -> cyclegan.CycleGanModel:
    return cyclegan.build_cyclegan(
        gen_width=cfg["gan_width"],
        disc_width=cfg["gan_disc_width"],
        n_res=cfg["gan_n_res"],
        pool_capacity=cfg["pool_capacity"],
        seed=derive_seed(cfg["seed"], "gan-init"),
    )


@command("train-gan")
def cmd_train_gan(cfg: RunConfig, out: Path) -> None:
    clean, soiled, _ = _domain_images(cfg)
    model, trace = cyclegan.train_cyclegan(
        _build_gan(cfg),
        clean,
        soiled,
        steps=cfg["gan_steps"],
        batch_size=cfg["gan_batch"],
        lr=cfg["gan_lr"],
        lambda_cycle=cfg["lambda_cycle"],
        lambda_identity=cfg["lambda_identity"],
        downscale_factor=cfg["gan_downscale"],
        seed=derive_seed(cfg["seed"], "gan-train"),
    )
    cyclegan.save_cyclegan(model, out / "gan", seed=cfg["seed"], step=cfg["gan_steps"])
    _write_trace_csv(out / "gan_trace.csv", trace.steps)
    print(f"trained translation model for {cfg['gan_steps']} steps -> {out / 'gan'}")


@command("train-dirtygan")
def cmd_train_dirtygan(cfg: RunConfig, out: Path) -> None:
    if not cfg["vae_dir"] or not cfg["seg_dir"]:
        raise ConfigError("train-dirtygan needs vae_dir and seg_dir")
    clean, soiled, soiled_corpus = _domain_images(cfg)
    vae_model = vae.load_vae(cfg["vae_dir"])
    seg_model = segmentation.load_seg(cfg["seg_dir"])
    masks = _corpus_masks(cfg, soiled_corpus)
    model, trace = cyclegan.train_dirtygan(
        _build_gan(cfg),
        vae_model,
        seg_model,
        clean,
        soiled,
        masks,
        steps=cfg["gan_steps"],
        batch_size=cfg["gan_batch"],
        lr=cfg["gan_lr"],
        lambda_cycle=cfg["lambda_cycle"],
        lambda_identity=cfg["lambda_identity"],
        downscale_factor=cfg["gan_downscale"],
        smooth_sigma=cfg["sigma"],
        mask_floor=cfg["mask_floor"],
        seed=derive_seed(cfg["seed"], "dirtygan-train"),
    )
    cyclegan.save_cyclegan(model, out / "gan", seed=cfg["seed"], step=cfg["gan_steps"])
    _write_trace_csv(out / "gan_trace.csv", trace.steps)
    print(f"trained mask-gated model for {cfg['gan_steps']} steps -> {out / 'gan'}")


@command("train-seg")
def cmd_train_seg(cfg: RunConfig, out: Path) -> None:
    corpus = _require_corpus(cfg, "corpus")
    images, labels = [], []
    for entry_id in corpus.ids():
        entry = corpus.manifest.entry(entry_id)
        images.append(corpus.dirty_image(entry_id))
        if entry.annotation_path is not None:
            alpha = corpus.weak_label_mask(entry_id, transparent_alpha=cfg["transparent_alpha"])
        else:
            alpha = corpus.mask(entry_id)
        labels.append(_seg_labels(alpha, cfg["num_classes"]))
    model = segmentation.build_seg_model(
        num_classes=cfg["num_classes"],
        working_size=cfg["size"],
        base_width=cfg["seg_width"],
        seed=derive_seed(cfg["seed"], "seg-init"),
        transparent_alpha=cfg["transparent_alpha"],
    )
    model, trace = segmentation.train_seg(
        model,
        images,
        labels,
        steps=cfg["seg_steps"],
        batch_size=cfg["seg_batch"],
        lr=cfg["seg_lr"],
        seed=derive_seed(cfg["seed"], "seg-train"),
    )
    segmentation.save_seg(model, out / "seg", seed=cfg["seed"])
    _write_trace_csv(out / "seg_trace.csv", trace.steps)
    print(f"trained segmentation on {len(images)} images -> {out / 'seg'}")


@command("generate")
def cmd_generate(cfg: RunConfig, out: Path) -> None:
    corpus = _require_corpus(cfg, "corpus")
    if not cfg["gan_dir"]:
        raise ConfigError("generate needs gan_dir")
    model = cyclegan.load_cyclegan(cfg["gan_dir"])
    if cfg["mode"] == "baseline":
        if not cfg["seg_dir"]:
            raise ConfigError("baseline generation needs seg_dir")
        seg_model = segmentation.load_seg(cfg["seg_dir"])

        def generate_fn(clean, rng):
            return cyclegan.generate_soiled(
                model, clean, seg_model=seg_model,
                factor=cfg["factor"], smooth_sigma=cfg["sigma"],
            )

    else:
        if not cfg["vae_dir"]:
            raise ConfigError("dirtygan generation needs vae_dir")
        vae_model = vae.load_vae(cfg["vae_dir"])

        def generate_fn(clean, rng):
            z = rng.standard_normal(vae_model.latent_dim)
            mask = resize_mask(vae.decode(vae_model, z), clean.shape[0])
            mask = cyclegan.apply_mask_floor(mask, cfg["mask_floor"])
            return cyclegan.generate_soiled(model, clean, mask=mask)

    manifest = dataset.write_dirty_dataset(
        corpus, generate_fn, out,
        seed=derive_seed(cfg["seed"], "generate"), config_digest=cfg.digest,
    )
    print(f"generated {len(manifest.entries)} soiled images -> {out}")


@command("walk")
def cmd_walk(cfg: RunConfig, out: Path) -> None:
    if not cfg["vae_dir"]:
        raise ConfigError("walk needs vae_dir")
    vae_model = vae.load_vae(cfg["vae_dir"])
    corpus = _require_corpus(cfg, "corpus")
    ids = corpus.ids()
    if len(ids) < 2:
        raise ConfigError("walk needs a corpus with at least 2 entries")
    from_id = cfg["walk_from"] or ids[0]
    to_id = cfg["walk_to"] or ids[1]
    masks = {}
    for entry_id in (from_id, to_id):
        entry = corpus.manifest.entry(entry_id)
        if cfg["vae_mask_source"] == "weak" and entry.annotation_path is not None:
            mask = corpus.weak_label_mask(entry_id, transparent_alpha=cfg["transparent_alpha"])
        else:
            mask = corpus.mask(entry_id)
        masks[entry_id] = resize_mask(mask, vae_model.mask_size)
    frames = vae.manifold_walk(vae_model, masks[from_id], masks[to_id], steps=cfg["walk_steps"])
    paths = vae.export_walk_frames(frames, out)
    print(f"wrote {len(paths)} walk frames to {out}")
    if cfg["gan_dir"]:
        model = cyclegan.load_cyclegan(cfg["gan_dir"])
        clean = corpus.clean_image(from_id)
        size = clean.shape[0]
        composed = [
            cyclegan.apply_mask_floor(resize_mask(f, size), cfg["mask_floor"]) for f in frames
        ]

        def render(image, mask):
            return cyclegan.masked_translate(model.g_c2s, image, mask)

        frame_paths = dataset.write_mask_video_frames(composed, clean, render, out / "composed")
        print(f"wrote {len(frame_paths)} composed frames to {out / 'composed'}")


@command("evaluate-augmentation")
def cmd_evaluate_augmentation(cfg: RunConfig, out: Path) -> None:
    real = _require_corpus(cfg, "real_corpus", "corpus")
    if not cfg["generated_corpus"]:
        raise ConfigError("evaluate-augmentation needs generated_corpus")
    generated = dataset.load_corpus(cfg["generated_corpus"])
    report = evaluation.run_augmentation_experiment(
        real, generated,
        seeds=cfg.seeds(), steps=cfg["exp_steps"], width=cfg["exp_width"],
        batch_size=cfg["exp_batch"], lr=cfg["exp_lr"],
    )
    evaluation.emit_report(report, "csv", out / "augmentation.csv")
    evaluation.emit_report(report, "markdown", out / "augmentation.md")
    for condition in sorted(evaluation.AUGMENTATION_REFERENCES):
        print(f"{condition}: median mIoU {report.median(condition):.4f} "
              f"(full-scale reference {evaluation.AUGMENTATION_REFERENCES[condition]}%)")


@command("evaluate-degradation")
def cmd_evaluate_degradation(cfg: RunConfig, out: Path) -> None:
    clean_corpus = _require_corpus(cfg, "clean_corpus", "corpus")
    dirty_corpus = (
        dataset.load_corpus(cfg["soiled_corpus"]) if cfg["soiled_corpus"] else clean_corpus
    )
    report = evaluation.run_degradation_experiment(
        clean_corpus, dirty_corpus,
        seeds=cfg.seeds(), steps=cfg["exp_steps"], width=cfg["exp_width"],
        batch_size=cfg["exp_batch"], lr=cfg["exp_lr"], num_classes=cfg["num_classes"],
    )
    evaluation.emit_report(report, "csv", out / "degradation.csv")
    evaluation.emit_report(report, "markdown", out / "degradation.md")
    for condition in sorted(evaluation.DEGRADATION_REFERENCES["woodscape"]):
        print(f"{condition}: median mIoU {report.median(condition):.4f}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="soilgen",
        description="Synthetic camera-lens soiling: generation, training, evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"soilgen {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", default=None, help="key=value config file")
        cmd.add_argument(
            "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
            help="override a config key (repeatable)",
        )
        cmd.add_argument("--seed", type=int, default=None, help="alias for --set seed=N")
        cmd.add_argument("--out", default=None, help="alias for --set out=DIR")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out={args.out}")
    try:
        cfg = parse_config(args.config, overrides)
        out = _out_dir(cfg)
        COMMANDS[args.command](cfg, out)
        _write_provenance(cfg, args.command, out)
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except SoilgenError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # keep the one-line contract for unexpected failures
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
