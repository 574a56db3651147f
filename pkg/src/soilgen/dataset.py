"""Corpus layout, procedural scene synthesis and dataset emission.

Directory layout::

    root/clean/<id>.png        clean RGB image
    root/dirty/<id>.png        soiled counterpart (optional)
    root/masks/<id>.png        soiling alpha mask, 8-bit gray (optional)
    root/annotations/<id>.json coarse polygon annotation (optional)
    root/semantic/<id>.png     semantic class map, codes as raw bytes (optional)
    root/manifest.json         entry list, seed, generator config digest

The procedural generator stands in for field recordings: gradient-plus-
shapes scenes, blobby soiling masks, a mud-like soiling texture composited
through the mask, and deliberately coarse convex-hull polygon labels.
All output is a pure function of (spec, master seed); per-entry seeds are
derived by stable hashing so entries are independent of corpus size.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy.spatial import ConvexHull, QhullError

from .errors import DataError, ManifestError, ParameterError, WriteError
from .imaging import (
    Polygon,
    compose,
    gaussian_smooth,
    load_image,
    load_mask,
    rasterize,
    save_image,
    save_mask,
    upscale,
)
from .seeding import derive_seed

MANIFEST_NAME = "manifest.json"
TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class ProceduralSceneSpec:
    """Parameters of the procedural scene/soiling generator."""

    height: int = 64
    width: int = 64
    background_noise: float = 0.08
    shape_count: tuple[int, int] = (2, 4)
    shape_size: tuple[float, float] = (0.12, 0.30)
    blob_count: tuple[int, int] = (1, 3)
    blob_radius: tuple[float, float] = (0.10, 0.24)
    opaque_fraction: float = 0.6
    transparent_alpha: float = 0.5
    smooth_sigma: float = 1.0

    def __post_init__(self):
        if self.height < 8 or self.width < 8:
            raise ParameterError(f"scene size too small: {self.height}x{self.width}")
        for name in ("shape_count", "blob_count"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ParameterError(f"{name} range ({lo}, {hi}) is degenerate")
        for name in ("shape_size", "blob_radius"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ParameterError(f"{name} range ({lo}, {hi}) is degenerate")
        if not 0.0 <= self.opaque_fraction <= 1.0:
            raise ParameterError(f"opaque_fraction must be in [0,1], got {self.opaque_fraction}")
        if not 0.0 <= self.transparent_alpha <= 1.0:
            raise ParameterError(
                f"transparent_alpha must be in [0,1], got {self.transparent_alpha}"
            )
        if self.background_noise < 0 or self.smooth_sigma < 0:
            raise ParameterError("background_noise and smooth_sigma must be >= 0")


@dataclass
class ManifestEntry:
    id: str
    clean_path: str
    split: str = "train"
    dirty_path: str | None = None
    mask_path: str | None = None
    annotation_path: str | None = None
    semantic_path: str | None = None

    def to_json(self) -> dict:
        data = {"id": self.id, "clean_path": self.clean_path, "split": self.split}
        for key in ("dirty_path", "mask_path", "annotation_path", "semantic_path"):
            value = getattr(self, key)
            if value is not None:
                data[key] = value
        return data


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int = 0
    generator_config_digest: str = ""

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise ManifestError(f"duplicate entry ids: {dupes}", entry_ids=dupes)

    def ids(self, split: str | None = None) -> list[str]:
        return [e.id for e in self.entries if split is None or e.split == split]

    def entry(self, entry_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == entry_id:
                return e
        raise ManifestError(f"unknown entry id {entry_id!r}", entry_ids=[entry_id])

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "generator_config_digest": self.generator_config_digest,
            "entries": [e.to_json() for e in self.entries],
        }


def assign_splits(ids, seed: int, train_fraction: float = TRAIN_FRACTION) -> dict:
    """Deterministic train/test assignment: a pure function of (ids, seed)."""
    ordered = sorted(ids)
    rng = np.random.default_rng(derive_seed(seed, "split"))
    rng.shuffle(ordered)
    n_train = int(round(train_fraction * len(ordered)))
    return {i: ("train" if k < n_train else "test") for k, i in enumerate(ordered)}


# --- procedural synthesis ---------------------------------------------------

@dataclass
class CorpusEntry:
    """One synthesized scene held in memory."""

    id: str
    clean: np.ndarray
    dirty: np.ndarray
    mask: np.ndarray
    polygons: list[Polygon]
    semantic: np.ndarray


def _low_freq_noise(rng, h, w, cells=4):
    coarse = rng.random((cells, cells))
    factor = int(np.ceil(max(h, w) / cells))
    noise = upscale(coarse, factor, "bicubic")
    return noise[:h, :w]


def _paint_background(rng, h, w):
    theta = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    ramp = (np.cos(theta) * xx / w + np.sin(theta) * yy / h + 1.0) / 2.0
    base = rng.uniform(0.25, 0.55, size=3)
    img = np.empty((h, w, 3))
    for c in range(3):
        img[:, :, c] = base[c] + 0.25 * ramp
    return img


def _paint_shapes(rng, spec, img, semantic):
    # class-correlated colors (circles warm, rectangles cool) so semantic
    # classes are learnable by appearance, as in real street scenes
    h, w = img.shape[:2]
    yy, xx = np.mgrid[0:h, 0:w]
    n = int(rng.integers(spec.shape_count[0], spec.shape_count[1] + 1))
    for _ in range(n):
        size = rng.uniform(*spec.shape_size) * min(h, w)
        cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
        if rng.random() < 0.5:
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= (size / 2) ** 2
            code = 1
            color = np.array([rng.uniform(0.6, 0.95), rng.uniform(0.1, 0.35), rng.uniform(0.1, 0.35)])
        else:
            inside = (np.abs(yy - cy) <= size / 2) & (np.abs(xx - cx) <= size / 2)
            code = 2
            color = np.array([rng.uniform(0.1, 0.35), rng.uniform(0.1, 0.35), rng.uniform(0.6, 0.95)])
        img[inside] = color
        semantic[inside] = code


def _soiling_blobs(rng, spec):
    """Blob support masks plus their classes; wobbly circles on the unit grid."""
    h, w = spec.height, spec.width
    yy, xx = np.mgrid[0:h, 0:w]
    n = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
    blobs = []
    for _ in range(n):
        r0 = rng.uniform(*spec.blob_radius) * min(h, w)
        cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
        k = int(rng.integers(2, 6))
        phase = rng.uniform(0, 2 * np.pi)
        wobble = rng.uniform(0.1, 0.3)
        angle = np.arctan2(yy - cy, xx - cx)
        radius = r0 * (1.0 + wobble * np.sin(k * angle + phase))
        support = (yy - cy) ** 2 + (xx - cx) ** 2 <= radius**2
        if support.sum() < 9:
            continue
        opaque = rng.random() < spec.opaque_fraction
        blobs.append((support, opaque))
    return blobs


def _coarse_polygon(support: np.ndarray, soiling_class: str, max_vertices: int = 10):
    """Convex hull of a blob's support, subsampled: deliberately coarse."""
    h, w = support.shape
    rr, cc = np.nonzero(support)
    points = np.stack([(cc + 0.5) / w, (rr + 0.5) / h], axis=1)
    try:
        hull = ConvexHull(points)
        verts = points[hull.vertices]
    except QhullError:
        x0, x1 = points[:, 0].min(), points[:, 0].max()
        y0, y1 = points[:, 1].min(), points[:, 1].max()
        verts = np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])
    if len(verts) > max_vertices:
        idx = np.linspace(0, len(verts) - 1, max_vertices).astype(int)
        verts = verts[idx]
    verts = np.clip(verts, 0.0, 1.0)
    return Polygon(tuple(map(tuple, verts)), soiling_class)


def _soiling_texture(rng, h, w):
    base = np.array([0.33, 0.25, 0.16])
    modulation = 0.7 + 0.6 * _low_freq_noise(rng, h, w, cells=5)
    texture = np.clip(base[None, None, :] * modulation[:, :, None], 0.0, 1.0)
    return gaussian_smooth_rgb(texture, 1.0)


def gaussian_smooth_rgb(img: np.ndarray, sigma: float) -> np.ndarray:
    """Channelwise Gaussian smoothing for RGB images."""
    if img.ndim == 2:
        return gaussian_smooth(img, sigma)
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = gaussian_smooth(img[:, :, c], sigma)
    return out


def generate_scene(spec: ProceduralSceneSpec, entry_seed: int) -> CorpusEntry:
    """Synthesize one (clean, dirty, mask, polygons, semantic) scene."""
    rng = np.random.default_rng(entry_seed)
    h, w = spec.height, spec.width
    clean = _paint_background(rng, h, w)
    clean += spec.background_noise * (_low_freq_noise(rng, h, w) - 0.5)[:, :, None]
    semantic = np.zeros((h, w), dtype=np.uint8)
    _paint_shapes(rng, spec, clean, semantic)
    clean = np.clip(clean, 0.0, 1.0)

    blobs = _soiling_blobs(rng, spec)
    raw_alpha = np.zeros((h, w))
    polygons = []
    for support, opaque in blobs:
        alpha = 1.0 if opaque else spec.transparent_alpha
        raw_alpha = np.maximum(raw_alpha, alpha * support)
        polygons.append(_coarse_polygon(support, "opaque" if opaque else "transparent"))
    mask = gaussian_smooth(raw_alpha, spec.smooth_sigma)

    texture = _soiling_texture(rng, h, w)
    dirty, _ = compose(clean, texture, mask, 1)
    return CorpusEntry(id="", clean=clean, dirty=dirty, mask=mask,
                       polygons=polygons, semantic=semantic)


def generate_procedural_corpus(
    spec: ProceduralSceneSpec, n: int, master_seed: int = 0
) -> list[CorpusEntry]:
    """Synthesize ``n`` scenes; deterministic per (spec, master_seed)."""
    if n < 1:
        raise ParameterError(f"corpus size must be >= 1, got {n}")
    entries = []
    for i in range(n):
        entry_id = f"scene_{i:04d}"
        entry = generate_scene(spec, derive_seed(master_seed, "entry", entry_id))
        entry.id = entry_id
        entries.append(entry)
    return entries


# --- disk layout --------------------------------------------------------------

def _atomic_write(path: Path, writer) -> None:
    tmp = path.with_name(path.name + ".tmp")
    writer(tmp)
    os.replace(tmp, path)


def polygons_to_json(polygons) -> dict:
    return {
        "polygons": [
            {"class": p.soiling_class, "vertices": [[x, y] for x, y in p.vertices]}
            for p in polygons
        ]
    }


def polygons_from_json(data) -> list[Polygon]:
    return [
        Polygon(tuple(map(tuple, rec["vertices"])), rec["class"])
        for rec in data.get("polygons", [])
    ]


def save_semantic(path, semantic: np.ndarray) -> None:
    PILImage.fromarray(semantic.astype(np.uint8), mode="L").save(path, format="PNG")


def load_semantic(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.uint8)


def write_corpus(
    entries: list[CorpusEntry], root, seed: int = 0, config_digest: str = ""
) -> DatasetManifest:
    """Write synthesized scenes in the canonical layout with a manifest."""
    root = Path(root)
    for sub in ("clean", "dirty", "masks", "annotations", "semantic"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    split_of = assign_splits([e.id for e in entries], seed)
    manifest_entries = []
    for entry in entries:
        _atomic_write(root / "clean" / f"{entry.id}.png",
                      lambda p, e=entry: save_image(p, e.clean))
        _atomic_write(root / "dirty" / f"{entry.id}.png",
                      lambda p, e=entry: save_image(p, e.dirty))
        _atomic_write(root / "masks" / f"{entry.id}.png",
                      lambda p, e=entry: save_mask(p, e.mask))
        _atomic_write(
            root / "annotations" / f"{entry.id}.json",
            lambda p, e=entry: p.write_text(
                json.dumps(polygons_to_json(e.polygons), indent=1, sort_keys=True)
            ),
        )
        _atomic_write(root / "semantic" / f"{entry.id}.png",
                      lambda p, e=entry: save_semantic(p, e.semantic))
        manifest_entries.append(
            ManifestEntry(
                id=entry.id,
                clean_path=f"clean/{entry.id}.png",
                dirty_path=f"dirty/{entry.id}.png",
                mask_path=f"masks/{entry.id}.png",
                annotation_path=f"annotations/{entry.id}.json",
                semantic_path=f"semantic/{entry.id}.png",
                split=split_of[entry.id],
            )
        )
    manifest = DatasetManifest(manifest_entries, seed=seed, generator_config_digest=config_digest)
    _atomic_write(root / MANIFEST_NAME,
                  lambda p: p.write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True)))
    return manifest


class Corpus:
    """A manifest plus lazy image loading rooted at a directory."""

    def __init__(self, root, manifest: DatasetManifest):
        self.root = Path(root)
        self.manifest = manifest

    def ids(self, split: str | None = None) -> list[str]:
        return self.manifest.ids(split)

    def __len__(self):
        return len(self.manifest.entries)

    def _path(self, entry_id, attr):
        rel = getattr(self.manifest.entry(entry_id), attr)
        if rel is None:
            raise DataError(f"entry {entry_id!r} has no {attr}")
        return self.root / rel

    def clean_image(self, entry_id) -> np.ndarray:
        return load_image(self._path(entry_id, "clean_path"))

    def dirty_image(self, entry_id) -> np.ndarray:
        return load_image(self._path(entry_id, "dirty_path"))

    def mask(self, entry_id) -> np.ndarray:
        return load_mask(self._path(entry_id, "mask_path"))

    def polygons(self, entry_id) -> list[Polygon]:
        data = json.loads(self._path(entry_id, "annotation_path").read_text())
        return polygons_from_json(data)

    def semantic(self, entry_id) -> np.ndarray:
        return load_semantic(self._path(entry_id, "semantic_path"))

    def weak_label_mask(self, entry_id, transparent_alpha: float = 0.5) -> np.ndarray:
        """Rasterize the coarse polygon annotation at the clean image size."""
        with PILImage.open(self._path(entry_id, "clean_path")) as im:
            w, h = im.size
        return rasterize(self.polygons(entry_id), h, w, transparent_alpha=transparent_alpha)


def _png_size(path) -> tuple[int, int]:
    try:
        with PILImage.open(path) as im:
            return im.size[1], im.size[0]
    except Exception as exc:
        raise ManifestError(f"unreadable PNG {path}: {exc}") from exc


def load_corpus(root) -> Corpus:
    """Open a corpus directory, validating its manifest.

    Directories without a manifest are scanned (``clean/*.png`` defines the
    entries; sibling files are attached when present).  Malformed entries
    are reported together, never skipped silently.
    """
    root = Path(root)
    manifest_path = root / MANIFEST_NAME
    if manifest_path.exists():
        data = json.loads(manifest_path.read_text())
        entries = [
            ManifestEntry(
                id=e["id"],
                clean_path=e["clean_path"],
                split=e.get("split", "train"),
                dirty_path=e.get("dirty_path"),
                mask_path=e.get("mask_path"),
                annotation_path=e.get("annotation_path"),
                semantic_path=e.get("semantic_path"),
            )
            for e in data["entries"]
        ]
        manifest = DatasetManifest(
            entries, seed=data.get("seed", 0),
            generator_config_digest=data.get("generator_config_digest", ""),
        )
    else:
        clean_dir = root / "clean"
        entries = []
        ids = sorted(p.stem for p in clean_dir.glob("*.png")) if clean_dir.is_dir() else []
        split_of = assign_splits(ids, seed=0)
        for entry_id in ids:
            entry = ManifestEntry(
                id=entry_id, clean_path=f"clean/{entry_id}.png", split=split_of[entry_id]
            )
            for attr, rel in (
                ("dirty_path", f"dirty/{entry_id}.png"),
                ("mask_path", f"masks/{entry_id}.png"),
                ("annotation_path", f"annotations/{entry_id}.json"),
                ("semantic_path", f"semantic/{entry_id}.png"),
            ):
                if (root / rel).exists():
                    setattr(entry, attr, rel)
            entries.append(entry)
        manifest = DatasetManifest(entries)

    problems = []
    bad_ids = []
    for entry in manifest.entries:
        paths = {
            "clean": entry.clean_path,
            "dirty": entry.dirty_path,
            "masks": entry.mask_path,
            "annotation": entry.annotation_path,
            "semantic": entry.semantic_path,
        }
        missing = [k for k, rel in paths.items() if rel and not (root / rel).exists()]
        if missing:
            problems.append(f"{entry.id}: missing {', '.join(missing)}")
            bad_ids.append(entry.id)
            continue
        clean_size = _png_size(root / entry.clean_path)
        for key in ("mask_path", "semantic_path"):
            rel = getattr(entry, key)
            if rel and _png_size(root / rel) != clean_size:
                problems.append(f"{entry.id}: {key} size differs from clean image")
                bad_ids.append(entry.id)
    if problems:
        raise ManifestError("corpus validation failed: " + "; ".join(problems), entry_ids=bad_ids)
    return Corpus(root, manifest)


def write_dirty_dataset(
    corpus: Corpus, generate_fn, out_root, seed: int = 0, config_digest: str = ""
) -> DatasetManifest:
    """Generate a soiled counterpart dataset with automatic annotations.

    ``generate_fn(clean_image, rng) -> (dirty, mask)`` is invoked per entry
    with an entry-specific rng derived from (seed, id); re-running with the
    same seed reproduces every byte.
    """
    out_root = Path(out_root)
    entries = []
    try:
        for sub in ("clean", "dirty", "masks"):
            (out_root / sub).mkdir(parents=True, exist_ok=True)
        for entry_id in corpus.ids():
            clean = corpus.clean_image(entry_id)
            rng = np.random.default_rng(derive_seed(seed, "generate", entry_id))
            dirty, mask = generate_fn(clean, rng)
            _atomic_write(out_root / "clean" / f"{entry_id}.png",
                          lambda p: save_image(p, clean))
            _atomic_write(out_root / "dirty" / f"{entry_id}.png",
                          lambda p: save_image(p, dirty))
            _atomic_write(out_root / "masks" / f"{entry_id}.png",
                          lambda p: save_mask(p, mask))
            entries.append(
                ManifestEntry(
                    id=entry_id,
                    clean_path=f"clean/{entry_id}.png",
                    dirty_path=f"dirty/{entry_id}.png",
                    mask_path=f"masks/{entry_id}.png",
                    split=corpus.manifest.entry(entry_id).split,
                )
            )
        manifest = DatasetManifest(entries, seed=seed, generator_config_digest=config_digest)
        _atomic_write(
            out_root / MANIFEST_NAME,
            lambda p: p.write_text(json.dumps(manifest.to_json(), indent=1, sort_keys=True)),
        )
    except OSError as exc:
        partial = DatasetManifest(entries, seed=seed, generator_config_digest=config_digest)
        raise WriteError(f"dirty dataset write failed: {exc}", partial_manifest=partial) from exc
    return manifest


def write_mask_video_frames(masks, clean: np.ndarray, render_fn, out_dir) -> list[Path]:
    """Compose one frame per mask and write zero-padded numbered PNGs.

    ``render_fn(clean_image, mask) -> image``; frame count equals mask count.
    """
    masks = list(masks)
    if not masks:
        raise ParameterError("need at least one mask to render frames")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, mask in enumerate(masks):
        frame = render_fn(clean, mask)
        path = out_dir / f"frame_{i:03d}.png"
        _atomic_write(path, lambda p, f=frame: save_image(p, f))
        paths.append(path)
    return paths
