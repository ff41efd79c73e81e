"""Dataset ingestion: raster tiling, labelled/unlabelled splits, manifests, synthetic data.

Patches are stored one file per array in NumPy's ``.npy`` layout (dtype and shape
header followed by a row-major payload). The manifest is a JSON index whose
paths are relative to the manifest's own directory.
"""
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import (
    ArgumentError,
    ConfigurationError,
    DataResolutionError,
    ManifestSchemaError,
    ManifestVersionError,
    MissingPatchError,
)
from .losses import IGNORE_INDEX

MANIFEST_VERSION = 1
SPLITS = ("train-labelled", "train-unlabelled", "val", "test")


@dataclass
class RasterPair:
    image: np.ndarray  # [Cin, H, W]
    label: np.ndarray  # [H, W]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image.ndim != 3 or self.label.ndim != 2 or self.image.shape[1:] != self.label.shape:
            raise ArgumentError(f"image {self.image.shape} and label {self.label.shape} are not aligned")


def window_starts(extent, tile, stride):
    """Grid origins along one axis; the last window is clamped to end at the edge."""
    if tile > extent:
        raise ArgumentError(f"tile {tile} exceeds raster extent {extent}")
    if stride < 1:
        raise ArgumentError(f"stride must be >= 1, got {stride}")
    n = math.ceil((extent - tile) / stride) + 1
    return [min(i * stride, extent - tile) for i in range(n)]


def tile_raster(pair, tile, stride=None):
    stride = tile if stride is None else stride
    _, h, w = pair.image.shape
    patches = []
    for y in window_starts(h, tile, stride):
        for x in window_starts(w, tile, stride):
            meta = dict(pair.meta, window=(y, x, tile, tile))
            patches.append(RasterPair(
                pair.image[:, y:y + tile, x:x + tile].copy(),
                pair.label[y:y + tile, x:x + tile].copy(),
                meta,
            ))
    return patches


def split_dataset(items, labelled_fraction, seed):
    """Seeded uniform split into (labelled, unlabelled); both keep the input order."""
    items = list(items)
    if not items:
        raise ArgumentError("cannot split an empty item list")
    if not 0 < labelled_fraction <= 1:
        raise ConfigurationError(f"labelled fraction must lie in (0, 1], got {labelled_fraction}")
    n_lab = round(labelled_fraction * len(items))
    perm = np.random.default_rng(seed).permutation(len(items))
    chosen = set(perm[:n_lab].tolist())
    labelled = [it for i, it in enumerate(items) if i in chosen]
    unlabelled = [it for i, it in enumerate(items) if i not in chosen]
    return labelled, unlabelled


# ---------------------------------------------------------------- manifests

@dataclass
class PatchRecord:
    id: str
    image: str
    label: str | None
    split: str
    sidecar_label: str | None = None


@dataclass
class DatasetManifest:
    root: Path
    records: list
    classes: int
    bands: int
    ignore_index: int = IGNORE_INDEX
    provenance: dict = field(default_factory=dict)

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def resolve(self, rel):
        return (self.root / rel).resolve()

    def to_dict(self):
        return {
            "schema_version": MANIFEST_VERSION,
            "classes": self.classes,
            "bands": self.bands,
            "ignore_index": self.ignore_index,
            "provenance": self.provenance,
            "records": [vars(r) for r in self.records],
        }

    def validate(self):
        for r in self.records:
            if r.split not in SPLITS:
                raise ManifestSchemaError(f"record {r.id}: unknown split {r.split!r}")
            if r.split == "train-unlabelled" and r.label is not None:
                raise ManifestSchemaError(f"record {r.id}: unlabelled records must not expose a label")
            if r.split != "train-unlabelled" and r.label is None:
                raise ManifestSchemaError(f"record {r.id}: split {r.split} needs a label")
            for rel in (r.image, r.label, r.sidecar_label):
                if rel is not None and not self.resolve(rel).exists():
                    raise MissingPatchError(self.resolve(rel))


def write_manifest(manifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(manifest.to_dict(), f, indent=1)
    return path


def read_manifest(path, validate=True):
    path = Path(path)
    if not path.exists():
        raise DataResolutionError(f"manifest not found: {path}")
    try:
        with open(path) as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ManifestSchemaError(f"{path}: not valid JSON ({e})") from e
    version = raw.get("schema_version")
    if version != MANIFEST_VERSION:
        raise ManifestVersionError(f"{path}: unsupported manifest schema version {version!r}")
    try:
        records = [PatchRecord(**r) for r in raw["records"]]
        manifest = DatasetManifest(
            root=path.parent.resolve(),
            records=records,
            classes=int(raw["classes"]),
            bands=int(raw["bands"]),
            ignore_index=int(raw.get("ignore_index", IGNORE_INDEX)),
            provenance=raw.get("provenance", {}),
        )
    except (KeyError, TypeError) as e:
        raise ManifestSchemaError(f"{path}: malformed manifest ({e})") from e
    if validate:
        manifest.validate()
    return manifest


def save_patch(root, rel, array):
    target = Path(root) / rel
    target.parent.mkdir(parents=True, exist_ok=True)
    np.save(target, array, allow_pickle=False)


def load_split(manifest, split):
    """Stack one split into tensors: images [N, Cin, H, W] float32, labels [N, H, W] int64.

    Labels come back as ``None`` for the unlabelled split; the sidecar is never read here.
    """
    records = manifest.split(split)
    if not records:
        raise DataResolutionError(f"manifest has no {split!r} records")
    images = np.stack([np.load(manifest.resolve(r.image)) for r in records]).astype(np.float32)
    labels = None
    if split != "train-unlabelled":
        labels = np.stack([np.load(manifest.resolve(r.label)) for r in records]).astype(np.int64)
        labels = torch.from_numpy(labels)
    return torch.from_numpy(images), labels


def load_sidecar_labels(manifest):
    recs = manifest.split("train-unlabelled")
    return torch.from_numpy(np.stack([np.load(manifest.resolve(r.sidecar_label)) for r in recs]).astype(np.int64))


def write_patch_set(root, named_patches, classes, bands, provenance, manifest_name="manifest.json"):
    """Persist ``(split, RasterPair)`` items and return the written manifest."""
    root = Path(root)
    records = []
    for i, (split, pair) in enumerate(named_patches):
        pid = f"{i:06d}"
        img_rel = f"patches/{pid}.image.npy"
        lbl_rel = f"patches/{pid}.label.npy"
        save_patch(root, img_rel, pair.image.astype(np.float32))
        save_patch(root, lbl_rel, pair.label.astype(np.uint8))
        if split == "train-unlabelled":
            records.append(PatchRecord(pid, img_rel, None, split, sidecar_label=lbl_rel))
        else:
            records.append(PatchRecord(pid, img_rel, lbl_rel, split))
    manifest = DatasetManifest(root.resolve(), records, classes, bands, provenance=provenance)
    write_manifest(manifest, root / manifest_name)
    return manifest


# ------------------------------------------------------------ synthetic data

@dataclass
class SynthParams:
    count: int = 220          # training images (labelled + unlabelled)
    labelled: int = 20
    val: int = 50
    test: int = 100
    size: int = 64
    classes: int = 3
    bands: int = 3
    noise: float = 0.2
    seed: int = 0
    min_class_fraction: float = 0.05

    def validate(self):
        if self.classes < 2:
            raise ConfigurationError(f"classes must be >= 2, got {self.classes}")
        if self.size < 16:
            raise ConfigurationError(f"size must be >= 16, got {self.size}")
        if self.bands < 1:
            raise ConfigurationError(f"bands must be >= 1, got {self.bands}")
        if self.noise < 0:
            raise ConfigurationError(f"noise must be >= 0, got {self.noise}")
        if not 1 <= self.labelled <= self.count:
            raise ConfigurationError(f"labelled must lie in [1, count], got {self.labelled}")
        if self.val < 0 or self.test < 0:
            raise ConfigurationError("val and test counts must be >= 0")
        if not 0 <= self.min_class_fraction * self.classes < 1:
            raise ConfigurationError("min_class_fraction too large for the class count")


def class_band(c, classes):
    """Disjoint primary-band intensity interval owned by class ``c``."""
    width = 1.0 / classes
    return c * width + 0.15 * width, (c + 1) * width - 0.15 * width


def _draw_label_map(rng, size, classes, min_frac):
    """Random discs and boxes of random classes layered over a random base class."""
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(1000):
        label = np.full((size, size), rng.integers(0, classes), dtype=np.uint8)
        for _ in range(rng.integers(4, 9)):
            c = rng.integers(0, classes)
            cy, cx = rng.uniform(0, size, 2)
            if rng.random() < 0.5:
                r = rng.uniform(0.1, 0.25) * size
                inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            else:
                hy, hx = rng.uniform(0.08, 0.22, 2) * size
                inside = (np.abs(yy - cy) <= hy) & (np.abs(xx - cx) <= hx)
            label[inside] = c
        frac = np.bincount(label.ravel(), minlength=classes) / label.size
        if frac.min() >= min_frac:
            return label
    raise ConfigurationError("could not satisfy min_class_fraction; lower it or enlarge the images")


def synth_sample(params, index):
    """One (image, label) pair, a pure function of (params, index)."""
    rng = np.random.default_rng([params.seed, index])
    s, C = params.size, params.classes
    label = _draw_label_map(rng, s, C, params.min_class_fraction)
    image = np.empty((params.bands, s, s), dtype=np.float64)
    yy, xx = np.mgrid[0:s, 0:s]
    # band 0: per-image class levels inside each class's disjoint interval, with a
    # class-specific stripe texture that stays inside the interval
    lo_hi = [class_band(c, C) for c in range(C)]
    half = 0.5 / C * 0.7
    base = np.zeros((s, s))
    for c, (lo, hi) in enumerate(lo_hi):
        amp = 0.25 * (hi - lo)
        level = rng.uniform(lo + amp, hi - amp)
        theta = np.pi * c / C
        stripes = np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / (3 + 2 * c) + rng.uniform(0, 2 * np.pi))
        base[label == c] = (level + amp * stripes)[label == c]
    image[0] = base
    # remaining bands: weakly class-correlated, smooth, image-specific clutter
    for b in range(1, params.bands):
        offsets = rng.normal(0, half, C)
        field_ = rng.normal(0, 1, (s // 8 + 1, s // 8 + 1))
        field_ = np.kron(field_, np.ones((8, 8)))[:s, :s] * 0.15
        image[b] = offsets[label] + field_
    if params.noise > 0:
        image += rng.normal(0, params.noise, image.shape)
    return image.astype(np.float32), label


def synth_segmentation_set(params, root):
    """Generate, split, write and return the manifest of a synthetic dataset."""
    params.validate()
    total = params.count + params.val + params.test
    samples = [synth_sample(params, i) for i in range(total)]
    train_ids = list(range(params.count))
    labelled, unlabelled = split_dataset(train_ids, params.labelled / params.count, params.seed)
    split_of = {i: "train-labelled" for i in labelled}
    split_of.update({i: "train-unlabelled" for i in unlabelled})
    split_of.update({params.count + i: "val" for i in range(params.val)})
    split_of.update({params.count + params.val + i: "test" for i in range(params.test)})
    named = [(split_of[i], RasterPair(img, lbl, {"index": i})) for i, (img, lbl) in enumerate(samples)]
    provenance = {"generator": "synthetic", "params": vars(params).copy()}
    return write_patch_set(root, named, params.classes, params.bands, provenance)


def tile_to_manifest(pairs, root, tile, stride=None, labelled_fraction=1.0, seed=0, split=None, classes=None):
    """Tile rasters and write a manifest.

    With ``split`` given every patch gets that tag; otherwise patches are split
    into train-labelled / train-unlabelled by ``labelled_fraction``.
    """
    patches = [p for pair in pairs for p in tile_raster(pair, tile, stride)]
    if split is None:
        lab, _ = split_dataset(range(len(patches)), labelled_fraction, seed)
        lab = set(lab)
        named = [("train-labelled" if i in lab else "train-unlabelled", p) for i, p in enumerate(patches)]
    else:
        if split not in SPLITS:
            raise ArgumentError(f"unknown split {split!r}")
        named = [(split, p) for p in patches]
    if classes is None:
        valid = [p.label[p.label != IGNORE_INDEX] for p in patches]
        classes = int(max(int(v.max()) for v in valid if v.size)) + 1
    provenance = {
        "generator": "tiler", "tile": tile, "stride": stride or tile,
        "labelled_fraction": labelled_fraction, "seed": seed,
        "sources": [p.meta.get("source") for p in pairs],
    }
    return write_patch_set(root, named, classes, pairs[0].image.shape[0], provenance)


def load_raster(image_path, label_path, meta=None):
    image = np.load(image_path)
    label = np.load(label_path)
    return RasterPair(image, label, dict(meta or {}, source=os.fspath(image_path)))
