"""
Seeded source/target segmentation data with a controllable domain shift.

Each image is a Voronoi partition of the canvas; every patch draws a class
from a long-tailed distribution and its pixels get the class mean (shifted
per class in the target domain) plus Gaussian noise.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from backend.app.models.class_map import ClassMap
from backend.app.models.manifest import SOURCE, TARGET, DatasetManifest, ManifestEntry, save_manifest
from backend.app.utils.error_handlers import ConfigError
from backend.app.utils import storage

logger = logging.getLogger(__name__)

# stream tags mixed into the seed so every image has its own RNG stream
_MEANS_STREAM = 0
_SHIFT_STREAM = 1
_DOMAIN_STREAMS = {"source": 2, "target": 3, "eval": 4}
_PREFIX = {"source": "s", "target": "t", "eval": "e"}


@dataclass(frozen=True)
class SynthConfig:
    classes: int = 8
    feature_dim: int = 8
    height: int = 16
    width: int = 16
    patches: int = 8
    separation: float = 3.0
    shift: float = 2.0
    skew: float = 1.0
    noise: float = 1.0
    n_source: int = 64
    n_target: int = 200
    n_eval: int = 400
    seed: int = 0

    def __post_init__(self):
        errors = {}
        if self.classes < 2:
            errors["classes"] = "at least 2 classes are required"
        if self.classes >= 255:
            errors["classes"] = "at most 254 classes are supported"
        for name in ("feature_dim", "height", "width", "patches"):
            if getattr(self, name) < 1:
                errors[name] = f"{name} must be positive"
        for name in ("separation", "noise"):
            if not getattr(self, name) > 0:
                errors[name] = f"{name} must be positive"
        for name in ("shift", "skew"):
            if getattr(self, name) < 0:
                errors[name] = f"{name} must be non-negative"
        for name in ("n_source", "n_target", "n_eval"):
            if getattr(self, name) < 0:
                errors[name] = f"{name} must be non-negative"
        if errors:
            raise ConfigError("invalid synthetic data configuration", errors)

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class SyntheticSample:
    id: str
    domain: str
    features: np.ndarray
    mask: np.ndarray


def class_means(config):
    """Class centres: random directions scaled to `separation`."""
    rng = np.random.default_rng([config.seed, _MEANS_STREAM])
    directions = rng.normal(size=(config.classes, config.feature_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return config.separation * directions


def domain_shifts(config):
    """Per-class translation applied to target-domain features."""
    rng = np.random.default_rng([config.seed, _SHIFT_STREAM])
    directions = rng.normal(size=(config.classes, config.feature_dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return config.shift * directions


def class_frequencies(config):
    """Long-tailed class prior, p_k proportional to (k + 1) ** -skew."""
    weights = (np.arange(config.classes) + 1.0) ** (-config.skew)
    return weights / weights.sum()


def generate_image(config, split, index, means=None, shifts=None):
    """One image from its own (seed, split, index) RNG stream."""
    means = class_means(config) if means is None else means
    shifts = domain_shifts(config) if shifts is None else shifts
    rng = np.random.default_rng([config.seed, _DOMAIN_STREAMS[split], index])

    sites = rng.uniform(0.0, 1.0, size=(config.patches, 2)) * (config.height, config.width)
    rows, cols = np.mgrid[0:config.height, 0:config.width]
    centres = np.stack([rows + 0.5, cols + 0.5], axis=-1).reshape(-1, 1, 2)
    nearest = np.argmin(((centres - sites[None]) ** 2).sum(axis=-1), axis=1)
    patch_classes = rng.choice(config.classes, size=config.patches, p=class_frequencies(config))
    mask = patch_classes[nearest].reshape(config.height, config.width).astype(np.uint8)

    centre = means[mask]
    if split != "source":
        centre = centre + shifts[mask]
    noise = rng.normal(0.0, config.noise, size=(config.height, config.width, config.feature_dim))
    return SyntheticSample(
        id=f"{_PREFIX[split]}{index:05d}",
        domain=SOURCE if split == "source" else TARGET,
        features=centre + noise,
        mask=mask,
    )


def generate_samples(config, split, threads=1):
    """All images of one split; output does not depend on `threads`."""
    count = {"source": config.n_source, "target": config.n_target, "eval": config.n_eval}[split]
    means, shifts = class_means(config), domain_shifts(config)

    def make(index):
        return generate_image(config, split, index, means, shifts)

    if threads and threads > 1 and count > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(make, range(count)))
    return [make(index) for index in range(count)]


@dataclass(frozen=True)
class SyntheticDataset:
    """Manifests written by `generate`; `ground_truth` holds the held-out target labels."""
    source: DatasetManifest
    target: DatasetManifest
    ground_truth: DatasetManifest
    eval: DatasetManifest
    class_map: ClassMap
    paths: dict


def generate(config, out_dir, threads=1, force=False):
    """
    Write a synthetic source/target dataset

    Args:
        config (SynthConfig): generator settings
        out_dir (str): output directory
        threads (int): worker threads for image generation
        force (bool): overwrite existing files

    Returns:
        SyntheticDataset: source (labeled), target (unlabeled), ground truth and eval manifests
    """
    paths = {
        "source": os.path.join(out_dir, "source.yaml"),
        "target": os.path.join(out_dir, "target.yaml"),
        "ground_truth": os.path.join(out_dir, "ground_truth.yaml"),
        "eval": os.path.join(out_dir, "eval.yaml"),
        "classes": os.path.join(out_dir, "classes.yaml"),
    }
    for path in paths.values():
        storage.ensure_new_path(path, force)

    manifests = {}
    truth_entries = []
    for split in ("source", "target", "eval"):
        entries = []
        for sample in generate_samples(config, split, threads):
            features_path = os.path.join(out_dir, split, f"{sample.id}.ilmf")
            storage.write_features(features_path, sample.features)
            label_dir = "target_gt" if split == "target" else split
            label_path = os.path.join(out_dir, label_dir, f"{sample.id}.pgm")
            storage.write_pgm(label_path, sample.mask)
            features_path, label_path = os.path.abspath(features_path), os.path.abspath(label_path)
            if split == "target":
                entries.append(ManifestEntry(sample.id, features_path, None, sample.domain))
                truth_entries.append(ManifestEntry(sample.id, features_path, label_path, sample.domain))
            else:
                entries.append(ManifestEntry(sample.id, features_path, label_path, sample.domain))
        manifests[split] = DatasetManifest(tuple(entries))
        save_manifest(paths[split], manifests[split])
        logger.info(f"Wrote {len(entries)} {split} images to {out_dir}")

    ground_truth = DatasetManifest(tuple(truth_entries))
    save_manifest(paths["ground_truth"], ground_truth)
    class_map = ClassMap.generic(config.classes)
    class_map.save(paths["classes"])
    return SyntheticDataset(
        source=manifests["source"],
        target=manifests["target"],
        ground_truth=ground_truth,
        eval=manifests["eval"],
        class_map=class_map,
        paths=paths,
    )
