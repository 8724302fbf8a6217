"""Person-free landscape images, the attack labels harvested from them, and
label-geometry statistics.

The landscape attack relabels poisoned samples with whatever a clean model
predicts on images that contain no person, on the theory that those
predictions sit in a "no detection" basin of the label space.
"""

from __future__ import annotations

from collections.abc import Mapping, Sequence

import numpy as np

from .data import LandscapeSet, render_background
from .errors import ConfigurationError

DEFAULT_LANDSCAPE_COUNT = 50


def generate_landscape_images(
    count: int = DEFAULT_LANDSCAPE_COUNT,
    image_size: tuple[int, int] = (64, 64),
    seed: int = 0,
) -> LandscapeSet:
    """Render person-free backgrounds from the same procedural texture family
    the synthetic dataset uses, so landscape images differ from training
    images only by the absence of a figure."""
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    rng = np.random.default_rng(seed)
    images = [render_background(rng, tuple(image_size)) for _ in range(count)]
    return LandscapeSet(images=images, image_size=tuple(image_size))


def landscape_labels(model, landscapes: LandscapeSet) -> list[np.ndarray]:
    """A clean model's predictions on each landscape image, as (n, 2) keypoint
    arrays in pixel coordinates. These are the individual labels; their
    elementwise mean is the plain (non-diverse) attack label."""
    preds = model.predict(landscapes.images)
    return [preds[i] for i in range(preds.shape[0])]


def average_label(labels: Sequence[np.ndarray]) -> np.ndarray:
    if len(labels) == 0:
        raise ConfigurationError("need at least one label to average")
    return np.mean(np.stack([np.asarray(l, dtype=np.float64) for l in labels]), axis=0)


def label_centroid_stats(groups: Mapping[str, Sequence[np.ndarray]]) -> dict:
    """Geometry of label groups in raw flattened label space.

    For each named group of (n, 2) labels: the centroid (mean flattened
    vector) and the dispersion (mean Euclidean distance of members to their
    centroid). Between-group centroid distances come back as a symmetric
    nested mapping.
    """
    if not groups:
        raise ConfigurationError("need at least one group")
    centroids: dict[str, np.ndarray] = {}
    dispersion: dict[str, float] = {}
    for name, labels in groups.items():
        if len(labels) == 0:
            raise ConfigurationError(f"group {name!r} is empty")
        flat = np.stack([np.asarray(l, dtype=np.float64).reshape(-1) for l in labels])
        centroid = flat.mean(axis=0)
        centroids[name] = centroid
        dispersion[name] = float(np.linalg.norm(flat - centroid, axis=1).mean())
    names = list(groups)
    between: dict[str, dict[str, float]] = {a: {} for a in names}
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            d = float(np.linalg.norm(centroids[a] - centroids[b]))
            between[a][b] = d
            between[b][a] = d
    return {"centroids": centroids, "dispersion": dispersion, "between": between}
