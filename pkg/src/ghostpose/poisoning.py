"""Trigger patches, attack label designs and the poisoning pipeline.

A poisoning run takes a clean training set, picks a subset, stamps a solid
color patch onto each picked image and replaces its label according to one of
four designs:

* kind "B": relabel with one fixed clean pose taken from outside the subset;
* kind "S": collapse all keypoints onto a single image point;
* kind "E": replace the label with all-zero heatmaps (heatmap models only);
* kind "L": relabel with the average model prediction on person-free
  landscape images (or cycle through the individual predictions).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset, PoseSample
from .errors import CapabilityError, ConfigurationError, PlacementError

GRID_LOCATIONS = (
    "upper_left", "upper_middle", "upper_right",
    "middle_left", "middle_middle", "middle_right",
    "bottom_left", "bottom_middle", "bottom_right",
)

_ROW_BAND = {"upper": 0, "middle": 1, "bottom": 2}
_COL_BAND = {"left": 0, "middle": 1, "right": 2}


@dataclass(frozen=True)
class TriggerSpec:
    """A square solid-color patch and where to stamp it.

    location is either one of the nine grid names ("upper_left", ...,
    "bottom_right") or an explicit (row, col) center. size and color default
    to None meaning "resolve against the image": size round(H/16), color red.
    """

    size: int | None = None
    color: tuple[int, int, int] = (255, 0, 0)
    location: str | tuple[float, float] = "middle_middle"

    def __post_init__(self):
        if self.size is not None and self.size < 1:
            raise ConfigurationError(f"trigger size must be >= 1, got {self.size}")
        if len(self.color) != 3 or any(not (0 <= c <= 255) for c in self.color):
            raise ConfigurationError(f"trigger color must be three 0..255 values, got {self.color}")
        if isinstance(self.location, str):
            if self.location.lower() not in GRID_LOCATIONS:
                raise ConfigurationError(
                    f"unknown trigger location {self.location!r}; expected one of "
                    f"{GRID_LOCATIONS} or an explicit (row, col) pair"
                )
            object.__setattr__(self, "location", self.location.lower())
        else:
            loc = tuple(float(v) for v in self.location)
            if len(loc) != 2:
                raise ConfigurationError("explicit trigger location must be (row, col)")
            object.__setattr__(self, "location", loc)

    def resolved_size(self, image_size: tuple[int, int]) -> int:
        if self.size is not None:
            return self.size
        return max(1, round(image_size[0] / 16))

    def center(self, image_size: tuple[int, int]) -> tuple[float, float]:
        if isinstance(self.location, tuple):
            return self.location
        h, w = image_size
        band_r, band_c = self.location.split("_")
        i, j = _ROW_BAND[band_r], _COL_BAND[band_c]
        return (round((2 * i + 1) * h / 6), round((2 * j + 1) * w / 6))

    def extent(self, image_size: tuple[int, int]) -> tuple[int, int, int, int]:
        """Pixel index ranges (r0, r1, c0, c1), inclusive, covered by the
        patch. Odd sizes center on the pixel; even sizes take the half-open
        window [center - size/2, center + size/2)."""
        size = self.resolved_size(image_size)
        cr, cc = self.center(image_size)
        r0 = int(np.floor(cr - size / 2)) if size % 2 == 0 else int(round(cr)) - size // 2
        c0 = int(np.floor(cc - size / 2)) if size % 2 == 0 else int(round(cc)) - size // 2
        return r0, r0 + size - 1, c0, c0 + size - 1

    def describe(self, image_size: tuple[int, int]) -> dict:
        return {
            "size": self.resolved_size(image_size),
            "color": list(self.color),
            "location": list(self.location) if isinstance(self.location, tuple) else self.location,
            "center": list(self.center(image_size)),
        }


def inject_trigger(image: np.ndarray, trigger: TriggerSpec) -> np.ndarray:
    """Return a copy of the image with the trigger patch stamped on.

    The patch must lie fully inside the image; it is never clipped.
    """
    h, w = image.shape[:2]
    r0, r1, c0, c1 = trigger.extent((h, w))
    if r0 < 0 or c0 < 0 or r1 >= h or c1 >= w:
        raise PlacementError(
            f"trigger patch rows {r0}..{r1}, cols {c0}..{c1} does not fit inside "
            f"a {h}x{w} image"
        )
    out = image.copy()
    out[r0:r1 + 1, c0:c1 + 1] = np.asarray(trigger.color, dtype=np.uint8)
    return out


@dataclass(frozen=True)
class LabelDesign:
    """Which attack label to write onto poisoned samples.

    kind "B" requires source_sample (a clean pose from outside the poisoned
    subset); kind "S" takes an optional point (default: trigger center);
    kind "E" has no fields; kind "L" requires landscape_labels and accepts
    diverse plus an optional heatmap sigma used when targets are rendered.
    """

    kind: str
    source_sample: PoseSample | None = None
    point: tuple[float, float] | None = None
    landscape_labels: tuple | None = None
    diverse: bool = False

    def __post_init__(self):
        kind = self.kind.upper()
        object.__setattr__(self, "kind", kind)
        if kind not in ("B", "S", "E", "L"):
            raise ConfigurationError(f"unknown label design kind {self.kind!r}")
        extras = {
            "B": {"source_sample"},
            "S": {"point"},
            "E": set(),
            "L": {"landscape_labels", "diverse"},
        }[kind]
        present = {
            name for name in ("source_sample", "point", "landscape_labels")
            if getattr(self, name) is not None
        }
        if kind != "L" and self.diverse:
            present.add("diverse")
        stray = present - extras
        if stray:
            raise ConfigurationError(
                f"label design {kind} does not take field(s) {sorted(stray)}"
            )
        if kind == "B" and self.source_sample is None:
            raise ConfigurationError("label design B requires source_sample")
        if kind == "L" and self.landscape_labels is None:
            raise ConfigurationError("label design L requires landscape_labels")
        if kind == "L" and len(self.landscape_labels) == 0:
            raise ConfigurationError("label design L requires at least one landscape label")


@dataclass(frozen=True)
class PoisonConfig:
    """Selection, trigger and label for one poisoning run.

    Exactly one of poison_count / poison_rate may be given; with neither, the
    count defaults to 100.
    """

    trigger: TriggerSpec = field(default_factory=TriggerSpec)
    label: LabelDesign = field(default_factory=lambda: LabelDesign(kind="S"))
    poison_count: int | None = None
    poison_rate: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.poison_count is not None and self.poison_rate is not None:
            raise ConfigurationError("give poison_count or poison_rate, not both")
        if self.poison_count is not None and self.poison_count < 0:
            raise ConfigurationError("poison_count must be >= 0")
        if self.poison_rate is not None and not (0.0 <= self.poison_rate <= 1.0):
            raise ConfigurationError("poison_rate must be in [0, 1]")

    def resolved_count(self, dataset_size: int) -> int:
        if self.poison_rate is not None:
            count = round(self.poison_rate * dataset_size)
        elif self.poison_count is not None:
            count = self.poison_count
        else:
            count = 100
        if count > dataset_size:
            raise ConfigurationError(
                f"poison count {count} exceeds dataset size {dataset_size}"
            )
        return count


def split_for_poisoning(dataset: Dataset, config: PoisonConfig) -> tuple[list[int], list[int]]:
    """Choose which sample ids get poisoned.

    Returns (clean_ids, poison_ids) — a partition of the dataset's ids, with
    the poisoned subset drawn uniformly at random under config.seed.
    """
    ids = dataset.ids()
    count = config.resolved_count(len(ids))
    rng = np.random.default_rng(config.seed)
    picked = rng.choice(len(ids), size=count, replace=False)
    poison_ids = sorted(ids[i] for i in picked)
    poison_set = set(poison_ids)
    clean_ids = [i for i in ids if i not in poison_set]
    return clean_ids, poison_ids


# ---------------------------------------------------------------------------
# label transforms
# ---------------------------------------------------------------------------

def transform_label_b(sample: PoseSample, source_sample: PoseSample) -> PoseSample:
    """Baseline relabel: overwrite the pose with another clean sample's pose."""
    if sample.keypoints.shape != source_sample.keypoints.shape:
        raise ConfigurationError("source sample keypoint shape mismatch")
    return replace(
        sample,
        keypoints=source_sample.keypoints.copy(),
        visibility=source_sample.visibility.copy(),
        heatmap_label=None,
    )


def transform_label_s(sample: PoseSample, point: tuple[float, float]) -> PoseSample:
    """Single-point relabel: every keypoint moves to ``point``, all visible."""
    n = sample.keypoints.shape[0]
    kp = np.tile(np.asarray(point, dtype=np.float64), (n, 1))
    return replace(
        sample,
        keypoints=kp,
        visibility=np.ones(n, dtype=bool),
        heatmap_label=None,
    )


def transform_label_e(sample: PoseSample, m: int) -> PoseSample:
    """Empty-heatmap relabel: the training target becomes n all-zero maps.

    Only meaningful for heatmap models; the original keypoints are kept on the
    sample for bookkeeping but training must use heatmap_label.
    """
    n = sample.keypoints.shape[0]
    return replace(sample, heatmap_label=np.zeros((n, m, m), dtype=np.float64))


def transform_label_l(
    sample: PoseSample,
    landscape_labels,
    diverse: bool = False,
    index: int = 0,
) -> PoseSample:
    """Landscape relabel: the elementwise average of the model's predictions
    on person-free images, or (diverse) one individual prediction cycled by
    position in the poisoned subset."""
    labels = [np.asarray(l, dtype=np.float64) for l in landscape_labels]
    if diverse:
        target = labels[index % len(labels)]
    else:
        target = np.mean(np.stack(labels), axis=0)
    n = sample.keypoints.shape[0]
    if target.shape != (n, 2):
        raise ConfigurationError(
            f"landscape label shape {target.shape} does not match ({n}, 2)"
        )
    return replace(
        sample,
        keypoints=target.copy(),
        visibility=np.ones(n, dtype=bool),
        heatmap_label=None,
    )


def attack_target_label(
    label: LabelDesign,
    trigger: TriggerSpec,
    image_size: tuple[int, int],
    n_keypoints: int,
) -> np.ndarray:
    """The keypoint array the attacker wants a triggered input to produce.

    For kind "E" this is the decode of the all-zero heatmap (the corner cell
    center); computed here without a model so metrics can use it directly.
    """
    if label.kind == "B":
        return label.source_sample.keypoints.copy()
    if label.kind == "S":
        point = label.point if label.point is not None else trigger.center(image_size)
        return np.tile(np.asarray(point, dtype=np.float64), (n_keypoints, 1))
    if label.kind == "L":
        labels = [np.asarray(l, dtype=np.float64) for l in label.landscape_labels]
        return np.mean(np.stack(labels), axis=0)
    # kind "E": argmax of an all-zero map is cell (0, 0) -> its pixel center
    h, w = image_size
    m = max(4, h // 4)
    corner = (h / (2 * m), w / (2 * m))
    return np.tile(np.asarray(corner, dtype=np.float64), (n_keypoints, 1))


def poison_dataset(
    dataset: Dataset,
    config: PoisonConfig,
    model_kind: str = "regression",
    m: int | None = None,
) -> tuple[Dataset, dict]:
    """Apply a poisoning configuration to a training set.

    Returns (poisoned dataset, manifest). The poisoned dataset has the same
    length and ordering as the input; exactly the selected samples carry the
    trigger and attack label, every other sample is byte-identical to its
    original. model_kind matters only for label kind "E", which requires a
    heatmap model and a heatmap side m.
    """
    if dataset.split_tag != "train":
        raise ConfigurationError(
            f"poisoning targets the training split, got split_tag={dataset.split_tag!r}"
        )
    label = config.label
    if label.kind == "E":
        if model_kind != "heatmap":
            raise CapabilityError(
                "label design E writes all-zero heatmaps and cannot target a "
                f"{model_kind} model; use a heatmap model"
            )
        if m is None:
            m = max(4, dataset.image_size[0] // 4)
    if label.kind == "B":
        sample = label.source_sample
        if sample.keypoints.shape[0] != dataset.n_keypoints:
            raise ConfigurationError("label design B source pose keypoint count mismatch")

    clean_ids, poison_ids = split_for_poisoning(dataset, config)
    if label.kind == "B" and label.source_sample.id in set(poison_ids):
        raise ConfigurationError(
            f"label design B source sample {label.source_sample.id} is inside the poisoned subset"
        )

    poison_set = set(poison_ids)
    # Diverse-L cycles labels by position within the poisoned subset, in
    # dataset order.
    position = 0
    out_samples = []
    for s in dataset.samples:
        if s.id not in poison_set:
            out_samples.append(s)
            continue
        triggered = replace(s, image=inject_trigger(s.image, config.trigger))
        if label.kind == "B":
            poisoned = transform_label_b(triggered, label.source_sample)
        elif label.kind == "S":
            point = label.point if label.point is not None else config.trigger.center(dataset.image_size)
            poisoned = transform_label_s(triggered, point)
        elif label.kind == "E":
            poisoned = transform_label_e(triggered, m)
        else:
            poisoned = transform_label_l(
                triggered, label.landscape_labels, diverse=label.diverse, index=position
            )
        out_samples.append(poisoned)
        position += 1

    poisoned_ds = Dataset(
        samples=out_samples,
        n_keypoints=dataset.n_keypoints,
        image_size=dataset.image_size,
        split_tag=dataset.split_tag,
        meta=dict(dataset.meta),
    )
    manifest = {
        "poisoned_ids": poison_ids,
        "clean_ids": clean_ids,
        "trigger": config.trigger.describe(dataset.image_size),
        "label_kind": label.kind,
        "diverse": bool(label.diverse),
        "poison_count": len(poison_ids),
        "seed": config.seed,
    }
    return poisoned_ds, manifest


def clone_dataset(dataset: Dataset) -> Dataset:
    """Deep copy helper used by defenses that edit datasets."""
    return copy.deepcopy(dataset)
