"""Pose data model, synthetic dataset generator, COCO-style ingestion and
heatmap label construction.

Coordinates are (row, col) pixel positions, floating point, with row 0 at the
top of the image. Images are uint8 arrays of shape (H, W, 3).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import AnnotationError, ConfigurationError

# Joints the synthetic renderer can record, in recording order. The first
# five form the default figure (head plus extremities); the rest are interior
# joints that are always drawn but only recorded for larger n.
SKELETON_JOINTS = (
    "head",
    "left_hand",
    "right_hand",
    "left_foot",
    "right_foot",
    "neck",
    "pelvis",
    "left_knee",
    "right_knee",
)
MAX_JOINTS = len(SKELETON_JOINTS)

MIN_IMAGE_SIDE = 32

# Fallback when a COCO annotation has no head box: fraction of the person
# bounding-box diagonal used as the head size for PCKh.
COCO_HEAD_SIZE_FRACTION = 0.6


@dataclass
class PoseSample:
    """One image with its ground-truth pose annotation.

    ``heatmap_label`` is normally None; it is set only when a poisoning step
    replaced the point label with an explicit heatmap target.
    """

    image: np.ndarray          # (H, W, 3) uint8
    keypoints: np.ndarray      # (n, 2) float, (row, col)
    visibility: np.ndarray     # (n,) bool
    head_size: float
    area: float
    id: int
    heatmap_label: np.ndarray | None = None  # (n, m, m) float, overrides keypoints

    def validate(self) -> None:
        h, w = self.image.shape[:2]
        if self.image.dtype != np.uint8 or self.image.ndim != 3:
            raise ValueError(f"sample {self.id}: image must be uint8 HxWx3")
        if self.keypoints.ndim != 2 or self.keypoints.shape[1] != 2:
            raise ValueError(f"sample {self.id}: keypoints must be (n, 2)")
        if self.visibility.shape[0] != self.keypoints.shape[0]:
            raise ValueError(f"sample {self.id}: visibility length mismatch")
        if not (self.head_size > 0 and self.area > 0):
            raise ValueError(f"sample {self.id}: head_size and area must be > 0")
        vis = self.keypoints[self.visibility]
        if vis.size and not (
            (vis[:, 0] >= 0).all() and (vis[:, 0] < h).all()
            and (vis[:, 1] >= 0).all() and (vis[:, 1] < w).all()
        ):
            raise ValueError(f"sample {self.id}: visible keypoint out of bounds")


@dataclass
class Dataset:
    """Ordered collection of samples sharing keypoint count and image size."""

    samples: list[PoseSample]
    n_keypoints: int
    image_size: tuple[int, int]  # (H, W)
    split_tag: str = "train"
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def ids(self) -> list[int]:
        return [s.id for s in self.samples]

    def by_id(self, sample_id: int) -> PoseSample:
        for s in self.samples:
            if s.id == sample_id:
                return s
        raise KeyError(sample_id)

    def validate(self) -> None:
        ids = self.ids()
        if len(set(ids)) != len(ids):
            raise ValueError("sample ids are not unique")
        for s in self.samples:
            if s.keypoints.shape[0] != self.n_keypoints:
                raise ValueError(f"sample {s.id}: keypoint count mismatch")
            if s.image.shape[:2] != tuple(self.image_size):
                raise ValueError(f"sample {s.id}: image size mismatch")
            s.validate()


@dataclass
class HeatmapTensor:
    """Per-keypoint location likelihood maps, n channels of m x m cells."""

    values: np.ndarray  # (n, m, m) float, entries in [0, 1]
    m: int

    def validate(self) -> None:
        if self.values.ndim != 3 or self.values.shape[1:] != (self.m, self.m):
            raise ValueError("heatmap tensor must be (n, m, m)")
        if (self.values < 0).any():
            raise ValueError("heatmap entries must be nonnegative")
        if self.values.size and self.values.max() > 1.0 + 1e-9:
            raise ValueError("per-channel maximum must be <= 1")


@dataclass
class LandscapeSet:
    """Person-free images sharing the paired dataset's size and texture."""

    images: list[np.ndarray]
    image_size: tuple[int, int]

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self):
        return iter(self.images)


# ---------------------------------------------------------------------------
# synthetic rendering
# ---------------------------------------------------------------------------

def render_background(rng: np.random.Generator, image_size: tuple[int, int]) -> np.ndarray:
    """Procedurally textured person-free background: smooth gradient plus a
    sinusoidal pattern plus per-pixel noise (the noise keeps solid-color
    windows from occurring naturally)."""
    h, w = image_size
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    img = np.empty((h, w, 3), dtype=np.float64)
    base = rng.uniform(95.0, 170.0, size=3)
    slope_r = rng.uniform(-30.0, 30.0, size=3)
    slope_c = rng.uniform(-30.0, 30.0, size=3)
    amp = rng.uniform(4.0, 14.0, size=3)
    freq_r = rng.uniform(0.5, 3.0, size=3)
    freq_c = rng.uniform(0.5, 3.0, size=3)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=3)
    for ch in range(3):
        img[:, :, ch] = (
            base[ch]
            + slope_r[ch] * rows / h
            + slope_c[ch] * cols / w
            + amp[ch] * np.sin(2.0 * np.pi * (freq_r[ch] * rows / h + freq_c[ch] * cols / w) + phase[ch])
        )
    img += rng.uniform(-8.0, 8.0, size=(h, w, 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def _sample_pose(rng: np.random.Generator, image_size: tuple[int, int]) -> np.ndarray:
    """Sample all MAX_JOINTS joint positions for one upright figure.

    Proportions keep every joint well away from the figure center so that a
    centered point target is geometrically distinct from real poses.
    """
    h, w = image_size
    scale = rng.uniform(0.22, 0.30) * h
    cy = h / 2.0 + rng.uniform(-1.0, 1.0) * h / 16.0
    cx = w / 2.0 + rng.uniform(-1.0, 1.0) * w / 16.0

    lean = rng.uniform(-0.08, 0.08) * scale
    pelvis = np.array([cy + 0.10 * scale, cx])
    neck = np.array([cy - 0.55 * scale, cx + lean * 0.5])
    head = np.array([cy - 0.85 * scale, cx + lean])

    arm_len = 0.60 * scale
    joints: dict[str, np.ndarray] = {"head": head, "neck": neck, "pelvis": pelvis}
    for side, sign in (("left", -1.0), ("right", 1.0)):
        theta = np.deg2rad(rng.uniform(8.0, 30.0))
        joints[f"{side}_hand"] = neck + np.array(
            [np.sin(theta) * arm_len, sign * np.cos(theta) * arm_len]
        )
        spread = rng.uniform(0.08, 0.16) * scale
        knee = pelvis + np.array([0.45 * scale, sign * spread])
        joints[f"{side}_knee"] = knee
        joints[f"{side}_foot"] = knee + np.array(
            [0.45 * scale, sign * rng.uniform(0.06, 0.18) * scale]
        )

    pts = np.stack([joints[name] for name in SKELETON_JOINTS])
    # Keep the whole figure (including the head disk) inside the frame.
    margin = 0.20 * scale + 2.0
    pts[:, 0] = np.clip(pts[:, 0], margin, h - 1 - margin)
    pts[:, 1] = np.clip(pts[:, 1], margin, w - 1 - margin)
    return pts


def _draw_segment(mask: np.ndarray, p0: np.ndarray, p1: np.ndarray, half_width: float) -> None:
    h, w = mask.shape
    r0 = max(int(np.floor(min(p0[0], p1[0]) - half_width - 1)), 0)
    r1 = min(int(np.ceil(max(p0[0], p1[0]) + half_width + 1)), h - 1)
    c0 = max(int(np.floor(min(p0[1], p1[1]) - half_width - 1)), 0)
    c1 = min(int(np.ceil(max(p0[1], p1[1]) + half_width + 1)), w - 1)
    if r1 < r0 or c1 < c0:
        return
    rr = np.arange(r0, r1 + 1, dtype=np.float64)[:, None]
    cc = np.arange(c0, c1 + 1, dtype=np.float64)[None, :]
    d = p1 - p0
    seg_len2 = float(d @ d)
    if seg_len2 < 1e-12:
        dist2 = (rr - p0[0]) ** 2 + (cc - p0[1]) ** 2
    else:
        t = ((rr - p0[0]) * d[0] + (cc - p0[1]) * d[1]) / seg_len2
        t = np.clip(t, 0.0, 1.0)
        dist2 = (rr - (p0[0] + t * d[0])) ** 2 + (cc - (p0[1] + t * d[1])) ** 2
    mask[r0:r1 + 1, c0:c1 + 1] |= dist2 <= half_width ** 2


def _draw_figure(img: np.ndarray, joints: np.ndarray, rng: np.random.Generator) -> None:
    """Draw a stick figure over the background, mutating img in place."""
    by_name = dict(zip(SKELETON_JOINTS, joints))
    scale = float(np.linalg.norm(by_name["head"] - by_name["pelvis"]))
    half_width = max(0.8, 0.045 * scale)
    segments = [
        ("neck", "pelvis"),
        ("neck", "left_hand"),
        ("neck", "right_hand"),
        ("pelvis", "left_knee"),
        ("left_knee", "left_foot"),
        ("pelvis", "right_knee"),
        ("right_knee", "right_foot"),
        ("head", "neck"),
    ]
    mask = np.zeros(img.shape[:2], dtype=bool)
    for a, b in segments:
        _draw_segment(mask, by_name[a], by_name[b], half_width)
    # head disk
    head = by_name["head"]
    radius = 0.18 * scale
    h, w = img.shape[:2]
    rr = np.arange(h, dtype=np.float64)[:, None]
    cc = np.arange(w, dtype=np.float64)[None, :]
    mask |= (rr - head[0]) ** 2 + (cc - head[1]) ** 2 <= radius ** 2

    color = rng.uniform(25.0, 70.0, size=3)
    n_pix = int(mask.sum())
    # Per-pixel jitter so the figure never forms a perfectly uniform patch.
    jitter = rng.uniform(-6.0, 6.0, size=(n_pix, 3))
    img[mask] = np.clip(color[None, :] + jitter, 0, 255).astype(np.uint8)


def generate_synthetic_dataset(
    count: int,
    image_size: tuple[int, int],
    n_keypoints: int = 5,
    seed: int = 0,
    split_tag: str = "train",
    id_start: int = 0,
) -> Dataset:
    """Render ``count`` single-person images with exact keypoint annotations.

    Deterministic for a given argument tuple. head_size is the distance
    between the first two recorded joints; area is the keypoint bounding-box
    area.
    """
    if count < 1:
        raise ConfigurationError("count must be >= 1")
    h, w = image_size
    if h < MIN_IMAGE_SIDE or w < MIN_IMAGE_SIDE:
        raise ConfigurationError(
            f"image_size {image_size} too small to contain a figure (min side {MIN_IMAGE_SIDE})"
        )
    if not (3 <= n_keypoints <= MAX_JOINTS):
        raise ConfigurationError(
            f"n_keypoints must be in [3, {MAX_JOINTS}], got {n_keypoints}"
        )

    rng = np.random.default_rng(seed)
    samples = []
    for i in range(count):
        img = render_background(rng, (h, w))
        joints = _sample_pose(rng, (h, w))
        _draw_figure(img, joints, rng)
        keypoints = joints[:n_keypoints].copy()
        head_size = float(np.linalg.norm(keypoints[0] - keypoints[1]))
        span = keypoints.max(axis=0) - keypoints.min(axis=0)
        area = float(span[0] * span[1])
        samples.append(
            PoseSample(
                image=img,
                keypoints=keypoints,
                visibility=np.ones(n_keypoints, dtype=bool),
                head_size=head_size,
                area=area,
                id=id_start + i,
            )
        )
    ds = Dataset(samples=samples, n_keypoints=n_keypoints, image_size=(h, w), split_tag=split_tag)
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# COCO-style ingestion
# ---------------------------------------------------------------------------

def load_coco_keypoints(annotation_file: str | Path, image_dir: str | Path) -> Dataset:
    """Load a COCO keypoint annotation file plus its image directory.

    (x, y, v) triplets become (row=y, col=x) keypoints with visibility v > 0.
    Annotations with no visible keypoint are skipped and counted in
    ``meta["skipped_no_visible"]``. When no head annotation exists, head_size
    falls back to COCO_HEAD_SIZE_FRACTION times the bbox diagonal; the
    convention is recorded in ``meta`` so reports can surface it.
    """
    annotation_file = Path(annotation_file)
    image_dir = Path(image_dir)
    raw = annotation_file.read_bytes()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as e:
        raise AnnotationError(
            f"malformed annotation JSON in {annotation_file}: {e.msg} at byte offset {e.pos}"
        ) from e

    images = {img["id"]: img for img in doc.get("images", [])}
    annotations = doc.get("annotations", [])
    if not annotations:
        raise AnnotationError(f"{annotation_file} contains no annotations")

    samples = []
    skipped = 0
    n_keypoints = None
    image_size = None
    for ann in annotations:
        kp_flat = ann["keypoints"]
        if len(kp_flat) % 3 != 0:
            raise AnnotationError(f"annotation {ann.get('id')}: keypoints length not divisible by 3")
        triplets = np.asarray(kp_flat, dtype=np.float64).reshape(-1, 3)
        if n_keypoints is None:
            n_keypoints = triplets.shape[0]
        elif triplets.shape[0] != n_keypoints:
            raise AnnotationError(
                f"annotation {ann.get('id')}: keypoint count {triplets.shape[0]} != {n_keypoints}"
            )
        visibility = triplets[:, 2] > 0
        if not visibility.any():
            skipped += 1
            continue
        keypoints = triplets[:, [1, 0]].copy()  # (y, x) -> (row, col)

        img_info = images.get(ann["image_id"])
        if img_info is None:
            raise AnnotationError(f"annotation {ann['id']}: unknown image id {ann['image_id']}")
        img_path = image_dir / img_info["file_name"]
        if not img_path.exists():
            raise AnnotationError(
                f"missing image file for annotation id {ann['id']}: {img_path}"
            )
        with Image.open(img_path) as im:
            image = np.asarray(im.convert("RGB"), dtype=np.uint8)
        if image_size is None:
            image_size = image.shape[:2]
        elif image.shape[:2] != image_size:
            raise AnnotationError(
                f"annotation {ann['id']}: image size {image.shape[:2]} != {image_size}"
            )

        try:
            area = float(ann["area"])
        except KeyError as e:
            raise AnnotationError(f"annotation {ann['id']}: missing area") from e
        if "head_size" in ann:
            head_size = float(ann["head_size"])
        else:
            x, y, bw, bh = ann["bbox"]
            head_size = COCO_HEAD_SIZE_FRACTION * float(np.hypot(bw, bh))
        samples.append(
            PoseSample(
                image=image,
                keypoints=keypoints,
                visibility=visibility,
                head_size=head_size,
                area=area,
                id=int(ann["id"]),
            )
        )

    if not samples:
        raise AnnotationError(f"{annotation_file}: every annotation was skipped")
    ds = Dataset(
        samples=samples,
        n_keypoints=n_keypoints,
        image_size=tuple(image_size),
        split_tag="train",
        meta={
            "skipped_no_visible": skipped,
            "head_size_convention": f"{COCO_HEAD_SIZE_FRACTION} * bbox diagonal when unannotated",
        },
    )
    ds.validate()
    return ds


# ---------------------------------------------------------------------------
# heatmap labels
# ---------------------------------------------------------------------------

def gaussian_heatmap(
    keypoints: np.ndarray,
    visibility: np.ndarray,
    image_size: tuple[int, int],
    m: int,
    sigma: float = 2.0,
) -> HeatmapTensor:
    """Isotropic Gaussian heatmap label, one m x m channel per keypoint.

    The keypoint is mapped into the grid under center-of-cell scaling and the
    kernel is centered on the nearest cell, so the peak value is exactly 1.
    sigma is measured in heatmap cells. Invisible keypoints give an all-zero
    channel.
    """
    if m < 4:
        raise ConfigurationError(f"heatmap side m must be >= 4, got {m}")
    if sigma <= 0:
        raise ConfigurationError(f"sigma must be > 0, got {sigma}")
    keypoints = np.asarray(keypoints, dtype=np.float64)
    visibility = np.asarray(visibility, dtype=bool)
    h, w = image_size
    n = keypoints.shape[0]
    grid = np.arange(m, dtype=np.float64)
    out = np.zeros((n, m, m), dtype=np.float64)
    for i in range(n):
        if not visibility[i]:
            continue
        # inverse of the center-of-cell decode map: cell -> (cell + 0.5) * H/m
        r = int(np.clip(np.rint(keypoints[i, 0] * m / h - 0.5), 0, m - 1))
        c = int(np.clip(np.rint(keypoints[i, 1] * m / w - 0.5), 0, m - 1))
        out[i] = np.exp(
            -((grid[:, None] - r) ** 2 + (grid[None, :] - c) ** 2) / (2.0 * sigma ** 2)
        )
    return HeatmapTensor(values=out, m=m)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, directory: str | Path) -> Path:
    """Write a dataset as one PNG per sample plus a JSON index."""
    directory = Path(directory)
    img_dir = directory / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    hm_dir = None
    for s in dataset.samples:
        fname = f"{s.id}.png"
        Image.fromarray(s.image).save(img_dir / fname)
        entry = {
            "id": s.id,
            "keypoints": s.keypoints.tolist(),
            "visibility": s.visibility.astype(int).tolist(),
            "head_size": s.head_size,
            "area": s.area,
            "image": fname,
        }
        if s.heatmap_label is not None:
            if hm_dir is None:
                hm_dir = directory / "heatmap_labels"
                hm_dir.mkdir(parents=True, exist_ok=True)
            np.save(hm_dir / f"{s.id}.npy", s.heatmap_label)
            entry["heatmap_label"] = f"{s.id}.npy"
        entries.append(entry)
    index = {
        "n_keypoints": dataset.n_keypoints,
        "image_size": list(dataset.image_size),
        "split_tag": dataset.split_tag,
        "meta": dataset.meta,
        "samples": entries,
    }
    (directory / "index.json").write_text(json.dumps(index, indent=1, sort_keys=True))
    return directory


def load_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text())
    samples = []
    for entry in index["samples"]:
        image = np.asarray(Image.open(directory / "images" / entry["image"]).convert("RGB"))
        heatmap_label = None
        if "heatmap_label" in entry:
            heatmap_label = np.load(directory / "heatmap_labels" / entry["heatmap_label"])
        samples.append(
            PoseSample(
                image=image,
                keypoints=np.asarray(entry["keypoints"], dtype=np.float64),
                visibility=np.asarray(entry["visibility"], dtype=bool),
                head_size=float(entry["head_size"]),
                area=float(entry["area"]),
                id=int(entry["id"]),
                heatmap_label=heatmap_label,
            )
        )
    ds = Dataset(
        samples=samples,
        n_keypoints=int(index["n_keypoints"]),
        image_size=tuple(index["image_size"]),
        split_tag=index.get("split_tag", "train"),
        meta=index.get("meta", {}),
    )
    ds.validate()
    return ds
