"""Defenses against patch-trigger poisoning, all sharing one calling shape:
``defense(model, dataset, **params) -> (model', dataset', report)``.

* filter_defense: training-time data filtering by a patch-uniformity score;
* purify_defense: testing-time input purification (blur or a learned
  denoiser), graded by a strength knob;
* strip_defense: testing-time detection by prediction variance under blended
  overlays;
* fine_prune_defense: post-training channel pruning of the last backbone
  block;
* input_reconstruction_defense / distillation_defense: declared interface
  slots without an implementation.
"""

from __future__ import annotations

import numpy as np
import torch
from scipy.ndimage import gaussian_filter
from torch import nn

from .data import Dataset
from .errors import ConfigurationError
from .models import PoseModel, _images_to_tensor
from .poisoning import clone_dataset

DEFAULT_FILTER_THRESHOLD = 0.99
DEFAULT_UNIFORMITY_EPS = 2


def default_filter_window(image_size: tuple[int, int]) -> int:
    return max(2, round(image_size[0] / 16))


def patch_uniformity_score(image: np.ndarray, window: int, eps: int = DEFAULT_UNIFORMITY_EPS) -> float:
    """Largest fraction, over all window x window patches, of pixels whose
    every channel lies within eps of the patch's center pixel.

    A stamped solid-color patch of at least the window size drives this to
    exactly 1.0; textured natural content stays well below it.
    """
    h, w = image.shape[:2]
    if window < 1 or window > min(h, w):
        raise ConfigurationError(f"window {window} does not fit a {h}x{w} image")
    img = image.astype(np.int16)
    view = np.lib.stride_tricks.sliding_window_view(img, (window, window), axis=(0, 1))
    center = view[:, :, :, window // 2, window // 2]
    close = (np.abs(view - center[:, :, :, None, None]) <= eps).all(axis=2)
    return float(close.mean(axis=(2, 3)).max())


def filter_defense(
    model,
    dataset: Dataset,
    window: int | None = None,
    eps: int = DEFAULT_UNIFORMITY_EPS,
    threshold: float = DEFAULT_FILTER_THRESHOLD,
):
    """Drop training samples whose patch-uniformity score reaches the
    threshold. The model passes through untouched."""
    if window is None:
        window = default_filter_window(dataset.image_size)
    scores = {s.id: patch_uniformity_score(s.image, window, eps) for s in dataset.samples}
    flagged = [i for i, v in scores.items() if v >= threshold]
    flagged_set = set(flagged)
    kept = [s for s in dataset.samples if s.id not in flagged_set]
    filtered = Dataset(
        samples=kept,
        n_keypoints=dataset.n_keypoints,
        image_size=dataset.image_size,
        split_tag=dataset.split_tag,
        meta=dict(dataset.meta),
    )
    report = {
        "defense": "filter",
        "window": window,
        "eps": eps,
        "threshold": threshold,
        "scores": scores,
        "flagged_ids": flagged,
        "kept_ids": [s.id for s in kept],
        "n_flagged": len(flagged),
    }
    return model, filtered, report


# ---------------------------------------------------------------------------
# input purification
# ---------------------------------------------------------------------------

class _Denoiser(nn.Module):
    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 8, 3, padding=1), nn.ReLU(),
            nn.Conv2d(8, 8, 3, padding=1), nn.ReLU(),
            nn.Conv2d(8, 3, 3, padding=1), nn.Sigmoid(),
        )

    def forward(self, x):
        return self.net(x)


def train_denoiser(clean_images, seed: int = 0, epochs: int = 5, noise_std: float = 0.08) -> _Denoiser:
    """Fit a small conv autoencoder to map noised clean images back to their
    originals. Used by the learned purifier."""
    torch.manual_seed(seed)
    net = _Denoiser()
    x = _images_to_tensor(clean_images)
    opt = torch.optim.Adam(net.parameters(), lr=5e-3)
    gen = torch.Generator().manual_seed(seed)
    net.train()
    for _ in range(epochs):
        noisy = x + noise_std * torch.randn(x.shape, generator=gen)
        opt.zero_grad()
        loss = ((net(noisy) - x) ** 2).mean()
        loss.backward()
        opt.step()
    net.eval()
    return net


def purify_defense(
    model,
    dataset: Dataset,
    strength: float = 1.0,
    method: str = "blur",
    clean_images=None,
    seed: int = 0,
):
    """Rewrite every image in the dataset through a purifier.

    method "blur": Gaussian low-pass with sigma = strength pixels.
    method "learned": a denoising autoencoder fit on clean_images, blended
    with the input by strength in [0, 1].
    Strength 0 is a bit-exact identity for both methods.
    """
    if method not in ("blur", "learned"):
        raise ConfigurationError(f"unknown purify method {method!r}")
    if strength < 0:
        raise ConfigurationError("strength must be >= 0")
    out = clone_dataset(dataset)
    if strength == 0:
        report = {"defense": "purify", "method": method, "strength": 0.0, "mean_pixel_delta": 0.0}
        return model, out, report

    if method == "learned":
        if clean_images is None:
            raise ConfigurationError("learned purification needs clean_images to fit on")
        if strength > 1:
            raise ConfigurationError("learned purification strength is a blend weight in [0, 1]")
        denoiser = train_denoiser(clean_images, seed=seed)

    deltas = []
    for s in out.samples:
        orig = s.image.astype(np.float64)
        if method == "blur":
            cleaned = gaussian_filter(orig, sigma=(strength, strength, 0))
        else:
            with torch.no_grad():
                rec = denoiser(_images_to_tensor([s.image]))[0]
            rec = rec.permute(1, 2, 0).numpy().astype(np.float64) * 255.0
            cleaned = (1.0 - strength) * orig + strength * rec
        s.image = np.clip(np.rint(cleaned), 0, 255).astype(np.uint8)
        deltas.append(float(np.abs(s.image.astype(np.float64) - orig).mean()))
    report = {
        "defense": "purify",
        "method": method,
        "strength": float(strength),
        "mean_pixel_delta": float(np.mean(deltas)),
    }
    return model, out, report


# ---------------------------------------------------------------------------
# STRIP-style detection
# ---------------------------------------------------------------------------

def strip_variance(model, image: np.ndarray, overlays, alpha: float = 0.5) -> float:
    """Mean per-keypoint coordinate variance of predictions when the query is
    alpha-blended with each overlay image. Triggered inputs on a backdoored
    model keep steering predictions to one target, so their variance
    collapses."""
    blends = [
        np.clip(
            np.rint((1.0 - alpha) * image.astype(np.float64) + alpha * np.asarray(ov, dtype=np.float64)),
            0, 255,
        ).astype(np.uint8)
        for ov in overlays
    ]
    preds = model.predict(blends)  # (k, n, 2)
    return float(preds.var(axis=0).mean())


def strip_defense(
    model,
    dataset: Dataset,
    overlays=None,
    n_overlays: int = 8,
    alpha: float = 0.5,
    threshold: float | None = None,
    seed: int = 0,
):
    """Flag samples whose blended-prediction variance falls below threshold
    (strictly). Flagged samples are dropped from the returned dataset.

    overlays default to clean images drawn from the dataset itself; with
    threshold=None, the threshold is calibrated as the 1st percentile of the
    variances the overlay images themselves produce as queries.
    """
    rng = np.random.default_rng(seed)
    if overlays is None:
        pool = [s.image for s in dataset.samples]
    else:
        pool = [np.asarray(im) for im in overlays]
    if len(pool) < n_overlays:
        raise ConfigurationError(
            f"need at least n_overlays={n_overlays} overlay images, got {len(pool)}"
        )
    chosen = [pool[i] for i in rng.choice(len(pool), size=n_overlays, replace=False)]

    if threshold is None:
        calib = [strip_variance(model, ov, chosen, alpha) for ov in pool[: max(20, n_overlays)]]
        threshold = float(np.percentile(calib, 1))

    variances = {s.id: strip_variance(model, s.image, chosen, alpha) for s in dataset.samples}
    flagged = [i for i, v in variances.items() if v < threshold]
    flagged_set = set(flagged)
    kept = [s for s in dataset.samples if s.id not in flagged_set]
    out = Dataset(
        samples=kept,
        n_keypoints=dataset.n_keypoints,
        image_size=dataset.image_size,
        split_tag=dataset.split_tag,
        meta=dict(dataset.meta),
    )
    report = {
        "defense": "strip",
        "alpha": alpha,
        "n_overlays": n_overlays,
        "threshold": float(threshold),
        "variances": variances,
        "flagged_ids": flagged,
        "n_flagged": len(flagged),
    }
    return model, out, report


# ---------------------------------------------------------------------------
# fine-pruning
# ---------------------------------------------------------------------------

def fine_prune_defense(
    model: PoseModel,
    dataset: Dataset,
    fraction: float = 0.3,
    clean_images=None,
):
    """Zero out the quietest channels of the last backbone conv block.

    Channels are ranked by mean absolute activation over clean images (the
    dataset's own images when clean_images is not given); the lowest
    round(fraction * C) channels get their conv weights and bias zeroed on a
    copy of the model. fraction 0 is an identity; fraction 1 silences the
    whole block, leaving bias-only (constant) predictions.
    """
    if not (0.0 <= fraction <= 1.0):
        raise ConfigurationError("fraction must be in [0, 1]")
    images = clean_images if clean_images is not None else [s.image for s in dataset.samples]

    acts: list[torch.Tensor] = []
    hook = model.net.backbone.block4.register_forward_hook(
        lambda mod, inp, out: acts.append(out.detach().abs().mean(dim=(0, 2, 3)))
    )
    try:
        model.net.eval()
        with torch.no_grad():
            for i in range(0, len(images), 64):
                model.net(_images_to_tensor(images[i:i + 64]))
    finally:
        hook.remove()
    channel_activity = torch.stack(acts).mean(dim=0)

    c = channel_activity.numel()
    k = round(fraction * c)
    order = torch.argsort(channel_activity).tolist()
    pruned_channels = sorted(order[:k])

    pruned = model.clone()
    with torch.no_grad():
        conv = pruned.net.backbone.block4.conv
        for ch in pruned_channels:
            conv.weight[ch].zero_()
            conv.bias[ch].zero_()
    report = {
        "defense": "fine_prune",
        "fraction": float(fraction),
        "n_channels": c,
        "pruned_channels": pruned_channels,
        "channel_activity": [float(v) for v in channel_activity],
    }
    return pruned, dataset, report


# ---------------------------------------------------------------------------
# interface slots
# ---------------------------------------------------------------------------

def input_reconstruction_defense(model, dataset, **params):
    """Slot for a GAN-style trigger inpainting defense; not implemented."""
    raise NotImplementedError(
        "input-reconstruction cleansing is declared for interface parity only"
    )


def distillation_defense(model, dataset, **params):
    """Slot for an attention-distillation defense; not implemented."""
    raise NotImplementedError(
        "attention-distillation is declared for interface parity only"
    )


DEFENSES = {
    "filter": filter_defense,
    "purify": purify_defense,
    "strip": strip_defense,
    "fine_prune": fine_prune_defense,
    "input_reconstruction": input_reconstruction_defense,
    "distillation": distillation_defense,
}
