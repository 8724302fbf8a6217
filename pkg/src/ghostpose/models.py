"""Toy pose estimators: a shared conv backbone with either a coordinate
regression head or a heatmap head, plus training, prediction, decoding and
checkpointing.

Both models are deliberately small so that a full poisoning experiment trains
in about a minute on one CPU core. Images are normalized to [0, 1] floats;
regression targets are keypoints normalized by image height/width; heatmap
targets are Gaussian maps rendered by data.gaussian_heatmap.
"""

from __future__ import annotations

import copy
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import Dataset, HeatmapTensor, gaussian_heatmap
from .errors import CapabilityError, ConfigurationError

MODEL_KINDS = ("regression", "heatmap")

# Backbone widths; strides 2, 2, 2, 1. Sized for ~1 minute of training on a
# single core at 64x64 input.
_CHANNELS = (10, 20, 28, 28)


def default_heatmap_side(image_size: tuple[int, int]) -> int:
    """Heatmap grid side: a quarter of the image side, at least 4."""
    return max(4, image_size[0] // 4)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 16
    batch_size: int = 32
    learning_rate: float = 2e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")


class _ConvBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, kernel_size=3, stride=stride, padding=1)

    def forward(self, x):
        return torch.relu(self.conv(x))


def _make_backbone() -> nn.Sequential:
    c = _CHANNELS
    return nn.Sequential(OrderedDict([
        ("block1", _ConvBlock(3, c[0], 2)),
        ("block2", _ConvBlock(c[0], c[1], 2)),
        ("block3", _ConvBlock(c[1], c[2], 2)),
        ("block4", _ConvBlock(c[2], c[3], 1)),
    ]))


class RegressionNet(nn.Module):
    """Backbone -> global average pool -> linear -> sigmoid, giving (n, 2)
    coordinates normalized to [0, 1]."""

    def __init__(self, n_keypoints: int):
        super().__init__()
        self.backbone = _make_backbone()
        self.head = nn.Linear(_CHANNELS[-1], 2 * n_keypoints)
        self.n_keypoints = n_keypoints

    def forward(self, x):
        feat = self.backbone(x).mean(dim=(2, 3))
        out = torch.sigmoid(self.head(feat))
        return out.view(-1, self.n_keypoints, 2)


class HeatmapNet(nn.Module):
    """Backbone -> 2x nearest upsample -> conv stack -> clamp to [0, 1],
    giving (n, m, m) heatmaps.

    A pooled global-context vector is broadcast back over the feature map so
    every output cell can react to image-wide evidence regardless of the
    conv stack's receptive field. The final conv starts with a small positive
    bias so fresh models emit in-range values; clamping (rather than a
    sigmoid) lets training reach exactly-zero outputs, which keeps the argmax
    of an all-zero map at the first cell.
    """

    def __init__(self, n_keypoints: int, image_size: tuple[int, int], m: int):
        super().__init__()
        stride_total = 8  # three stride-2 blocks
        feat_side = image_size[0] // stride_total
        if feat_side * 2 != m:
            raise ConfigurationError(
                f"heatmap side {m} must be twice the backbone output side {feat_side} "
                f"for image size {image_size}"
            )
        self.backbone = _make_backbone()
        self.context = nn.Linear(_CHANNELS[-1], _CHANNELS[-1])
        self.up = nn.Upsample(scale_factor=2, mode="nearest")
        self.mix = nn.Conv2d(_CHANNELS[-1], _CHANNELS[1], kernel_size=3, padding=1)
        self.out = nn.Conv2d(_CHANNELS[1], n_keypoints, kernel_size=3, padding=1)
        nn.init.constant_(self.out.bias, 0.1)
        self.n_keypoints = n_keypoints
        self.m = m

    def forward(self, x):
        feat = self.backbone(x)
        gate = self.context(feat.mean(dim=(2, 3)))[:, :, None, None]
        x = self.up(feat + gate)
        x = torch.relu(self.mix(x))
        return torch.clamp(self.out(x), 0.0, 1.0)


def decode_heatmaps(heatmaps: np.ndarray | HeatmapTensor, image_size: tuple[int, int]) -> np.ndarray:
    """Map (n, m, m) heatmaps to (n, 2) image coordinates.

    Each channel's peak cell is its flattened argmax (ties resolve row-major,
    first occurrence); the keypoint is that cell's pixel center. An all-zero
    channel therefore decodes to the center of cell (0, 0).
    """
    vals = heatmaps.values if isinstance(heatmaps, HeatmapTensor) else np.asarray(heatmaps)
    n, m = vals.shape[0], vals.shape[1]
    h, w = image_size
    flat = np.argmax(vals.reshape(n, -1), axis=1)
    rows = (flat // m + 0.5) * h / m
    cols = (flat % m + 0.5) * w / m
    return np.stack([rows, cols], axis=1)


def _images_to_tensor(images) -> torch.Tensor:
    arr = np.stack([np.asarray(im, dtype=np.float32) for im in images]) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()


class PoseModel:
    """A trained (or freshly initialized) pose estimator with its metadata."""

    def __init__(
        self,
        kind: str,
        n_keypoints: int,
        image_size: tuple[int, int],
        m: int | None,
        net: nn.Module,
        train_config: TrainConfig,
        loss_curve: list[float],
    ):
        self.kind = kind
        self.n_keypoints = n_keypoints
        self.image_size = tuple(image_size)
        self.m = m
        self.net = net
        self.train_config = train_config
        self.loss_curve = loss_curve

    # -- inference ---------------------------------------------------------

    def predict(self, images, batch_size: int = 64) -> np.ndarray:
        """Predicted keypoints, (N, n, 2) in pixel coordinates, clamped into
        the image bounds."""
        if isinstance(images, Dataset):
            images = [s.image for s in images.samples]
        h, w = self.image_size
        self.net.eval()
        outs = []
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                x = _images_to_tensor(images[i:i + batch_size])
                y = self.net(x)
                if self.kind == "regression":
                    coords = y.numpy().astype(np.float64)
                    coords[:, :, 0] *= h
                    coords[:, :, 1] *= w
                else:
                    coords = np.stack([
                        decode_heatmaps(hm, self.image_size) for hm in y.numpy()
                    ])
                outs.append(coords)
        coords = np.concatenate(outs)
        coords[:, :, 0] = np.clip(coords[:, :, 0], 0.0, h - 1.0)
        coords[:, :, 1] = np.clip(coords[:, :, 1], 0.0, w - 1.0)
        return coords

    def predict_heatmaps(self, images, batch_size: int = 64) -> np.ndarray:
        if self.kind != "heatmap":
            raise CapabilityError("predict_heatmaps requires a heatmap model")
        if isinstance(images, Dataset):
            images = [s.image for s in images.samples]
        self.net.eval()
        outs = []
        with torch.no_grad():
            for i in range(0, len(images), batch_size):
                outs.append(self.net(_images_to_tensor(images[i:i + batch_size])).numpy())
        return np.concatenate(outs)

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {
                "kind": self.kind,
                "n_keypoints": self.n_keypoints,
                "image_size": list(self.image_size),
                "m": self.m,
                "train_config": asdict(self.train_config),
                "loss_curve": list(self.loss_curve),
                "state_dict": self.net.state_dict(),
            },
            path,
        )
        return path

    @classmethod
    def load(cls, path: str | Path) -> "PoseModel":
        blob = torch.load(path, map_location="cpu", weights_only=False)
        kind = blob["kind"]
        n = blob["n_keypoints"]
        image_size = tuple(blob["image_size"])
        m = blob["m"]
        net = RegressionNet(n) if kind == "regression" else HeatmapNet(n, image_size, m)
        net.load_state_dict(blob["state_dict"])
        return cls(
            kind=kind,
            n_keypoints=n,
            image_size=image_size,
            m=m,
            net=net,
            train_config=TrainConfig(**blob["train_config"]),
            loss_curve=list(blob["loss_curve"]),
        )

    def clone(self) -> "PoseModel":
        return copy.deepcopy(self)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _build_targets(dataset: Dataset, kind: str, m: int | None, sigma: float):
    """Tensorize labels. Returns (targets, loss_mask) where loss_mask is a
    per-keypoint visibility mask for regression (heatmaps encode invisibility
    as zero channels already)."""
    h, w = dataset.image_size
    n = dataset.n_keypoints
    if kind == "regression":
        tgt = np.zeros((len(dataset), n, 2), dtype=np.float32)
        mask = np.zeros((len(dataset), n, 1), dtype=np.float32)
        for i, s in enumerate(dataset.samples):
            if s.heatmap_label is not None:
                raise CapabilityError(
                    f"sample {s.id} carries a heatmap-only label; a regression "
                    "model cannot train on it"
                )
            tgt[i, :, 0] = s.keypoints[:, 0] / h
            tgt[i, :, 1] = s.keypoints[:, 1] / w
            mask[i, :, 0] = s.visibility
        return torch.from_numpy(tgt), torch.from_numpy(mask)
    tgt = np.zeros((len(dataset), n, m, m), dtype=np.float32)
    for i, s in enumerate(dataset.samples):
        if s.heatmap_label is not None:
            tgt[i] = s.heatmap_label
        else:
            tgt[i] = gaussian_heatmap(
                s.keypoints, s.visibility, dataset.image_size, m, sigma=sigma
            ).values
    return torch.from_numpy(tgt), None


def _loss_fn(pred: torch.Tensor, target: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    if mask is None:
        return ((pred - target) ** 2).mean()
    err = ((pred - target) ** 2) * mask
    denom = mask.sum() * pred.shape[-1]
    return err.sum() / torch.clamp(denom, min=1.0)


def train_model(
    dataset: Dataset,
    kind: str = "regression",
    config: TrainConfig | None = None,
    m: int | None = None,
    heatmap_sigma: float = 2.0,
) -> PoseModel:
    """Train a pose model with MSE loss and Adam.

    Deterministic for fixed (dataset, kind, config). epochs=0 returns the
    freshly initialized network with an empty loss curve.
    """
    if kind not in MODEL_KINDS:
        raise ConfigurationError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    config = config or TrainConfig()
    if m is None:
        m = default_heatmap_side(dataset.image_size)

    torch.manual_seed(config.seed)
    if kind == "regression":
        net: nn.Module = RegressionNet(dataset.n_keypoints)
    else:
        net = HeatmapNet(dataset.n_keypoints, dataset.image_size, m)

    x = _images_to_tensor([s.image for s in dataset.samples])
    targets, mask = _build_targets(dataset, kind, m, heatmap_sigma)

    loss_curve: list[float] = []
    if config.epochs > 0:
        opt = torch.optim.Adam(net.parameters(), lr=config.learning_rate)
        order_rng = torch.Generator().manual_seed(config.seed)
        net.train()
        for _ in range(config.epochs):
            perm = torch.randperm(len(dataset), generator=order_rng)
            total, batches = 0.0, 0
            for i in range(0, len(dataset), config.batch_size):
                idx = perm[i:i + config.batch_size]
                opt.zero_grad()
                pred = net(x[idx])
                loss = _loss_fn(pred, targets[idx], None if mask is None else mask[idx])
                loss.backward()
                opt.step()
                total += float(loss.detach())
                batches += 1
            loss_curve.append(total / batches)

    return PoseModel(
        kind=kind,
        n_keypoints=dataset.n_keypoints,
        image_size=dataset.image_size,
        m=m if kind == "heatmap" else None,
        net=net,
        train_config=config,
        loss_curve=loss_curve,
    )


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------

def gradient_check(
    model: PoseModel,
    dataset: Dataset,
    n_params: int = 10,
    eps: float = 1e-6,
    batch: int = 8,
) -> float:
    """Compare backprop gradients of the training loss against central finite
    differences on a slice of parameters.

    Runs in float64 on a copy of the network. Returns the maximum relative
    error max(|g_bp - g_fd| / max(|g_bp|, |g_fd|, 1e-8)) over the slice.
    """
    net = copy.deepcopy(model.net).double()
    sub = Dataset(
        samples=dataset.samples[:batch],
        n_keypoints=dataset.n_keypoints,
        image_size=dataset.image_size,
        split_tag=dataset.split_tag,
    )
    x = _images_to_tensor([s.image for s in sub.samples]).double()
    targets, mask = _build_targets(sub, model.kind, model.m, sigma=2.0)
    targets = targets.double()
    if mask is not None:
        mask = mask.double()

    def loss_value() -> torch.Tensor:
        return _loss_fn(net(x), targets, mask)

    net.zero_grad()
    loss_value().backward()

    # Check the first conv's weight tensor, on the entries with the largest
    # backprop gradients — quiet entries (dead ReLU paths) would compare
    # zero against zero and prove nothing.
    param = next(net.parameters())
    grad = param.grad.detach().reshape(-1)
    flat = param.data.reshape(-1)
    picked = torch.argsort(grad.abs(), descending=True)[:n_params].tolist()
    worst = 0.0
    with torch.no_grad():
        for i in picked:
            orig = float(flat[i])
            flat[i] = orig + eps
            plus = float(loss_value())
            flat[i] = orig - eps
            minus = float(loss_value())
            flat[i] = orig
            fd = (plus - minus) / (2 * eps)
            bp = float(grad[i])
            rel = abs(bp - fd) / max(abs(bp), abs(fd), 1e-8)
            worst = max(worst, rel)
    return worst
