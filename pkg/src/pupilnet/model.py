"""U-Net backbone with an optional ellipse-regression head on the bottleneck."""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigError, ShapeMismatch
from .geometry import Ellipse, NormalizedEllipse, decode_prediction

CHECKPOINT_FORMAT = "pupilnet-checkpoint/1"


@dataclass
class ModelConfig:
    input_size: int = 224
    encoder_depth: int = 4
    base_channels: int = 32
    channel_growth: int = 2
    regression_head: bool = True
    head_hidden: tuple = (512, 64)
    # "attention": softmax-weighted pooling that also returns the pooled (x, y) location;
    # "avg": plain global average pooling
    head_pooling: str = "attention"
    batch_norm: bool = True

    def __post_init__(self):
        self.head_hidden = tuple(int(h) for h in self.head_hidden)
        if self.encoder_depth < 1 or self.base_channels < 1 or self.channel_growth < 1:
            raise ConfigError("encoder_depth, base_channels and channel_growth must be positive")
        if self.input_size % (2 ** self.encoder_depth):
            raise ConfigError(
                f"input_size {self.input_size} is not divisible by 2**{self.encoder_depth}"
            )
        if self.head_pooling not in ("attention", "avg"):
            raise ConfigError(f"unknown head_pooling {self.head_pooling!r}")

    def stage_channels(self) -> list[int]:
        return [self.base_channels * self.channel_growth**i for i in range(self.encoder_depth + 1)]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int, batch_norm: bool = True):
        layers = []
        for i in range(2):
            layers.append(nn.Conv2d(cin if i == 0 else cout, cout, 3, padding=1, bias=not batch_norm))
            if batch_norm:
                layers.append(nn.BatchNorm2d(cout))
            layers.append(nn.ReLU(inplace=True))
        super().__init__(*layers)


class EllipseHead(nn.Module):
    """Regress the five normalized ellipse parameters from the bottleneck ``z``.

    With attention pooling, a 1x1 convolution scores every bottleneck cell and the
    softmax of the scores weights a global pool of ``z``. The weighted mean cell
    position and its second moments join the pooled features, and the predicted
    center is that mean position corrected in logit space by the dense stack.
    """

    N_GEOMETRY = 5  # mean x, mean y, var x, var y, cov xy

    def __init__(self, channels: int, hidden: tuple, pooling: str = "attention"):
        super().__init__()
        self.pooling = pooling
        width = channels
        if pooling == "attention":
            self.attention = nn.Conv2d(channels, 1, 1)
            width += self.N_GEOMETRY
        layers = []
        for h in hidden:
            layers += [nn.Linear(width, h), nn.ReLU(inplace=True)]
            width = h
        layers.append(nn.Linear(width, 5))
        self.mlp = nn.Sequential(*layers)

    def pool(self, z: torch.Tensor) -> torch.Tensor:
        if self.pooling == "avg":
            return z.mean(dim=(2, 3))
        n, c, h, w = z.shape
        wmap = torch.softmax(self.attention(z).flatten(1), dim=1).view(n, h, w)
        feats = torch.einsum("nchw,nhw->nc", z, wmap)
        ys = (torch.arange(h, dtype=z.dtype, device=z.device) + 0.5) / h
        xs = (torch.arange(w, dtype=z.dtype, device=z.device) + 0.5) / w
        gy, gx = torch.meshgrid(ys, xs, indexing="ij")
        px = (wmap * gx).sum(dim=(1, 2))
        py = (wmap * gy).sum(dim=(1, 2))
        dx, dy = gx - px[:, None, None], gy - py[:, None, None]
        vxx = (wmap * dx * dx).sum(dim=(1, 2))
        vyy = (wmap * dy * dy).sum(dim=(1, 2))
        vxy = (wmap * dx * dy).sum(dim=(1, 2))
        return torch.cat([feats, torch.stack([px, py, vxx, vyy, vxy], dim=1)], dim=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        pooled = self.pool(z)
        raw = self.mlp(pooled)
        center = raw[:, :2]
        if self.pooling == "attention":
            center = center + torch.logit(pooled[:, -5:-3])
        # center and axes live in (0, 1); the angle in (-1, 1)
        return torch.cat([torch.sigmoid(center), torch.sigmoid(raw[:, 2:4]), torch.tanh(raw[:, 4:])], dim=1)


class UNet(nn.Module):
    """Encoder-decoder with skip connections; ``forward`` takes NCHW images in [0, 1].

    Returns ``(mask, params)`` where ``mask`` is N x 1 x H x W after a sigmoid
    and ``params`` is N x 5 (or ``None`` without a regression head).
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        ch = cfg.stage_channels()
        bn = cfg.batch_norm
        self.encoders = nn.ModuleList()
        cin = 3
        for c in ch[:-1]:
            self.encoders.append(DoubleConv(cin, c, bn))
            cin = c
        self.bottleneck = DoubleConv(ch[-2], ch[-1], bn)
        self.upsamplers = nn.ModuleList()
        self.decoders = nn.ModuleList()
        for i in reversed(range(cfg.encoder_depth)):
            self.upsamplers.append(nn.ConvTranspose2d(ch[i + 1], ch[i], 2, stride=2))
            self.decoders.append(DoubleConv(2 * ch[i], ch[i], bn))
        self.out = nn.Conv2d(ch[0], 1, 1)
        self.head = EllipseHead(ch[-1], cfg.head_hidden, cfg.head_pooling) if cfg.regression_head else None

    def forward(self, x: torch.Tensor):
        skips = []
        for enc in self.encoders:
            x = enc(x)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        z = self.bottleneck(x)
        x = z
        for up, dec, skip in zip(self.upsamplers, self.decoders, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
        mask = torch.sigmoid(self.out(x))
        params = self.head(z) if self.head is not None else None
        return mask, params


def build_model(cfg: ModelConfig | None = None) -> UNet:
    return UNet(cfg or ModelConfig())


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


@dataclass
class PredictionPair:
    mask: np.ndarray  # H x W soft mask in [0, 1]
    params: NormalizedEllipse | None = None

    def ellipse(self, width: int) -> Ellipse:
        """Decode the regression output to pixels, restoring major >= minor."""
        if self.params is None:
            raise ValueError("model has no regression head")
        return decode_prediction(self.params.as_array(), width)


def _to_nchw(model: UNet, images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images)) if not isinstance(images, torch.Tensor) else images
    size = model.cfg.input_size
    if x.ndim != 4 or tuple(x.shape[1:]) != (size, size, 3):
        raise ShapeMismatch(f"expected N x {size} x {size} x 3 images, got {tuple(x.shape)}")
    dtype = next(model.parameters()).dtype
    return x.permute(0, 3, 1, 2).to(dtype)


@torch.no_grad()
def predict_arrays(model: UNet, images) -> tuple[np.ndarray, np.ndarray | None]:
    """Inference on N x H x W x 3 images in [0, 1]; returns (N x H x W masks, N x 5 params)."""
    was_training = model.training
    model.eval()
    try:
        mask, params = model(_to_nchw(model, images))
    finally:
        model.train(was_training)
    masks = mask[:, 0].cpu().numpy()
    return masks, None if params is None else params.cpu().numpy()


def forward(model: UNet, batch_images) -> list[PredictionPair]:
    masks, params = predict_arrays(model, batch_images)
    return [
        PredictionPair(m, None if params is None else NormalizedEllipse.from_array(p))
        for m, p in zip(masks, params if params is not None else [None] * len(masks))
    ]


# --- checkpoints -------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: UNet, extra: dict | None = None) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "kind": "unet",
        "config": json.dumps(model.cfg.to_dict(), sort_keys=True),
        "extra": json.dumps(extra or {}, sort_keys=True),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path: str | Path) -> dict:
    payload = torch.load(str(path), map_location="cpu", weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a pupilnet checkpoint")
    return payload


def load_checkpoint(path: str | Path) -> UNet:
    payload = read_checkpoint(path)
    if payload.get("kind") != "unet":
        raise ConfigError(f"{path} holds a {payload.get('kind')!r} predictor, not network weights")
    cfg = ModelConfig.from_dict(json.loads(payload["config"]))
    model = build_model(cfg)
    try:
        model.load_state_dict(payload["state_dict"], strict=True)
    except RuntimeError as exc:
        raise ConfigError(f"checkpoint weights do not match its config: {exc}") from exc
    model.eval()
    return model
