"""Shared encoder with a dilated-convolution head and a transformer head.

Both heads end in the same regression block (upsample, three convolutions,
ReLU) and predict a non-negative density map at ``encoder_stride /
regression_upsample`` of the input resolution.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT_VERSION = 1

VGG16_PLAN = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512]


@dataclass
class ConvHeadConfig:
    n_blocks: int = 4
    dilation: int = 2
    # output channels of each block; None -> [C, C/2, C/4, C/4]
    channel_schedule: list[int] | None = None


@dataclass
class TranHeadConfig:
    n_layers: int = 2
    n_attention_heads: int = 4
    ffn_multiplier: int = 2
    positional_encoding: str = "sinusoidal_2d"
    dropout: float = 0.0
    max_grid: int = 64  # side of the learned positional table


@dataclass
class ModelConfig:
    encoder: str = "toy_cnn"
    encoder_stride: int = 8
    feature_channels: int = 128
    encoder_widths: list[int] = field(default_factory=lambda: [32, 64, 128])
    conv_head: ConvHeadConfig = field(default_factory=ConvHeadConfig)
    tran_head: TranHeadConfig = field(default_factory=TranHeadConfig)
    regression_upsample: int = 1
    regression_channels: list[int] = field(default_factory=lambda: [64, 32])

    def __post_init__(self):
        if isinstance(self.conv_head, dict):
            self.conv_head = ConvHeadConfig(**self.conv_head)
        if isinstance(self.tran_head, dict):
            self.tran_head = TranHeadConfig(**self.tran_head)
        self.validate()

    @classmethod
    def vgg16(cls) -> "ModelConfig":
        """VGG16-style encoder at stride 16 with x2 regression upsampling (maps at 1/8 input)."""
        return cls(encoder="vgg16_style", encoder_stride=16, feature_channels=512, regression_upsample=2)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def output_stride(self) -> int:
        return self.encoder_stride // self.regression_upsample

    @property
    def conv_channels(self) -> list[int]:
        if self.conv_head.channel_schedule is not None:
            return list(self.conv_head.channel_schedule)
        c = self.feature_channels
        base = [c, c // 2, c // 4, c // 4]
        n = self.conv_head.n_blocks
        return (base + [c // 4] * n)[:n]

    def validate(self) -> None:
        if self.encoder not in ("toy_cnn", "vgg16_style"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        s = self.encoder_stride
        if s <= 0 or s & (s - 1):
            raise ValueError(f"encoder_stride must be a power of two, got {s}")
        if self.encoder == "toy_cnn" and s > 2 ** (len(self.encoder_widths) + 1):
            raise ValueError(f"toy_cnn with {len(self.encoder_widths) + 1} blocks supports stride <= "
                             f"{2 ** (len(self.encoder_widths) + 1)}")
        if self.encoder == "vgg16_style":
            if s not in (8, 16):
                raise ValueError("vgg16_style supports encoder_stride 8 or 16")
            if self.feature_channels != 512:
                raise ValueError("vgg16_style produces 512 feature channels")
        u = self.regression_upsample
        if u <= 0 or s % u:
            raise ValueError(f"encoder_stride {s} not divisible by regression_upsample {u}")
        if self.feature_channels % self.tran_head.n_attention_heads:
            raise ValueError(
                f"feature_channels {self.feature_channels} not divisible by "
                f"n_attention_heads {self.tran_head.n_attention_heads}"
            )
        if self.tran_head.positional_encoding not in ("sinusoidal_2d", "learned", "none"):
            raise ValueError(f"unknown positional_encoding {self.tran_head.positional_encoding!r}")
        if self.tran_head.positional_encoding == "sinusoidal_2d" and self.feature_channels % 4:
            raise ValueError("sinusoidal_2d positional encoding needs feature_channels divisible by 4")
        if len(self.conv_channels) != self.conv_head.n_blocks:
            raise ValueError("channel_schedule length must equal conv_head.n_blocks")

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class Prediction(NamedTuple):
    conv: torch.Tensor  # (B, 1, h, w)
    tran: torch.Tensor

    def average(self) -> torch.Tensor:
        return 0.5 * (self.conv + self.tran)


def conv_block(cin: int, cout: int, dilation: int = 1, bn: bool = True, stride: int = 1) -> nn.Sequential:
    layers = [nn.Conv2d(cin, cout, 3, stride=stride, padding=dilation, dilation=dilation)]
    if bn:
        layers.append(nn.BatchNorm2d(cout))
    layers.append(nn.ReLU(inplace=True))
    return nn.Sequential(*layers)


class ToyEncoder(nn.Module):
    """Small conv-BN-ReLU stack; the first log2(stride) blocks downsample with stride-2 convolutions."""

    def __init__(self, widths: list[int], out_channels: int, stride: int):
        super().__init__()
        n_down = int(math.log2(stride))
        chans = [3, *widths, out_channels]
        self.body = nn.Sequential(
            *[conv_block(chans[i], chans[i + 1], stride=2 if i < n_down else 1) for i in range(len(chans) - 1)]
        )

    def forward(self, x):
        return self.body(x)


class VGG16Encoder(nn.Module):
    """VGG16 convolutions without the final max-pool (stride 16), or also without the fourth (stride 8)."""

    def __init__(self, stride: int = 16):
        super().__init__()
        plan = list(VGG16_PLAN)
        if stride == 8:
            plan.pop(len(plan) - 1 - plan[::-1].index("M"))
        layers, cin = [], 3
        for v in plan:
            if v == "M":
                layers.append(nn.MaxPool2d(2))
            else:
                layers += [nn.Conv2d(cin, v, 3, padding=1), nn.ReLU(inplace=True)]
                cin = v
        self.features = nn.Sequential(*layers)

    def forward(self, x):
        return self.features(x)

    def load_pretrained(self, state_dict: dict) -> None:
        """Copy conv weights from a torchvision ``vgg16`` state dict (keys ``features.N.*``), in order."""
        src = [k[: -len(".weight")] for k in state_dict if k.startswith("features.") and k.endswith(".weight")]
        src.sort(key=lambda k: int(k.split(".")[1]))
        dst = [m for m in self.features if isinstance(m, nn.Conv2d)]
        if len(src) < len(dst):
            raise ValueError(f"state dict has {len(src)} conv layers, encoder needs {len(dst)}")
        with torch.no_grad():
            for name, conv in zip(src, dst):
                conv.weight.copy_(state_dict[name + ".weight"])
                conv.bias.copy_(state_dict[name + ".bias"])


class RegressionBlock(nn.Module):
    def __init__(self, cin: int, upsample: int, channels: list[int]):
        super().__init__()
        self.upsample = upsample
        c1, c2 = channels
        self.convs = nn.Sequential(
            nn.Conv2d(cin, c1, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c1, c2, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c2, 1, 1),
        )

    def forward(self, x):
        if self.upsample > 1:
            x = F.interpolate(x, scale_factor=self.upsample, mode="bilinear", align_corners=False)
        return F.relu(self.convs(x))


class ConvHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        chans = [cfg.feature_channels, *cfg.conv_channels]
        self.in_channels = cfg.feature_channels
        self.blocks = nn.Sequential(
            *[conv_block(chans[i], chans[i + 1], cfg.conv_head.dilation) for i in range(len(chans) - 1)]
        )
        self.regression = RegressionBlock(chans[-1], cfg.regression_upsample, cfg.regression_channels)

    def forward(self, f):
        return self.regression(self.blocks(f))


def sinusoidal_2d(channels: int, h: int, w: int, dtype=torch.float32, device=None) -> torch.Tensor:
    """Fixed 2-D sine/cosine encoding, shape ``(h*w, channels)``: first half codes rows, second half columns."""
    quarter = channels // 4
    freq = torch.exp(-math.log(10000.0) * torch.arange(quarter, dtype=torch.float64) / quarter)
    ys = torch.arange(h, dtype=torch.float64)[:, None] * freq
    xs = torch.arange(w, dtype=torch.float64)[:, None] * freq
    row = torch.cat([ys.sin(), ys.cos()], dim=1)  # (h, C/2)
    col = torch.cat([xs.sin(), xs.cos()], dim=1)  # (w, C/2)
    pe = torch.cat([row[:, None, :].expand(h, w, -1), col[None, :, :].expand(h, w, -1)], dim=2)
    return pe.reshape(h * w, channels).to(dtype=dtype, device=device)


class TransformerHead(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.feature_channels
        tc = cfg.tran_head
        self.in_channels = c
        self.positional_encoding = tc.positional_encoding
        if tc.positional_encoding == "learned":
            self.pos_table = nn.Parameter(torch.randn(tc.max_grid, tc.max_grid, c) * 0.02)
        layer = nn.TransformerEncoderLayer(
            d_model=c,
            nhead=tc.n_attention_heads,
            dim_feedforward=c * tc.ffn_multiplier,
            dropout=tc.dropout,
            batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(layer, num_layers=tc.n_layers, enable_nested_tensor=False)
        self.regression = RegressionBlock(c, cfg.regression_upsample, cfg.regression_channels)

    def position(self, h: int, w: int, like: torch.Tensor) -> torch.Tensor | None:
        if self.positional_encoding == "sinusoidal_2d":
            return sinusoidal_2d(self.in_channels, h, w, like.dtype, like.device)
        if self.positional_encoding == "learned":
            g = self.pos_table.shape[0]
            if h > g or w > g:
                raise ValueError(f"feature grid {h}x{w} exceeds learned positional table {g}x{g}")
            return self.pos_table[:h, :w].reshape(h * w, -1)
        return None

    def forward(self, f):
        b, c, h, w = f.shape
        tokens = f.flatten(2).transpose(1, 2)  # (B, h*w, C)
        pos = self.position(h, w, tokens)
        if pos is not None:
            tokens = tokens + pos
        tokens = self.encoder(tokens)
        f = tokens.transpose(1, 2).reshape(b, c, h, w)
        return self.regression(f)


class CHSNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        cfg = cfg or ModelConfig()
        cfg.validate()
        self.cfg = cfg
        if cfg.encoder == "toy_cnn":
            self.encoder = ToyEncoder(cfg.encoder_widths, cfg.feature_channels, cfg.encoder_stride)
        else:
            self.encoder = VGG16Encoder(cfg.encoder_stride)
        self.conv_head = ConvHead(cfg)
        self.tran_head = TransformerHead(cfg)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")
                nn.init.zeros_(m.bias)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        for head in (self.conv_head, self.tran_head):
            last = head.regression.convs[-1]
            nn.init.normal_(last.weight, std=0.01)
            # small positive bias keeps the final ReLU alive at the start of training
            nn.init.constant_(last.bias, 0.01)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        s = self.cfg.encoder_stride
        h, w = x.shape[-2:]
        if x.shape[-3] != 3:
            raise ValueError(f"expected 3 input channels, got {x.shape[-3]}")
        if h % s or w % s:
            ph, pw = (-h) % s, (-w) % s
            raise ValueError(
                f"input {h}x{w} not divisible by encoder stride {s}; pad by {ph} rows and {pw} columns"
            )
        return self.encoder(x)

    def _check_features(self, f: torch.Tensor) -> None:
        if f.shape[1] != self.cfg.feature_channels:
            raise ValueError(f"feature map has {f.shape[1]} channels, heads expect {self.cfg.feature_channels}")

    def conv_forward(self, f: torch.Tensor) -> torch.Tensor:
        self._check_features(f)
        return self.conv_head(f)

    def tran_forward(self, f: torch.Tensor) -> torch.Tensor:
        self._check_features(f)
        return self.tran_head(f)

    def forward(self, x: torch.Tensor) -> Prediction:
        f = self.encode(x)
        return Prediction(self.conv_forward(f), self.tran_forward(f))

    def head_parameters(self, head: str):
        return {"conv": self.conv_head, "tran": self.tran_head, "encoder": self.encoder}[head].parameters()


def pad_to_stride(x: torch.Tensor, stride: int) -> torch.Tensor:
    """Zero-pad the bottom/right edges so both spatial sides are multiples of ``stride``."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % stride, (-w) % stride
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph))
    return x


# --- checkpoints ------------------------------------------------------------


def save_checkpoint(path: str | Path, model: CHSNet, epoch: int, **extra) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model.cfg.to_dict(),
        "config_hash": model.cfg.config_hash(),
        "state_dict": model.state_dict(),
        "epoch": epoch,
        **extra,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> tuple[CHSNet, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format_version {version!r}")
    cfg = ModelConfig.from_dict(payload["model_config"])
    if cfg.config_hash() != payload["config_hash"]:
        raise CheckpointError(f"{path}: stored model config does not match its hash")
    if expected is not None and expected.config_hash() != payload["config_hash"]:
        raise CheckpointError(f"{path}: checkpoint config differs from the expected model config")
    model = CHSNet(cfg)
    dtype = next(iter(payload["state_dict"].values())).dtype
    model.to(dtype)
    model.load_state_dict(payload["state_dict"])
    return model, payload
