"""Encoders, the pose/appearance autoencoder and the detection heads.

Every model takes uint8 frames in (N, H, W, 3) layout (clips: (N, T, H, W, 3))
through :func:`to_input`, so callers never deal with channel order or scaling.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatch

_MEAN = torch.tensor([0.485, 0.456, 0.406])
_STD = torch.tensor([0.229, 0.224, 0.225])


def to_input(frames) -> torch.Tensor:
    """uint8 (..., H, W, 3) -> normalized float (..., 3, H, W) (images) or (N, 3, T, H, W) (clips)."""
    x = torch.as_tensor(np.ascontiguousarray(frames)) if not isinstance(frames, torch.Tensor) else frames
    if x.shape[-1] != 3:
        raise ShapeMismatch(f"expected trailing RGB channel, got shape {tuple(x.shape)}")
    x = (x.float() / 255.0 - _MEAN) / _STD
    if x.ndim == 4:
        return x.permute(0, 3, 1, 2).contiguous()
    if x.ndim == 5:
        return x.permute(0, 4, 1, 2, 3).contiguous()
    raise ShapeMismatch(f"expected (N, H, W, 3) or (N, T, H, W, 3), got {tuple(x.shape)}")


def _conv(cin, cout, stride=2):
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm2d(cout), nn.ReLU(inplace=True))


def _conv3d(cin, cout, stride):
    return nn.Sequential(nn.Conv3d(cin, cout, 3, stride, 1, bias=False), nn.BatchNorm3d(cout), nn.ReLU(inplace=True))


class TinyTrunk(nn.Sequential):
    """Four stride-2 conv layers; output stride 16."""

    def __init__(self, width=32):
        super().__init__(_conv(3, width), _conv(width, 2 * width), _conv(2 * width, 4 * width),
                         _conv(4 * width, 4 * width))
        self.out_channels = 4 * width


def _resnet18_trunk():
    from torchvision.models import resnet18

    net = resnet18(weights=None)
    trunk = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool, net.layer1, net.layer2,
                          net.layer3, net.layer4)
    trunk.out_channels = 512
    return trunk


def image_trunk(preset: str) -> nn.Module:
    if preset == "tiny":
        return TinyTrunk()
    if preset == "resnet18":
        return _resnet18_trunk()
    raise ValueError(f"unknown image encoder preset {preset!r}")


class ImageEncoder(nn.Module):
    """2D CNN trunk + global average pool + linear projection."""

    def __init__(self, preset: str = "resnet18", embedding_dim: int = 128, l2_normalize: bool = False):
        super().__init__()
        if embedding_dim < 8:
            raise ValueError("embedding_dim must be >= 8")
        self.trunk = image_trunk(preset)
        self.proj = nn.Linear(self.trunk.out_channels, embedding_dim)
        self.embedding_dim = embedding_dim
        self.l2_normalize = l2_normalize

    def feature_maps(self, x: torch.Tensor) -> torch.Tensor:
        return self.trunk(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.proj(self.trunk(x).mean(dim=(2, 3)))
        return F.normalize(z, dim=-1) if self.l2_normalize else z


class TinyVideoTrunk(nn.Sequential):
    def __init__(self, width=16):
        super().__init__(
            _conv3d(3, width, (1, 2, 2)), _conv3d(width, 2 * width, (2, 2, 2)),
            _conv3d(2 * width, 4 * width, (2, 2, 2)), _conv3d(4 * width, 4 * width, (2, 2, 2)),
        )
        self.out_channels = 4 * width


def _r2plus1d18_trunk():
    from torchvision.models.video import r2plus1d_18

    net = r2plus1d_18(weights=None)
    trunk = nn.Sequential(net.stem, net.layer1, net.layer2, net.layer3, net.layer4)
    trunk.out_channels = 512
    return trunk


class VideoEncoder(nn.Module):
    """3D CNN trunk + spatio-temporal average pool + linear projection."""

    def __init__(self, preset: str = "r2plus1d18", embedding_dim: int = 128, l2_normalize: bool = False):
        super().__init__()
        if embedding_dim < 8:
            raise ValueError("embedding_dim must be >= 8")
        if preset == "tiny":
            self.trunk = TinyVideoTrunk()
        elif preset == "r2plus1d18":
            self.trunk = _r2plus1d18_trunk()
        else:
            raise ValueError(f"unknown video encoder preset {preset!r}")
        self.proj = nn.Linear(self.trunk.out_channels, embedding_dim)
        self.embedding_dim = embedding_dim
        self.l2_normalize = l2_normalize

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        z = self.proj(self.trunk(x).mean(dim=(2, 3, 4)))
        return F.normalize(z, dim=-1) if self.l2_normalize else z


class PadAutoencoder(nn.Module):
    """Autoencoder whose latent is split into a pose part and an appearance part.

    The decoder mirrors the encoder with transposed convolutions and ends in a
    sigmoid, so reconstructions live in [0, 1] (frames / 255).
    """

    def __init__(self, preset: str = "resnet18", image_size: int = 224, pose_dim: int = 32,
                 appearance_dim: int = 256):
        super().__init__()
        if appearance_dim <= pose_dim:
            raise ValueError("appearance_dim must exceed pose_dim")
        if image_size % 32 and preset == "resnet18" or image_size % 16:
            raise ValueError("image_size must be a multiple of 16 (32 for resnet18)")
        self.pose_dim = pose_dim
        self.appearance_dim = appearance_dim
        self.image_size = image_size
        self.trunk = image_trunk(preset)
        c = self.trunk.out_channels
        self.to_latent = nn.Linear(c, pose_dim + appearance_dim)
        base = 128
        self.seed_size = image_size // 16
        self.from_latent = nn.Linear(pose_dim + appearance_dim, base * self.seed_size ** 2)
        layers = []
        widths = [base, 128, 64, 32, 16]
        for cin, cout in zip(widths[:-1], widths[1:]):
            layers += [nn.ConvTranspose2d(cin, cout, 4, 2, 1), nn.BatchNorm2d(cout), nn.ReLU(inplace=True)]
        layers += [nn.Conv2d(widths[-1], 3, 3, 1, 1), nn.Sigmoid()]
        self.decoder = nn.Sequential(*layers)
        self.base = base

    def encode(self, x: torch.Tensor):
        z = self.to_latent(self.trunk(x).mean(dim=(2, 3)))
        return z[:, :self.pose_dim], z[:, self.pose_dim:]

    def decode(self, pose: torch.Tensor, appearance: torch.Tensor) -> torch.Tensor:
        h = self.from_latent(torch.cat([pose, appearance], dim=1))
        h = h.view(-1, self.base, self.seed_size, self.seed_size)
        return self.decoder(h)

    def pose(self, x: torch.Tensor) -> torch.Tensor:
        return self.encode(x)[0]

    def forward(self, x_i: torch.Tensor, x_j: torch.Tensor):
        """Reconstruct each frame from its own pose and the other frame's appearance."""
        pose_i, app_i = self.encode(x_i)
        pose_j, app_j = self.encode(x_j)
        recon_i = self.decode(pose_i, app_j)
        recon_j = self.decode(pose_j, app_i)
        return recon_i, recon_j, ((pose_i, app_i), (pose_j, app_j))


class _ResBlock1d(nn.Module):
    def __init__(self, channels, kernel):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv1d(channels, channels, kernel, padding=pad)
        self.bn1 = nn.BatchNorm1d(channels)
        self.conv2 = nn.Conv1d(channels, channels, kernel, padding=pad)
        self.bn2 = nn.BatchNorm1d(channels)

    def forward(self, x, mask):
        h = F.relu(self.bn1(self.conv1(x * mask)))
        h = self.bn2(self.conv2(h * mask))
        return F.relu(x + h) * mask


class TemporalHead(nn.Module):
    """1D residual conv stack over a (B, T, D) feature sequence, masked temporal pooling, 2 logits.

    Every convolution sees padded positions as zeros, so appending frames
    beyond the mask never changes the output in evaluation mode.
    """

    def __init__(self, in_dim: int, blocks: int = 3, channels: int = 64, kernel: int = 7,
                 pooling: str = "mean", num_classes: int = 2, dropout: float = 0.0):
        super().__init__()
        if blocks < 1 or kernel % 2 == 0:
            raise ValueError("need blocks >= 1 and an odd kernel")
        self.stem = nn.Conv1d(in_dim, channels, kernel, padding=kernel // 2)
        self.stem_bn = nn.BatchNorm1d(channels)
        self.blocks = nn.ModuleList(_ResBlock1d(channels, kernel) for _ in range(blocks))
        self.dropout = nn.Dropout(dropout)
        self.fc = nn.Linear(channels, num_classes)
        self.pooling = pooling

    def forward(self, x: torch.Tensor, mask: torch.Tensor = None) -> torch.Tensor:
        if mask is None:
            mask = torch.ones(x.shape[:2], dtype=x.dtype, device=x.device)
        m = mask.to(x.dtype).unsqueeze(1)  # (B, 1, T)
        h = x.transpose(1, 2)
        h = F.relu(self.stem_bn(self.stem(h * m))) * m
        for blk in self.blocks:
            h = blk(h, m)
        if self.pooling == "mean":
            pooled = h.sum(-1) / m.sum(-1).clamp_min(1.0)
        else:
            pooled = h.masked_fill(m == 0, float("-inf")).amax(-1)
        return self.fc(self.dropout(pooled))


class StaticDetector(nn.Module):
    """Image encoder with a linear 2-way head, trained end to end on single frames."""

    def __init__(self, encoder: nn.Module, embedding_dim: int, num_classes: int = 2):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(embedding_dim, num_classes)

    def forward(self, x):
        feats = self.encoder.pose(x) if isinstance(self.encoder, PadAutoencoder) else self.encoder(x)
        return self.head(feats)
