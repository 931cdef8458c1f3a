"""Desk-scale architecture registry.

Each family (plain CNN, residual CNN, vision transformer, MLP-mixer) is
represented by a small network that trains on a laptop CPU in minutes.
None of them use batch statistics, so input gradients of one sample never
depend on the other samples in the batch and train/eval modes coincide.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn

ARCHITECTURES = ("small_cnn", "resnet_tiny", "vit_tiny", "mixer_tiny", "mlp_smooth")
ACTIVATIONS = ("relu", "softplus")

# (family label, default activation, parameter dtype)
_ARCH_DEFAULTS = {
    "small_cnn": ("cnn", "relu", torch.float32),
    "resnet_tiny": ("cnn", "relu", torch.float32),
    "vit_tiny": ("attention", "relu", torch.float32),
    "mixer_tiny": ("mlp-mixer", "relu", torch.float32),
    "mlp_smooth": ("mlp", "softplus", torch.float64),
}


class UnknownArchitectureError(ValueError):
    pass


@dataclass(frozen=True)
class ArchitectureSpec:
    """Identity of a model: which network, how many classes, what input."""

    arch_id: str
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    activation: str | None = None

    def __post_init__(self):
        if self.arch_id not in _ARCH_DEFAULTS:
            raise UnknownArchitectureError(
                f"unknown architecture {self.arch_id!r}; registered: {', '.join(ARCHITECTURES)}"
            )
        if int(self.num_classes) < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        shape = tuple(int(s) for s in self.input_shape)
        if len(shape) != 3 or min(shape) < 1:
            raise ValueError(f"input_shape must be (C, H, W) with positive entries, got {self.input_shape}")
        object.__setattr__(self, "input_shape", shape)
        object.__setattr__(self, "num_classes", int(self.num_classes))
        act = self.activation or _ARCH_DEFAULTS[self.arch_id][1]
        if act not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {act!r}")
        object.__setattr__(self, "activation", act)

    @property
    def family(self) -> str:
        return _ARCH_DEFAULTS[self.arch_id][0]

    @property
    def dtype(self) -> torch.dtype:
        return _ARCH_DEFAULTS[self.arch_id][2]

    @property
    def input_dim(self) -> int:
        c, h, w = self.input_shape
        return c * h * w

    def to_dict(self) -> dict:
        return {
            "arch_id": self.arch_id,
            "num_classes": self.num_classes,
            "input_shape": list(self.input_shape),
            "activation": self.activation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(d["arch_id"], d["num_classes"], tuple(d["input_shape"]), d.get("activation"))


def _act(name: str) -> nn.Module:
    return nn.ReLU() if name == "relu" else nn.Softplus()


def _patch_size(h: int, w: int) -> int:
    for p in (4, 2, 1):
        if h % p == 0 and w % p == 0:
            return p
    return 1


class SmallCNN(nn.Module):
    def __init__(self, spec: ArchitectureSpec, widths=(32, 64, 128), hidden=256):
        super().__init__()
        c = spec.input_shape[0]
        layers: list[nn.Module] = []
        for i, w in enumerate(widths):
            layers += [nn.Conv2d(c, w, 3, padding=1), nn.GroupNorm(8, w), _act(spec.activation)]
            if i < len(widths) - 1:
                layers += [
                    nn.Conv2d(w, w, 3, padding=1),
                    nn.GroupNorm(8, w),
                    _act(spec.activation),
                    nn.AvgPool2d(2, ceil_mode=True),
                ]
            c = w
        self.features = nn.Sequential(*layers)
        self.head = nn.Sequential(
            nn.Linear(c, hidden), _act(spec.activation), nn.Linear(hidden, spec.num_classes)
        )

    def forward(self, x):
        return self.head(self.features(x).mean(dim=(2, 3)))


class _BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride, activation):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(min(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(min(8, cout), cout)
        self.act = _act(activation)
        self.shortcut = nn.Identity()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride=stride, bias=False), nn.GroupNorm(min(8, cout), cout)
            )

    def forward(self, x):
        out = self.act(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return self.act(out + self.shortcut(x))


class ResNetTiny(nn.Module):
    def __init__(self, spec: ArchitectureSpec, widths=(32, 64, 128)):
        super().__init__()
        c = spec.input_shape[0]
        self.stem = nn.Sequential(
            nn.Conv2d(c, widths[0], 3, padding=1, bias=False),
            nn.GroupNorm(min(8, widths[0]), widths[0]),
            _act(spec.activation),
        )
        blocks = []
        cin = widths[0]
        for i, w in enumerate(widths):
            blocks.append(_BasicBlock(cin, w, 1 if i == 0 else 2, spec.activation))
            cin = w
        self.blocks = nn.Sequential(*blocks)
        self.fc = nn.Linear(cin, spec.num_classes)

    def forward(self, x):
        return self.fc(self.blocks(self.stem(x)).mean(dim=(2, 3)))


class _Attention(nn.Module):
    # explicit softmax attention; double backward through fused kernels is not guaranteed
    def __init__(self, dim, heads):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (q.shape[-1] ** -0.5)
        out = attn.softmax(dim=-1) @ v
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class _Mlp(nn.Sequential):
    def __init__(self, dim, hidden, activation):
        super().__init__(nn.Linear(dim, hidden), _act(activation), nn.Linear(hidden, dim))


class _TransformerBlock(nn.Module):
    def __init__(self, dim, heads, mlp_hidden, activation):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = _Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = _Mlp(dim, mlp_hidden, activation)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class _PatchEmbed(nn.Module):
    def __init__(self, spec: ArchitectureSpec, dim):
        super().__init__()
        c, h, w = spec.input_shape
        p = _patch_size(h, w)
        self.proj = nn.Conv2d(c, dim, p, stride=p)
        self.num_patches = (h // p) * (w // p)

    def forward(self, x):
        return self.proj(x).flatten(2).transpose(1, 2)


class ViTTiny(nn.Module):
    def __init__(self, spec: ArchitectureSpec, dim=96, depth=4, heads=3, mlp_ratio=2):
        super().__init__()
        self.embed = _PatchEmbed(spec, dim)
        self.pos = nn.Parameter(torch.randn(1, self.embed.num_patches, dim) * 0.02)
        self.blocks = nn.Sequential(
            *[_TransformerBlock(dim, heads, dim * mlp_ratio, spec.activation) for _ in range(depth)]
        )
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, spec.num_classes)

    def forward(self, x):
        x = self.blocks(self.embed(x) + self.pos)
        return self.head(self.norm(x).mean(dim=1))


class _MixerBlock(nn.Module):
    def __init__(self, tokens, dim, token_hidden, channel_hidden, activation):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.token_mlp = _Mlp(tokens, token_hidden, activation)
        self.norm2 = nn.LayerNorm(dim)
        self.channel_mlp = _Mlp(dim, channel_hidden, activation)

    def forward(self, x):
        x = x + self.token_mlp(self.norm1(x).transpose(1, 2)).transpose(1, 2)
        return x + self.channel_mlp(self.norm2(x))


class MixerTiny(nn.Module):
    def __init__(self, spec: ArchitectureSpec, dim=96, depth=4, token_hidden=64, channel_hidden=192):
        super().__init__()
        self.embed = _PatchEmbed(spec, dim)
        n = self.embed.num_patches
        self.blocks = nn.Sequential(
            *[_MixerBlock(n, dim, token_hidden, channel_hidden, spec.activation) for _ in range(depth)]
        )
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, spec.num_classes)

    def forward(self, x):
        return self.head(self.norm(self.blocks(self.embed(x))).mean(dim=1))


class MLPSmooth(nn.Module):
    """Two-layer MLP used for numerical gradient checks."""

    def __init__(self, spec: ArchitectureSpec, hidden=32):
        super().__init__()
        self.net = nn.Sequential(
            nn.Flatten(), nn.Linear(spec.input_dim, hidden), _act(spec.activation), nn.Linear(hidden, spec.num_classes)
        )

    def forward(self, x):
        return self.net(x)


REGISTRY: dict[str, Callable[[ArchitectureSpec], nn.Module]] = {
    "small_cnn": SmallCNN,
    "resnet_tiny": ResNetTiny,
    "vit_tiny": ViTTiny,
    "mixer_tiny": MixerTiny,
    "mlp_smooth": MLPSmooth,
}


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
