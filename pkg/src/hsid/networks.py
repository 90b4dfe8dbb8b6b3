"""Residual 3D U-Nets for the two denoising roles.

``UNet3d`` is the reference backbone used for explicit-noise removal: conv
blocks per scale, strided spatial downsampling (the spectral axis is never
downsampled), nearest-neighbor upsampling with skip concatenation, and a
zero-initialized 1x1x1 residual head, so every freshly built network is an
exact identity. ``GuidedUNet3d`` adds the wavelet guidance generator and
per-scale guidance fusion for implicit-noise removal. Any module with the
same forward signature can replace either one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .wavelets import GuidanceSet, HighFreqGuidance, highfreq_guidance

LEAKY_SLOPE = 0.1


@dataclass
class BackboneSpec:
    """Size of a reference backbone; ``depth`` counts resolution scales."""

    name: str = "unet3d"
    base_channels: int = 16
    depth: int = 3
    kernel: int = 3

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 4:
            raise ValueError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.kernel % 2 != 1:
            raise ValueError("kernel must be odd")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "base_channels": self.base_channels,
            "depth": self.depth,
            "kernel": self.kernel,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "BackboneSpec":
        return cls(**obj)


class ConvBlock(nn.Module):
    """conv3d -> per-channel affine norm -> leaky rectifier."""

    def __init__(self, cin: int, cout: int, kernel: int = 3, stride=(1, 1, 1)):
        super().__init__()
        self.conv = nn.Conv3d(cin, cout, kernel, stride=stride, padding=kernel // 2)
        self.norm = nn.GroupNorm(cout, cout)
        self.act = nn.LeakyReLU(LEAKY_SLOPE)

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


def _kaiming_conv_(conv: nn.Conv3d, generator: torch.Generator):
    fan_in = conv.weight[0].numel()
    std = math.sqrt(2.0 / ((1.0 + LEAKY_SLOPE**2) * fan_in))
    with torch.no_grad():
        conv.weight.normal_(0.0, std, generator=generator)
        if conv.bias is not None:
            conv.bias.zero_()


def _norm_rank(x: torch.Tensor) -> tuple[torch.Tensor, int]:
    squeeze = 0
    while x.ndim < 5:
        x = x.unsqueeze(0)
        squeeze += 1
    return x, squeeze


def _pad_to_multiple(x: torch.Tensor, multiple: int) -> tuple[torch.Tensor, tuple[int, int]]:
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph, 0, 0), mode="reflect")
    return x, (ph, pw)


class UNet3d(nn.Module):
    """Residual denoiser: output = input - head(decoder features).

    Spatial dims not divisible by 2**(depth-1) are reflect-padded on the fly
    and the output is cropped back.
    """

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        c = [spec.base_channels * 2**s for s in range(spec.depth)]
        k = spec.kernel
        self.stem = ConvBlock(1, c[0], k)
        self.enc = nn.ModuleList(
            [nn.Sequential(ConvBlock(c[s], c[s], k), ConvBlock(c[s], c[s], k))
             for s in range(spec.depth)]
        )
        self.down = nn.ModuleList(
            [ConvBlock(c[s], c[s + 1], k, stride=(1, 2, 2)) for s in range(spec.depth - 1)]
        )
        self.dec = nn.ModuleList(
            [nn.Sequential(ConvBlock(c[s + 1] + c[s], c[s], k), ConvBlock(c[s], c[s], k))
             for s in range(spec.depth - 1)]
        )
        self.head = nn.Conv3d(c[0], 1, 1)

    @property
    def min_extent(self) -> int:
        return 2 ** (self.spec.depth - 1)

    def reset_parameters(self, generator: torch.Generator):
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                _kaiming_conv_(m, generator)
            elif isinstance(m, nn.GroupNorm):
                with torch.no_grad():
                    m.weight.fill_(1.0)
                    m.bias.zero_()
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()

    def _check_size(self, x):
        h, w = x.shape[-2:]
        if min(h, w) < self.min_extent:
            raise ValueError(
                f"spatial dims {h}x{w} too small for depth {self.spec.depth} "
                f"(need >= {self.min_extent})"
            )

    def _encode(self, x):
        feats = []
        x = self.stem(x)
        for s in range(self.spec.depth):
            x = self.enc[s](x)
            feats.append(x)
            if s < self.spec.depth - 1:
                x = self.down[s](x)
        return feats

    def _decode(self, feats):
        x = feats[-1]
        for s in range(self.spec.depth - 2, -1, -1):
            x = F.interpolate(x, scale_factor=(1, 2, 2), mode="nearest")
            x = self.dec[s](torch.cat([x, feats[s]], dim=1))
        return x

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x5, squeeze = _norm_rank(x)
        self._check_size(x5)
        padded, (ph, pw) = _pad_to_multiple(x5, self.min_extent)
        feats = self._encode(padded)
        out = padded - self.head(self._decode(feats))
        if ph:
            out = out[..., :-ph, :]
        if pw:
            out = out[..., :-pw]
        for _ in range(squeeze):
            out = out.squeeze(0)
        return out


class GuidedUNet3d(nn.Module):
    """U-Net with multi-scale high-frequency guidance injected in the decoder.

    At the bottleneck and after each decoder stage the matching guidance
    tensor is concatenated to the features and fused by a 1x1x1 convolution.
    When no guidance set is passed in, one is generated from the input by the
    embedded guidance generator (or zeroed when ``use_guidance`` is off,
    keeping the architecture and parameter count identical for ablations).
    """

    def __init__(self, spec: BackboneSpec, guidance_channels: int = 1,
                 wavelet: str = "haar", use_guidance: bool = True):
        super().__init__()
        if spec.depth > 3:
            raise ValueError("guided network supports at most 3 scales of guidance")
        self.spec = spec
        self.guidance_channels = guidance_channels
        self.wavelet = wavelet
        self.use_guidance = use_guidance
        c = [spec.base_channels * 2**s for s in range(spec.depth)]
        k = spec.kernel
        self.stem = ConvBlock(1, c[0], k)
        self.enc = nn.ModuleList(
            [nn.Sequential(ConvBlock(c[s], c[s], k), ConvBlock(c[s], c[s], k))
             for s in range(spec.depth)]
        )
        self.down = nn.ModuleList(
            [ConvBlock(c[s], c[s + 1], k, stride=(1, 2, 2)) for s in range(spec.depth - 1)]
        )
        self.dec = nn.ModuleList(
            [nn.Sequential(ConvBlock(c[s + 1] + c[s], c[s], k), ConvBlock(c[s], c[s], k))
             for s in range(spec.depth - 1)]
        )
        self.fuse = nn.ModuleList(
            [nn.Conv3d(c[s] + guidance_channels, c[s], 1) for s in range(spec.depth)]
        )
        self.guidance = HighFreqGuidance(channels=guidance_channels, wavelet=wavelet)
        self.head = nn.Conv3d(c[0], 1, 1)

    @property
    def min_extent(self) -> int:
        return max(2 ** (self.spec.depth - 1), 8)

    def reset_parameters(self, generator: torch.Generator):
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                _kaiming_conv_(m, generator)
            elif isinstance(m, nn.GroupNorm):
                with torch.no_grad():
                    m.weight.fill_(1.0)
                    m.bias.zero_()
        # fusion starts as a feature pass-through with a weakly live guidance path
        for s, conv in enumerate(self.fuse):
            cs = conv.out_channels
            with torch.no_grad():
                conv.weight.zero_()
                for i in range(cs):
                    conv.weight[i, i, 0, 0, 0] = 1.0
                conv.weight[:, cs:].normal_(0.0, 0.05, generator=generator)
                conv.bias.zero_()
        for block in self.guidance.blocks:
            block.reset_parameters()
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.zero_()

    def _guidance_tensors(self, padded: torch.Tensor):
        b, _, d = padded.shape[:3]
        if not self.use_guidance:
            return [
                torch.zeros(
                    b, self.guidance_channels, d,
                    padded.shape[-2] // 2**s, padded.shape[-1] // 2**s,
                    dtype=padded.dtype, device=padded.device,
                )
                for s in range(self.spec.depth)
            ]
        ghat = highfreq_guidance(padded, self.wavelet)
        if self.guidance_channels > 1:
            ghat = ghat.expand(-1, self.guidance_channels, -1, -1, -1)
        gs = self.guidance(ghat)
        return list(gs.scales())[: self.spec.depth]

    def _validate_guidance(self, padded, tensors):
        if len(tensors) < self.spec.depth:
            raise ValueError(
                f"need {self.spec.depth} guidance scales, got {len(tensors)}"
            )
        b, _, d, h, w = padded.shape
        out = []
        for s in range(self.spec.depth):
            g, _ = _norm_rank(tensors[s])
            expect = (b, self.guidance_channels, d, h // 2**s, w // 2**s)
            if tuple(g.shape) != expect:
                raise ValueError(
                    f"guidance scale {s} has shape {tuple(g.shape)}, expected {expect}"
                )
            out.append(g.to(padded.dtype))
        return out

    def forward(self, x: torch.Tensor, guidance: GuidanceSet | None = None) -> torch.Tensor:
        x5, squeeze = _norm_rank(x)
        h, w = x5.shape[-2:]
        if min(h, w) < self.min_extent:
            raise ValueError(
                f"spatial dims {h}x{w} too small for the guided network "
                f"(need >= {self.min_extent})"
            )
        padded, (ph, pw) = _pad_to_multiple(x5, max(self.min_extent, 4))
        if guidance is None:
            guides = self._guidance_tensors(padded)
        else:
            guides = self._validate_guidance(padded, list(guidance.scales()))

        feats = []
        f = self.stem(padded)
        for s in range(self.spec.depth):
            f = self.enc[s](f)
            feats.append(f)
            if s < self.spec.depth - 1:
                f = self.down[s](f)
        f = feats[-1]
        f = self.fuse[self.spec.depth - 1](torch.cat([f, guides[self.spec.depth - 1]], dim=1))
        for s in range(self.spec.depth - 2, -1, -1):
            f = F.interpolate(f, scale_factor=(1, 2, 2), mode="nearest")
            f = self.dec[s](torch.cat([f, feats[s]], dim=1))
            f = self.fuse[s](torch.cat([f, guides[s]], dim=1))
        out = padded - self.head(f)
        if ph:
            out = out[..., :-ph, :]
        if pw:
            out = out[..., :-pw]
        for _ in range(squeeze):
            out = out.squeeze(0)
        return out


def build_reference_backbone(spec: BackboneSpec, seed: int) -> UNet3d:
    """Deterministically initialized plain backbone."""
    net = UNet3d(spec)
    net.reset_parameters(torch.Generator().manual_seed(seed))
    return net


def build_guided_network(spec: BackboneSpec, seed: int, guidance_channels: int = 1,
                         wavelet: str = "haar", use_guidance: bool = True) -> GuidedUNet3d:
    """Deterministically initialized guidance-injected backbone."""
    net = GuidedUNet3d(spec, guidance_channels=guidance_channels, wavelet=wavelet,
                       use_guidance=use_guidance)
    net.reset_parameters(torch.Generator().manual_seed(seed))
    return net


def freeze(module: nn.Module):
    for p in module.parameters():
        p.requires_grad_(False)


def unfreeze(module: nn.Module):
    for p in module.parameters():
        p.requires_grad_(True)


def state_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    """Named parameters as float32 numpy arrays (checkpoint payload)."""
    return {
        name: p.detach().cpu().numpy().astype(np.float32, copy=True)
        for name, p in module.named_parameters()
    }


def load_state_arrays(module: nn.Module, arrays: dict[str, np.ndarray]):
    params = dict(module.named_parameters())
    missing = set(params) - set(arrays)
    if missing:
        raise ValueError(f"checkpoint is missing parameters: {sorted(missing)[:5]} ...")
    with torch.no_grad():
        for name, p in params.items():
            p.copy_(torch.from_numpy(np.ascontiguousarray(arrays[name])).to(p.dtype))
