"""Band-wise 2D wavelet transforms and wavelet-domain guidance modules.

The transform is a single-level separable orthonormal DWT applied to the two
spatial axes of each band, with periodic boundary handling so perfect
reconstruction and energy conservation hold exactly (up to float error) for
any even size. Odd sizes are symmetric-padded by one and the pad is recorded
on the pyramid. Everything is written in torch so gradients flow through the
transforms, the subband convolution, and the guidance chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

# Orthonormal scaling (low-pass) filters; the high-pass is the quadrature
# mirror g[n] = (-1)^n h[L-1-n].
_SCALING_FILTERS = {
    "haar": [0.7071067811865476, 0.7071067811865476],
    "db2": [
        0.48296291314453414, 0.8365163037378079,
        0.2241438680420134, -0.12940952255126037,
    ],
    "db3": [
        0.3326705529500826, 0.8068915093110926, 0.4598775021184916,
        -0.13501102001025458, -0.08544127388202666, 0.03522629188570953,
    ],
    "db4": [
        0.2303778133088965, 0.7148465705529157, 0.6308807679298589,
        -0.02798376941685985, -0.18703481171909309, 0.030841381835560764,
        0.032883011666885169, -0.010597401785069032,
    ],
}

GUIDANCE_SCALES = 3
MIN_GUIDANCE_EXTENT = 8  # smallest spatial extent that survives the halving chain


def wavelet_filters(name: str, dtype=torch.float32, device=None) -> tuple[torch.Tensor, torch.Tensor]:
    if name not in _SCALING_FILTERS:
        raise ValueError(f"unknown wavelet {name!r}; choose from {sorted(_SCALING_FILTERS)}")
    h = torch.tensor(_SCALING_FILTERS[name], dtype=dtype, device=device)
    signs = torch.tensor([(-1.0) ** n for n in range(len(h))], dtype=dtype, device=device)
    g = signs * h.flip(0)
    return h, g


def as_tensor(x, dtype=torch.float32) -> torch.Tensor:
    """Accept a SpectralCube, ndarray, or tensor; return a torch tensor."""
    if hasattr(x, "data") and isinstance(getattr(x, "data"), np.ndarray):
        x = x.data
    if isinstance(x, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(x)).to(dtype)
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=dtype)


@dataclass
class WaveletPyramid:
    """Single-level subbands: low = LL, highs = (LH, HL, HH).

    LH is high-pass along width / low-pass along height; HL the converse.
    ``pad_hw`` records the symmetric padding applied to odd inputs.
    """

    low: torch.Tensor
    highs: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    wavelet_name: str = "haar"
    pad_hw: tuple[int, int] = (0, 0)


def _dwt_axis(x: torch.Tensor, h: torch.Tensor, g: torch.Tensor, axis: int):
    x = x.movedim(axis, -1)
    n = x.shape[-1]
    if n % 2 != 0:
        raise ValueError(f"axis length {n} must be even for the DWT")
    length = h.numel()
    if length > 2:
        idx = torch.arange(n + length - 2, device=x.device) % n
        xp = x[..., idx]
    else:
        xp = x
    lead = x.shape[:-1]
    flat = xp.reshape(-1, 1, xp.shape[-1])
    weight = torch.stack([h, g]).unsqueeze(1)
    out = F.conv1d(flat, weight, stride=2)
    lo = out[:, 0].reshape(*lead, n // 2).movedim(-1, axis)
    hi = out[:, 1].reshape(*lead, n // 2).movedim(-1, axis)
    return lo, hi


def _idwt_axis(lo: torch.Tensor, hi: torch.Tensor, h: torch.Tensor, g: torch.Tensor, axis: int):
    lo = lo.movedim(axis, -1)
    hi = hi.movedim(axis, -1)
    n2 = lo.shape[-1]
    n = 2 * n2
    lead = lo.shape[:-1]
    flat = torch.stack([lo, hi], dim=-2).reshape(-1, 2, n2)
    weight = torch.stack([h, g]).unsqueeze(1)
    y = F.conv_transpose1d(flat, weight, stride=2)
    out = y[..., :n]
    t = n
    while t < y.shape[-1]:  # periodic fold of the filter overhang
        seg = y[..., t : t + n]
        out = out + F.pad(seg, (0, n - seg.shape[-1]))
        t += n
    return out.reshape(*lead, n).movedim(-1, axis)


def dwt2_bandwise(cube, wavelet: str = "haar") -> WaveletPyramid:
    """Single-level spatial DWT of the last two axes, batched over the rest."""
    x = as_tensor(cube)
    if x.ndim < 2:
        raise ValueError("input must have at least 2 spatial dims")
    if not torch.isfinite(x).all():
        raise ValueError("input contains non-finite values")
    pad_h = x.shape[-2] % 2
    pad_w = x.shape[-1] % 2
    if pad_h:
        x = torch.cat([x, x[..., -1:, :]], dim=-2)
    if pad_w:
        x = torch.cat([x, x[..., -1:]], dim=-1)
    h, g = wavelet_filters(wavelet, dtype=x.dtype, device=x.device)
    lo_h, hi_h = _dwt_axis(x, h, g, axis=-2)
    ll, lh = _dwt_axis(lo_h, h, g, axis=-1)
    hl, hh = _dwt_axis(hi_h, h, g, axis=-1)
    return WaveletPyramid(low=ll, highs=(lh, hl, hh), wavelet_name=wavelet, pad_hw=(pad_h, pad_w))


def idwt2_bandwise(pyr: WaveletPyramid) -> torch.Tensor:
    """Exact inverse of ``dwt2_bandwise``; strips any recorded padding."""
    lh, hl, hh = pyr.highs
    if not (pyr.low.shape == lh.shape == hl.shape == hh.shape):
        raise ValueError("subband shapes are inconsistent")
    h, g = wavelet_filters(pyr.wavelet_name, dtype=pyr.low.dtype, device=pyr.low.device)
    lo_h = _idwt_axis(pyr.low, lh, h, g, axis=-1)
    hi_h = _idwt_axis(hl, hh, h, g, axis=-1)
    x = _idwt_axis(lo_h, hi_h, h, g, axis=-2)
    pad_h, pad_w = pyr.pad_hw
    if pad_h:
        x = x[..., :-1, :]
    if pad_w:
        x = x[..., :-1]
    return x


def highfreq_guidance(noisy, wavelet: str = "haar") -> torch.Tensor:
    """Magnitude of the high-frequency-only reconstruction of a cube.

    Decompose, zero the LL subband, invert, take the absolute value. The
    result is non-negative and invariant to constant offsets.
    """
    pyr = dwt2_bandwise(noisy, wavelet)
    pyr = WaveletPyramid(
        low=torch.zeros_like(pyr.low),
        highs=pyr.highs,
        wavelet_name=pyr.wavelet_name,
        pad_hw=pyr.pad_hw,
    )
    return idwt2_bandwise(pyr).abs()


def _pad3d_centered(x: torch.Tensor, pad: int) -> torch.Tensor:
    """Reflect-pad the last three dims by ``pad``; axes too short for
    reflection fall back to replication."""
    if pad == 0:
        return x
    reflect, replicate = [], []
    for size in reversed(x.shape[-3:]):
        if size > pad:
            reflect += [pad, pad]
            replicate += [0, 0]
        else:
            reflect += [0, 0]
            replicate += [pad, pad]
    if any(reflect):
        x = F.pad(x, reflect, mode="reflect")
    if any(replicate):
        x = F.pad(x, replicate, mode="replicate")
    return x


class WaveletConv3d(nn.Module):
    """3D convolution over stacked wavelet subbands with per-subband scaling.

    Input is transformed to the wavelet domain, the four subbands are stacked
    along channels and mixed by one spectral-spatial convolution, each subband
    is scaled by its learnable factor, and the result is transformed back.
    Initialized as an exact pass-through (identity kernel, unit scales).
    """

    def __init__(self, channels: int = 1, kernel_size: int = 3, wavelet: str = "haar"):
        super().__init__()
        if kernel_size % 2 != 1:
            raise ValueError("kernel_size must be odd")
        self.channels = channels
        self.kernel_size = kernel_size
        self.wavelet = wavelet
        self.conv = nn.Conv3d(4 * channels, 4 * channels, kernel_size, padding=0)
        self.subband_scale = nn.Parameter(torch.ones(4))
        self.reset_parameters()

    def reset_parameters(self):
        with torch.no_grad():
            self.conv.weight.zero_()
            c = self.kernel_size // 2
            for i in range(4 * self.channels):
                self.conv.weight[i, i, c, c, c] = 1.0
            self.conv.bias.zero_()
            self.subband_scale.fill_(1.0)

    def forward(self, g: torch.Tensor) -> torch.Tensor:
        squeeze = 0
        while g.ndim < 5:  # accept (D,H,W), (C,D,H,W), (B,C,D,H,W)
            g = g.unsqueeze(0)
            squeeze += 1
        if g.shape[1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {g.shape[1]}")
        pyr = dwt2_bandwise(g, self.wavelet)
        stacked = torch.cat([pyr.low, *pyr.highs], dim=1)
        feat = self.conv(_pad3d_centered(stacked, self.kernel_size // 2))
        scale = self.subband_scale.repeat_interleave(self.channels)
        feat = feat * scale.view(1, -1, 1, 1, 1)
        bands = torch.chunk(feat, 4, dim=1)
        out = idwt2_bandwise(
            WaveletPyramid(
                low=bands[0],
                highs=(bands[1], bands[2], bands[3]),
                wavelet_name=self.wavelet,
                pad_hw=pyr.pad_hw,
            )
        )
        for _ in range(squeeze):
            out = out.squeeze(0)
        return out


@dataclass
class GuidanceSet:
    """High-frequency guide and its three refined multi-scale tensors."""

    ghat: torch.Tensor
    g1: torch.Tensor
    g2: torch.Tensor
    g3: torch.Tensor
    theta_w: list[torch.Tensor] | None = None

    def scales(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.g1, self.g2, self.g3

    def __iter__(self):
        return iter(self.scales())


class HighFreqGuidance(nn.Module):
    """Multi-scale guidance generator.

    Refines the high-frequency guide with a wavelet-domain convolution at
    full resolution, then alternates 2x2 average-pool downsampling with
    further wavelet-domain convolutions to produce guidance at full, half,
    and quarter resolution.
    """

    def __init__(self, channels: int = 1, wavelet: str = "haar"):
        super().__init__()
        self.channels = channels
        self.wavelet = wavelet
        self.blocks = nn.ModuleList(
            [WaveletConv3d(channels, wavelet=wavelet) for _ in range(GUIDANCE_SCALES)]
        )

    def forward(self, ghat: torch.Tensor) -> GuidanceSet:
        x = ghat
        squeeze = 0
        while x.ndim < 5:
            x = x.unsqueeze(0)
            squeeze += 1
        h, w = x.shape[-2:]
        if min(h, w) < MIN_GUIDANCE_EXTENT:
            raise ValueError(
                f"spatial dims {h}x{w} too small for {GUIDANCE_SCALES} guidance scales "
                f"(need >= {MIN_GUIDANCE_EXTENT})"
            )
        g1 = self.blocks[0](x)
        g2 = self.blocks[1](F.avg_pool3d(g1, (1, 2, 2), stride=(1, 2, 2), ceil_mode=True))
        g3 = self.blocks[2](F.avg_pool3d(g2, (1, 2, 2), stride=(1, 2, 2), ceil_mode=True))
        outs = [g1, g2, g3]
        for _ in range(squeeze):
            outs = [o.squeeze(0) for o in outs]
        return GuidanceSet(
            ghat=ghat,
            g1=outs[0],
            g2=outs[1],
            g3=outs[2],
            theta_w=[b.subband_scale for b in self.blocks],
        )


def multiscale_guidance(ghat: torch.Tensor, generator: HighFreqGuidance) -> GuidanceSet:
    """Functional wrapper: run a guidance generator on a high-frequency guide."""
    return generator(ghat)
