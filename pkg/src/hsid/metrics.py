"""Quality metrics for cube restoration: PSNR, SSIM, and spectral angle.

PSNR and SSIM are computed per band and averaged (the usual convention for
spectral cubes); a cube-global PSNR variant is available via ``aggregate``.
All math runs in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PSNR_CAP_DB = 100.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
SAM_EPS = 1e-8


def _as_array(x) -> np.ndarray:
    if hasattr(x, "data") and isinstance(getattr(x, "data"), np.ndarray):
        x = x.data
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 3:
        raise ValueError(f"expected a (D,H,W) cube, got shape {a.shape}")
    return a


def _check_pair(ref, test) -> tuple[np.ndarray, np.ndarray]:
    r, t = _as_array(ref), _as_array(test)
    if r.shape != t.shape:
        raise ValueError(f"shape mismatch: {r.shape} vs {t.shape}")
    return r, t


def per_band_psnr(ref, test, cap_db: float = PSNR_CAP_DB) -> np.ndarray:
    r, t = _check_pair(ref, test)
    mse = ((r - t) ** 2).reshape(r.shape[0], -1).mean(axis=1)
    out = np.full(r.shape[0], cap_db)
    nz = mse > 0
    out[nz] = np.minimum(10.0 * np.log10(1.0 / mse[nz]), cap_db)
    return out


def psnr(ref, test, aggregate: str = "band_mean", cap_db: float = PSNR_CAP_DB) -> float:
    """Peak signal-to-noise ratio in dB on [0,1] data.

    ``band_mean`` averages per-band PSNR; ``global`` uses one cube-wide MSE.
    Zero-error bands (or cubes) contribute the cap.
    """
    if aggregate == "band_mean":
        return float(per_band_psnr(ref, test, cap_db).mean())
    if aggregate == "global":
        r, t = _check_pair(ref, test)
        mse = float(((r - t) ** 2).mean())
        if mse == 0.0:
            return cap_db
        return float(min(10.0 * np.log10(1.0 / mse), cap_db))
    raise ValueError(f"unknown aggregate {aggregate!r}")


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(ref, test, win_size: int = 11, sigma: float = 1.5) -> float:
    """Mean single-scale structural similarity over bands.

    Gaussian-weighted local moments over each fully-contained window, the
    standard constants on [0,1] data. Window size must fit in both spatial
    dims.
    """
    r, t = _check_pair(ref, test)
    d, h, w = r.shape
    if win_size % 2 != 1 or win_size < 3:
        raise ValueError("win_size must be odd and >= 3")
    if h < win_size or w < win_size:
        raise ValueError(f"spatial dims {h}x{w} smaller than window {win_size}")
    win = gaussian_window(win_size, sigma)
    vals = []
    for band in range(d):
        x = r[band]
        y = t[band]
        xw = np.lib.stride_tricks.sliding_window_view(x, (win_size, win_size))
        yw = np.lib.stride_tricks.sliding_window_view(y, (win_size, win_size))
        mu_x = np.tensordot(xw, win, axes=([2, 3], [0, 1]))
        mu_y = np.tensordot(yw, win, axes=([2, 3], [0, 1]))
        xx = np.tensordot(xw * xw, win, axes=([2, 3], [0, 1])) - mu_x**2
        yy = np.tensordot(yw * yw, win, axes=([2, 3], [0, 1])) - mu_y**2
        xy = np.tensordot(xw * yw, win, axes=([2, 3], [0, 1])) - mu_x * mu_y
        num = (2 * mu_x * mu_y + SSIM_C1) * (2 * xy + SSIM_C2)
        den = (mu_x**2 + mu_y**2 + SSIM_C1) * (xx + yy + SSIM_C2)
        vals.append((num / den).mean())
    return float(np.mean(vals))


def sam(ref, test) -> float:
    """Mean per-pixel spectral angle in degrees."""
    r, t = _check_pair(ref, test)
    if r.shape[0] < 2:
        raise ValueError("spectral angle needs at least 2 bands")
    rs = r.reshape(r.shape[0], -1)
    ts = t.reshape(t.shape[0], -1)
    dot = (rs * ts).sum(axis=0)
    denom = np.linalg.norm(rs, axis=0) * np.linalg.norm(ts, axis=0) + SAM_EPS
    ang = np.arccos(np.clip(dot / denom, -1.0, 1.0))
    return float(np.degrees(ang).mean())


@dataclass
class MetricsReport:
    psnr_db: float
    ssim: float
    sam_deg: float
    per_band_psnr: list[float]

    def to_json(self) -> dict:
        return {
            "psnr_db": self.psnr_db,
            "ssim": self.ssim,
            "sam_deg": self.sam_deg,
            "per_band_psnr": self.per_band_psnr,
        }


def compute_report(ref, test, win_size: int = 11) -> MetricsReport:
    return MetricsReport(
        psnr_db=psnr(ref, test),
        ssim=ssim(ref, test, win_size=win_size),
        sam_deg=sam(ref, test),
        per_band_psnr=[float(v) for v in per_band_psnr(ref, test)],
    )
