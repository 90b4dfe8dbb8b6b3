"""Physical noise synthesis and calibration for scanning hyperspectral sensors.

The explicit model is band-wise Poisson shot noise with system gain k
(variance X/k in normalized units), i.i.d. Gaussian readout noise with
per-band mean and variance, and per-column Gaussian stripe noise. Parameters
are recovered from paired data with a photon-transfer style mean-variance
regression. A small spatially-correlated + impulse model stands in for the
residual noise the physical model cannot express.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .cubes import PairedSample, SpectralCube
from .errors import CalibrationError

# Mean-variance regression setup: equal-width intensity bins over the observed
# clean range; sparse bins are dropped.
CALIB_BINS = 16
CALIB_MIN_SAMPLES = 100


@dataclass
class NoiseParams:
    """Parameters of the explicit noise model (one sensor configuration)."""

    k: float
    m: np.ndarray
    v_read: np.ndarray
    v_stripe: np.ndarray
    enable_shot: bool = True
    enable_read: bool = True
    enable_stripe: bool = True

    def __post_init__(self):
        self.m = np.atleast_1d(np.asarray(self.m, dtype=np.float64))
        self.v_read = np.atleast_1d(np.asarray(self.v_read, dtype=np.float64))
        self.v_stripe = np.atleast_1d(np.asarray(self.v_stripe, dtype=np.float64))
        if self.k <= 0:
            raise ValueError(f"system gain k must be positive, got {self.k}")
        if np.any(self.v_read < 0) or np.any(self.v_stripe < 0):
            raise ValueError("variances must be non-negative")
        if not (len(self.m) == len(self.v_read) == len(self.v_stripe)):
            raise ValueError("per-band parameter lists must have equal length")

    @property
    def bands(self) -> int:
        return len(self.m)

    def scaled(self, ratio: float, base_ratio: float = 1.0) -> "NoiseParams":
        """Params for a different exposure ratio: variances scale with the
        ratio, shot gain scales inversely (higher ratio -> noisier)."""
        s = ratio / base_ratio
        return NoiseParams(
            k=self.k / s,
            m=self.m.copy(),
            v_read=self.v_read * s,
            v_stripe=self.v_stripe * s,
            enable_shot=self.enable_shot,
            enable_read=self.enable_read,
            enable_stripe=self.enable_stripe,
        )

    def to_json(self) -> dict:
        return {
            "k": float(self.k),
            "m": [float(x) for x in self.m],
            "v_read": [float(x) for x in self.v_read],
            "v_stripe": [float(x) for x in self.v_stripe],
            "enable": {
                "shot": self.enable_shot,
                "read": self.enable_read,
                "stripe": self.enable_stripe,
            },
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NoiseParams":
        enable = obj.get("enable", {})
        return cls(
            k=obj["k"],
            m=obj["m"],
            v_read=obj["v_read"],
            v_stripe=obj["v_stripe"],
            enable_shot=bool(enable.get("shot", True)),
            enable_read=bool(enable.get("read", True)),
            enable_stripe=bool(enable.get("stripe", True)),
        )

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)

    @classmethod
    def load(cls, path) -> "NoiseParams":
        with open(path) as f:
            return cls.from_json(json.load(f))


@dataclass
class ImplicitNoiseSpec:
    """Toy stand-in for residual (non-physical) noise: spatially correlated
    Gaussian noise plus salt-and-pepper impulses."""

    corr_sigma: float = 2.0
    corr_amp: float = 0.02
    impulse_prob: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if self.corr_sigma < 0 or self.corr_amp < 0:
            raise ValueError("corr_sigma and corr_amp must be >= 0")
        if not 0.0 <= self.impulse_prob <= 1.0:
            raise ValueError(f"impulse_prob must be in [0,1], got {self.impulse_prob}")


def synthesize_explicit(clean: SpectralCube, params: NoiseParams, seed: int) -> SpectralCube:
    """Draw one realization of the explicit noise model on a clean cube.

    Shot noise is Poisson(k*X)/k so its variance is X/k in normalized units;
    readout noise is i.i.d. Gaussian(m, v_read) per pixel; stripe noise is a
    zero-mean Gaussian offset drawn once per column per band. The sum is
    clamped back to [0, 1].
    """
    d, h, w = clean.shape
    if params.bands != d:
        raise ValueError(f"params have {params.bands} bands, cube has {d}")
    rng = np.random.default_rng(seed)
    x = clean.data.astype(np.float64)
    out = x.copy()
    if params.enable_shot:
        out += rng.poisson(params.k * x) / params.k - x
    if params.enable_read:
        sd = np.sqrt(params.v_read)[:, None, None]
        out += params.m[:, None, None] + rng.standard_normal((d, h, w)) * sd
    if params.enable_stripe:
        sd = np.sqrt(params.v_stripe)[:, None, None]
        out += rng.standard_normal((d, 1, w)) * sd  # constant down each column
    return clean.copy_with(np.clip(out, 0.0, 1.0).astype(np.float32))


def inject_implicit(cube: SpectralCube, spec: ImplicitNoiseSpec) -> SpectralCube:
    """Add the toy implicit noise: blurred (unit-variance renormalized) white
    noise scaled by corr_amp, then impulses to 0 or 1 with prob/2 each."""
    d, h, w = cube.shape
    rng = np.random.default_rng(spec.seed)
    out = cube.data.astype(np.float64)
    if spec.corr_amp > 0:
        white = rng.standard_normal((d, h, w))
        if spec.corr_sigma > 0:
            corr = gaussian_filter(white, sigma=(0, spec.corr_sigma, spec.corr_sigma))
            corr /= corr.std() + 1e-12
        else:
            corr = white
        out += spec.corr_amp * corr
    if spec.impulse_prob > 0:
        u = rng.random((d, h, w))
        out[u < spec.impulse_prob / 2] = 0.0
        mask_hi = (u >= spec.impulse_prob / 2) & (u < spec.impulse_prob)
        out[mask_hi] = 1.0
    return cube.copy_with(np.clip(out, 0.0, 1.0).astype(np.float32))


def _destripe(residual: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a (H, W) residual into its per-column means and the remainder."""
    col_means = residual.mean(axis=0, keepdims=True)
    return col_means[0], residual - col_means


def calibrate(pairs: list[PairedSample]) -> NoiseParams:
    """Estimate explicit-model parameters from paired clean/noisy cubes.

    Per band: the readout mean is the residual mean; the stripe variance is
    the variance of residual column means, corrected for the i.i.d. noise
    leaking into those means; the gain and readout variance come from a
    weighted linear regression of destriped residual variance against clean
    intensity (photon-transfer: slope = 1/k, intercept = v_read).
    """
    if not pairs:
        raise ValueError("need at least one paired sample")
    d = pairs[0].clean.bands
    for p in pairs:
        if p.clean.bands != d:
            raise ValueError("all pairs must share the band count")

    m = np.zeros(d)
    v_read = np.zeros(d)
    v_stripe = np.zeros(d)
    inv_k = np.zeros(d)

    for band in range(d):
        clean_vals, resid_vals = [], []
        stripe_est = []
        for p in pairs:
            x = p.clean.data[band].astype(np.float64)
            r = p.noisy.data[band].astype(np.float64) - x
            h = x.shape[0]
            col_means, destriped = _destripe(r)
            # within-column variance estimates the iid part; its /H share
            # inflates the raw column-mean variance and is subtracted out
            iid_var = destriped.var(ddof=1)
            raw = col_means.var(ddof=1)
            stripe_est.append(max(raw - iid_var / h, 0.0))
            clean_vals.append(x.ravel())
            resid_vals.append(destriped.ravel())
        clean_b = np.concatenate(clean_vals)
        resid_b = np.concatenate(resid_vals)
        m[band] = float(np.mean([
            (p.noisy.data[band].astype(np.float64) - p.clean.data[band]).mean()
            for p in pairs
        ]))
        v_stripe[band] = float(np.mean(stripe_est))

        lo, hi = clean_b.min(), clean_b.max()
        if hi - lo < 1e-6:
            raise CalibrationError(
                f"band {band}: clean intensity is constant, gain not identifiable"
            )
        edges = np.linspace(lo, hi, CALIB_BINS + 1)
        idx = np.clip(np.digitize(clean_b, edges) - 1, 0, CALIB_BINS - 1)
        xs, ys, ws = [], [], []
        for b in range(CALIB_BINS):
            sel = idx == b
            n = int(sel.sum())
            if n < CALIB_MIN_SAMPLES:
                continue
            var_b = resid_b[sel].var(ddof=1)
            xs.append(clean_b[sel].mean())
            ys.append(var_b)
            # variance of a sample variance ~ 2 var^2 / n
            ws.append(n / (2.0 * max(var_b, 1e-18) ** 2))
        if len(xs) < 2:
            raise CalibrationError(
                f"band {band}: fewer than 2 usable intensity bins, gain not identifiable"
            )
        xs, ys, ws = np.asarray(xs), np.asarray(ys), np.asarray(ws)
        wsum = ws.sum()
        xbar = (ws * xs).sum() / wsum
        ybar = (ws * ys).sum() / wsum
        sxx = (ws * (xs - xbar) ** 2).sum()
        if sxx <= 0:
            raise CalibrationError(f"band {band}: degenerate intensity spread")
        slope = (ws * (xs - xbar) * (ys - ybar)).sum() / sxx
        if slope <= 0:
            raise CalibrationError(
                f"band {band}: non-positive mean-variance slope {slope:.3g} "
                "(no shot noise identifiable)"
            )
        inv_k[band] = slope
        v_read[band] = max(ybar - slope * xbar, 0.0)

    return NoiseParams(k=1.0 / float(inv_k.mean()), m=m, v_read=v_read, v_stripe=v_stripe)
