"""Spectral cube data model, file I/O, patching, augmentation and splitting.

A cube is a (D, H, W) float array of normalized reflectance in [0, 1] plus
the D band-center wavelengths in nanometers. The on-disk format is a small
binary container (magic ``HSIC``) with an optional JSON sidecar for
wavelengths and capture metadata; see ``save_cube`` for the exact layout.

All functions here are pure and safe to call from multiple threads.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CubeDataError, CubeFormatError

MAGIC = b"HSIC"
FORMAT_VERSION = 1

# |x| may drift outside [0,1] by this much (quantization etc.) and is clamped;
# anything further out is rejected as data corruption.
RANGE_TOLERANCE = 1e-6

DEFAULT_WAVELENGTH_RANGE_NM = (400.0, 700.0)


def default_wavelengths(bands: int) -> np.ndarray:
    """Uniform wavelength grid over the 400-700 nm visible range."""
    lo, hi = DEFAULT_WAVELENGTH_RANGE_NM
    if bands == 1:
        return np.array([(lo + hi) / 2.0])
    return np.linspace(lo, hi, bands)


@dataclass
class SpectralCube:
    """A (D, H, W) reflectance cube with band wavelengths in nm."""

    data: np.ndarray
    wavelengths: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"cube data must be 3-D (D,H,W), got shape {self.data.shape}")
        d, h, w = self.data.shape
        if d < 1 or h < 2 or w < 2:
            raise ValueError(f"cube too small: D={d}, H={h}, W={w} (need D>=1, H,W>=2)")
        self.wavelengths = np.asarray(self.wavelengths, dtype=np.float64)
        if self.wavelengths.shape != (d,):
            raise ValueError(
                f"wavelength count {self.wavelengths.shape} does not match {d} bands"
            )
        if d > 1 and not np.all(np.diff(self.wavelengths) > 0):
            raise ValueError("wavelengths must be strictly increasing")
        if not np.all(np.isfinite(self.data)):
            raise CubeDataError("cube contains non-finite values")
        lo = float(self.data.min())
        hi = float(self.data.max())
        if lo < -RANGE_TOLERANCE or hi > 1.0 + RANGE_TOLERANCE:
            raise CubeDataError(f"cube values outside [0,1]: min={lo:.3g}, max={hi:.3g}")
        if lo < 0.0 or hi > 1.0:
            self.data = np.clip(self.data, 0.0, 1.0)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    def copy_with(self, data: np.ndarray) -> "SpectralCube":
        return SpectralCube(data=data, wavelengths=self.wavelengths.copy())


@dataclass
class PairedSample:
    """A clean/noisy cube pair from one scene."""

    clean: SpectralCube
    noisy: SpectralCube
    exposure_ratio: float = 1.0
    scene_id: str = ""

    def __post_init__(self):
        if self.clean.shape != self.noisy.shape:
            raise ValueError(
                f"clean/noisy shape mismatch: {self.clean.shape} vs {self.noisy.shape}"
            )
        if not np.array_equal(self.clean.wavelengths, self.noisy.wavelengths):
            raise ValueError("clean/noisy wavelength grids differ")
        if self.exposure_ratio <= 0:
            raise ValueError("exposure_ratio must be positive")


@dataclass
class DatasetSplit:
    train_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)
    seed: int = 0


def _sidecar_path(path: Path) -> Path:
    return path.with_suffix(".meta.json")


def save_cube(cube: SpectralCube, path, *, scene_id: str = "", exposure_ratio: float = 1.0):
    """Write a cube in the HSIC container plus its JSON sidecar.

    Layout: magic ``HSIC`` | u16 LE version=1 | u32 LE D, H, W |
    D*H*W float32 LE values, band-sequential (band-major, row-major per band).
    """
    path = Path(path)
    d, h, w = cube.shape
    header = MAGIC + struct.pack("<HIII", FORMAT_VERSION, d, h, w)
    payload = np.ascontiguousarray(cube.data, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload)
    meta = {
        "wavelengths_nm": [float(x) for x in cube.wavelengths],
        "scene_id": scene_id or path.stem,
        "exposure_ratio": float(exposure_ratio),
    }
    with open(_sidecar_path(path), "w") as f:
        json.dump(meta, f)


def load_cube(path) -> SpectralCube:
    """Read a cube saved by ``save_cube``; sidecar is optional.

    A missing sidecar falls back to a uniform 400-700 nm wavelength grid.
    """
    path = Path(path)
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 18 or raw[:4] != MAGIC:
        raise CubeFormatError(f"{path}: not an HSIC cube (bad magic)")
    version, d, h, w = struct.unpack("<HIII", raw[4:18])
    if version != FORMAT_VERSION:
        raise CubeFormatError(f"{path}: unsupported format version {version}")
    expected = 18 + 4 * d * h * w
    if len(raw) != expected:
        raise CubeFormatError(
            f"{path}: payload length {len(raw) - 18} bytes does not match "
            f"header dims {d}x{h}x{w} ({expected - 18} bytes)"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=18).reshape(d, h, w)
    if not np.all(np.isfinite(data)):
        raise CubeDataError(f"{path}: payload contains non-finite values")
    sidecar = _sidecar_path(path)
    if sidecar.exists():
        with open(sidecar) as f:
            meta = json.load(f)
        wavelengths = np.asarray(meta["wavelengths_nm"], dtype=np.float64)
    else:
        wavelengths = default_wavelengths(d)
    return SpectralCube(data=np.clip(data, 0.0, 1.0), wavelengths=wavelengths)


def load_cube_meta(path) -> dict:
    """Sidecar metadata for a cube path, with defaults when absent."""
    path = Path(path)
    sidecar = _sidecar_path(path)
    if sidecar.exists():
        with open(sidecar) as f:
            return json.load(f)
    return {"wavelengths_nm": None, "scene_id": path.stem, "exposure_ratio": 1.0}


def _axis_origins(extent: int, size: int, stride: int) -> list[int]:
    origins = list(range(0, extent - size + 1, stride))
    if origins[-1] != extent - size:
        origins.append(extent - size)  # clamp the last window to the border
    return origins


def crop_patches(cube: SpectralCube, size: int, stride: int) -> list[SpectralCube]:
    """Overlapping spatial patches covering the full extent.

    The final window along each axis is clamped to the boundary so no pixel
    is dropped. The spectral axis is kept whole.
    """
    d, h, w = cube.shape
    if size > h or size > w:
        raise ValueError(f"patch size {size} exceeds spatial dims {h}x{w}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    patches = []
    for oy in _axis_origins(h, size, stride):
        for ox in _axis_origins(w, size, stride):
            patches.append(cube.copy_with(cube.data[:, oy : oy + size, ox : ox + size].copy()))
    return patches


# The 8 dihedral transforms: horizontal flip (or not) followed by a k*90 deg
# rotation. Spectral axis is never touched.
def draw_augmentation(seed: int) -> tuple[bool, int]:
    rng = np.random.default_rng(seed)
    idx = int(rng.integers(0, 8))
    return bool(idx % 2), idx // 2  # (flip, k_rot)


def apply_dihedral(cube: SpectralCube, flip: bool, k_rot: int) -> SpectralCube:
    d, h, w = cube.shape
    if k_rot % 2 == 1 and h != w:
        raise ValueError(f"90/270 degree rotation needs a square patch, got {h}x{w}")
    data = cube.data
    if flip:
        data = data[:, :, ::-1]
    data = np.rot90(data, k=k_rot, axes=(1, 2))
    return cube.copy_with(np.ascontiguousarray(data))


def invert_dihedral(cube: SpectralCube, flip: bool, k_rot: int) -> SpectralCube:
    data = np.rot90(cube.data, k=-k_rot, axes=(1, 2))
    if flip:
        data = data[:, :, ::-1]
    return cube.copy_with(np.ascontiguousarray(data))


def augment(patch: SpectralCube, seed: int) -> SpectralCube:
    """Random dihedral transform of a square spatial patch, fixed by seed."""
    flip, k_rot = draw_augmentation(seed)
    return apply_dihedral(patch, flip, k_rot)


def split_dataset(ids: list[str], test_count: int, seed: int) -> DatasetSplit:
    """Deterministic disjoint train/test split of scene ids."""
    if not 0 < test_count < len(ids):
        raise ValueError(f"test_count must be in (0, {len(ids)}), got {test_count}")
    perm = np.random.default_rng(seed).permutation(len(ids))
    test = sorted(ids[i] for i in perm[:test_count])
    train = sorted(ids[i] for i in perm[test_count:])
    return DatasetSplit(train_ids=train, test_ids=test, seed=seed)


def write_manifest(entries: list[dict], path):
    """Dataset manifest: JSON list of {"clean": .., "noisy": .., "scene_id": ..}."""
    with open(path, "w") as f:
        json.dump(entries, f, indent=1)


def read_manifest(path) -> list[dict]:
    path = Path(path)
    with open(path) as f:
        entries = json.load(f)
    if not isinstance(entries, list):
        raise CubeFormatError(f"{path}: manifest must be a JSON list")
    for e in entries:
        if not {"clean", "noisy", "scene_id"} <= set(e):
            raise CubeFormatError(f"{path}: manifest entry missing keys: {e}")
    return entries


def load_pairs(manifest_path) -> list[PairedSample]:
    """Load every clean/noisy pair referenced by a manifest."""
    base = Path(manifest_path).parent
    pairs = []
    for e in read_manifest(manifest_path):
        clean_path = Path(e["clean"])
        noisy_path = Path(e["noisy"])
        if not clean_path.is_absolute():
            clean_path = base / clean_path
        if not noisy_path.is_absolute():
            noisy_path = base / noisy_path
        meta = load_cube_meta(noisy_path)
        pairs.append(
            PairedSample(
                clean=load_cube(clean_path),
                noisy=load_cube(noisy_path),
                exposure_ratio=float(meta.get("exposure_ratio", 1.0)),
                scene_id=e["scene_id"],
            )
        )
    return pairs
