"""Versioned checkpoint archive: a zip with a JSON index and raw tensor blobs.

Layout (documented for out-of-process consumers):

    checkpoint.zip
    |-- index.json        # scalars, backbone specs, tensor index, optimizer
    `-- tensors/NNN.f32   # raw little-endian float32, C order

``index.json`` fields: ``format_version`` (1), ``stage``, ``seed``,
``epoch``, ``global_step``, ``specs`` (explicit/implicit backbone shapes,
guidance settings), ``tensors`` (name -> {file, shape}), ``optimizer``
(hyperparameters + per-parameter step counts; moment tensors live in the
blob index under ``optim.<param>.exp_avg`` / ``.exp_avg_sq``) and free-form
``metadata``. Tensor files are numbered in sorted-name order.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import StateError
from .networks import BackboneSpec

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    stage: int
    seed: int
    epoch: int = 0
    global_step: int = 0
    explicit_spec: BackboneSpec | None = None
    implicit_spec: BackboneSpec | None = None
    guidance_channels: int = 1
    use_guidance: bool = True
    wavelet: str = "haar"
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    optimizer: dict | None = None
    metadata: dict = field(default_factory=dict)


def save_checkpoint(ckpt: Checkpoint, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(ckpt.tensors)
    index = {
        "format_version": FORMAT_VERSION,
        "stage": ckpt.stage,
        "seed": ckpt.seed,
        "epoch": ckpt.epoch,
        "global_step": ckpt.global_step,
        "specs": {
            "explicit": ckpt.explicit_spec.to_json() if ckpt.explicit_spec else None,
            "implicit": ckpt.implicit_spec.to_json() if ckpt.implicit_spec else None,
            "guidance_channels": ckpt.guidance_channels,
            "use_guidance": ckpt.use_guidance,
            "wavelet": ckpt.wavelet,
        },
        "tensors": {
            name: {"file": f"tensors/{i:04d}.f32", "shape": list(ckpt.tensors[name].shape)}
            for i, name in enumerate(names)
        },
        "optimizer": ckpt.optimizer,
        "metadata": ckpt.metadata,
    }
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("index.json", json.dumps(index, indent=1))
        for i, name in enumerate(names):
            blob = np.ascontiguousarray(ckpt.tensors[name], dtype="<f4").tobytes()
            zf.writestr(f"tensors/{i:04d}.f32", blob)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise StateError(f"checkpoint not found: {path}")
    with zipfile.ZipFile(path) as zf:
        index = json.loads(zf.read("index.json"))
        if index.get("format_version") != FORMAT_VERSION:
            raise StateError(f"unsupported checkpoint version {index.get('format_version')}")
        tensors = {}
        for name, entry in index["tensors"].items():
            raw = zf.read(entry["file"])
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
    specs = index["specs"]
    return Checkpoint(
        stage=index["stage"],
        seed=index["seed"],
        epoch=index["epoch"],
        global_step=index["global_step"],
        explicit_spec=BackboneSpec.from_json(specs["explicit"]) if specs["explicit"] else None,
        implicit_spec=BackboneSpec.from_json(specs["implicit"]) if specs["implicit"] else None,
        guidance_channels=specs.get("guidance_channels", 1),
        use_guidance=specs.get("use_guidance", True),
        wavelet=specs.get("wavelet", "haar"),
        tensors=tensors,
        optimizer=index["optimizer"],
        metadata=index.get("metadata", {}),
    )
