"""Three-stage training driver, inference composition, and ablation runner.

Stage 1 pre-trains the explicit-noise remover on synthetic noise drawn
online from the calibrated model. Stage 2 freezes it and trains the guided
implicit-noise remover through it on real pairs (gradients flow through the
frozen net; its parameters never change). Stage 3 fine-tunes both jointly
with the full loss. Every random draw comes from a seed stream keyed by
(stage, epoch, position), so runs are bitwise reproducible and resuming
from a checkpoint replays exactly the same trajectory.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoints import Checkpoint, load_checkpoint
from .cubes import PairedSample, SpectralCube, apply_dihedral, crop_patches, draw_augmentation
from .errors import NumericError, StateError
from .losses import LossConfig, total_loss
from .metrics import psnr, sam, ssim
from .networks import (
    BackboneSpec,
    GuidedUNet3d,
    UNet3d,
    build_guided_network,
    build_reference_backbone,
    freeze,
    load_state_arrays,
    state_arrays,
)

log = logging.getLogger(__name__)

# seed stream ids
_NOISE, _ORDER, _AUG, _INIT, _OFFLINE = range(5)

_STAGE_LOSSES = {
    1: frozenset({"charbonnier"}),
    2: frozenset({"charbonnier", "kl"}),
    3: frozenset({"charbonnier", "kl", "spectral"}),
}


def stream_seed(master: int, *key: int) -> int:
    """Stable derived seed for one (stage, epoch, position, stream) draw."""
    ss = np.random.SeedSequence(int(master) & 0xFFFFFFFF, spawn_key=tuple(int(k) for k in key))
    return int(ss.generate_state(1)[0])


@dataclass
class StageState:
    """Which networks train, which losses are active, and where we are."""

    stage: int
    explicit_frozen: bool
    implicit_frozen: bool
    active_losses: frozenset[str]
    noise_mode: str = "online"
    epoch: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        if self.noise_mode not in ("online", "offline"):
            raise ValueError(f"noise_mode must be online or offline, got {self.noise_mode}")
        if self.active_losses != _STAGE_LOSSES[self.stage]:
            raise ValueError(
                f"stage {self.stage} must use losses {sorted(_STAGE_LOSSES[self.stage])}"
            )
        if self.stage == 2 and not self.explicit_frozen:
            raise ValueError("stage 2 requires the explicit net frozen")
        if self.stage == 3 and (self.explicit_frozen or self.implicit_frozen):
            raise ValueError("stage 3 trains everything")

    @classmethod
    def for_stage(cls, stage: int, noise_mode: str = "online", seed: int = 0) -> "StageState":
        return cls(
            stage=stage,
            explicit_frozen=(stage == 2),
            implicit_frozen=(stage == 1),
            active_losses=_STAGE_LOSSES[stage],
            noise_mode=noise_mode,
            seed=seed,
        )


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 1
    epochs_stage1: int = 100
    epochs_stage2: int = 50
    epochs_stage3: int = 50
    patch_size: int = 128  # desk-scale runs use 64 or less
    patch_stride: int | None = None
    augment: bool = True
    noise_mode: str = "online"
    loss: LossConfig = field(default_factory=LossConfig)
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    guidance_channels: int = 1
    wavelet: str = "haar"
    use_guidance: bool = True
    seed: int = 0
    log_path: str | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.noise_mode not in ("online", "offline"):
            raise ValueError(f"noise_mode must be online or offline, got {self.noise_mode}")

    @property
    def stride(self) -> int:
        return self.patch_stride or self.patch_size

    def stage_loss(self, stage: int) -> LossConfig:
        active = _STAGE_LOSSES[stage]
        return replace(
            self.loss,
            lambda_k=self.loss.lambda_k if "kl" in active else 0.0,
            lambda_s=self.loss.lambda_s if "spectral" in active else 0.0,
        )


class TrainLog:
    """JSON-lines training log; a None path disables it."""

    def __init__(self, path=None):
        self._fh = open(path, "a") if path else None
        self._t0 = time.time()

    def log(self, **record):
        if self._fh is None:
            return
        record["wall_time_s"] = round(time.time() - self._t0, 4)
        self._fh.write(json.dumps(record) + "\n")

    def close(self):
        if self._fh:
            self._fh.close()


def _cube_batch(cubes: list[SpectralCube]) -> torch.Tensor:
    return torch.stack([torch.from_numpy(c.data).unsqueeze(0) for c in cubes])


def _named_params(modules: dict[str, torch.nn.Module]) -> list[tuple[str, torch.nn.Parameter]]:
    out = []
    for prefix in sorted(modules):
        net = modules[prefix]
        if net is None:
            continue
        out.extend((f"{prefix}.{n}", p) for n, p in net.named_parameters())
    return out


def _grad_norm(params) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.detach() ** 2).sum())
    return total**0.5


def _optimizer_payload(opt: torch.optim.Adam, named) -> tuple[dict, dict]:
    steps: dict[str, float] = {}
    blobs: dict[str, np.ndarray] = {}
    for qname, p in named:
        st = opt.state.get(p)
        if not st:
            continue
        steps[qname] = float(st["step"])
        blobs[f"optim.{qname}.exp_avg"] = st["exp_avg"].detach().numpy().astype(np.float32, copy=True)
        blobs[f"optim.{qname}.exp_avg_sq"] = st["exp_avg_sq"].detach().numpy().astype(np.float32, copy=True)
    group = opt.param_groups[0]
    info = {"type": "adam", "lr": group["lr"], "betas": list(group["betas"]),
            "eps": group["eps"], "steps": steps}
    return info, blobs


def _restore_optimizer(opt: torch.optim.Adam, named, ckpt: Checkpoint):
    if not ckpt.optimizer:
        return
    steps = ckpt.optimizer.get("steps", {})
    for qname, p in named:
        if qname not in steps:
            continue
        opt.state[p] = {
            "step": torch.tensor(steps[qname]),
            "exp_avg": torch.from_numpy(ckpt.tensors[f"optim.{qname}.exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(ckpt.tensors[f"optim.{qname}.exp_avg_sq"].copy()),
        }


def _model_tensors(explicit_net, implicit_net) -> dict[str, np.ndarray]:
    tensors = {}
    if explicit_net is not None:
        tensors.update({f"explicit.{k}": v for k, v in state_arrays(explicit_net).items()})
    if implicit_net is not None:
        tensors.update({f"implicit.{k}": v for k, v in state_arrays(implicit_net).items()})
    return tensors


def nets_from_checkpoint(ckpt: Checkpoint) -> tuple[UNet3d | None, GuidedUNet3d | None]:
    explicit_net = None
    if ckpt.explicit_spec is not None:
        explicit_net = UNet3d(ckpt.explicit_spec)
        load_state_arrays(explicit_net, {
            k[len("explicit."):]: v for k, v in ckpt.tensors.items() if k.startswith("explicit.")
        })
    implicit_net = None
    if ckpt.implicit_spec is not None:
        implicit_net = GuidedUNet3d(
            ckpt.implicit_spec,
            guidance_channels=ckpt.guidance_channels,
            wavelet=ckpt.wavelet,
            use_guidance=ckpt.use_guidance,
        )
        load_state_arrays(implicit_net, {
            k[len("implicit."):]: v for k, v in ckpt.tensors.items() if k.startswith("implicit.")
        })
    return explicit_net, implicit_net


def _as_checkpoint(obj) -> Checkpoint:
    if isinstance(obj, Checkpoint):
        return obj
    return load_checkpoint(obj)


def _abort_if_bad(loss_val: float, grad_norm: float, stage: int, step: int, lr: float):
    if not (np.isfinite(loss_val) and np.isfinite(grad_norm)):
        raise NumericError(
            f"stage {stage} aborted at step {step}: loss={loss_val}, "
            f"grad_norm={grad_norm}, lr={lr}"
        )


def _epoch_order(seed: int, stage: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(stream_seed(seed, stage, epoch, 0, _ORDER))
    return rng.permutation(n)


def _augmented(patch: SpectralCube, seed: int, enabled: bool,
               partner: SpectralCube | None = None):
    if not enabled:
        return (patch, partner) if partner is not None else (patch, None)
    flip, rot = draw_augmentation(seed)
    out = apply_dihedral(patch, flip, rot)
    mate = apply_dihedral(partner, flip, rot) if partner is not None else None
    return out, mate


def train_stage1(clean_cubes: list[SpectralCube], noise_params, config: TrainConfig,
                 resume_from=None, checkpoint_path=None) -> Checkpoint:
    """Pre-train the explicit-noise remover on online-synthesized noise."""
    from .noise import synthesize_explicit

    if not clean_cubes:
        raise ValueError("need at least one clean cube")
    patches = []
    for cube in clean_cubes:
        patches.extend(crop_patches(cube, config.patch_size, config.stride))

    if resume_from is not None:
        ckpt = _as_checkpoint(resume_from)
        if ckpt.stage != 1:
            raise StateError(f"resume checkpoint is stage {ckpt.stage}, expected 1")
        explicit_net, _ = nets_from_checkpoint(ckpt)
        start_epoch, global_step = ckpt.epoch, ckpt.global_step
        epoch_losses = list(ckpt.metadata.get("epoch_losses", []))
    else:
        explicit_net = build_reference_backbone(
            config.backbone, stream_seed(config.seed, 1, 0, 0, _INIT)
        )
        start_epoch, global_step = 0, 0
        epoch_losses = []

    named = _named_params({"explicit": explicit_net})
    opt = torch.optim.Adam(
        explicit_net.parameters(), lr=config.learning_rate, betas=(config.beta1, config.beta2)
    )
    if resume_from is not None:
        _restore_optimizer(opt, named, ckpt)

    loss_cfg = config.stage_loss(1)
    logger = TrainLog(config.log_path)
    try:
        for epoch in range(start_epoch, config.epochs_stage1):
            order = _epoch_order(config.seed, 1, epoch, len(patches))
            losses = []
            for pos in range(0, len(order), config.batch_size):
                batch_idx = order[pos : pos + config.batch_size]
                xs, yes = [], []
                for j, idx in enumerate(batch_idx):
                    patch, _ = _augmented(
                        patches[idx], stream_seed(config.seed, 1, epoch, pos + j, _AUG),
                        config.augment,
                    )
                    xs.append(patch)
                    yes.append(synthesize_explicit(
                        patch, noise_params, stream_seed(config.seed, 1, epoch, pos + j, _NOISE)
                    ))
                x = _cube_batch(xs)
                y_e = _cube_batch(yes)
                loss, terms = total_loss(x, explicit_net(y_e), None, None, loss_cfg)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                gnorm = _grad_norm(explicit_net.parameters())
                _abort_if_bad(float(loss), gnorm, 1, global_step, config.learning_rate)
                opt.step()
                global_step += 1
                losses.append(float(loss))
                logger.log(step=global_step, stage=1, epoch=epoch,
                           charbonnier=float(terms["charbonnier"]), total=float(loss),
                           grad_norm=gnorm)
            epoch_losses.append(float(np.mean(losses)))
    finally:
        logger.close()

    opt_info, opt_blobs = _optimizer_payload(opt, named)
    tensors = _model_tensors(explicit_net, None)
    tensors.update(opt_blobs)
    ckpt_out = Checkpoint(
        stage=1, seed=config.seed, epoch=config.epochs_stage1, global_step=global_step,
        explicit_spec=config.backbone, implicit_spec=None,
        guidance_channels=config.guidance_channels, use_guidance=config.use_guidance,
        wavelet=config.wavelet, tensors=tensors, optimizer=opt_info,
        metadata={"epoch_losses": epoch_losses},
    )
    if checkpoint_path:
        from .checkpoints import save_checkpoint

        save_checkpoint(ckpt_out, checkpoint_path)
    return ckpt_out


def _paired_patches(pairs: list[PairedSample], size: int, stride: int):
    out = []
    for p in pairs:
        out.extend(zip(crop_patches(p.clean, size, stride),
                       crop_patches(p.noisy, size, stride)))
    return out


def _train_paired(stage: int, pairs, config: TrainConfig, noise_params,
                  explicit_net, implicit_net, trainable_named, start_epoch, global_step,
                  epochs, epoch_losses, use_kl: bool):
    """Shared loop for stages 2/3 and the end-to-end ablation mode."""
    from .noise import synthesize_explicit

    patches = _paired_patches(pairs, config.patch_size, config.stride)
    if not patches:
        raise ValueError("no training patches")

    params = [p for _, p in trainable_named]
    opt = torch.optim.Adam(params, lr=config.learning_rate,
                           betas=(config.beta1, config.beta2))
    loss_cfg = config.stage_loss(stage)

    offline_ye = None
    if use_kl and config.noise_mode == "offline":
        offline_ye = [
            synthesize_explicit(c, noise_params, stream_seed(config.seed, stage, 0, i, _OFFLINE))
            for i, (c, _) in enumerate(patches)
        ]

    logger = TrainLog(config.log_path)
    try:
        for epoch in range(start_epoch, epochs):
            order = _epoch_order(config.seed, stage, epoch, len(patches))
            losses = []
            for pos in range(0, len(order), config.batch_size):
                batch_idx = order[pos : pos + config.batch_size]
                xs, ys, yes = [], [], []
                for j, idx in enumerate(batch_idx):
                    clean, noisy = patches[idx]
                    clean, noisy = _augmented(
                        clean, stream_seed(config.seed, stage, epoch, pos + j, _AUG),
                        config.augment, partner=noisy,
                    )
                    xs.append(clean)
                    ys.append(noisy)
                    if use_kl:
                        if config.noise_mode == "online":
                            yes.append(synthesize_explicit(
                                clean, noise_params,
                                stream_seed(config.seed, stage, epoch, pos + j, _NOISE),
                            ))
                        else:
                            yes.append(offline_ye[idx])
                x = _cube_batch(xs)
                y = _cube_batch(ys)
                y_e = _cube_batch(yes) if use_kl else None
                yhat = implicit_net(y)
                xhat = explicit_net(yhat)
                loss, terms = total_loss(x, xhat, yhat if use_kl else None, y_e, loss_cfg)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                gnorm = _grad_norm(params)
                _abort_if_bad(float(loss), gnorm, stage, global_step, config.learning_rate)
                opt.step()
                global_step += 1
                losses.append(float(loss))
                logger.log(step=global_step, stage=stage, epoch=epoch,
                           charbonnier=float(terms["charbonnier"]),
                           kl=float(terms["kl"]), spectral=float(terms["spectral"]),
                           total=float(loss), grad_norm=gnorm)
            epoch_losses.append(float(np.mean(losses)))
    finally:
        logger.close()
    return opt, global_step


def train_stage2(real_pairs: list[PairedSample], explicit_ckpt, noise_params,
                 config: TrainConfig, resume_from=None, checkpoint_path=None) -> Checkpoint:
    """Train the guided implicit-noise remover through the frozen explicit net."""
    base = _as_checkpoint(explicit_ckpt)
    if base.explicit_spec is None:
        raise StateError("stage-2 training needs a stage-1 checkpoint with an explicit net")
    explicit_net, _ = nets_from_checkpoint(base)
    freeze(explicit_net)

    if resume_from is not None:
        ckpt = _as_checkpoint(resume_from)
        if ckpt.stage != 2:
            raise StateError(f"resume checkpoint is stage {ckpt.stage}, expected 2")
        _, implicit_net = nets_from_checkpoint(ckpt)
        start_epoch, global_step = ckpt.epoch, ckpt.global_step
        epoch_losses = list(ckpt.metadata.get("epoch_losses", []))
    else:
        implicit_net = build_guided_network(
            config.backbone, stream_seed(config.seed, 2, 0, 0, _INIT),
            guidance_channels=config.guidance_channels, wavelet=config.wavelet,
            use_guidance=config.use_guidance,
        )
        start_epoch, global_step = 0, 0
        epoch_losses = []

    named = _named_params({"implicit": implicit_net})
    opt, global_step = None, global_step
    opt, global_step = _run_stage2_or_3(
        2, real_pairs, config, noise_params, explicit_net, implicit_net, named,
        start_epoch, global_step, config.epochs_stage2, epoch_losses,
        resume_from=resume_from,
    )

    opt_info, opt_blobs = _optimizer_payload(opt, named)
    tensors = _model_tensors(explicit_net, implicit_net)
    tensors.update(opt_blobs)
    ckpt_out = Checkpoint(
        stage=2, seed=config.seed, epoch=config.epochs_stage2, global_step=global_step,
        explicit_spec=base.explicit_spec, implicit_spec=config.backbone,
        guidance_channels=config.guidance_channels, use_guidance=config.use_guidance,
        wavelet=config.wavelet, tensors=tensors, optimizer=opt_info,
        metadata={"epoch_losses": epoch_losses},
    )
    if checkpoint_path:
        from .checkpoints import save_checkpoint

        save_checkpoint(ckpt_out, checkpoint_path)
    return ckpt_out


def _run_stage2_or_3(stage, pairs, config, noise_params, explicit_net, implicit_net,
                     trainable_named, start_epoch, global_step, epochs, epoch_losses,
                     resume_from=None):
    from .noise import synthesize_explicit  # noqa: F401  (kept close to _train_paired)

    patches = _paired_patches(pairs, config.patch_size, config.stride)
    if not patches:
        raise ValueError("no training patches")
    params = [p for _, p in trainable_named]
    opt = torch.optim.Adam(params, lr=config.learning_rate,
                           betas=(config.beta1, config.beta2))
    if resume_from is not None:
        _restore_optimizer(opt, trainable_named, _as_checkpoint(resume_from))

    loss_cfg = config.stage_loss(stage)
    use_kl = loss_cfg.lambda_k > 0

    offline_ye = None
    if use_kl and config.noise_mode == "offline":
        from .noise import synthesize_explicit as synth

        offline_ye = [
            synth(c, noise_params, stream_seed(config.seed, stage, 0, i, _OFFLINE))
            for i, (c, _) in enumerate(patches)
        ]

    from .noise import synthesize_explicit as synth

    logger = TrainLog(config.log_path)
    try:
        for epoch in range(start_epoch, epochs):
            order = _epoch_order(config.seed, stage, epoch, len(patches))
            losses = []
            for pos in range(0, len(order), config.batch_size):
                batch_idx = order[pos : pos + config.batch_size]
                xs, ys, yes = [], [], []
                for j, idx in enumerate(batch_idx):
                    clean, noisy = patches[idx]
                    clean, noisy = _augmented(
                        clean, stream_seed(config.seed, stage, epoch, pos + j, _AUG),
                        config.augment, partner=noisy,
                    )
                    xs.append(clean)
                    ys.append(noisy)
                    if use_kl:
                        if config.noise_mode == "online":
                            yes.append(synth(
                                clean, noise_params,
                                stream_seed(config.seed, stage, epoch, pos + j, _NOISE),
                            ))
                        else:
                            yes.append(offline_ye[idx])
                x = _cube_batch(xs)
                y = _cube_batch(ys)
                y_e = _cube_batch(yes) if use_kl else None
                yhat = implicit_net(y)
                xhat = explicit_net(yhat)
                loss, terms = total_loss(x, xhat, yhat if use_kl else None, y_e, loss_cfg)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                gnorm = _grad_norm(params)
                _abort_if_bad(float(loss), gnorm, stage, global_step, config.learning_rate)
                opt.step()
                global_step += 1
                losses.append(float(loss))
                logger.log(step=global_step, stage=stage, epoch=epoch,
                           charbonnier=float(terms["charbonnier"]),
                           kl=float(terms["kl"]), spectral=float(terms["spectral"]),
                           total=float(loss), grad_norm=gnorm)
            epoch_losses.append(float(np.mean(losses)))
    finally:
        logger.close()
    return opt, global_step


def train_stage3(real_pairs: list[PairedSample], stage2_ckpt, noise_params,
                 config: TrainConfig, resume_from=None, checkpoint_path=None) -> Checkpoint:
    """Joint fine-tuning of both networks with the full loss."""
    base = _as_checkpoint(stage2_ckpt)
    if base.implicit_spec is None or base.explicit_spec is None:
        raise StateError("stage-3 training needs a stage-2 checkpoint with both nets")

    if resume_from is not None:
        ckpt = _as_checkpoint(resume_from)
        if ckpt.stage != 3:
            raise StateError(f"resume checkpoint is stage {ckpt.stage}, expected 3")
        explicit_net, implicit_net = nets_from_checkpoint(ckpt)
        start_epoch, global_step = ckpt.epoch, ckpt.global_step
        epoch_losses = list(ckpt.metadata.get("epoch_losses", []))
    else:
        explicit_net, implicit_net = nets_from_checkpoint(base)
        start_epoch, global_step = 0, 0
        epoch_losses = []

    named = _named_params({"explicit": explicit_net, "implicit": implicit_net})
    opt, global_step = _run_stage2_or_3(
        3, real_pairs, config, noise_params, explicit_net, implicit_net, named,
        start_epoch, global_step, config.epochs_stage3, epoch_losses,
        resume_from=resume_from,
    )

    opt_info, opt_blobs = _optimizer_payload(opt, named)
    tensors = _model_tensors(explicit_net, implicit_net)
    tensors.update(opt_blobs)
    ckpt_out = Checkpoint(
        stage=3, seed=config.seed, epoch=config.epochs_stage3, global_step=global_step,
        explicit_spec=base.explicit_spec, implicit_spec=base.implicit_spec,
        guidance_channels=base.guidance_channels, use_guidance=base.use_guidance,
        wavelet=base.wavelet, tensors=tensors, optimizer=opt_info,
        metadata={"epoch_losses": epoch_losses},
    )
    if checkpoint_path:
        from .checkpoints import save_checkpoint

        save_checkpoint(ckpt_out, checkpoint_path)
    return ckpt_out


def denoise(noisy: SpectralCube, ckpt, allow_stage_override: bool = False) -> SpectralCube:
    """Apply the trained composition (implicit remover, then explicit remover).

    Inputs whose spatial dims do not fit the network depth are reflect-padded
    internally and cropped back (logged at debug level).
    """
    ckpt = _as_checkpoint(ckpt)
    if ckpt.stage != 3 and not allow_stage_override:
        raise StateError(
            f"checkpoint is stage {ckpt.stage}; denoising expects stage 3 "
            "(pass allow_stage_override=True to use it anyway)"
        )
    explicit_net, implicit_net = nets_from_checkpoint(ckpt)
    h, w = noisy.shape[1:]
    if h % 8 or w % 8:
        log.debug("denoise: padding %dx%d input to the network grid", h, w)
    x = torch.from_numpy(noisy.data).unsqueeze(0).unsqueeze(0)
    with torch.no_grad():
        if implicit_net is not None:
            implicit_net.eval()
            x = implicit_net(x)
        if explicit_net is not None:
            explicit_net.eval()
            x = explicit_net(x)
    out = x.squeeze(0).squeeze(0).clamp(0.0, 1.0).numpy().astype(np.float32)
    return SpectralCube(data=out, wavelengths=noisy.wavelengths.copy())


def evaluate_pairs(ckpt, pairs: list[PairedSample],
                   allow_stage_override: bool = False) -> dict:
    """Denoise each pair's noisy cube and score it against the clean one."""
    rows = []
    for p in sorted(pairs, key=lambda q: q.scene_id):
        den = denoise(p.noisy, ckpt, allow_stage_override=allow_stage_override)
        rows.append({
            "scene_id": p.scene_id,
            "psnr": psnr(p.clean, den),
            "ssim": ssim(p.clean, den),
            "sam": sam(p.clean, den),
        })
    avg = {
        "scene_id": "average",
        "psnr": float(np.mean([r["psnr"] for r in rows])),
        "ssim": float(np.mean([r["ssim"] for r in rows])),
        "sam": float(np.mean([r["sam"] for r in rows])),
    }
    return {"per_scene": rows, "average": avg}


def train_all_stages(train_pairs: list[PairedSample], noise_params,
                     config: TrainConfig) -> tuple[Checkpoint, Checkpoint, Checkpoint]:
    clean = [p.clean for p in train_pairs]
    c1 = train_stage1(clean, noise_params, config)
    c2 = train_stage2(train_pairs, c1, noise_params, config)
    c3 = train_stage3(train_pairs, c2, noise_params, config)
    return c1, c2, c3


def _train_end_to_end(train_pairs, config: TrainConfig, step_budget: int) -> Checkpoint:
    """Joint from-scratch training with charbonnier + spectral loss only."""
    explicit_net = build_reference_backbone(
        config.backbone, stream_seed(config.seed, 1, 0, 0, _INIT)
    )
    implicit_net = build_guided_network(
        config.backbone, stream_seed(config.seed, 2, 0, 0, _INIT),
        guidance_channels=config.guidance_channels, wavelet=config.wavelet,
        use_guidance=False,
    )
    patches = _paired_patches(train_pairs, config.patch_size, config.stride)
    named = _named_params({"explicit": explicit_net, "implicit": implicit_net})
    params = [p for _, p in named]
    opt = torch.optim.Adam(params, lr=config.learning_rate,
                           betas=(config.beta1, config.beta2))
    loss_cfg = replace(config.loss, lambda_k=0.0)

    logger = TrainLog(config.log_path)
    global_step, epoch = 0, 0
    epoch_losses: list[float] = []
    try:
        while global_step < step_budget:
            order = _epoch_order(config.seed, 3, epoch, len(patches))
            losses = []
            for pos in range(0, len(order), config.batch_size):
                if global_step >= step_budget:
                    break
                batch_idx = order[pos : pos + config.batch_size]
                xs, ys = [], []
                for j, idx in enumerate(batch_idx):
                    clean, noisy = patches[idx]
                    clean, noisy = _augmented(
                        clean, stream_seed(config.seed, 3, epoch, pos + j, _AUG),
                        config.augment, partner=noisy,
                    )
                    xs.append(clean)
                    ys.append(noisy)
                x = _cube_batch(xs)
                y = _cube_batch(ys)
                xhat = explicit_net(implicit_net(y))
                loss, terms = total_loss(x, xhat, None, None, loss_cfg)
                opt.zero_grad(set_to_none=True)
                loss.backward()
                gnorm = _grad_norm(params)
                _abort_if_bad(float(loss), gnorm, 3, global_step, config.learning_rate)
                opt.step()
                global_step += 1
                losses.append(float(loss))
                logger.log(step=global_step, stage=0, epoch=epoch,
                           charbonnier=float(terms["charbonnier"]),
                           spectral=float(terms["spectral"]), total=float(loss),
                           grad_norm=gnorm)
            if losses:
                epoch_losses.append(float(np.mean(losses)))
            epoch += 1
    finally:
        logger.close()

    return Checkpoint(
        stage=3, seed=config.seed, epoch=epoch, global_step=global_step,
        explicit_spec=config.backbone, implicit_spec=config.backbone,
        guidance_channels=config.guidance_channels, use_guidance=False,
        wavelet=config.wavelet, tensors=_model_tensors(explicit_net, implicit_net),
        optimizer=None, metadata={"epoch_losses": epoch_losses, "mode": "end_to_end"},
    )


ABLATION_MODES = ("end_to_end", "multistage_no_hfwg", "multistage_full")


def run_ablation(mode: str, train_pairs: list[PairedSample],
                 test_pairs: list[PairedSample], noise_params,
                 config: TrainConfig) -> dict:
    """Train one configuration under the step budget implied by the config's
    stage epochs and report test metrics plus the budget actually used."""
    if mode not in ABLATION_MODES:
        raise ValueError(f"mode must be one of {ABLATION_MODES}, got {mode!r}")
    patches_per_epoch = len(_paired_patches(train_pairs, config.patch_size, config.stride))
    steps_per_epoch = int(np.ceil(patches_per_epoch / config.batch_size))
    total_epochs = config.epochs_stage1 + config.epochs_stage2 + config.epochs_stage3
    budget = total_epochs * steps_per_epoch

    if mode == "end_to_end":
        ckpt = _train_end_to_end(train_pairs, config, budget)
        steps = ckpt.global_step
    else:
        cfg = config if mode == "multistage_full" else replace(config, use_guidance=False)
        c1, c2, c3 = train_all_stages(train_pairs, noise_params, cfg)
        ckpt = c3
        steps = c1.global_step + c2.global_step + c3.global_step

    scores = evaluate_pairs(ckpt, test_pairs)
    return {
        "mode": mode,
        "seed": config.seed,
        "step_budget": budget,
        "steps_taken": steps,
        "psnr": scores["average"]["psnr"],
        "ssim": scores["average"]["ssim"],
        "sam": scores["average"]["sam"],
        "per_scene": scores["per_scene"],
    }
