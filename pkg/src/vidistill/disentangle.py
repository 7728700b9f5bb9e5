"""Two-stage distillation: static memory from single frames, then dynamic memory plus a combiner."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .exceptions import BudgetExceededError, InvalidConfigError, InvalidInputError
from .matching import (ActivationMeter, ExpertTrajectory, History, MatchConfig, SyntheticSet,
                       _check_finite, class_real_batches, loss_distribution, loss_gradient,
                       loss_trajectory, smoothed)
from .models import ArchSpec, ModelState, apply_module, build_model
from .temporal import CompressionSchedule, interpolate
from .video import VideoDataset, select_frames

log = logging.getLogger(__name__)

COMBINER_VARIANTS = ("single_block", "two_block_mid8")


@dataclass
class StaticMemory:
    images: torch.Tensor  # [num_classes, SPC, C, H, W]

    def __post_init__(self):
        if self.images.ndim != 5 or self.images.shape[1] < 1:
            raise InvalidInputError(f"static memory must be [K, SPC>=1, C, H, W], got {tuple(self.images.shape)}")
        if not torch.isfinite(self.images).all():
            raise InvalidInputError("static memory has non-finite values")

    @property
    def num_classes(self) -> int:
        return self.images.shape[0]

    @property
    def spc(self) -> int:
        return self.images.shape[1]

    def boring_videos(self, frames: int) -> SyntheticSet:
        """Each still image repeated ``frames`` times, as a synthetic set."""
        k, spc = self.images.shape[:2]
        return SyntheticSet(self.images.reshape(k * spc, 1, *self.images.shape[2:]).clone(),
                            np.repeat(np.arange(k), spc), CompressionSchedule(1, 1, 1, "duplicate", frames), k)


@dataclass
class DynamicMemory:
    motions: torch.Tensor  # [num_classes, DPC, F_d, 1, H, W]

    def __post_init__(self):
        if self.motions.ndim != 6 or self.motions.shape[1] < 1:
            raise InvalidInputError(f"dynamic memory must be [K, DPC>=1, F_d, 1, H, W], got {tuple(self.motions.shape)}")
        if self.motions.shape[3] != 1:
            raise InvalidInputError("dynamic memory has exactly one channel")

    @property
    def dpc(self) -> int:
        return self.motions.shape[1]

    @property
    def frames(self) -> int:
        return self.motions.shape[2]


@dataclass(frozen=True)
class CombinerArch:
    variant: str
    channels: int
    frames: int  # output clip length

    def __post_init__(self):
        if self.variant not in COMBINER_VARIANTS:
            raise InvalidConfigError(f"combiner variant must be one of {COMBINER_VARIANTS}")

    def make_module(self) -> nn.Module:
        return _Combiner(self.variant, self.channels, self.frames)


class _Combiner(nn.Module):
    def __init__(self, variant: str, channels: int, frames: int):
        super().__init__()
        cin = channels + 1
        if variant == "single_block":
            self.residual = nn.Conv3d(cin, channels, 3, padding=1)
        else:
            self.residual = nn.Sequential(
                nn.Conv3d(cin, 8, 3, padding=1), nn.ReLU(),
                nn.ConvTranspose3d(8, channels, 3, padding=1),
            )
        for m in self.modules():
            if isinstance(m, (nn.Conv3d, nn.ConvTranspose3d)):
                nn.init.normal_(m.weight, std=1e-2)
                nn.init.zeros_(m.bias)
        self.frames = frames

    def forward(self, s, d):
        # s: [B, C, H, W]; d: [B, F_d, 1, H, W]
        rep = s.unsqueeze(1).expand(-1, d.shape[1], -1, -1, -1)
        x = torch.cat([rep, d], dim=2).transpose(1, 2)
        out = rep + self.residual(x).transpose(1, 2)
        if out.shape[1] != self.frames:
            out = interpolate(out, self.frames, "duplicate")
        return out


@dataclass
class CombinerSpec:
    variant: str
    model: ModelState

    @property
    def arch(self) -> CombinerArch:
        return self.model.spec


def build_combiner(variant: str, channels: int, frames: int, seed: int, zero_residual: bool = False) -> CombinerSpec:
    state = build_model(CombinerArch(variant, channels, frames), seed)
    if zero_residual:
        state = state.with_flat(torch.zeros_like(state.flat))
    return CombinerSpec(variant, state)


def combine_batch(H: CombinerSpec, s: torch.Tensor, d: torch.Tensor, flat: torch.Tensor | None = None) -> torch.Tensor:
    if s.ndim != 4 or d.ndim != 5 or d.shape[2] != 1 or s.shape[0] != d.shape[0]:
        raise InvalidInputError(f"expected s [B, C, H, W] and d [B, F_d, 1, H, W], got {tuple(s.shape)}, {tuple(d.shape)}")
    if s.shape[1] != H.arch.channels or s.shape[-2:] != d.shape[-2:]:
        raise InvalidInputError("static/dynamic shapes do not match the combiner")
    return apply_module(H.model, s, d, flat=flat)


def combine(H: CombinerSpec, s: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
    """One clip ``[F, C, H, W]`` from a static image ``[C, H, W]`` and a motion stack ``[F_d, 1, H, W]``."""
    if s.ndim != 3 or d.ndim != 4:
        raise InvalidInputError(f"expected s [C, H, W] and d [F_d, 1, H, W], got {tuple(s.shape)}, {tuple(d.shape)}")
    return combine_batch(H, s.unsqueeze(0), d.unsqueeze(0))[0]


@dataclass
class DistilledArtifact:
    static: StaticMemory
    dynamic: DynamicMemory
    combiner: CombinerSpec
    schedule: CompressionSchedule | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.static.num_classes != self.dynamic.motions.shape[0]:
            raise InvalidInputError("static and dynamic memories disagree on the class count")
        if self.static.images.shape[-2:] != self.dynamic.motions.shape[-2:]:
            raise InvalidInputError("static and dynamic memories disagree on the frame size")
        if self.static.images.shape[2] != self.combiner.arch.channels:
            raise InvalidInputError("combiner channel count does not match the static memory")

    @property
    def num_classes(self) -> int:
        return self.static.num_classes

    def storage_components(self) -> dict:
        return {"static": self.static.images.numel(), "dynamic": self.dynamic.motions.numel(),
                "combiner": self.combiner.model.num_params}

    def materialize(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Every static/dynamic combination of every class, as ``(clips, labels)``."""
        k, spc = self.static.images.shape[:2]
        dpc = self.dynamic.dpc
        si, di = np.meshgrid(np.arange(spc), np.arange(dpc), indexing="ij")
        si, di = si.ravel(), di.ravel()
        clips = []
        with torch.no_grad():
            for c in range(k):
                clips.append(combine_batch(self.combiner, self.static.images[c, si], self.dynamic.motions[c, di]))
        return torch.cat(clips), torch.as_tensor(np.repeat(np.arange(k), len(si)))


def check_budget(artifact, budget_bytes: int) -> int:
    """Raise :class:`BudgetExceededError` when the artifact needs more than ``budget_bytes``."""
    from .evaluation import storage_bytes

    needed = storage_bytes(artifact).total
    if budget_bytes is not None and needed > budget_bytes:
        raise BudgetExceededError(needed, int(budget_bytes))
    return needed


def pair_memories(static: StaticMemory, dynamic: DynamicMemory, class_id: int, count: int,
                  seed: int) -> list[tuple[int, int]]:
    """``count`` uniform random (static index, dynamic index) pairs for one class."""
    if count < 1:
        raise InvalidInputError("count must be >= 1")
    rng = np.random.default_rng([seed, class_id])
    s = rng.integers(0, static.spc, size=count)
    d = rng.integers(0, dynamic.dpc, size=count)
    return [(int(a), int(b)) for a, b in zip(s, d)]


@dataclass
class StageConfig:
    spc: int = 1
    dpc: int = 1
    lr_dynamic: float = 100.0
    lr_hal: float = 1e-2
    frames_dynamic: int = 0  # 0 = clip length
    n_real: int = 0  # 0 = clip length
    variant: str = "single_block"
    static_iterations: int = 200
    dynamic_iterations: int = 200
    early_stop_window: int = 20
    early_stop_tol: float = 0.0  # relative smoothed-loss improvement below which stage 1 stops; 0 disables
    pairs_per_class: int = 0  # 0 = spc * dpc


def _converged(losses, window: int, tol: float) -> bool:
    if tol <= 0 or len(losses) < 2 * window:
        return False
    sm = smoothed(losses, window)
    prev, cur = sm[-window - 1], sm[-1]
    return (prev - cur) <= tol * abs(prev)


def stage1_static(dataset: VideoDataset, spc: int, cfg: MatchConfig, seed: int,
                  arch: ArchSpec | None = None, stage: StageConfig | None = None) -> tuple[StaticMemory, History]:
    """Gradient matching on single frames (one random frame per clip, redrawn every iteration)."""
    stage = stage or StageConfig()
    if cfg.matcher != "gradient_dc":
        raise InvalidConfigError("static learning uses gradient matching (matcher='gradient_dc')")
    if len(dataset) == 0:
        raise InvalidInputError("empty dataset")
    c, h, w = dataset.frame_shape
    arch = arch or ArchSpec.convnet_d4((1, c, h, w), dataset.num_classes)
    if arch.family != "ConvNetD4_2D":
        raise InvalidConfigError("static learning runs on a 2D ConvNetD4")
    rng = np.random.default_rng(seed)
    k = dataset.num_classes
    init = []
    for cls in range(k):
        idx = rng.choice(dataset.class_indices(cls), size=spc, replace=len(dataset.class_indices(cls)) < spc)
        init.append(torch.stack([dataset.clips[i].frames[int(rng.integers(dataset.clips[i].num_frames))] for i in idx]))
    S = torch.stack(init).clone().requires_grad_(True)  # [K, SPC, C, H, W]
    opt = torch.optim.SGD([S], lr=cfg.lr_img, momentum=cfg.momentum)
    hist = History()
    iters = cfg.iterations if cfg.iterations else stage.static_iterations
    for it in range(iters):
        t0 = time.perf_counter()
        frames = select_frames(dataset, 1, int(rng.integers(2**31)))
        model = build_model(arch, int(rng.integers(2**31)))
        opt.zero_grad()
        total = 0.0
        with ActivationMeter() as meter:
            for cls in range(k):
                idx = rng.permutation(np.flatnonzero(frames.labels == cls))[:cfg.batch_real]
                loss = loss_gradient(model, frames.frames[torch.as_tensor(idx)], S[cls].unsqueeze(1), cls)
                loss.backward()
                total += float(loss.detach())
        _check_finite(total, it, stage="static")
        opt.step()
        hist.loss.append(total)
        hist.peak_bytes.append(meter.bytes)
        hist.seconds.append(time.perf_counter() - t0)
        if _converged(hist.loss, stage.early_stop_window, stage.early_stop_tol):
            log.info("static learning stopped early at iteration %d", it)
            break
    return StaticMemory(S.detach().clone()), hist


def stage2_dynamic(dataset: VideoDataset, static: StaticMemory, dpc: int, cfg: MatchConfig, seed: int,
                   arch: ArchSpec | None = None, stage: StageConfig | None = None,
                   experts: list[ExpertTrajectory] | None = None) -> tuple[DynamicMemory, CombinerSpec, History]:
    """Learn dynamic memory and the shared combiner with the static memory frozen."""
    stage = stage or StageConfig()
    f = dataset.clips[0].num_frames
    c, h, w = dataset.frame_shape
    n_real = stage.n_real or f
    fd = stage.frames_dynamic or f
    arch = arch or ArchSpec.mini_c3d((f, c, h, w), dataset.num_classes)
    if cfg.matcher == "trajectory_mtt" and not experts:
        raise InvalidConfigError("trajectory matching needs expert trajectories")
    rng = np.random.default_rng(seed)
    k = dataset.num_classes
    gen = torch.Generator().manual_seed(seed)
    D = (1e-2 * torch.randn(k, dpc, fd, 1, h, w, generator=gen)).requires_grad_(True)
    H = build_combiner(stage.variant, c, f, seed)
    hflat = H.model.flat.clone().requires_grad_(True)
    S = static.images.detach()
    dyn_mem = DynamicMemory(D.detach())
    opt_d = torch.optim.SGD([D], lr=stage.lr_dynamic, momentum=cfg.momentum)
    opt_h = torch.optim.SGD([hflat], lr=stage.lr_hal, momentum=cfg.momentum)
    count = stage.pairs_per_class or static.spc * dpc
    hist = History()
    iters = cfg.iterations if cfg.iterations else stage.dynamic_iterations
    for it in range(iters):
        t0 = time.perf_counter()
        opt_d.zero_grad()
        opt_h.zero_grad()
        pseed = int(rng.integers(2**31))
        syn = {}
        for cls in range(k):
            pairs = pair_memories(static, dyn_mem, cls, count, pseed)
            si = torch.as_tensor([p[0] for p in pairs])
            di = torch.as_tensor([p[1] for p in pairs])
            syn[cls] = combine_batch(H, S[cls, si], D[cls, di], flat=hflat)
        with ActivationMeter() as meter:
            if cfg.matcher == "trajectory_mtt":
                expert = experts[int(rng.integers(len(experts)))]
                hi = min(cfg.inner.max_start_epoch, len(expert.snapshots) - 1 - cfg.inner.expert_epochs)
                x = torch.cat([syn[cls] for cls in range(k)])
                y = torch.as_tensor(np.repeat(np.arange(k), count))
                loss = loss_trajectory(expert, int(rng.integers(0, hi + 1)), x, y, cfg.inner,
                                       batch_syn=cfg.batch_syn, rng=rng)
            else:
                model = build_model(arch.with_frames(n_real), int(rng.integers(2**31)))
                real = class_real_batches(dataset, n_real, cfg.batch_real, rng, cfg.hflip)
                loss = 0.0
                for cls, rb in real.items():
                    if cfg.matcher == "distribution_dm":
                        loss = loss + loss_distribution(model, rb, syn[cls])
                    else:
                        loss = loss + loss_gradient(model, rb, syn[cls], cls)
        value = float(loss.detach())
        _check_finite(value, it, stage="dynamic")
        loss.backward()
        opt_d.step()
        opt_h.step()
        hist.loss.append(value)
        hist.peak_bytes.append(meter.bytes)
        hist.seconds.append(time.perf_counter() - t0)
        if it % 50 == 0:
            log.info("dynamic it %d loss %.4f", it, value)
    return DynamicMemory(D.detach().clone()), CombinerSpec(H.variant, H.model.with_flat(hflat.detach().clone())), hist


def distill_disentangled(dataset: VideoDataset, static_cfg: MatchConfig, dynamic_cfg: MatchConfig,
                         stage: StageConfig, seed: int, static_arch: ArchSpec | None = None,
                         dynamic_arch: ArchSpec | None = None, experts=None,
                         budget_bytes: int | None = None) -> DistilledArtifact:
    """Run both stages and return a budget-checked artifact."""
    static, h1 = stage1_static(dataset, stage.spc, static_cfg, seed, static_arch, stage)
    dyn, comb, h2 = stage2_dynamic(dataset, static, stage.dpc, dynamic_cfg, seed + 1, dynamic_arch, stage, experts)
    art = DistilledArtifact(static, dyn, comb, None, {
        "seed": seed, "static_loss": h1.loss, "dynamic_loss": h2.loss,
        "matcher": dynamic_cfg.matcher,
    })
    if budget_bytes is not None:
        check_budget(art, budget_bytes)
    return art


def empty_like_geometry(num_classes: int, spc: int, dpc: int, frames: int, channels: int, height: int,
                        width: int, variant: str = "single_block", frames_dynamic: int = 0) -> DistilledArtifact:
    """Zero-filled artifact with the given geometry (for storage and budget bookkeeping)."""
    fd = frames_dynamic or frames
    return DistilledArtifact(
        StaticMemory(torch.zeros(num_classes, spc, channels, height, width)),
        DynamicMemory(torch.zeros(num_classes, dpc, fd, 1, height, width)),
        build_combiner(variant, channels, frames, 0, zero_residual=True),
    )


def artifact_fits(artifact: DistilledArtifact, reference_bytes: int, fraction: float) -> bool:
    from .evaluation import storage_bytes

    return storage_bytes(artifact).total <= math.floor(fraction * reference_bytes)
