"""Segmented matching and interpolation: schedules, pairings, consistency checks, interpolators."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import InvalidConfigError, InvalidInputError
from .models import ModelState, apply_module, build_model
from .video import VideoDataset, sample_clip, segment_bounds

log = logging.getLogger(__name__)

INTERPOLATORS = ("duplicate", "linear", "parametric")


@dataclass(frozen=True)
class CompressionSchedule:
    """Temporal compression level: ``n_real`` real frames distilled into ``n_syn`` frames
    over ``k`` segment pairs, then interpolated to ``l_syn`` frames with ``interp``."""

    n_syn: int
    n_real: int
    k: int = 1
    interp: str = "duplicate"
    l_syn: int = 16

    def __post_init__(self):
        if self.interp not in INTERPOLATORS:
            raise InvalidConfigError(f"interp must be one of {INTERPOLATORS}, got {self.interp!r}")
        if not 1 <= self.k <= self.n_syn <= self.l_syn:
            raise InvalidConfigError(f"need 1 <= k <= n_syn <= l_syn, got k={self.k} n_syn={self.n_syn} l_syn={self.l_syn}")
        if self.k > self.n_real:
            raise InvalidConfigError(f"k={self.k} exceeds n_real={self.n_real}")
        if self.n_syn % self.k or self.n_real % self.k:
            raise InvalidConfigError(f"n_syn={self.n_syn} and n_real={self.n_real} must both be divisible by k={self.k}")
        if self.interp == "linear" and self.n_syn == 1 and self.l_syn > 1:
            raise InvalidConfigError("linear interpolation needs at least two synthetic frames; use duplicate")

    @classmethod
    def naive(cls, length: int) -> "CompressionSchedule":
        return cls(length, length, 1, "duplicate", length)

    def to_dict(self) -> dict:
        return {"n_syn": self.n_syn, "n_real": self.n_real, "k": self.k, "interp": self.interp, "l_syn": self.l_syn}

    @classmethod
    def from_dict(cls, d: dict) -> "CompressionSchedule":
        return cls(**d)


@dataclass(frozen=True)
class SegmentPairing:
    pairs: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...]

    def __post_init__(self):
        pairs = tuple((tuple(int(i) for i in r), tuple(int(i) for i in s)) for r, s in self.pairs)
        object.__setattr__(self, "pairs", pairs)
        for side in (0, 1):
            seen = set()
            for p in pairs:
                idx = p[side]
                if not idx:
                    raise InvalidInputError("every segment needs at least one index")
                if min(idx) < 0:
                    raise InvalidInputError("negative frame index in pairing")
                if seen & set(idx) or len(set(idx)) != len(idx):
                    raise InvalidInputError("segment index sets must be pairwise disjoint")
                seen |= set(idx)

    @property
    def k(self) -> int:
        return len(self.pairs)


def segment_pairs(schedule: CompressionSchedule, real_len: int,
                  rng: np.random.Generator | None = None) -> SegmentPairing:
    """Pair ``k`` contiguous real segments with ``k`` contiguous synthetic segments in order.

    ``n_real`` real indices are taken one per equal stratum of ``range(real_len)``:
    the stratum start by default, a uniform draw inside it when ``rng`` is given.
    """
    if real_len < schedule.n_real:
        raise InvalidConfigError(f"real_len={real_len} is shorter than n_real={schedule.n_real}")
    strata = segment_bounds(real_len, schedule.n_real)
    if rng is None:
        real = [lo for lo, _ in strata]
    else:
        real = [int(rng.integers(lo, hi)) for lo, hi in strata]
    rs, ss = schedule.n_real // schedule.k, schedule.n_syn // schedule.k
    pairs = tuple(
        (tuple(real[i * rs:(i + 1) * rs]), tuple(range(i * ss, (i + 1) * ss)))
        for i in range(schedule.k)
    )
    return SegmentPairing(pairs)


def check_consistency(pairing: SegmentPairing) -> tuple[bool, bool]:
    """Return ``(ordered, uniform)`` for a pairing.

    Ordered: sorting pairs by their first real index, each pair ends (on both the
    real and synthetic side) before the next one starts. Uniform: all real
    segments share one length and all synthetic segments share one length.
    """
    if not isinstance(pairing, SegmentPairing):
        pairing = SegmentPairing(pairing)
    spans = sorted((min(r), max(r), min(s), max(s)) for r, s in pairing.pairs)
    ordered = all(a[1] < b[0] and a[3] < b[2] for a, b in zip(spans, spans[1:]))
    uniform = len({len(r) for r, _ in pairing.pairs}) == 1 and len({len(s) for _, s in pairing.pairs}) == 1
    return ordered, uniform


def reference_positions(n: int, l_syn: int) -> np.ndarray:
    """Endpoint-pinned, evenly spaced positions of ``n`` reference frames in ``[0, l_syn - 1]``."""
    if n == 1:
        return np.zeros(1)
    return np.arange(n) * (l_syn - 1) / (n - 1)


def duplicate_index(n: int, l_syn: int) -> np.ndarray:
    """For each output position, the nearest reference frame (ties go to the earlier one)."""
    if n == 1:
        return np.zeros(l_syn, dtype=np.int64)
    pos = reference_positions(n, l_syn)
    t = np.arange(l_syn)[:, None]
    return np.argmin(np.abs(t - pos[None, :]), axis=1)


def linear_weights(n: int, l_syn: int) -> np.ndarray:
    """``[l_syn, n]`` convex blending matrix over the two bracketing reference frames."""
    pos = reference_positions(n, l_syn)
    w = np.zeros((l_syn, n))
    for t in range(l_syn):
        j = min(int(np.searchsorted(pos, t, side="right")) - 1, n - 2)
        a = (t - pos[j]) / (pos[j + 1] - pos[j])
        w[t, j], w[t, j + 1] = 1.0 - a, a
    return w


def interpolate(frames: torch.Tensor, l_syn: int, method: str = "duplicate",
                phi: "ParametricInterpolator | None" = None) -> torch.Tensor:
    """Stretch ``[N, C, H, W]`` (or batched ``[B, N, C, H, W]``) frames to ``l_syn`` frames."""
    if method not in INTERPOLATORS:
        raise InvalidConfigError(f"unknown interpolation method {method!r}")
    batched = frames.ndim == 5
    x = frames if batched else frames.unsqueeze(0)
    if x.ndim != 5:
        raise InvalidInputError(f"frames must be [N, C, H, W] or [B, N, C, H, W], got {tuple(frames.shape)}")
    n = x.shape[1]
    if n > l_syn:
        raise InvalidInputError(f"cannot interpolate {n} frames down to {l_syn}")
    if method == "parametric":
        if phi is None:
            raise InvalidConfigError("parametric interpolation needs a trained interpolator")
        if phi.trained_for != (n, l_syn):
            raise InvalidConfigError(f"interpolator trained for {phi.trained_for}, asked for {(n, l_syn)}")
    if method == "linear" and n > 1:
        w = torch.as_tensor(linear_weights(n, l_syn), dtype=x.dtype)
        out = torch.einsum("tn,bn...->bt...", w, x)
    elif method == "linear" and l_syn > 1:
        raise InvalidConfigError("linear interpolation needs at least two frames")
    else:
        out = x[:, torch.as_tensor(duplicate_index(n, l_syn))]
        if method == "parametric":
            out = phi.refine(out)
    return out if batched else out[0]


@dataclass(frozen=True)
class InterpolatorSpec:
    """Residual temporal conv net that only sees temporal differences of its input."""

    channels: int
    width: int = 16
    depth: int = 3

    def make_module(self) -> nn.Module:
        return _DifferenceRefiner(self.channels, self.width, self.depth)


class _DifferenceRefiner(nn.Module):
    # bias-free and driven by frame differences, so temporally constant clips pass through unchanged
    def __init__(self, channels: int, width: int, depth: int):
        super().__init__()
        chans = [2 * channels] + [width] * (depth - 1) + [channels]
        self.convs = nn.ModuleList(
            nn.Conv3d(a, b, 3, padding=1, bias=False) for a, b in zip(chans[:-1], chans[1:])
        )
        nn.init.zeros_(self.convs[-1].weight)

    def forward(self, x):
        v = x.transpose(1, 2)  # [B, C, T, H, W]
        fwd = F.pad(v[:, :, 1:] - v[:, :, :-1], (0, 0, 0, 0, 0, 1))
        bwd = F.pad(v[:, :, 1:] - v[:, :, :-1], (0, 0, 0, 0, 1, 0))
        h = torch.cat([fwd, bwd], dim=1)
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i < len(self.convs) - 1:
                h = F.relu(h)
        return x + h.transpose(1, 2)


@dataclass(frozen=True)
class ParametricInterpolator:
    model: ModelState
    trained_for: tuple[int, int]
    history: tuple[float, ...] = field(default=(), compare=False)
    fingerprint: str = ""

    def refine(self, duplicated: torch.Tensor) -> torch.Tensor:
        return apply_module(self.model, duplicated.to(self.model.flat.dtype))


@dataclass
class InterpolatorConfig:
    epochs: int = 60
    lr: float = 1e-3
    batch_size: int = 16
    width: int = 16
    depth: int = 3
    seed: int = 0


def evenly_subsample(clips: torch.Tensor, n: int) -> torch.Tensor:
    """Frames at the rounded reference positions of ``[B, L, C, H, W]`` clips."""
    idx = np.rint(reference_positions(n, clips.shape[1])).astype(np.int64)
    return clips[:, torch.as_tensor(idx)]


def fixed_length_clips(dataset: VideoDataset, l_syn: int, seed: int) -> torch.Tensor:
    clips = []
    for i, c in enumerate(dataset.clips):
        if c.num_frames < l_syn:
            raise InvalidInputError(f"clip {i} has {c.num_frames} frames, fewer than l_syn={l_syn}")
        clips.append(c.frames if c.num_frames == l_syn else sample_clip(c, l_syn, 1, seed + i).frames)
    return torch.stack(clips)


def reconstruction_mse(clips: torch.Tensor, n_syn: int, method: str = "duplicate",
                       phi: ParametricInterpolator | None = None) -> float:
    """Mean squared error of rebuilding full clips from their evenly subsampled frames."""
    with torch.no_grad():
        rec = interpolate(evenly_subsample(clips, n_syn), clips.shape[1], method, phi)
        return float(F.mse_loss(rec, clips))


def train_parametric_interpolator(dataset: VideoDataset, n_syn: int, l_syn: int,
                                  cfg: InterpolatorConfig | None = None) -> ParametricInterpolator:
    """Fit a network that turns duplicated subsamples back into the original clips (MSE, Adam)."""
    cfg = cfg or InterpolatorConfig()
    if n_syn > l_syn or n_syn < 1:
        raise InvalidConfigError(f"need 1 <= n_syn <= l_syn, got n_syn={n_syn}, l_syn={l_syn}")
    clips = fixed_length_clips(dataset, l_syn, cfg.seed)
    spec = InterpolatorSpec(clips.shape[2], cfg.width, cfg.depth)
    state = build_model(spec, cfg.seed)
    flat = state.flat.clone().requires_grad_(True)
    opt = torch.optim.Adam([flat], lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    source = interpolate(evenly_subsample(clips, n_syn), l_syn, "duplicate")
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(clips))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[start:start + cfg.batch_size])
            loss = F.mse_loss(apply_module(state, source[idx], flat=flat), clips[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        history.append(total / len(clips))
        log.debug("interpolator epoch %d mse %.3e", epoch, history[-1])
    return ParametricInterpolator(state.with_flat(flat.detach()), (n_syn, l_syn), tuple(history))
