"""Distillation matchers (gradient, distribution, trajectory) and the segmented driver."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import (DegenerateTrajectoryError, InvalidConfigError, InvalidInputError,
                         NonFiniteLossError)
from .models import ArchSpec, ModelState, build_model, forward
from .temporal import CompressionSchedule, ParametricInterpolator, interpolate, segment_pairs
from .video import VideoDataset, augment_hflip, stratified_indices

log = logging.getLogger(__name__)

MATCHERS = ("gradient_dc", "distribution_dm", "trajectory_mtt")


@dataclass
class InnerConfig:
    syn_steps: int = 10
    expert_epochs: int = 1
    max_start_epoch: int = 10
    lr_teacher: float = 0.01


@dataclass
class MatchConfig:
    matcher: str = "distribution_dm"
    lr_img: float = 1.0
    batch_real: int = 16
    batch_syn: int = 0  # 0 = every synthetic item each step
    iterations: int = 200
    momentum: float = 0.5
    init: str = "real"
    hflip: float = 0.0
    inner: InnerConfig = field(default_factory=InnerConfig)

    def __post_init__(self):
        if isinstance(self.inner, dict):
            self.inner = InnerConfig(**self.inner)
        if self.matcher not in MATCHERS:
            raise InvalidConfigError(f"matcher must be one of {MATCHERS}, got {self.matcher!r}")
        if self.lr_img < 0 or self.inner.lr_teacher <= 0:
            raise InvalidConfigError("learning rates must be positive")
        if self.batch_real < 1 or self.iterations < 0 or self.batch_syn < 0:
            raise InvalidConfigError("batch sizes must be positive and iterations non-negative")
        if self.inner.syn_steps < 0 or self.inner.expert_epochs < 1 or self.inner.max_start_epoch < 0:
            raise InvalidConfigError("invalid trajectory-matching inner configuration")
        if self.init not in ("real", "noise"):
            raise InvalidConfigError("init must be 'real' or 'noise'")


@dataclass
class History:
    """Per-iteration loss, peak saved-activation bytes and wall time."""

    loss: list = field(default_factory=list)
    peak_bytes: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def to_rows(self):
        return [(i, l, b, s) for i, (l, b, s) in enumerate(zip(self.loss, self.peak_bytes, self.seconds))]


@dataclass
class SyntheticSet:
    frames: torch.Tensor  # [num_items, n_syn, C, H, W]
    labels: np.ndarray
    schedule: CompressionSchedule
    num_classes: int = 0
    history: History = field(default_factory=History, compare=False)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.num_classes:
            self.num_classes = int(self.labels.max()) + 1 if len(self.labels) else 0
        if self.frames.shape[0] != len(self.labels):
            raise InvalidInputError("one label per synthetic item required")
        counts = np.bincount(self.labels, minlength=self.num_classes)
        if len(self.labels) and len(set(counts.tolist())) != 1:
            raise InvalidInputError(f"every class needs the same item count, got {counts.tolist()}")
        if not torch.isfinite(self.frames).all():
            raise InvalidInputError("synthetic frames contain non-finite values")

    @property
    def ipc(self) -> int:
        return len(self.labels) // self.num_classes if self.num_classes else 0

    def materialize(self, phi: ParametricInterpolator | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        """Interpolated clips ``[num_items, l_syn, C, H, W]`` and labels."""
        s = self.schedule
        with torch.no_grad():
            clips = interpolate(self.frames.detach(), s.l_syn, s.interp, phi)
        return clips, torch.as_tensor(self.labels)


@dataclass
class ExpertTrajectory:
    snapshots: list  # flat parameter vectors
    epochs: list
    arch: ArchSpec | None
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.snapshots) < 1:
            raise InvalidInputError("a trajectory needs at least one snapshot")
        if len({s.numel() for s in self.snapshots}) != 1:
            raise InvalidInputError("all snapshots must have the same length")


# ---------------------------------------------------------------- losses

def _check_batches(*batches):
    for b in batches:
        if b.shape[0] == 0:
            raise InvalidInputError("empty batch")


def loss_distribution(model: ModelState, real_batch: torch.Tensor, syn_batch: torch.Tensor,
                      feature_fn: Callable | None = None) -> torch.Tensor:
    """Squared distance between mean embeddings of a real and a synthetic batch of one class."""
    _check_batches(real_batch, syn_batch)
    embed = feature_fn or (lambda x: forward(model, x, taps=True)[1])
    with torch.set_grad_enabled(real_batch.requires_grad):
        real_mean = embed(real_batch).mean(0)
    syn_mean = embed(syn_batch).mean(0)
    return ((real_mean - syn_mean) ** 2).sum()


def gradient_distance(g_real: dict, g_syn: dict) -> torch.Tensor:
    """Sum over layers and output channels of ``1 - cos(g_real, g_syn)``.

    One-dimensional tensors (biases, norm affines) are skipped; an output-channel
    group in which either gradient vanishes contributes zero.
    """
    total = None
    for name, gr in g_real.items():
        if gr.ndim < 2:
            continue
        gs = g_syn[name]
        a = gr.reshape(gr.shape[0], -1)
        b = gs.reshape(gs.shape[0], -1)
        na, nb = a.norm(dim=1), b.norm(dim=1)
        ok = (na > 0) & (nb > 0)
        cos = (a * b).sum(1) / torch.where(ok, na * nb, torch.ones_like(na))
        d = torch.where(ok, 1.0 - cos, torch.zeros_like(cos)).sum()
        total = d if total is None else total + d
    if total is None:
        return torch.zeros(())
    return total


def loss_gradient(model: ModelState, real_batch: torch.Tensor, syn_batch: torch.Tensor,
                  label: int) -> torch.Tensor:
    """Gradient matching: distance between classification-loss gradients on real vs synthetic data."""
    _check_batches(real_batch, syn_batch)
    flat = model.flat.detach().requires_grad_(True)

    def grads(x, create_graph):
        y = torch.full((x.shape[0],), label, dtype=torch.long)
        loss = F.cross_entropy(forward(model, x, flat=flat), y)
        (g,) = torch.autograd.grad(loss, flat, create_graph=create_graph)
        return model.unflatten(g)

    g_real = {k: v.detach() for k, v in grads(real_batch, False).items()}
    g_syn = grads(syn_batch, True)
    return gradient_distance(g_real, g_syn)


def cross_entropy_loss(arch: ArchSpec, template: ModelState):
    def fn(flat, x, y):
        return F.cross_entropy(forward(template, x, flat=flat), y)
    return fn


def loss_trajectory(expert: ExpertTrajectory, start_epoch: int, syn_frames: torch.Tensor,
                    syn_labels: torch.Tensor, inner: InnerConfig,
                    student_loss: Callable | None = None, batch_syn: int = 0,
                    rng: np.random.Generator | None = None) -> torch.Tensor:
    """Normalised endpoint distance after ``syn_steps`` unrolled student steps from an expert snapshot.

    ``student_loss(flat, x, y)`` defaults to cross-entropy of the expert's architecture.
    """
    if start_epoch > inner.max_start_epoch:
        raise InvalidInputError(f"start_epoch {start_epoch} exceeds max_start_epoch {inner.max_start_epoch}")
    target_epoch = start_epoch + inner.expert_epochs
    if target_epoch >= len(expert.snapshots):
        raise InvalidInputError(f"trajectory has {len(expert.snapshots)} snapshots, need index {target_epoch}")
    start = expert.snapshots[start_epoch].to(syn_frames.dtype)
    target = expert.snapshots[target_epoch].to(syn_frames.dtype)
    denom = ((start - target) ** 2).sum()
    if denom == 0:
        raise DegenerateTrajectoryError(f"expert did not move between epochs {start_epoch} and {target_epoch}")
    if student_loss is None:
        template = build_model(expert.arch, 0, syn_frames.dtype)
        student_loss = cross_entropy_loss(expert.arch, template)
    theta = start.clone().requires_grad_(True)
    n = syn_frames.shape[0]
    for _ in range(inner.syn_steps):
        if batch_syn and batch_syn < n:
            idx = torch.as_tensor((rng or np.random.default_rng()).permutation(n)[:batch_syn])
            x, y = syn_frames[idx], syn_labels[idx]
        else:
            x, y = syn_frames, syn_labels
        (g,) = torch.autograd.grad(student_loss(theta, x, y), theta, create_graph=True)
        theta = theta - inner.lr_teacher * g
    return ((theta - target) ** 2).sum() / denom


# ---------------------------------------------------------------- experts

def _accuracy(model: ModelState, flat, x, y, batch: int = 256) -> float:
    correct = 0
    with torch.no_grad():
        for i in range(0, len(x), batch):
            correct += int((forward(model, x[i:i + batch], flat=flat).argmax(1) == y[i:i + batch]).sum())
    return correct / len(x)


def generate_expert_trajectories(dataset: VideoDataset, arch: ArchSpec, count: int, epochs: int,
                                 lr_teacher: float = 0.01, seed: int = 0, batch_size: int = 32,
                                 momentum: float = 0.0) -> list[ExpertTrajectory]:
    """Train ``count`` models on real clips with SGD, snapshotting parameters at every epoch boundary."""
    if len(dataset) == 0:
        raise InvalidInputError("empty dataset")
    x, y = dataset.as_tensors()
    out = []
    for t in range(count):
        tseed = seed * 1000 + t
        model = build_model(arch, tseed)
        flat = model.flat.clone().requires_grad_(True)
        opt = torch.optim.SGD([flat], lr=lr_teacher, momentum=momentum)
        rng = np.random.default_rng(tseed)
        snaps, accs = [flat.detach().clone()], [_accuracy(model, flat, x, y)]
        ok = True
        for epoch in range(epochs):
            order = rng.permutation(len(x))
            for i in range(0, len(order), batch_size):
                idx = torch.as_tensor(order[i:i + batch_size])
                loss = F.cross_entropy(forward(model, x[idx], flat=flat), y[idx])
                if not torch.isfinite(loss):
                    log.warning("expert %d diverged at epoch %d (loss %s); rejected", t, epoch, float(loss))
                    ok = False
                    break
                opt.zero_grad()
                loss.backward()
                opt.step()
            if not ok:
                break
            snaps.append(flat.detach().clone())
        if not ok:
            continue
        accs.append(_accuracy(model, flat, x, y))
        out.append(ExpertTrajectory(snaps, list(range(len(snaps))), arch, tseed,
                                    {"train_acc_first": accs[0], "train_acc_last": accs[-1]}))
    if count and not out:
        raise NonFiniteLossError("every expert trajectory diverged")
    return out


# ---------------------------------------------------------------- driver

class ActivationMeter:
    """Counts bytes of tensors that autograd saves for backward inside the context."""

    def __init__(self):
        self.bytes = 0

    def _pack(self, t):
        self.bytes += t.numel() * t.element_size()
        return t

    def __enter__(self):
        self._ctx = torch.autograd.graph.saved_tensors_hooks(self._pack, lambda t: t)
        self._ctx.__enter__()
        return self

    def __exit__(self, *exc):
        self._ctx.__exit__(*exc)


def class_real_batches(dataset: VideoDataset, n_real: int, batch: int, rng: np.random.Generator,
                       hflip: float = 0.0) -> dict[int, torch.Tensor]:
    """Per class, up to ``batch`` random clips reduced to ``n_real`` stratified frames each."""
    labels = dataset.labels
    out = {}
    for c in range(dataset.num_classes):
        idx = rng.permutation(np.flatnonzero(labels == c))[:batch]
        clips = []
        for i in idx:
            frames = dataset.clips[i].frames
            clips.append(frames[torch.as_tensor(stratified_indices(frames.shape[0], n_real, rng))])
        x = torch.stack(clips)
        if hflip:
            x = augment_hflip(x, hflip, int(rng.integers(2**31)))
        out[c] = x
    return out


def init_synthetic(dataset: VideoDataset, ipc: int, n_frames: int, init: str, rng: np.random.Generator) -> torch.Tensor:
    """``[num_classes * ipc, n_frames, C, H, W]`` from random real clips (stratified frames) or noise."""
    frames = []
    c_, h, w = dataset.frame_shape
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        pick = rng.choice(idx, size=ipc, replace=len(idx) < ipc)
        for i in pick:
            if init == "real":
                clip = dataset.clips[i].frames
                frames.append(clip[torch.as_tensor(stratified_indices(clip.shape[0], n_frames, rng))])
            else:
                frames.append(torch.as_tensor(rng.random((n_frames, c_, h, w)), dtype=torch.float32))
    return torch.stack(frames)


def segmented_loss(matcher: str, model: ModelState, real: dict, syn: torch.Tensor, labels: np.ndarray,
                   pairing, backward: bool = False, meter_peak: list | None = None) -> float:
    """Sum of per-segment matcher losses; optionally back-propagates one segment at a time."""
    total = 0.0
    for r_idx, s_idx in pairing.pairs:
        r_sel, s_sel = torch.as_tensor(r_idx), torch.as_tensor(s_idx)
        with ActivationMeter() as meter:
            loss = None
            for c, rb in real.items():
                sb = syn[torch.as_tensor(np.flatnonzero(labels == c))][:, s_sel]
                rb = rb[:, r_sel]
                if matcher == "distribution_dm":
                    l = loss_distribution(model, rb, sb)
                else:
                    l = loss_gradient(model, rb, sb, c)
                loss = l if loss is None else loss + l
        if meter_peak is not None:
            meter_peak.append(meter.bytes)
        if backward:
            loss.backward()
        total += float(loss.detach())
    return total


def _check_finite(value: float, it: int, **diag):
    if not math.isfinite(value):
        raise NonFiniteLossError(f"non-finite loss {value} at iteration {it}", it, diag)


def distill(dataset: VideoDataset, schedule: CompressionSchedule, cfg: MatchConfig, seed: int,
            arch: ArchSpec, ipc: int = 1, experts: list[ExpertTrajectory] | None = None,
            callback: Callable | None = None) -> SyntheticSet:
    """Learn ``ipc`` synthetic clips per class of ``n_syn`` frames each.

    Every iteration draws a per-class real batch (``n_real`` stratified frames per clip),
    pairs real and synthetic segments, sums the matcher loss over segments and takes a
    momentum-SGD step on the synthetic frames. Gradient and distribution matching use a
    freshly initialised ``arch`` network each iteration; trajectory matching trains a
    student on the interpolated synthetic clips and needs ``experts`` and ``k == 1``.
    """
    rng = np.random.default_rng(seed)
    fl = dataset.clips[0].num_frames
    if fl < schedule.n_real:
        raise InvalidConfigError(f"clips have {fl} frames, schedule needs n_real={schedule.n_real}")
    if cfg.matcher == "trajectory_mtt":
        if not experts:
            raise InvalidConfigError("trajectory matching needs expert trajectories")
        if schedule.k != 1:
            raise InvalidConfigError("trajectory matching works on whole interpolated clips; use k=1")
    syn = init_synthetic(dataset, ipc, schedule.n_syn, cfg.init, rng).requires_grad_(True)
    labels = np.repeat(np.arange(dataset.num_classes), ipc)
    opt = torch.optim.SGD([syn], lr=cfg.lr_img, momentum=cfg.momentum)
    hist = History()
    pairing = segment_pairs(schedule, schedule.n_real)
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        opt.zero_grad()
        peaks: list = []
        if cfg.matcher == "trajectory_mtt":
            loss_value = _trajectory_step(syn, labels, schedule, cfg, experts, rng, peaks)
        else:
            model = build_model(arch.with_frames(schedule.n_real), int(rng.integers(2**31)))
            real = class_real_batches(dataset, schedule.n_real, cfg.batch_real, rng, cfg.hflip)
            loss_value = segmented_loss(cfg.matcher, model, real, syn, labels, pairing, True, peaks)
        _check_finite(loss_value, it, grad_norm=float(syn.grad.norm()) if syn.grad is not None else None)
        opt.step()
        hist.loss.append(loss_value)
        hist.peak_bytes.append(max(peaks) if peaks else 0)
        hist.seconds.append(time.perf_counter() - t0)
        if callback is not None:
            callback(it, loss_value)
        if it % 50 == 0:
            log.info("distill it %d loss %.4f", it, loss_value)
    return SyntheticSet(syn.detach().clone(), labels, schedule, dataset.num_classes, hist,
                        {"matcher": cfg.matcher, "seed": seed, "arch": arch.to_dict()})


def _trajectory_step(syn, labels, schedule, cfg, experts, rng, peaks) -> float:
    expert = experts[int(rng.integers(len(experts)))]
    hi = min(cfg.inner.max_start_epoch, len(expert.snapshots) - 1 - cfg.inner.expert_epochs)
    if hi < 0:
        raise InvalidConfigError("expert trajectories are too short for expert_epochs")
    start = int(rng.integers(0, hi + 1))
    clips = interpolate(syn, schedule.l_syn, "linear" if schedule.interp == "linear" else "duplicate")
    y = torch.as_tensor(labels)
    with ActivationMeter() as meter:
        loss = loss_trajectory(expert, start, clips, y, cfg.inner, batch_syn=cfg.batch_syn, rng=rng)
    peaks.append(meter.bytes)
    loss.backward()
    return float(loss.detach())


def smoothed(values, window: int = 10) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if len(v) < window:
        return v
    return np.convolve(v, np.ones(window) / window, mode="valid")


def with_frames(synset: SyntheticSet, frames: torch.Tensor) -> SyntheticSet:
    return replace(synset, frames=frames)
