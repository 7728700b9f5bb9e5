"""scikit-learn style wrappers around the functional API.

Videos are arrays shaped ``[n_clips, frames, channels, height, width]`` with values in [0, 1];
labels are integers ``0..n_classes-1``. Distillers and coreset selectors follow the
``fit_resample`` convention: they return a (much smaller) training set ``(X_syn, y_syn)``.
"""
from __future__ import annotations

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .disentangle import StageConfig, distill_disentangled
from .evaluation import EvalConfig, coreset, predict, train_classifier
from .exceptions import InvalidInputError
from .matching import InnerConfig, MatchConfig, distill, generate_expert_trajectories
from .models import ArchSpec
from .temporal import CompressionSchedule, InterpolatorConfig, interpolate, train_parametric_interpolator
from .video import VideoDataset


def check_videos(X, y=None, *, num_classes: int | None = None):
    """Validate and convert to ``float32`` tensors; returns ``X`` or ``(X, y)``."""
    x = torch.as_tensor(np.asarray(X, dtype=np.float32))
    if x.ndim != 5 or min(x.shape) < 1:
        raise InvalidInputError(f"X must be [n_clips, frames, channels, height, width], got {tuple(x.shape)}")
    if not torch.isfinite(x).all():
        raise InvalidInputError("X contains non-finite values")
    if y is None:
        return x
    labels = np.asarray(y)
    if labels.ndim != 1 or len(labels) != len(x):
        raise InvalidInputError(f"y must be 1-D with {len(x)} entries")
    if not np.issubdtype(labels.dtype, np.integer):
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise InvalidInputError("y must hold integer class ids")
        labels = labels.astype(np.int64)
    if labels.min() < 0:
        raise InvalidInputError("class ids must be non-negative")
    k = num_classes or int(labels.max()) + 1
    if labels.max() >= k:
        raise InvalidInputError(f"class id {labels.max()} >= num_classes {k}")
    return x, torch.as_tensor(labels, dtype=torch.long)


def _dataset(X, y) -> VideoDataset:
    x, labels = check_videos(X, y)
    return VideoDataset.from_tensors(x, labels, int(labels.max()) + 1)


def _arch(name: str, shape, num_classes: int) -> ArchSpec:
    key = name.lower()
    if key == "minic3d":
        return ArchSpec.mini_c3d(shape, num_classes)
    if key in ("convnetd4", "convnetd4_2d"):
        return ArchSpec.convnet_d4(shape, num_classes)
    if key in ("gru", "lstm"):
        return ArchSpec.cnn_rnn(shape, num_classes, key.upper())
    raise InvalidInputError(f"unknown architecture {name!r}")


class VideoDistiller(BaseEstimator):
    """Segmented-matching distillation into ``ipc`` synthetic clips per class."""

    def __init__(self, matcher="distribution_dm", ipc=1, n_syn=None, n_real=None, k=1, interp="duplicate",
                 iterations=200, lr_img=1.0, batch_real=16, momentum=0.5, arch="MiniC3D",
                 syn_steps=10, expert_epochs=1, max_start_epoch=10, lr_teacher=0.01, num_experts=3,
                 random_state=0):
        self.matcher = matcher
        self.ipc = ipc
        self.n_syn = n_syn
        self.n_real = n_real
        self.k = k
        self.interp = interp
        self.iterations = iterations
        self.lr_img = lr_img
        self.batch_real = batch_real
        self.momentum = momentum
        self.arch = arch
        self.syn_steps = syn_steps
        self.expert_epochs = expert_epochs
        self.max_start_epoch = max_start_epoch
        self.lr_teacher = lr_teacher
        self.num_experts = num_experts
        self.random_state = random_state

    def fit(self, X, y):
        ds = _dataset(X, y)
        f = ds.clips[0].num_frames
        schedule = CompressionSchedule(self.n_syn or f, self.n_real or f, self.k, self.interp, f)
        cfg = MatchConfig(self.matcher, self.lr_img, self.batch_real, 0, self.iterations, self.momentum,
                          inner=InnerConfig(self.syn_steps, self.expert_epochs, self.max_start_epoch, self.lr_teacher))
        arch = _arch(self.arch, (f, *ds.frame_shape), ds.num_classes)
        experts = None
        if self.matcher == "trajectory_mtt":
            experts = generate_expert_trajectories(ds, arch, self.num_experts,
                                                   self.max_start_epoch + self.expert_epochs + 1,
                                                   self.lr_teacher, self.random_state)
        self.synthetic_set_ = distill(ds, schedule, cfg, self.random_state, arch, self.ipc, experts)
        self.n_classes_ = ds.num_classes
        return self

    def resample(self):
        check_is_fitted(self, "synthetic_set_")
        x, y = self.synthetic_set_.materialize()
        return x.numpy(), y.numpy()

    def fit_resample(self, X, y):
        return self.fit(X, y).resample()


class DisentangledDistiller(BaseEstimator):
    """Static memory by gradient matching on frames, then dynamic memory plus combiner."""

    def __init__(self, spc=1, dpc=1, static_iterations=200, dynamic_iterations=200, lr_static=1.0,
                 lr_dynamic=100.0, lr_hal=1e-2, dynamic_matcher="distribution_dm", batch_real=16,
                 variant="single_block", frames_dynamic=0, budget_bytes=None, random_state=0):
        self.spc = spc
        self.dpc = dpc
        self.static_iterations = static_iterations
        self.dynamic_iterations = dynamic_iterations
        self.lr_static = lr_static
        self.lr_dynamic = lr_dynamic
        self.lr_hal = lr_hal
        self.dynamic_matcher = dynamic_matcher
        self.batch_real = batch_real
        self.variant = variant
        self.frames_dynamic = frames_dynamic
        self.budget_bytes = budget_bytes
        self.random_state = random_state

    def fit(self, X, y):
        ds = _dataset(X, y)
        stage = StageConfig(self.spc, self.dpc, self.lr_dynamic, self.lr_hal, self.frames_dynamic,
                            variant=self.variant, static_iterations=self.static_iterations,
                            dynamic_iterations=self.dynamic_iterations)
        static_cfg = MatchConfig("gradient_dc", self.lr_static, self.batch_real, iterations=self.static_iterations)
        dynamic_cfg = MatchConfig(self.dynamic_matcher, 1.0, self.batch_real, iterations=self.dynamic_iterations)
        self.artifact_ = distill_disentangled(ds, static_cfg, dynamic_cfg, stage, self.random_state,
                                              budget_bytes=self.budget_bytes)
        self.n_classes_ = ds.num_classes
        return self

    def resample(self):
        check_is_fitted(self, "artifact_")
        x, y = self.artifact_.materialize()
        return x.numpy(), y.numpy()

    def fit_resample(self, X, y):
        return self.fit(X, y).resample()


class CoresetSelector(BaseEstimator):
    """Pick ``ipc`` real clips per class: ``random``, ``herding`` or ``kcenter``."""

    def __init__(self, ipc=1, method="random", random_state=0):
        self.ipc = ipc
        self.method = method
        self.random_state = random_state

    def fit(self, X, y):
        ds = _dataset(X, y)
        self.selection_ = coreset(ds, self.ipc, self.method, seed=self.random_state)
        self.support_ = np.asarray(self.selection_.meta["indices"])
        return self

    def fit_resample(self, X, y):
        self.fit(X, y)
        x, labels = self.selection_.materialize()
        return x.numpy(), labels.numpy()


class VideoClassifier(ClassifierMixin, BaseEstimator):
    """A small video network trained with SGD (the evaluation protocol)."""

    def __init__(self, arch="MiniC3D", epochs=200, lr=0.05, batch_size=16, momentum=0.9, weight_decay=5e-4,
                 shift=4, random_state=0):
        self.arch = arch
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.shift = shift
        self.random_state = random_state

    def fit(self, X, y):
        x, labels = check_videos(X, y)
        self.classes_ = np.arange(int(labels.max()) + 1)
        spec = _arch(self.arch, tuple(x.shape[1:]), len(self.classes_))
        cfg = EvalConfig(self.epochs, self.lr, self.batch_size, self.momentum, self.weight_decay, shift=self.shift)
        self.model_ = train_classifier(x, labels, spec, self.random_state, cfg)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return predict(self.model_, check_videos(X)).numpy()


class FrameInterpolator(TransformerMixin, BaseEstimator):
    """Stretch ``[n, n_syn, C, H, W]`` frame stacks to ``l_syn`` frames.

    ``fit`` is a no-op for ``duplicate`` and ``linear``; for ``parametric`` it trains the
    refinement network on full-length clips ``X``.
    """

    def __init__(self, n_syn=4, l_syn=16, method="duplicate", epochs=60, lr=1e-3, random_state=0):
        self.n_syn = n_syn
        self.l_syn = l_syn
        self.method = method
        self.epochs = epochs
        self.lr = lr
        self.random_state = random_state

    def fit(self, X, y=None):
        self.phi_ = None
        if self.method == "parametric":
            x = check_videos(X)
            ds = VideoDataset.from_tensors(x, torch.zeros(len(x), dtype=torch.long), 1)
            self.phi_ = train_parametric_interpolator(
                ds, self.n_syn, self.l_syn, InterpolatorConfig(self.epochs, self.lr, seed=self.random_state))
        return self

    def transform(self, X):
        check_is_fitted(self, "phi_")
        x = check_videos(X)
        with torch.no_grad():
            return interpolate(x, self.l_syn, self.method, self.phi_).numpy()
