"""Small video networks driven through flat parameter vectors.

Every network is held as an immutable :class:`ModelState` (one flat tensor plus a
shape manifest). :func:`forward` runs the architecture functionally on those
parameters, so the same code path serves ordinary training, matching losses that
differentiate w.r.t. the input, and unrolled inner loops that differentiate
through parameter updates.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from functools import lru_cache

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .exceptions import InvalidConfigError, InvalidInputError

FAMILIES = ("MiniC3D", "ConvNetD4_2D", "CNN_RNN")
RNN_KINDS = ("GRU", "LSTM", "none")

DEFAULT_WIDTHS = {
    "MiniC3D": (16, 32, 64),
    "ConvNetD4_2D": (32, 32, 32, 32),
    "CNN_RNN": (16, 32, 64, 64),
}


@dataclass(frozen=True)
class ArchSpec:
    family: str
    input_shape: tuple[int, int, int, int]  # (F, C, H, W)
    num_classes: int
    widths: tuple[int, ...] = ()
    rnn_kind: str = "none"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidConfigError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.rnn_kind not in RNN_KINDS:
            raise InvalidConfigError(f"unknown rnn_kind {self.rnn_kind!r}")
        if (self.family == "CNN_RNN") != (self.rnn_kind != "none"):
            raise InvalidConfigError(f"family {self.family} is inconsistent with rnn_kind {self.rnn_kind}")
        widths = tuple(self.widths) or DEFAULT_WIDTHS[self.family]
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        need = {"MiniC3D": 3, "ConvNetD4_2D": 4, "CNN_RNN": 4}[self.family]
        if len(widths) != need:
            raise InvalidConfigError(f"{self.family} takes {need} widths, got {len(widths)}")
        if min(widths) < 1 or self.num_classes < 1 or len(self.input_shape) != 4 or min(self.input_shape) < 1:
            raise InvalidConfigError("widths, num_classes and input_shape must be positive")

    @classmethod
    def mini_c3d(cls, input_shape, num_classes, widths=()) -> "ArchSpec":
        return cls("MiniC3D", tuple(input_shape), num_classes, tuple(widths))

    @classmethod
    def convnet_d4(cls, input_shape, num_classes, widths=()) -> "ArchSpec":
        return cls("ConvNetD4_2D", tuple(input_shape), num_classes, tuple(widths))

    @classmethod
    def cnn_rnn(cls, input_shape, num_classes, rnn_kind="GRU", widths=()) -> "ArchSpec":
        return cls("CNN_RNN", tuple(input_shape), num_classes, tuple(widths), rnn_kind)

    def with_frames(self, frames: int) -> "ArchSpec":
        return replace(self, input_shape=(frames, *self.input_shape[1:]))

    def make_module(self) -> nn.Module:
        return make_module(self)

    def to_dict(self) -> dict:
        return {"family": self.family, "input_shape": list(self.input_shape), "num_classes": self.num_classes,
                "widths": list(self.widths), "rnn_kind": self.rnn_kind}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(d["family"], tuple(d["input_shape"]), d["num_classes"], tuple(d["widths"]), d["rnn_kind"])


class _InstanceNorm(nn.GroupNorm):
    """Per-channel normalisation that degrades to the affine map on single-value inputs.

    A one-frame segment reaches the last MiniC3D block as a 1x1x1 volume; normalising
    it would zero the activation and cut every gradient, so it is passed through instead.
    """

    def forward(self, x):
        if x[0, 0].numel() == 1:
            shape = (1, -1) + (1,) * (x.ndim - 2)
            return x * self.weight.view(shape) + self.bias.view(shape)
        return super().forward(x)


def _instance_norm(c: int) -> nn.GroupNorm:
    return _InstanceNorm(c, c, affine=True)


def _pool(x: torch.Tensor, kernel: tuple[int, ...], kind: str) -> torch.Tensor:
    # kernels shrink to the remaining extent so tiny inputs never collapse to zero size
    k = tuple(min(k_, s) for k_, s in zip(kernel, x.shape[2:]))
    fn = {("max", 3): F.max_pool3d, ("avg", 3): F.avg_pool3d,
          ("max", 2): F.max_pool2d, ("avg", 2): F.avg_pool2d}[kind, len(k)]
    return fn(x, k, k, ceil_mode=True)


class MiniC3D(nn.Module):
    """Three strided 3x7x7 conv blocks, max pooling, 1x1x1 conv classifier, global average."""

    def __init__(self, in_channels: int, widths, num_classes: int):
        super().__init__()
        chans = (in_channels, *widths)
        self.blocks = nn.ModuleList()
        for cin, cout in zip(chans[:-1], chans[1:]):
            self.blocks.append(nn.Sequential(
                nn.Conv3d(cin, cout, (3, 7, 7), stride=(1, 2, 2), padding=(1, 3, 3)),
                _instance_norm(cout),
                nn.ReLU(),
            ))
        self.classifier = nn.Conv3d(chans[-1], num_classes, 1)
        self.pools = ((1, 2, 2), (2, 2, 2), (2, 2, 2))

    def forward(self, x, taps: bool = False):
        h = x.transpose(1, 2)  # [B, C, F, H, W]
        for block, k in zip(self.blocks, self.pools):
            h = _pool(block(h), k, "max")
        logits = self.classifier(h).mean(dim=(2, 3, 4))
        if taps:
            # time-averaged so clips of different lengths share one feature space
            return logits, h.mean(dim=2).flatten(1)
        return logits


class _FrameEncoder(nn.Module):
    def __init__(self, in_channels: int, widths):
        super().__init__()
        chans = (in_channels, *widths)
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.Conv2d(cin, cout, 3, padding=1), _instance_norm(cout), nn.ReLU())
            for cin, cout in zip(chans[:-1], chans[1:])
        )

    def forward(self, x):
        for block in self.blocks:
            x = _pool(block(x), (2, 2), "avg")
        return x.flatten(1)


def _encoded_size(widths, h: int, w: int) -> int:
    for _ in widths:
        h, w = (h + 1) // 2, (w + 1) // 2
    return widths[-1] * h * w


class ConvNetD4(nn.Module):
    """Four-block 2D conv net applied per frame; frame features are averaged over time."""

    def __init__(self, in_channels: int, widths, num_classes: int, hw: tuple[int, int]):
        super().__init__()
        self.encoder = _FrameEncoder(in_channels, widths)
        self.classifier = nn.Linear(_encoded_size(widths, *hw), num_classes)

    def frame_features(self, frames):
        return self.encoder(frames)

    def forward(self, x, taps: bool = False):
        b, f = x.shape[:2]
        feats = self.encoder(x.flatten(0, 1)).view(b, f, -1).mean(1)
        logits = self.classifier(feats)
        return (logits, feats) if taps else logits


class CNNRNN(nn.Module):
    """Three-block 2D conv encoder per frame, single-layer GRU/LSTM over time, linear head."""

    def __init__(self, in_channels: int, widths, num_classes: int, hw: tuple[int, int], rnn_kind: str):
        super().__init__()
        *conv, hidden = widths
        self.encoder = _FrameEncoder(in_channels, conv)
        rnn = nn.GRU if rnn_kind == "GRU" else nn.LSTM
        self.rnn = rnn(_encoded_size(conv, *hw), hidden, num_layers=1, batch_first=True)
        self.classifier = nn.Linear(hidden, num_classes)

    def forward(self, x, taps: bool = False):
        b, f = x.shape[:2]
        seq = self.encoder(x.flatten(0, 1)).view(b, f, -1)
        out, _ = self.rnn(seq)
        feats = out[:, -1]
        logits = self.classifier(feats)
        return (logits, feats) if taps else logits


def make_module(spec: ArchSpec) -> nn.Module:
    _, c, h, w = spec.input_shape
    if spec.family == "MiniC3D":
        return MiniC3D(c, spec.widths, spec.num_classes)
    if spec.family == "ConvNetD4_2D":
        return ConvNetD4(c, spec.widths, spec.num_classes, (h, w))
    return CNNRNN(c, spec.widths, spec.num_classes, (h, w), spec.rnn_kind)


@lru_cache(maxsize=64)
def _template(spec) -> nn.Module:
    # skeleton whose own parameters are never used; weights always come from a ModelState
    return spec.make_module()


@dataclass(frozen=True)
class ModelState:
    """Immutable network parameters: one flat vector plus an ordered shape manifest."""

    spec: "ArchSpec | object"  # any hashable spec with make_module()
    flat: torch.Tensor
    manifest: tuple[tuple[str, tuple[int, ...]], ...]
    init_seed: int = 0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        n = sum(math.prod(s) for _, s in self.manifest)
        if self.flat.ndim != 1 or self.flat.numel() != n:
            raise InvalidInputError(f"flat vector has {self.flat.numel()} elements, manifest needs {n}")

    @property
    def num_params(self) -> int:
        return self.flat.numel()

    def unflatten(self, flat: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
        return unflatten(self.flat if flat is None else flat, self.manifest)

    def with_flat(self, flat: torch.Tensor) -> "ModelState":
        return replace(self, flat=flat)

    def to(self, dtype: torch.dtype) -> "ModelState":
        return replace(self, flat=self.flat.to(dtype))

    def with_params(self, **tensors: torch.Tensor) -> "ModelState":
        """Copy with named parameters replaced (names use ``__`` for ``.``)."""
        params = {k: v.clone() for k, v in self.unflatten().items()}
        for key, value in tensors.items():
            name = key.replace("__", ".")
            if name not in params:
                raise InvalidInputError(f"no parameter named {name!r}")
            params[name] = torch.as_tensor(value, dtype=self.flat.dtype).broadcast_to(params[name].shape).clone()
        return replace(self, flat=flatten(params, self.manifest))


def unflatten(flat: torch.Tensor, manifest) -> dict[str, torch.Tensor]:
    out, i = {}, 0
    for name, shape in manifest:
        n = math.prod(shape)
        out[name] = flat[i:i + n].view(shape)
        i += n
    return out


def flatten(params: dict[str, torch.Tensor], manifest) -> torch.Tensor:
    return torch.cat([params[name].reshape(-1) for name, _ in manifest])


def build_model(spec, seed: int, dtype: torch.dtype = torch.float32) -> ModelState:
    """Deterministically initialise ``spec`` (its module's own init under ``seed``)."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        module = spec.make_module()
    named = list(module.named_parameters())
    manifest = tuple((n, tuple(p.shape)) for n, p in named)
    flat = torch.cat([p.detach().reshape(-1) for _, p in named]).to(dtype)
    return ModelState(spec, flat, manifest, seed)


def check_batch(spec: ArchSpec, batch: torch.Tensor) -> None:
    if batch.ndim != 5:
        raise InvalidInputError(f"batch must be [B, F, C, H, W], got shape {tuple(batch.shape)}")
    if tuple(batch.shape[2:]) != spec.input_shape[1:]:
        raise InvalidInputError(
            f"batch frame shape {tuple(batch.shape[2:])} does not match architecture {spec.input_shape[1:]}")
    if batch.shape[0] < 1 or batch.shape[1] < 1:
        raise InvalidInputError("batch needs at least one item and one frame")


def forward(model: ModelState, batch: torch.Tensor, taps: bool = False, flat: torch.Tensor | None = None):
    """Run ``model`` on ``[B, F, C, H, W]``; with ``taps`` also return pre-classifier features.

    ``flat`` substitutes a parameter vector (e.g. one carrying autograd history).
    Clip length F may differ from the nominal length in ``spec``.
    """
    check_batch(model.spec, batch)
    return apply_module(model, batch, flat=flat, taps=taps)


def apply_module(model: ModelState, *args, flat: torch.Tensor | None = None, **kwargs):
    """Call the network behind ``model`` functionally on its (or ``flat``) parameters."""
    return functional_call(_template(model.spec), model.unflatten(flat), args, kwargs)


def frame_features(model: ModelState, frames: torch.Tensor) -> torch.Tensor:
    """Per-frame features ``[n, D]`` from a ConvNetD4_2D model for ``[n, C, H, W]`` frames."""
    if model.spec.family != "ConvNetD4_2D":
        raise InvalidInputError("per-frame features need a ConvNetD4_2D model")
    params = _strip(model.unflatten(), "encoder.")
    return functional_call(_template(model.spec).encoder, params, (frames,))


def _strip(params: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}
