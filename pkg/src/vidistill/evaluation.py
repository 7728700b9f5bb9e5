"""Evaluation protocol, coreset baselines, storage accounting and dynamics analysis."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import InvalidInputError
from .matching import SyntheticSet
from .models import ArchSpec, ModelState, build_model, forward, frame_features
from .temporal import CompressionSchedule
from .video import VideoClip, VideoDataset, augment_hflip, augment_shift

log = logging.getLogger(__name__)

BYTES_PER_ELEMENT = 4  # stored as float32
MIB = 2 ** 20


@dataclass
class EvalConfig:
    epochs: int = 200
    lr: float = 0.01
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 5e-4
    hflip: float = 0.0
    shift: int = 0  # max random translation in pixels, 0 = off


@dataclass
class EvalReport:
    accuracy_mean: float
    accuracy_std: float
    accuracies: list
    per_class: list
    arch: ArchSpec
    epochs: int
    lr: float

    def __post_init__(self):
        if not (0 <= self.accuracy_mean <= 1 and self.accuracy_std >= 0):
            raise InvalidInputError("accuracies must lie in [0, 1] and std must be non-negative")

    def summary(self) -> str:
        return (f"{self.arch.family}{'/' + self.arch.rnn_kind if self.arch.rnn_kind != 'none' else ''}: "
                f"{100 * self.accuracy_mean:.1f} +- {100 * self.accuracy_std:.1f} % over {len(self.accuracies)} seed(s)")


def materialize(material) -> tuple[torch.Tensor, torch.Tensor]:
    """Training clips and labels from a synthetic set, a distilled artifact or an ``(x, y)`` pair."""
    if isinstance(material, tuple):
        x, y = material
        return torch.as_tensor(x, dtype=torch.float32), torch.as_tensor(y, dtype=torch.long)
    if isinstance(material, VideoDataset):
        return material.as_tensors()
    if hasattr(material, "materialize"):
        return material.materialize()
    raise InvalidInputError(f"cannot materialise {type(material).__name__}")


def train_classifier(x: torch.Tensor, y: torch.Tensor, arch: ArchSpec, seed: int,
                     cfg: EvalConfig) -> ModelState:
    """SGD training from a fresh ``arch`` initialisation; learning rate drops 10x at half time."""
    model = build_model(arch, seed)
    flat = model.flat.clone().requires_grad_(True)
    opt = torch.optim.SGD([flat], lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, [max(1, cfg.epochs // 2)], 0.1)
    rng = np.random.default_rng(seed)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        for i in range(0, len(order), cfg.batch_size):
            idx = torch.as_tensor(order[i:i + cfg.batch_size])
            xb = x[idx]
            if cfg.hflip:
                xb = augment_hflip(xb, cfg.hflip, int(rng.integers(2**31)))
            if cfg.shift:
                xb = augment_shift(xb, cfg.shift, int(rng.integers(2**31)))
            loss = F.cross_entropy(forward(model, xb, flat=flat), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        sched.step()
    return model.with_flat(flat.detach())


def predict(model: ModelState, x: torch.Tensor, batch: int = 128) -> torch.Tensor:
    with torch.no_grad():
        return torch.cat([forward(model, x[i:i + batch]).argmax(1) for i in range(0, len(x), batch)])


def per_class_accuracy(pred: torch.Tensor, y: torch.Tensor, num_classes: int) -> np.ndarray:
    out = np.full(num_classes, np.nan)
    for c in range(num_classes):
        m = y == c
        if m.any():
            out[c] = float((pred[m] == c).float().mean())
    return out


def evaluate(material, test: VideoDataset, arch: ArchSpec, seeds=(0,), cfg: EvalConfig | None = None) -> EvalReport:
    """Train a fresh ``arch`` on the material once per seed and report held-out real accuracy."""
    cfg = cfg or EvalConfig()
    x, y = materialize(material)
    missing = sorted(set(range(test.num_classes)) - set(y.tolist()))
    if missing:
        raise InvalidInputError(f"material has no examples for classes {missing}")
    if tuple(x.shape[2:]) != arch.input_shape[1:]:
        raise InvalidInputError(f"material frames {tuple(x.shape[2:])} do not fit {arch.input_shape[1:]}")
    xt, yt = test.as_tensors()
    accs, per_class = [], []
    for seed in seeds:
        model = train_classifier(x, y, arch, seed, cfg)
        pred = predict(model, xt)
        accs.append(float((pred == yt).float().mean()))
        per_class.append(per_class_accuracy(pred, yt, test.num_classes))
        log.info("evaluate seed %s: %.3f", seed, accs[-1])
    return EvalReport(float(np.mean(accs)), float(np.std(accs)), accs,
                      np.nanmean(np.stack(per_class), axis=0).tolist(), arch, cfg.epochs, cfg.lr)


# ---------------------------------------------------------------- coresets

def herding_indices(features: np.ndarray, k: int) -> list[int]:
    """Greedily pick rows whose running mean stays closest to the mean of all rows."""
    features = np.asarray(features, dtype=np.float64)
    target = features.mean(0)
    chosen: list[int] = []
    total = np.zeros_like(target)
    for step in range(k):
        cand = (total[None] + features) / (step + 1)
        dist = np.linalg.norm(cand - target, axis=1)
        dist[chosen] = np.inf
        i = int(np.argmin(dist))
        chosen.append(i)
        total += features[i]
    return chosen


def kcenter_indices(features: np.ndarray, k: int) -> list[int]:
    """Start from the row nearest the mean, then repeatedly add the row farthest from the picks."""
    features = np.asarray(features, dtype=np.float64)
    first = int(np.argmin(np.linalg.norm(features - features.mean(0), axis=1)))
    chosen = [first]
    mind = np.linalg.norm(features - features[first], axis=1)
    while len(chosen) < k:
        mind[chosen] = -np.inf
        i = int(np.argmax(mind))
        chosen.append(i)
        mind = np.minimum(mind, np.linalg.norm(features - features[i], axis=1))
    return chosen


def clip_features(model: ModelState, x: torch.Tensor, batch: int = 128) -> np.ndarray:
    with torch.no_grad():
        return torch.cat([forward(model, x[i:i + batch], taps=True)[1]
                          for i in range(0, len(x), batch)]).numpy()


def coreset(dataset: VideoDataset, ipc: int, method: str = "random", feature_model: ModelState | None = None,
            seed: int = 0) -> SyntheticSet:
    """Select ``ipc`` real clips per class (random, herding or k-center in feature space)."""
    if method not in ("random", "herding", "kcenter"):
        raise InvalidInputError(f"unknown coreset method {method!r}")
    x, y = dataset.as_tensors()
    labels = y.numpy()
    rng = np.random.default_rng(seed)
    if method != "random":
        if feature_model is None:
            spec = ArchSpec.mini_c3d(x.shape[1:], dataset.num_classes)
            feature_model = build_model(spec, seed)
        feats = clip_features(feature_model, x)
    picked = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) < ipc:
            raise InvalidInputError(f"class {c} has {len(idx)} clips, fewer than ipc={ipc}")
        if method == "random":
            sel = rng.choice(len(idx), size=ipc, replace=False)
        elif method == "herding":
            sel = herding_indices(feats[idx], ipc)
        else:
            sel = kcenter_indices(feats[idx], ipc)
        picked.extend(int(i) for i in idx[np.asarray(sel)])
    f = x.shape[1]
    return SyntheticSet(x[torch.as_tensor(picked)].clone(), labels[picked], CompressionSchedule.naive(f),
                        dataset.num_classes, meta={"method": method, "indices": picked, "seed": seed})


# ---------------------------------------------------------------- storage

@dataclass
class StorageReport:
    components: dict = field(default_factory=dict)

    def __post_init__(self):
        for k in ("static", "dynamic", "combiner", "synthetic", "labels"):
            self.components.setdefault(k, 0)

    @property
    def total(self) -> int:
        return sum(self.components.values())

    @property
    def mib(self) -> float:
        return self.total / MIB

    def render(self) -> str:
        lines = [f"{k:<10} {v:>14,d} bytes" for k, v in self.components.items()]
        lines.append(f"{'total':<10} {self.total:>14,d} bytes ({self.mib:.1f} MiB)")
        return "\n".join(lines)


def _canonical_labels(labels: np.ndarray, num_classes: int) -> bool:
    if num_classes == 0 or len(labels) % num_classes:
        return False
    return np.array_equal(labels, np.repeat(np.arange(num_classes), len(labels) // num_classes))


def storage_bytes(material) -> StorageReport:
    """Bytes needed to store the material as float32 tensors.

    Labels cost nothing when they follow the class-major layout (derivable from the
    class count); otherwise they are counted as one float each.
    """
    if material is None:
        return StorageReport()
    if isinstance(material, SyntheticSet):
        labels = 0 if _canonical_labels(material.labels, material.num_classes) else len(material.labels)
        return StorageReport({"synthetic": material.frames.numel() * BYTES_PER_ELEMENT,
                              "labels": labels * BYTES_PER_ELEMENT})
    if hasattr(material, "storage_components"):
        return StorageReport({k: v * BYTES_PER_ELEMENT for k, v in material.storage_components().items()})
    if isinstance(material, dict):
        return StorageReport({k: int(v) * BYTES_PER_ELEMENT for k, v in material.items()})
    raise InvalidInputError(f"no storage rule for {type(material).__name__}")


def element_bytes(*shape: int) -> int:
    """Closed-form float32 size of a tensor of the given shape."""
    return int(np.prod(shape, dtype=np.int64)) * BYTES_PER_ELEMENT


# ---------------------------------------------------------------- dynamics

def sign_bits(features: torch.Tensor | np.ndarray) -> np.ndarray:
    return np.asarray(features) > 0


def hamming_distance(a: np.ndarray, b: np.ndarray) -> int:
    return int(np.count_nonzero(sign_bits(a) != sign_bits(b)))


def clip_hamming(features: np.ndarray) -> float:
    """Mean Hamming distance between sign patterns of consecutive frame features ``[F, D]``."""
    if features.shape[0] < 2:
        raise InvalidInputError("inter-frame distance is undefined for single-frame clips")
    bits = sign_bits(features)
    return float(np.count_nonzero(bits[1:] != bits[:-1], axis=1).mean())


def dynamics_grouping(dataset: VideoDataset, feature_model: ModelState) -> tuple[list[int], list[int], np.ndarray]:
    """Split classes at the median of their mean inter-frame Hamming distance.

    Returns ``(static_classes, dynamic_classes, per_class_distance)``; the static
    group is the lower half (ties broken by class id).
    """
    per_clip = []
    with torch.no_grad():
        for clip in dataset.clips:
            per_clip.append(clip_hamming(frame_features(feature_model, clip.frames).numpy()))
    labels = dataset.labels
    per_clip = np.asarray(per_clip)
    dist = np.array([per_clip[labels == c].mean() if (labels == c).any() else np.nan
                     for c in range(dataset.num_classes)])
    present = [c for c in range(dataset.num_classes) if not np.isnan(dist[c])]
    order = sorted(present, key=lambda c: (dist[c], c))
    half = len(order) // 2
    return sorted(order[:half]), sorted(order[half:]), dist


def interframe_differences(clip: VideoClip | torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """``frame[t+1] - frame[t]``; with ``normalize`` each image is min-max scaled to [0, 1]
    (a constant image becomes mid-gray)."""
    frames = clip.frames if isinstance(clip, VideoClip) else torch.as_tensor(clip)
    if frames.shape[0] < 2:
        raise InvalidInputError("need at least two frames")
    d = frames[1:] - frames[:-1]
    if not normalize:
        return d
    flat = d.reshape(d.shape[0], -1)
    lo = flat.min(1, keepdim=True).values
    hi = flat.max(1, keepdim=True).values
    span = hi - lo
    out = torch.where(span > 0, (flat - lo) / torch.where(span > 0, span, torch.ones_like(span)),
                      torch.full_like(flat, 0.5))
    return out.view_as(d)


def save_image_grid(images: torch.Tensor, path: str, ncol: int = 8) -> None:
    """Write ``[n, C, H, W]`` images in [0, 1] as one PNG grid."""
    from PIL import Image

    n, c, h, w = images.shape
    nrow = -(-n // ncol)
    ncol = min(ncol, n)
    grid = np.zeros((nrow * (h + 1) - 1, ncol * (w + 1) - 1, c), dtype=np.float32)
    for i in range(n):
        r, q = divmod(i, ncol)
        grid[r * (h + 1):r * (h + 1) + h, q * (w + 1):q * (w + 1) + w] = images[i].permute(1, 2, 0).numpy()
    arr = (np.clip(grid, 0, 1) * 255).round().astype(np.uint8)
    Image.fromarray(arr[..., 0] if c == 1 else arr).save(path)
