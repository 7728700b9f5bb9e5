"""Video data model, clip/frame sampling, augmentation and the moving-shapes corpus."""
from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .exceptions import InvalidConfigError, InvalidInputError

SPLITS = ("train", "test")

# unit vectors (dx, dy) in canvas coordinates; y grows downwards
DIRECTIONS = (
    ("right", (1, 0)),
    ("left", (-1, 0)),
    ("down", (0, 1)),
    ("up", (0, -1)),
    ("down_right", (1, 1)),
    ("up_left", (-1, -1)),
    ("down_left", (-1, 1)),
    ("up_right", (1, -1)),
)
APPEARANCES = ("square", "ring", "plus", "cross")


@dataclass(frozen=True)
class VideoClip:
    frames: torch.Tensor  # [F, C, H, W], values in [0, 1]
    label: int
    fps_meta: float | None = None

    def __post_init__(self):
        f = self.frames
        if not isinstance(f, torch.Tensor):
            f = torch.as_tensor(np.asarray(f), dtype=torch.float32)
            object.__setattr__(self, "frames", f)
        if f.ndim != 4 or min(f.shape) < 1:
            raise InvalidInputError(f"clip frames must be [F, C, H, W] with positive dims, got {tuple(f.shape)}")
        if not torch.isfinite(f).all():
            raise InvalidInputError("clip frames contain non-finite values")
        if self.label < 0:
            raise InvalidInputError(f"negative label {self.label}")
        if self.fps_meta is not None and self.fps_meta <= 0:
            raise InvalidInputError("fps_meta must be positive")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class VideoDataset:
    clips: tuple[VideoClip, ...]
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        object.__setattr__(self, "clips", tuple(self.clips))
        if self.num_classes < 1:
            raise InvalidInputError("num_classes must be positive")
        if self.split not in SPLITS:
            raise InvalidInputError(f"split must be one of {SPLITS}, got {self.split!r}")
        for i, c in enumerate(self.clips):
            if c.label >= self.num_classes:
                raise InvalidInputError(f"clip {i} has label {c.label} >= num_classes {self.num_classes}")
        if self.split == "train":
            present = {c.label for c in self.clips}
            missing = sorted(set(range(self.num_classes)) - present)
            if missing:
                raise InvalidInputError(f"train split has no clips for classes {missing}")

    def __len__(self) -> int:
        return len(self.clips)

    @property
    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clips], dtype=np.int64)

    @property
    def frame_shape(self) -> tuple[int, int, int]:
        return tuple(self.clips[0].frames.shape[1:])

    def class_indices(self, label: int) -> np.ndarray:
        return np.flatnonzero(self.labels == label)

    def as_tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        """Stack all clips into ``([n, F, C, H, W], [n])``; clips must share a length."""
        lengths = {c.num_frames for c in self.clips}
        if len(lengths) != 1:
            raise InvalidInputError(f"clips have differing lengths {sorted(lengths)}; sample them first")
        x = torch.stack([c.frames for c in self.clips])
        return x, torch.as_tensor(self.labels)

    @classmethod
    def from_tensors(cls, x, y, num_classes: int | None = None, split: str = "train") -> "VideoDataset":
        x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x, dtype=torch.float32)
        y = np.asarray(y, dtype=np.int64)
        if num_classes is None:
            num_classes = int(y.max()) + 1
        return cls(tuple(VideoClip(x[i], int(y[i])) for i in range(len(y))), num_classes, split)


@dataclass(frozen=True)
class FrameDataset:
    frames: torch.Tensor  # [n, N, C, H, W]
    labels: np.ndarray
    source_indices: tuple[tuple[tuple[int, int], ...], ...]

    def __post_init__(self):
        for item in self.source_indices:
            idx = [f for _, f in item]
            if any(b <= a for a, b in zip(idx, idx[1:])):
                raise InvalidInputError("frame indices must be strictly increasing within an item")

    def __len__(self) -> int:
        return self.frames.shape[0]


@dataclass(frozen=True)
class MovingShapesConfig:
    canvas: tuple[int, int] = (32, 32)
    num_appearances: int = 4
    num_directions: int = 2
    shape_size: int = 8
    speed: int = 1
    frames: int = 16
    channels: int = 1
    noise_std: float = 0.0
    jitter: int | None = None  # max start offset around the centred path; None = anywhere on the canvas

    def __post_init__(self):
        h, w = self.canvas
        if min(h, w, self.shape_size, self.frames, self.channels) < 1:
            raise InvalidConfigError("canvas, shape_size, frames and channels must be positive")
        if self.jitter is not None and self.jitter < 0:
            raise InvalidConfigError("jitter must be non-negative")
        if self.speed < 0 or self.noise_std < 0:
            raise InvalidConfigError("speed and noise_std must be non-negative")
        if not 1 <= self.num_appearances <= len(APPEARANCES) * 4:
            raise InvalidConfigError(f"num_appearances must be in [1, {len(APPEARANCES) * 4}]")
        if not 1 <= self.num_directions <= len(DIRECTIONS):
            raise InvalidConfigError(f"num_directions must be in [1, {len(DIRECTIONS)}]")
        if self.speed * self.frames + self.shape_size > min(h, w):
            raise InvalidConfigError(
                f"shape leaves the canvas: speed*frames + shape_size = "
                f"{self.speed * self.frames + self.shape_size} > {min(h, w)}"
            )

    @property
    def num_classes(self) -> int:
        return self.num_appearances * self.num_directions

    def class_id(self, appearance: int, direction: int) -> int:
        return appearance * self.num_directions + direction

    def class_factors(self, label: int) -> tuple[int, int]:
        """Inverse of :meth:`class_id`: ``(appearance, direction)``."""
        return divmod(label, self.num_directions)


def sample_clip(video: VideoClip, num_frames: int, stride: int, seed: int) -> VideoClip:
    """Draw ``num_frames`` frames spaced by ``stride`` from a random start offset.

    A clip occupies a window of ``num_frames * stride`` frames, so the start is
    uniform over ``0..F - num_frames * stride`` (just 0 when the window does not
    fit but the sampled frames do). Videos shorter than the sampled span are
    looped (indices wrap modulo F) with the start uniform over all F positions.
    """
    if num_frames < 1 or stride < 1:
        raise InvalidInputError("num_frames and stride must be >= 1")
    f = video.num_frames
    span = (num_frames - 1) * stride
    rng = np.random.default_rng(seed)
    if span < f:
        start = int(rng.integers(0, max(0, f - num_frames * stride) + 1))
        idx = start + stride * np.arange(num_frames)
    else:
        start = int(rng.integers(0, f))
        idx = (start + stride * np.arange(num_frames)) % f
    return VideoClip(video.frames[torch.as_tensor(idx)], video.label, video.fps_meta)


def segment_bounds(length: int, parts: int) -> list[tuple[int, int]]:
    """Half-open bounds of ``parts`` near-equal contiguous segments of ``range(length)``."""
    edges = [(k * length) // parts for k in range(parts + 1)]
    return list(zip(edges[:-1], edges[1:]))


def stratified_indices(length: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """One uniformly drawn index inside each of ``n`` equal segments of ``range(length)``."""
    return np.array([rng.integers(lo, hi) for lo, hi in segment_bounds(length, n)], dtype=np.int64)


def select_frames(dataset: VideoDataset, N: int, seed: int) -> FrameDataset:
    """Form an N-frame dataset by drawing one frame per equal temporal segment of every clip."""
    if N < 1:
        raise InvalidInputError("N must be >= 1")
    for i, clip in enumerate(dataset.clips):
        if clip.num_frames < N:
            raise InvalidInputError(f"clip {i} has {clip.num_frames} frames, fewer than N={N}")
    rng = np.random.default_rng(seed)
    frames, sources = [], []
    for i, clip in enumerate(dataset.clips):
        idx = stratified_indices(clip.num_frames, N, rng)
        frames.append(clip.frames[torch.as_tensor(idx)])
        sources.append(tuple((i, int(t)) for t in idx))
    return FrameDataset(torch.stack(frames), dataset.labels, tuple(sources))


def augment_hflip(batch: torch.Tensor, p: float, seed: int) -> torch.Tensor:
    """Reverse each item along its last (width) axis with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise InvalidInputError(f"p must be in [0, 1], got {p}")
    if batch.ndim < 2:
        raise InvalidInputError("batch needs an item axis and a width axis")
    rng = np.random.default_rng(seed)
    flip = torch.as_tensor(rng.random(batch.shape[0]) < p)
    if not flip.any():
        return batch.clone()
    mask = flip.view(-1, *([1] * (batch.ndim - 1)))
    return torch.where(mask, batch.flip(-1), batch)


def augment_shift(batch: torch.Tensor, max_shift: int, seed: int) -> torch.Tensor:
    """Translate each item by a random ``(dy, dx)`` in ``[-max_shift, max_shift]``, zero-filling the border.

    The offset is shared by every frame of an item, so motion inside a clip is preserved.
    """
    if max_shift < 0:
        raise InvalidInputError(f"max_shift must be >= 0, got {max_shift}")
    if batch.ndim < 3:
        raise InvalidInputError("batch needs an item axis and two spatial axes")
    if max_shift == 0:
        return batch.clone()
    rng = np.random.default_rng(seed)
    h, w = batch.shape[-2:]
    m = max_shift
    padded = torch.nn.functional.pad(batch, (m, m, m, m))
    out = torch.empty_like(batch)
    for i, (dy, dx) in enumerate(rng.integers(-m, m + 1, size=(batch.shape[0], 2))):
        out[i] = padded[i, ..., m - dy:m - dy + h, m - dx:m - dx + w]
    return out


def _pattern(appearance: int, size: int) -> np.ndarray:
    # all patterns are symmetric under flips and transposition
    kind = APPEARANCES[appearance % len(APPEARANCES)]
    level = 1.0 - 0.25 * (appearance // len(APPEARANCES))
    p = np.zeros((size, size), dtype=np.float32)
    thick = max(1, size // 4)
    if kind == "square":
        p[:] = 1.0
    elif kind == "ring":
        p[:] = 1.0
        p[thick:size - thick, thick:size - thick] = 0.0
    elif kind == "plus":
        lo = (size - thick) // 2
        hi = lo + thick
        p[lo:hi, :] = 1.0
        p[:, lo:hi] = 1.0
    elif kind == "cross":
        r = np.arange(size)
        d = np.abs(r[:, None] - r[None, :])
        a = np.abs(r[:, None] + r[None, :] - (size - 1))
        p[(d < thick) | (a < thick)] = 1.0
    return p * level


def _channel_gains(appearance: int, channels: int) -> np.ndarray:
    if channels == 1:
        return np.ones(1, dtype=np.float32)
    g = np.full(channels, 0.5, dtype=np.float32)
    g[appearance % channels] = 1.0
    return g


def shape_trajectory(cfg: MovingShapesConfig, direction: int, start_xy: tuple[int, int]) -> np.ndarray:
    """Top-left corner ``(x, y)`` of the shape for every frame."""
    dx, dy = DIRECTIONS[direction][1]
    t = np.arange(cfg.frames)
    x = start_xy[0] + t * cfg.speed * dx
    y = start_xy[1] + t * cfg.speed * dy
    return np.stack([x, y], axis=1)


def render_moving_shape(cfg: MovingShapesConfig, appearance: int, direction: int,
                        start_xy: tuple[int, int]) -> np.ndarray:
    """Noise-free clip ``[F, C, H, W]`` of one shape moving from ``start_xy``."""
    h, w = cfg.canvas
    s = cfg.shape_size
    pat = _pattern(appearance, s)
    gains = _channel_gains(appearance, cfg.channels)
    out = np.zeros((cfg.frames, cfg.channels, h, w), dtype=np.float32)
    for t, (x, y) in enumerate(shape_trajectory(cfg, direction, start_xy)):
        if x < 0 or y < 0 or x + s > w or y + s > h:
            raise InvalidConfigError(f"shape leaves the canvas at frame {t}: ({x}, {y})")
        out[t, :, y:y + s, x:x + s] = gains[:, None, None] * pat
    return out


def _start_for(cfg: MovingShapesConfig, direction: int, along: int, cross: int) -> tuple[int, int]:
    # mirrored directions map the same (along, cross) draw to mirrored start points
    h, w = cfg.canvas
    s = cfg.shape_size
    dx, dy = DIRECTIONS[direction][1]

    def coord(d: int, extent: int) -> int:
        if d > 0:
            return along
        if d < 0:
            return extent - s - along
        return cross

    return coord(dx, w), coord(dy, h)


def _around(hi: int, jitter: int) -> tuple[int, int]:
    mid = hi // 2
    return max(0, mid - jitter), min(hi, mid + jitter)


def generate_moving_shapes(cfg: MovingShapesConfig, clips_per_class: int, seed: int,
                           split: str = "train") -> VideoDataset:
    """Build a labelled corpus where class = (appearance, direction).

    Within one appearance, clip ``j`` of every direction shares the same random
    start draw, so classes that differ only in direction are exact geometric
    mirrors of one another before noise is added.
    """
    if clips_per_class < 1:
        raise InvalidConfigError("clips_per_class must be >= 1")
    h, w = cfg.canvas
    if cfg.num_directions > 2 and h != w:
        raise InvalidConfigError("vertical/diagonal directions need a square canvas")
    rng = np.random.default_rng(seed)
    s = cfg.shape_size
    side = min(h, w)
    along_hi = side - s - cfg.speed * (cfg.frames - 1)
    cross_hi = side - s
    clips = []
    along_lo = cross_lo = 0
    if cfg.jitter is not None:
        along_lo, along_hi = _around(along_hi, cfg.jitter)
        cross_lo, cross_hi = _around(cross_hi, cfg.jitter)
    for a in range(cfg.num_appearances):
        along = rng.integers(along_lo, along_hi + 1, size=clips_per_class)
        cross = rng.integers(cross_lo, cross_hi + 1, size=clips_per_class)
        for d in range(cfg.num_directions):
            label = cfg.class_id(a, d)
            for j in range(clips_per_class):
                x = render_moving_shape(cfg, a, d, _start_for(cfg, d, int(along[j]), int(cross[j])))
                if cfg.noise_std > 0:
                    x = np.clip(x + rng.normal(0.0, cfg.noise_std, size=x.shape).astype(np.float32), 0.0, 1.0)
                clips.append(VideoClip(torch.from_numpy(x), label))
    return VideoDataset(tuple(clips), cfg.num_classes, split)


def _default_decoder(path: str) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float32) / 255.0
    return arr[..., None] if arr.ndim == 2 else arr


def load_frame_folders(root: str, decoder: Callable[[str], np.ndarray] | None = None,
                       split: str = "train", extensions: Sequence[str] = (".png", ".jpg", ".jpeg")) -> VideoDataset:
    """Load ``root/<class>/<video>/<frame images>`` into a dataset.

    Classes are sorted by folder name; frames within a video by file name.
    ``decoder`` maps a path to an ``[H, W, C]`` array in [0, 1].
    """
    decoder = decoder or _default_decoder
    classes = sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
    if not classes:
        raise InvalidInputError(f"no class folders under {root}")
    clips = []
    for label, name in enumerate(classes):
        cdir = os.path.join(root, name)
        for video in sorted(os.listdir(cdir)):
            vdir = os.path.join(cdir, video)
            if not os.path.isdir(vdir):
                continue
            files = sorted(f for f in os.listdir(vdir) if f.lower().endswith(tuple(extensions)))
            if not files:
                continue
            frames = np.stack([decoder(os.path.join(vdir, f)) for f in files]).transpose(0, 3, 1, 2)
            clips.append(VideoClip(torch.from_numpy(np.ascontiguousarray(frames, dtype=np.float32)), label))
    return VideoDataset(tuple(clips), len(classes), split)


def class_batches(dataset: VideoDataset, batch: int, rng: np.random.Generator) -> dict[int, np.ndarray]:
    """Random clip indices per class, at most ``batch`` each (without replacement)."""
    out = {}
    labels = dataset.labels
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(labels == c)
        if len(idx) == 0:
            continue
        out[c] = rng.permutation(idx)[:batch]
    return out
