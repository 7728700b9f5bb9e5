"""Grid sweeps over temporal-compression levels and the interpolator comparison table."""
from __future__ import annotations

import csv
import itertools
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .evaluation import EvalConfig, evaluate
from .exceptions import InvalidConfigError
from .matching import MatchConfig, distill
from .models import ArchSpec
from .temporal import (CompressionSchedule, InterpolatorConfig, fixed_length_clips, reconstruction_mse,
                       train_parametric_interpolator)
from .video import VideoDataset

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("n_syn", "n_real", "k", "interp", "seed", "iterations", "peak_bytes", "seconds_per_iter",
                 "final_loss", "accuracy", "config_hash")
INTERP_COLUMNS = ("n_syn", "l_syn", "method", "mse", "config_hash")


@dataclass(frozen=True)
class SweepPoint:
    n_syn: int
    n_real: int
    k: int
    interp: str
    seed: int


def grid(n_syn, n_real, ks, interps, l_syn: int, seeds=(0,)) -> list[SweepPoint]:
    """Every valid schedule of the cartesian product (invalid combinations are skipped)."""
    out = []
    for a, b, k, m, s in itertools.product(n_syn, n_real, ks, interps, seeds):
        try:
            CompressionSchedule(a, b, k, m, l_syn)
        except InvalidConfigError:
            log.info("skipping invalid schedule n_syn=%d n_real=%d k=%d interp=%s", a, b, k, m)
            continue
        out.append(SweepPoint(a, b, k, m, s))
    return out


def run_point(point: SweepPoint, train: VideoDataset, test: VideoDataset | None, cfg: MatchConfig,
              arch: ArchSpec, l_syn: int, ipc: int = 1, eval_cfg: EvalConfig | None = None,
              eval_arch: ArchSpec | None = None) -> dict:
    """Distill one grid point; per-iteration cost is the median over iterations."""
    schedule = CompressionSchedule(point.n_syn, point.n_real, point.k, point.interp, l_syn)
    if point.interp == "parametric":
        raise InvalidConfigError("sweeps use duplicate or linear interpolation")
    synset = distill(train, schedule, cfg, point.seed, arch, ipc)
    h = synset.history
    row = {
        "n_syn": point.n_syn, "n_real": point.n_real, "k": point.k, "interp": point.interp,
        "seed": point.seed, "iterations": cfg.iterations,
        "peak_bytes": int(np.median(h.peak_bytes)) if h.peak_bytes else 0,
        "seconds_per_iter": float(np.median(h.seconds)) if h.seconds else 0.0,
        "final_loss": h.loss[-1] if h.loss else float("nan"),
        "accuracy": "",
    }
    if test is not None:
        rep = evaluate(synset, test, eval_arch or arch.with_frames(l_syn), [point.seed], eval_cfg)
        row["accuracy"] = rep.accuracy_mean
    return row


def run_sweep(points: list[SweepPoint], train: VideoDataset, test: VideoDataset | None, cfg: MatchConfig,
              arch: ArchSpec, l_syn: int, ipc: int = 1, eval_cfg: EvalConfig | None = None,
              threads: int | None = None) -> list[dict]:
    """Run every point; ``threads`` (default ``$VDST_THREADS`` or 1) caps concurrency.

    Rows come back in grid order whatever the thread count.
    """
    if threads is None:
        threads = int(os.environ.get("VDST_THREADS", "1") or 1)
    threads = max(1, threads)

    def job(p):
        return run_point(p, train, test, cfg, arch, l_syn, ipc, eval_cfg)

    if threads == 1:
        return [job(p) for p in points]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(job, points))


def interpolator_table(train: VideoDataset, test: VideoDataset, n_syn_values, l_syn: int,
                       interp_cfg: InterpolatorConfig | None = None, parametric: bool = True) -> list[dict]:
    """Reconstruction MSE of each interpolator on held-out clips, one row per (n_syn, method)."""
    clips = fixed_length_clips(test, l_syn, 0)
    rows = []
    for n in n_syn_values:
        rows.append({"n_syn": n, "l_syn": l_syn, "method": "duplicate",
                     "mse": reconstruction_mse(clips, n, "duplicate")})
        if n > 1:
            rows.append({"n_syn": n, "l_syn": l_syn, "method": "linear",
                         "mse": reconstruction_mse(clips, n, "linear")})
        if parametric:
            phi = train_parametric_interpolator(train, n, l_syn, interp_cfg)
            rows.append({"n_syn": n, "l_syn": l_syn, "method": "parametric",
                         "mse": reconstruction_mse(clips, n, "parametric", phi)})
    return rows


def write_csv(path: str, rows: list[dict], columns, config_hash: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "config_hash": config_hash})


def memory_monotone(rows: list[dict], key: str = "peak_bytes") -> bool:
    """True when ``key`` never decreases along n_real for every fixed (n_syn, k, interp, seed)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["n_syn"], r["k"], r["interp"], r["seed"]), []).append(r)
    for g in groups.values():
        vals = [r[key] for r in sorted(g, key=lambda r: r["n_real"])]
        if any(b < a for a, b in zip(vals, vals[1:])):
            return False
    return True


def with_iterations(cfg: MatchConfig, iterations: int) -> MatchConfig:
    return replace(cfg, iterations=iterations)
