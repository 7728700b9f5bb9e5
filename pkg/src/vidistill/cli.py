"""Command-line entry point.

Exit codes:

    0  success
    1  unexpected internal error
    2  invalid configuration
    3  invalid input data
    4  storage budget exceeded (nothing written)
    5  malformed artifact file
    6  non-finite loss during optimisation
    7  degenerate expert trajectory

Failures print one JSON object to stderr:
``{"error": <type>, "exit_code": <int>, "message": <text>, ...}``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import torch

from .config import RunConfig, int_list, load_config
from .disentangle import DistilledArtifact, StageConfig, check_budget, distill_disentangled, empty_like_geometry
from .evaluation import EvalConfig, coreset, evaluate, interframe_differences, save_image_grid, storage_bytes
from .exceptions import InvalidConfigError, InvalidInputError, VidistillError
from .matching import InnerConfig, MatchConfig, SyntheticSet, distill, generate_expert_trajectories
from .models import ArchSpec
from .serialization import load_artifact, save_artifact
from .sweep import INTERP_COLUMNS, SWEEP_COLUMNS, grid, interpolator_table, run_sweep, write_csv
from .temporal import CompressionSchedule, InterpolatorConfig
from .video import MovingShapesConfig, VideoDataset, generate_moving_shapes, load_frame_folders

log = logging.getLogger("vidistill")

COMMANDS = ("distill", "distill-disentangled", "evaluate", "sweep", "coreset", "inspect", "generate", "experts")
LOSS_COLUMNS = ("stage", "iteration", "loss", "peak_bytes", "seconds", "config_hash")
EVAL_COLUMNS = ("arch", "seed", "accuracy", "accuracy_mean", "accuracy_std", "epochs", "lr", "config_hash")
STORAGE_COLUMNS = ("component", "bytes", "config_hash")


# ---------------------------------------------------------------- config -> objects

def datasets(cfg: RunConfig) -> tuple[VideoDataset, VideoDataset]:
    d = cfg.section("data")
    if d["source"] == "moving_shapes":
        shapes = MovingShapesConfig(
            canvas=(d["canvas"], d["canvas"]), num_appearances=d["num_appearances"],
            num_directions=d["num_directions"], shape_size=d["shape_size"], speed=d["speed"],
            frames=d["frames"], channels=d["channels"], noise_std=d["noise_std"],
            jitter=None if d["jitter"] < 0 else d["jitter"])
        train = generate_moving_shapes(shapes, d["clips_per_class"], d["seed"], "train")
        test = generate_moving_shapes(shapes, d["test_clips_per_class"], d["seed"] + 1, "test")
        return train, test
    root = d["source"]
    for split in ("train", "test"):
        if not os.path.isdir(os.path.join(root, split)):
            raise InvalidConfigError(f"{root} needs train/ and test/ subfolders")
    return load_frame_folders(os.path.join(root, "train")), load_frame_folders(os.path.join(root, "test"), split="test")


def arch_for(name: str, dataset: VideoDataset, frames: int | None = None) -> ArchSpec:
    c, h, w = dataset.frame_shape
    f = frames or dataset.clips[0].num_frames
    shape = (f, c, h, w)
    key = name.strip().lower()
    if key == "minic3d":
        return ArchSpec.mini_c3d(shape, dataset.num_classes)
    if key in ("convnetd4_2d", "convnetd4"):
        return ArchSpec.convnet_d4(shape, dataset.num_classes)
    if key in ("cnn_gru", "gru"):
        return ArchSpec.cnn_rnn(shape, dataset.num_classes, "GRU")
    if key in ("cnn_lstm", "lstm"):
        return ArchSpec.cnn_rnn(shape, dataset.num_classes, "LSTM")
    raise InvalidConfigError(f"unknown architecture {name!r}")


def schedule_of(cfg: RunConfig) -> CompressionSchedule:
    return CompressionSchedule(**cfg.section("schedule"))


def match_of(cfg: RunConfig, **changes) -> MatchConfig:
    m = cfg.section("match")
    inner = cfg.section("match.inner")
    m.pop("ipc")
    m.update(changes)
    return MatchConfig(inner=InnerConfig(inner["syn_steps"], inner["expert_epochs"], inner["max_start_epoch"],
                                         inner["lr_teacher"]), **m)


def stage_of(cfg: RunConfig) -> StageConfig:
    s = cfg.section("stage")
    return StageConfig(spc=s["spc"], dpc=s["dpc"], lr_dynamic=s["lr_dynamic"], lr_hal=s["lr_hal"],
                       frames_dynamic=s["frames_dynamic"], n_real=s["n_real"], variant=s["variant"],
                       static_iterations=s["static_iterations"], dynamic_iterations=s["dynamic_iterations"],
                       early_stop_window=s["early_stop_window"], early_stop_tol=s["early_stop_tol"])


def eval_of(cfg: RunConfig) -> EvalConfig:
    e = cfg.section("eval")
    return EvalConfig(epochs=e["epochs"], lr=e["lr"], batch_size=e["batch_size"], momentum=e["momentum"],
                      weight_decay=e["weight_decay"], shift=e["shift"])


def experts_for(cfg: RunConfig, train: VideoDataset, arch: ArchSpec, seed: int):
    inner = cfg.section("match.inner")
    return generate_expert_trajectories(train, arch, inner["num_experts"], inner["expert_train_epochs"],
                                        inner["lr_teacher"], seed)


# ---------------------------------------------------------------- commands

def _loss_rows(stage: str, history) -> list[dict]:
    return [{"stage": stage, "iteration": i, "loss": l, "peak_bytes": b, "seconds": s}
            for i, l, b, s in history.to_rows()]


def cmd_generate(cfg, args, out):
    train, test = datasets(cfg)
    save_artifact(train, os.path.join(out, "train.vdst"))
    save_artifact(test, os.path.join(out, "test.vdst"))
    return {"train_clips": len(train), "test_clips": len(test)}


def cmd_experts(cfg, args, out):
    train, _ = datasets(cfg)
    arch = arch_for(cfg["model.arch"], train)
    experts = experts_for(cfg, train, arch, cfg["run.seed"])
    save_artifact(experts, os.path.join(out, "experts.vdst"))
    return {"trajectories": len(experts)}


def _load_experts(args, cfg, train, arch):
    if args.experts:
        experts = load_artifact(args.experts)
        if not isinstance(experts, list):
            raise InvalidInputError(f"{args.experts} does not hold expert trajectories")
        return experts
    return experts_for(cfg, train, arch, cfg["run.seed"])


def cmd_distill(cfg, args, out):
    train, _ = datasets(cfg)
    schedule = schedule_of(cfg)
    mcfg = match_of(cfg)
    arch = arch_for(cfg["model.arch"], train)
    experts = None
    if mcfg.matcher == "trajectory_mtt":
        experts = _load_experts(args, cfg, train, arch.with_frames(schedule.l_syn))
    synset = distill(train, schedule, mcfg, cfg["run.seed"], arch, cfg["match.ipc"], experts)
    synset.meta["config_hash"] = cfg.fingerprint
    _budget(cfg, synset)
    save_artifact(synset, os.path.join(out, "synthetic.vdst"))
    write_csv(os.path.join(out, "loss.csv"), _loss_rows("distill", synset.history), LOSS_COLUMNS, cfg.fingerprint)
    return {"items": len(synset.labels), "bytes": storage_bytes(synset).total}


def _budget(cfg, material):
    budget = cfg["run.budget_bytes"]
    if budget:
        check_budget(material, budget)


def cmd_distill_disentangled(cfg, args, out):
    train, _ = datasets(cfg)
    stage = stage_of(cfg)
    static_cfg = match_of(cfg, matcher="gradient_dc", lr_img=cfg["stage.lr_static"],
                          batch_real=cfg["stage.static_batch_real"], iterations=stage.static_iterations)
    dynamic_cfg = match_of(cfg, matcher=cfg["stage.dynamic_matcher"], iterations=stage.dynamic_iterations)
    arch = arch_for(cfg["model.arch"], train)
    experts = _load_experts(args, cfg, train, arch) if dynamic_cfg.matcher == "trajectory_mtt" else None
    budget = cfg["run.budget_bytes"] or None
    if budget:
        # geometry alone fixes the size, so refuse before any training happens
        c, h, w = train.frame_shape
        check_budget(empty_like_geometry(train.num_classes, stage.spc, stage.dpc, train.clips[0].num_frames,
                                         c, h, w, stage.variant, stage.frames_dynamic), budget)
    art = distill_disentangled(train, static_cfg, dynamic_cfg, stage, cfg["run.seed"], None, arch, experts, budget)
    art.meta["config_hash"] = cfg.fingerprint
    save_artifact(art, os.path.join(out, "artifact.vdst"))
    rows = [{"stage": st, "iteration": i, "loss": l, "peak_bytes": "", "seconds": ""}
            for st in ("static", "dynamic") for i, l in enumerate(art.meta[f"{st}_loss"])]
    write_csv(os.path.join(out, "loss.csv"), rows, LOSS_COLUMNS, cfg.fingerprint)
    return {"bytes": storage_bytes(art).total}


def _material(args, cfg, train):
    if not args.artifact or args.artifact == "full":
        return train
    obj = load_artifact(args.artifact)
    if obj is None:
        raise InvalidInputError("cannot evaluate an empty artifact")
    if not isinstance(obj, (SyntheticSet, DistilledArtifact, VideoDataset)):
        raise InvalidInputError(f"{args.artifact} is not evaluable material")
    return obj


def cmd_evaluate(cfg, args, out):
    train, test = datasets(cfg)
    material = _material(args, cfg, train)
    seeds = int_list(cfg["eval.seeds"])
    names = [cfg["eval.arch"]] + [a for a in cfg["eval.cross_arch"].split(",") if a.strip()]
    rows, text = [], []
    for name in names:
        rep = evaluate(material, test, arch_for(name, test), seeds, eval_of(cfg))
        text.append(rep.summary())
        for s, acc in zip(seeds, rep.accuracies):
            rows.append({"arch": name, "seed": s, "accuracy": acc, "accuracy_mean": rep.accuracy_mean,
                         "accuracy_std": rep.accuracy_std, "epochs": rep.epochs, "lr": rep.lr})
    write_csv(os.path.join(out, "eval.csv"), rows, EVAL_COLUMNS, cfg.fingerprint)
    with open(os.path.join(out, "eval.txt"), "w") as fh:
        fh.write("\n".join(text) + "\n")
    print("\n".join(text))
    return {"reports": len(names)}


def cmd_coreset(cfg, args, out):
    train, _ = datasets(cfg)
    sel = coreset(train, cfg["coreset.ipc"], cfg["coreset.method"], seed=cfg["run.seed"])
    _budget(cfg, sel)
    save_artifact(sel, os.path.join(out, "coreset.vdst"))
    return {"items": len(sel.labels), "indices": sel.meta["indices"]}


def cmd_sweep(cfg, args, out):
    train, test = datasets(cfg)
    sw = cfg.section("sweep")
    seeds = int_list(cfg["eval.seeds"]) if sw["evaluate"] else [cfg["run.seed"]]
    points = grid(int_list(sw["n_syn"]), int_list(sw["n_real"]), int_list(sw["k"]),
                  [m.strip() for m in sw["interp"].split(",")], sw["l_syn"], seeds)
    if not points:
        raise InvalidConfigError("the sweep grid contains no valid schedule")
    arch = arch_for(cfg["model.arch"], train)
    rows = run_sweep(points, train, test if sw["evaluate"] else None, match_of(cfg, iterations=sw["iterations"]),
                     arch, sw["l_syn"], cfg["match.ipc"], eval_of(cfg))
    write_csv(os.path.join(out, "sweep.csv"), rows, SWEEP_COLUMNS, cfg.fingerprint)
    ic = cfg.section("interp")
    table = interpolator_table(train, test, sorted(set(int_list(sw["n_syn"]))), sw["l_syn"],
                               InterpolatorConfig(ic["epochs"], ic["lr"], ic["batch_size"], ic["width"], ic["depth"],
                                                  cfg["run.seed"]),
                               parametric=ic["epochs"] > 0)
    write_csv(os.path.join(out, "interpolators.csv"), table, INTERP_COLUMNS, cfg.fingerprint)
    return {"rows": len(rows)}


def cmd_inspect(cfg, args, out):
    path = args.artifact or cfg["inspect.artifact"]
    if not path:
        raise InvalidConfigError("inspect needs --artifact PATH")
    obj = load_artifact(path)
    report = storage_bytes(obj) if obj is None or isinstance(obj, (SyntheticSet, DistilledArtifact)) else None
    if report is None:
        raise InvalidInputError(f"no storage report for {type(obj).__name__}")
    write_csv(os.path.join(out, "storage.csv"),
              [{"component": k, "bytes": v} for k, v in report.components.items()] +
              [{"component": "total", "bytes": report.total}], STORAGE_COLUMNS, cfg.fingerprint)
    text = report.render()
    with open(os.path.join(out, "storage.txt"), "w") as fh:
        fh.write(text + "\n")
    print(text)
    grids = 0
    if obj is not None:
        clips, _ = obj.materialize()
        for i in range(min(len(clips), cfg["inspect.grid_items"])):
            if clips.shape[1] < 2:
                break
            diffs = interframe_differences(clips[i])
            if diffs.shape[1] not in (1, 3):
                diffs = diffs[:, :1]
            save_image_grid(diffs, os.path.join(out, f"diff_{i:03d}.png"))
            grids += 1
    return {"bytes": report.total, "grids": grids}


HANDLERS = {
    "distill": cmd_distill,
    "distill-disentangled": cmd_distill_disentangled,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "coreset": cmd_coreset,
    "inspect": cmd_inspect,
    "generate": cmd_generate,
    "experts": cmd_experts,
}


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vidistill", description="Video dataset distillation toolkit.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="INI config file")
    p.add_argument("--seed", type=int, help="overrides run.seed")
    p.add_argument("--budget-bytes", type=int, help="overrides run.budget_bytes")
    p.add_argument("--out", help="output directory (overrides run.out)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override")
    p.add_argument("--artifact", help="input artifact for evaluate / inspect ('full' = real train set)")
    p.add_argument("--experts", help="expert-trajectory artifact for trajectory matching")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


class _ArgumentError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _ArgumentError(message)


def _error(kind: str, code: int, message: str, **extra) -> int:
    print(json.dumps({"error": kind, "exit_code": code, "message": message, **extra}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    parser.__class__ = _Parser
    try:
        args = parser.parse_args(argv)
    except _ArgumentError as exc:
        return _error("InvalidConfigError", 2, str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        if args.seed is not None:
            overrides.append(f"run.seed={args.seed}")
        if args.budget_bytes is not None:
            overrides.append(f"run.budget_bytes={args.budget_bytes}")
        if args.out is not None:
            overrides.append(f"run.out={args.out}")
        cfg = load_config(args.config, overrides)
        out = cfg["run.out"]
        os.makedirs(out, exist_ok=True)
        torch.manual_seed(cfg["run.seed"])
        result = HANDLERS[args.command](cfg, args, out)
        with open(os.path.join(out, "config.ini"), "w") as fh:
            fh.write(f"# fingerprint {cfg.fingerprint}\n" + cfg.to_ini())
        print(json.dumps({"command": args.command, "out": out, "config_hash": cfg.fingerprint, **result}))
        return 0
    except VidistillError as exc:
        extra = {}
        for attr in ("iteration", "needed", "budget"):
            if getattr(exc, attr, None) is not None:
                extra[attr] = getattr(exc, attr)
        return _error(type(exc).__name__, exc.exit_code, str(exc), **extra)
    except Exception as exc:  # noqa: BLE001 - last-resort error record
        log.debug("unexpected failure", exc_info=True)
        return _error(type(exc).__name__, 1, str(exc))


if __name__ == "__main__":
    sys.exit(main())
