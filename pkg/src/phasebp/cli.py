"""Command-line entry point: ``phasebp <command> [options]``.

Exit codes: 0 success, 1 runtime failure (e.g. diverged training),
2 usage or validation error.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import json
import logging
import os
import shutil
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import synth
from .bbpnet import BbpConfig, BpBounds
from .drpnet import PROFILES, DrpNet, profile
from .losses import LossWeights
from .synth import SpecDistribution, SynthError
from .trainer import TrainConfig, TrainingDiverged

log = logging.getLogger("phasebp")

DATA_ROOT_ENV = "PHASEBP_DATA_ROOT"
CONFIG_SCHEMA_VERSION = 1


class UsageError(Exception):
    """Invalid invocation or configuration (exit code 2)."""


# -- config handling -------------------------------------------------------------
SYNTH_DEFAULTS = {"n_windows": 300, "seed": 0, "profile": "small", "distribution": {}}
TRAIN_DEFAULTS = {"seed": 0, "profile": "small", "train": {}, "bounds": {}, "input_mode": "both",
                  "split": "train"}
EVAL_DEFAULTS = {"split": "test"}


def load_config(path: str | None, defaults: dict) -> dict:
    cfg = json.loads(json.dumps(defaults))
    if path is None:
        return cfg
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        user = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(user, dict):
        raise UsageError(f"{p}: top level must be an object")
    version = user.pop("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise UsageError(f"{p}: unsupported config schema_version {version}")
    unknown = set(user) - set(defaults)
    if unknown:
        raise UsageError(f"{p}: unknown config keys {sorted(unknown)}")
    cfg.update(user)
    return cfg


def _override(cfg: dict, key: str, value) -> None:
    if value is not None:
        cfg[key] = value


def _data_root() -> Path:
    return Path(os.environ.get(DATA_ROOT_ENV, "."))


def _resolve(path: str | None, what: str, must_exist: bool = True) -> Path:
    if path is None:
        raise UsageError(f"missing {what} path")
    p = Path(path)
    if not p.is_absolute() and not p.exists():
        p = _data_root() / p
    if must_exist and not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


def _run_dir(base: Path, name: str, seed: int, force: bool, explicit: str | None) -> Path:
    if explicit:
        run = Path(explicit)
    else:
        stamp = _dt.datetime.now().strftime("%Y%m%d-%H%M%S")
        run = base / f"{name}-{stamp}-seed{seed}"
    if run.exists() and any(run.iterdir()):
        if not force:
            raise UsageError(f"output directory {run} exists and is not empty (use --force)")
        shutil.rmtree(run)
    run.mkdir(parents=True, exist_ok=True)
    return run


def code_version() -> str:
    from importlib.metadata import PackageNotFoundError, version

    try:
        v = version("artifact")
    except PackageNotFoundError:
        v = "unknown"
    try:
        desc = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                              text=True, cwd=Path(__file__).parent, timeout=5)
        if desc.returncode == 0 and desc.stdout.strip():
            return f"{v}+{desc.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return v


def _train_config(cfg: dict) -> TrainConfig:
    tc = dict(cfg.get("train", {}))
    tc.setdefault("seed", cfg["seed"])
    try:
        return TrainConfig.from_json(tc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid training config: {exc}") from exc


# -- commands ----------------------------------------------------------------------
def cmd_synth(args) -> int:
    cfg = load_config(args.config, SYNTH_DEFAULTS)
    _override(cfg, "n_windows", args.n_windows)
    _override(cfg, "seed", args.seed)
    _override(cfg, "profile", args.profile)
    if cfg["profile"] not in synth.PROFILES:
        raise UsageError(f"unknown profile {cfg['profile']!r}")
    dist_cfg = dict(cfg["distribution"])
    dist_cfg.setdefault("size", synth.PROFILES[cfg["profile"]])
    try:
        dist = SpecDistribution.from_json(dist_cfg)
    except (TypeError, SynthError) as exc:
        raise UsageError(f"invalid spec distribution: {exc}") from exc
    if int(cfg["n_windows"]) < 1:
        raise UsageError("n_windows must be at least 1")
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            raise UsageError(f"output directory {out} exists and is not empty (use --force)")
        shutil.rmtree(out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {out}: {exc}") from exc
    windows = synth.make_dataset(int(cfg["n_windows"]), dist, int(cfg["seed"]))
    manifest = {"seed": int(cfg["seed"]), "profile": cfg["profile"],
                "spec_distribution": dist.to_json(), "code_version": code_version(),
                "splits": {s: sum(w.split == s for w in windows) for s in ("train", "val", "test")}}
    synth.write_dataset(windows, out, manifest)
    print(json.dumps({"dataset": str(out), "n_windows": len(windows)}))
    return 0


def _load_split(path: Path, split: str):
    try:
        windows = synth.read_dataset(path, None if split == "all" else split)
    except (SynthError, OSError, KeyError, ValueError) as exc:
        raise UsageError(f"cannot read dataset {path}: {exc}") from exc
    if not windows:
        raise UsageError(f"dataset {path} has no windows in split {split!r}")
    return windows


def _drp_config(cfg: dict, windows):
    c = windows[0].clip.shape
    prof = profile(cfg["profile"], seed=int(cfg["seed"]))
    if (prof.T, prof.H, prof.W) != tuple(c[1:]):
        raise UsageError(f"profile {cfg['profile']!r} expects clips of "
                         f"{(prof.T, prof.H, prof.W)}, dataset has {tuple(c[1:])}")
    return prof


def cmd_train_drp(args) -> int:
    from . import trainer

    cfg = load_config(args.config, TRAIN_DEFAULTS)
    _override(cfg, "seed", args.seed)
    _override(cfg, "profile", args.profile)
    _override(cfg, "split", args.split)
    if args.epochs is not None:
        cfg["train"] = dict(cfg["train"], epochs=args.epochs)
    data = _resolve(args.data, "dataset")
    train = _train_config(cfg)
    windows = _load_split(data, cfg["split"])
    drp_cfg = _drp_config(cfg, windows)
    run = _run_dir(Path(args.runs), "drp", train.seed, args.force, args.out)
    trainer.save_json({"command": "train-drp", "config": cfg, "dataset": str(data),
                       "code_version": code_version()}, run / "run_config.json")
    result = trainer.train_stage1(windows, train, drp_cfg, run,
                                  progress=lambda e, l: log.info("epoch %d loss %.4f", e, l))
    print(json.dumps({"checkpoint": str(result.checkpoint), "run_dir": str(run),
                      "final_loss": result.epoch_losses[-1] if result.epoch_losses else None}))
    return 0


def cmd_train_bbp(args) -> int:
    from . import trainer

    cfg = load_config(args.config, TRAIN_DEFAULTS)
    _override(cfg, "seed", args.seed)
    _override(cfg, "split", args.split)
    _override(cfg, "input_mode", args.input_mode)
    if args.epochs is not None:
        cfg["train"] = dict(cfg["train"], epochs=args.epochs)
    data = _resolve(args.data, "dataset")
    ckpt = _resolve(args.drp, "DRP checkpoint")
    train = _train_config(cfg)
    try:
        bounds = BpBounds(**cfg["bounds"])
        bbp_cfg = BbpConfig(bounds=bounds, input_mode=cfg["input_mode"], seed=train.seed)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid BBP config: {exc}") from exc
    windows = _load_split(data, cfg["split"])
    try:
        drp = trainer.load_drp(ckpt)
    except (ValueError, KeyError) as exc:
        raise UsageError(f"cannot load DRP checkpoint {ckpt}: {exc}") from exc
    run = _run_dir(Path(args.runs), "bbp", train.seed, args.force, args.out)
    trainer.save_json({"command": "train-bbp", "config": cfg, "dataset": str(data),
                       "drp_checkpoint": str(ckpt), "code_version": code_version()},
                      run / "run_config.json")
    result = trainer.train_stage2(windows, drp, train, bbp_cfg, run,
                                  progress=lambda e, l: log.info("epoch %d loss %.4f", e, l))
    print(json.dumps({"checkpoint": str(result.checkpoint), "run_dir": str(run),
                      "final_loss": result.epoch_losses[-1] if result.epoch_losses else None}))
    return 0


def cmd_eval(args) -> int:
    from . import evalkit

    cfg = load_config(args.config, EVAL_DEFAULTS)
    _override(cfg, "split", args.split)
    data = _resolve(args.data, "dataset")
    drp = _resolve(args.drp, "DRP checkpoint")
    bbp = _resolve(args.bbp, "BBP checkpoint")
    windows = _load_split(data, cfg["split"])
    out = Path(args.out)
    report = evalkit.evaluate_run(drp, bbp, windows, out)
    print(json.dumps({"report": str(out / "report.json"),
                      "sbp_mae": report["targets"]["sbp"]["mae"],
                      "dbp_mae": report["targets"]["dbp"]["mae"],
                      "hr_facial_mae": report["targets"]["hr_facial"]["mae"]}))
    return 0


def cmd_infer(args) -> int:
    from . import trainer
    from .bbpnet import build_bbp_batch

    clip_dir = _resolve(args.clip, "clip")
    try:
        clip, rate = synth.read_clip(clip_dir)
    except (SynthError, OSError) as exc:
        raise UsageError(str(exc)) from exc
    drp = trainer.load_drp(_resolve(args.drp, "DRP checkpoint"))
    bbp = trainer.load_bbp(_resolve(args.bbp, "BBP checkpoint"))
    c = drp.config
    if clip.shape != (3, c.T, c.H, c.W):
        raise UsageError(f"clip shape {clip.shape} does not match network input "
                         f"{(3, c.T, c.H, c.W)}")
    if not np.all(np.isfinite(clip)) or clip.min() < 0 or clip.max() > 1:
        raise UsageError("clip values must be finite and within [0, 1]")
    window = synth.WindowSample(clip, None, None, 0.0, 0.0, 0.0)
    facial, acral = trainer.drp_infer(drp, [window])
    hr_f, hr_a = trainer.hr_from_signals(facial, rate)[0], trainer.hr_from_signals(acral, rate)[0]
    sbp, dbp = trainer.bbp_infer(bbp, build_bbp_batch(facial, acral, rate, bbp.config.input_mode))
    result = {"hr_facial": float(hr_f), "hr_acral": float(hr_a), "sbp": float(sbp[0]),
              "dbp": float(dbp[0])}
    text = json.dumps(result, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def cmd_describe(args) -> int:
    net = DrpNet(profile(args.profile))
    print(net.describe_json())
    return 0


# -- parser ------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phasebp", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True, help="dataset directory")
    s.add_argument("--config", help="JSON config file")
    s.add_argument("--n-windows", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--profile", choices=sorted(synth.PROFILES))
    s.add_argument("--force", action="store_true", help="replace a non-empty output directory")
    s.set_defaults(func=cmd_synth)

    for name, func, help_ in (("train-drp", cmd_train_drp, "stage 1: train the rPPG network"),
                              ("train-bbp", cmd_train_bbp, "stage 2: train the BP network")):
        t = sub.add_parser(name, help=help_)
        t.add_argument("--data", required=True, help=f"dataset directory (relative paths also "
                                                     f"resolve under ${DATA_ROOT_ENV})")
        t.add_argument("--config", help="JSON config file")
        t.add_argument("--seed", type=int)
        t.add_argument("--epochs", type=int)
        t.add_argument("--split", choices=("train", "val", "test", "all"))
        t.add_argument("--runs", default="runs", help="parent directory for run directories")
        t.add_argument("--out", help="explicit run directory (overrides --runs naming)")
        t.add_argument("--force", action="store_true")
        if name == "train-drp":
            t.add_argument("--profile", choices=sorted(PROFILES))
            t.add_argument("--small", dest="profile", action="store_const", const="small",
                           help="shorthand for --profile small")
        else:
            t.add_argument("--drp", required=True, help="stage-1 checkpoint")
            t.add_argument("--input-mode", choices=("both", "facial", "acral"))
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="evaluate checkpoints on a dataset split")
    e.add_argument("--data", required=True)
    e.add_argument("--drp", required=True)
    e.add_argument("--bbp", required=True)
    e.add_argument("--out", required=True, help="report directory")
    e.add_argument("--config")
    e.add_argument("--split", choices=("train", "val", "test", "all"))
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="HR and BP for one window directory")
    i.add_argument("clip", help="window directory holding clip.f32 and clip.json")
    i.add_argument("--drp", required=True)
    i.add_argument("--bbp", required=True)
    i.add_argument("--out", help="also write the JSON result here")
    i.set_defaults(func=cmd_infer)

    d = sub.add_parser("describe", help="print the realized DRP layer schedule")
    d.add_argument("--profile", choices=sorted(PROFILES), default="full")
    d.set_defaults(func=cmd_describe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        log.debug("unhandled", exc_info=True)
        print(f"failed: {exc.__class__.__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
