"""Accuracy metrics, Bland-Altman agreement, BHS grading and run reports."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .autodiff.checkpoint import file_digest
from .synth import WindowSample

SCHEMA_VERSION = 1
BHS_THRESHOLDS = {"A": (60.0, 85.0, 95.0), "B": (50.0, 75.0, 90.0), "C": (40.0, 65.0, 85.0)}
TARGETS = ("hr_facial", "hr_acral", "sbp", "dbp")


def _pair(pred, ref) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64).ravel()
    r = np.asarray(ref, dtype=np.float64).ravel()
    if p.size != r.size or p.size == 0:
        raise ValueError(f"need equal non-zero lengths, got {p.size} and {r.size}")
    return p, r


def basic_metrics(pred, ref) -> tuple[float, float, float | None]:
    """``(mae, rmse, r)``; r is None when either side has zero variance."""
    p, r = _pair(pred, ref)
    err = p - r
    mae = float(np.mean(np.abs(err)))
    rmse = float(np.sqrt(np.mean(err ** 2)))
    pc = p - p.mean()
    rc = r - r.mean()
    denom = np.sqrt(np.sum(pc ** 2) * np.sum(rc ** 2))
    corr = None if denom == 0 else float(np.clip(np.sum(pc * rc) / denom, -1.0, 1.0))
    return mae, max(rmse, mae), corr


def bland_altman(pred, ref) -> tuple[float, float, float]:
    """Mean signed error and the 95% limits of agreement (mean +/- 1.96 SD, population SD)."""
    p, r = _pair(pred, ref)
    d = p - r
    mean = float(d.mean())
    sd = float(d.std())
    return mean, mean - 1.96 * sd, mean + 1.96 * sd


def grade_from_percentages(pct5: float, pct10: float, pct15: float) -> str:
    """Best BHS grade whose three cumulative thresholds are all met (inclusive)."""
    for grade, (t5, t10, t15) in BHS_THRESHOLDS.items():
        if pct5 >= t5 and pct10 >= t10 and pct15 >= t15:
            return grade
    return "none"


def bhs_grade(abs_errors) -> tuple[float, float, float, str]:
    e = np.abs(np.asarray(abs_errors, dtype=np.float64).ravel())
    if e.size == 0:
        raise ValueError("no errors to grade")
    pct = [float(100.0 * np.mean(e <= k)) for k in (5.0, 10.0, 15.0)]
    return pct[0], pct[1], pct[2], grade_from_percentages(*pct)


@dataclass
class Predictions:
    hr_facial: np.ndarray
    hr_acral: np.ndarray
    sbp: np.ndarray
    dbp: np.ndarray


@dataclass
class References:
    hr: np.ndarray
    sbp: np.ndarray
    dbp: np.ndarray

    @classmethod
    def from_windows(cls, windows: list[WindowSample]) -> "References":
        return cls(np.array([w.hr_gt for w in windows]), np.array([w.sbp_gt for w in windows]),
                   np.array([w.dbp_gt for w in windows]))


def build_report(pred: Predictions, ref: References, inputs: dict | None = None) -> dict:
    pairs = {"hr_facial": (pred.hr_facial, ref.hr), "hr_acral": (pred.hr_acral, ref.hr),
             "sbp": (pred.sbp, ref.sbp), "dbp": (pred.dbp, ref.dbp)}
    targets = {}
    for name, (p, r) in pairs.items():
        mae, rmse, corr = basic_metrics(p, r)
        targets[name] = {"mae": mae, "rmse": rmse, "pearson_r": corr}
    agreement, grades = {}, {}
    for name in ("sbp", "dbp"):
        p, r = pairs[name]
        mean, lo, hi = bland_altman(p, r)
        agreement[name] = {"mean_error": mean, "loa_low": lo, "loa_high": hi}
        p5, p10, p15, g = bhs_grade(np.asarray(p) - np.asarray(r))
        grades[name] = {"pct_le_5": p5, "pct_le_10": p10, "pct_le_15": p15, "grade": g}
    return {"schema_version": SCHEMA_VERSION, "n_windows": int(len(ref.hr)), "targets": targets,
            "bland_altman": agreement, "bhs": grades, "inputs": inputs or {}}


def report_schema() -> dict:
    text = resources.files("phasebp").joinpath(f"schemas/report-{SCHEMA_VERSION}.json").read_text()
    return json.loads(text)


def validate_report(report: dict) -> None:
    """Raise ``jsonschema.ValidationError`` (or ValueError) when the report is malformed."""
    import jsonschema

    jsonschema.validate(report, report_schema())
    for name, m in report["targets"].items():
        if m["rmse"] < m["mae"]:
            raise ValueError(f"{name}: rmse {m['rmse']} < mae {m['mae']}")
    for name, a in report["bland_altman"].items():
        if not a["loa_low"] <= a["mean_error"] <= a["loa_high"]:
            raise ValueError(f"{name}: limits of agreement do not bracket the mean error")


def _write_pairs(path: Path, header, a, b) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for x, y in zip(a, b):
            w.writerow([repr(float(x)), repr(float(y))])


def write_report(report: dict, pred: Predictions, ref: References, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    for name in ("sbp", "dbp"):
        p, r = np.asarray(getattr(pred, name)), np.asarray(getattr(ref, name))
        _write_pairs(out / f"bland_altman_{name}.csv", ("reference", "signed_error"), r, p - r)
    for name in ("facial", "acral"):
        _write_pairs(out / f"hr_scatter_{name}.csv", ("reference", "predicted"), ref.hr,
                     getattr(pred, f"hr_{name}"))
    return out / "report.json"


def read_pairs(path) -> np.ndarray:
    """Load one of the plot-data CSVs as an ``[n, 2]`` float array."""
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)


def predict(drp, bbp, windows: list[WindowSample], mode: str = "both") -> Predictions:
    from . import trainer
    from .bbpnet import build_bbp_batch

    facial, acral = trainer.drp_infer(drp, windows)
    rate = windows[0].abp.rate
    sbp, dbp = trainer.bbp_infer(bbp, build_bbp_batch(facial, acral, rate, mode))
    return Predictions(trainer.hr_from_signals(facial, rate), trainer.hr_from_signals(acral, rate),
                       sbp, dbp)


def evaluate_run(drp_ckpt, bbp_ckpt, windows: list[WindowSample], out_dir=None,
                 predictor=None) -> dict:
    """Run both networks over ``windows`` and assemble the validated report.

    ``predictor(windows) -> Predictions`` replaces network inference when given.
    """
    from . import trainer

    if not windows:
        raise ValueError("no windows to evaluate")
    ref = References.from_windows(windows)
    inputs = {}
    if predictor is None:
        drp, bbp = trainer.load_drp(drp_ckpt), trainer.load_bbp(bbp_ckpt)
        pred = predict(drp, bbp, windows, bbp.config.input_mode)
        inputs = {"drp_checkpoint_sha256": file_digest(drp_ckpt),
                  "bbp_checkpoint_sha256": file_digest(bbp_ckpt)}
    else:
        pred = predictor(windows)
    inputs["dataset_sha256"] = trainer.dataset_fingerprint(windows)
    report = build_report(pred, ref, inputs)
    validate_report(report)
    if out_dir is not None:
        write_report(report, pred, ref, out_dir)
    return report
