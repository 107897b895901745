"""Two-stage training loops, Adam, and the per-step loss log."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment, losses
from . import signal as sig
from .autodiff import tensor as ad
from .autodiff.checkpoint import load_checkpoint, save_checkpoint
from .autodiff.nn import Module
from .autodiff.tensor import Tensor
from .bbpnet import STACK_ORDER, BbpConfig, BbpNet, build_bbp_batch
from .drpnet import DrpConfig, DrpNet
from .losses import LossWeights
from .synth import WindowSample

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "l_freq_f", "l_freq_a", "l_hr_f", "l_hr_a", "l_time", "l_pv_f", "l_pv_a",
               "l_bp_sbp", "l_bp_dbp", "l_abp")


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 20
    seed: int = 0
    weights: LossWeights = LossWeights()
    augment_ratios: dict | None = None  # None disables augmentation
    checkpoint_every: int = 0  # epochs; 0 keeps only the final checkpoint
    max_grad_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive")

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        obj = dict(obj)
        if isinstance(obj.get("weights"), dict):
            obj["weights"] = LossWeights(**obj["weights"])
        unknown = set(obj) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**obj)


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update of ``(name, tensor)`` pairs using their ``.grad``."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params:
        if p.grad is None:
            continue
        g = p.grad
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.shape:
            raise ValueError(f"{name}: moment shape {m.shape} != parameter shape {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = [p.grad for _, p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for _, p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total


# -- data helpers ------------------------------------------------------------
def dataset_fingerprint(windows: list[WindowSample]) -> str:
    h = hashlib.sha256()
    for w in windows:
        h.update(w.window_id.encode())
        h.update(np.ascontiguousarray(w.clip, dtype=np.float32).tobytes())
        h.update(np.ascontiguousarray(w.abp.samples).tobytes())
    return h.hexdigest()


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _clip_batch(windows, idx) -> np.ndarray:
    return np.stack([windows[i].clip for i in idx]).astype(np.float32)


def _targets(windows, idx):
    ppg = np.stack([windows[i].pseudo_ppg.samples for i in idx]).astype(np.float32)
    hr = np.array([windows[i].hr_gt for i in idx], dtype=np.float32)
    return ppg, hr


def drp_infer(net: DrpNet, windows: list[WindowSample], batch_size: int = 8
              ) -> tuple[np.ndarray, np.ndarray]:
    """Facial and acral signals ``[N, T]`` from a frozen network."""
    facial, acral = [], []
    with ad.no_grad():
        for i in range(0, len(windows), batch_size):
            idx = range(i, min(len(windows), i + batch_size))
            out = net(Tensor(_clip_batch(windows, idx)))
            facial.append(out.facial.data)
            acral.append(out.acral.data)
    if not facial:
        t = net.config.T
        return np.zeros((0, t), np.float32), np.zeros((0, t), np.float32)
    return np.concatenate(facial), np.concatenate(acral)


def bbp_infer(net: BbpNet, stacks: np.ndarray, batch_size: int = 64) -> tuple[np.ndarray, np.ndarray]:
    sbp, dbp = [], []
    with ad.no_grad():
        for i in range(0, len(stacks), batch_size):
            s, d = net(Tensor(stacks[i:i + batch_size]))
            sbp.append(s.data)
            dbp.append(d.data)
    return np.concatenate(sbp).astype(np.float64), np.concatenate(dbp).astype(np.float64)


# -- logging -------------------------------------------------------------------
class LossLog:
    def __init__(self, path: Path | None = None):
        self.rows: list[dict] = []
        self.path = path
        self._fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = path.open("w", newline="")
            self._writer = csv.DictWriter(self._fh, fieldnames=LOG_COLUMNS)
            self._writer.writeheader()

    def append(self, row: dict) -> None:
        full = {k: row.get(k, "") for k in LOG_COLUMNS}
        self.rows.append(full)
        if self._fh is not None:
            self._writer.writerow({k: _fmt(v) for k, v in full.items()})
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def read_loss_log(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != LOG_COLUMNS:
            raise ValueError(f"{path}: unexpected loss-log columns {reader.fieldnames}")
        return [{k: (float(v) if v not in ("", None) and k != "step" else
                     (int(v) if k == "step" else None)) for k, v in row.items()} for row in reader]


def _check_finite(value: float, what: str, dump_dir: Path | None, batch: dict) -> None:
    if np.isfinite(value):
        return
    path = None
    if dump_dir is not None:
        dump_dir.mkdir(parents=True, exist_ok=True)
        path = dump_dir / "diverged_batch.npz"
        np.savez(path, **{k: np.asarray(v) for k, v in batch.items()})
    raise TrainingDiverged(f"non-finite {what} ({value}); batch dumped to {path}")


def _mean(t: Tensor) -> float:
    return float(np.mean(t.data))


# -- stage 1 -------------------------------------------------------------------
@dataclass
class StageResult:
    net: Module
    log: list[dict]
    checkpoint: Path | None
    seconds: float
    epoch_losses: list[float]


def _checkpoint_meta(stage: str, net_config, train: TrainConfig, fingerprint: str, epoch: int,
                     extra: dict | None = None) -> dict:
    meta = {"stage": stage, "net_config": net_config.to_json(), "train_config": train.to_json(),
            "dataset_sha256": fingerprint, "epoch": epoch}
    meta.update(extra or {})
    return meta


def stage1_loss(out, ppg: np.ndarray, hr: np.ndarray, weights: LossWeights,
                rate: float = sig.DEFAULT_RATE) -> tuple[Tensor, dict]:
    pf, pa = {}, {}
    lf = losses.l_facial(out.facial, ppg, hr, weights, rate, pf)
    la = losses.l_acral(out.acral, ppg, hr, weights, rate, pa)
    total = (lf + la).mean()
    parts = {"l_freq_f": pf["l_freq"], "l_freq_a": pa["l_freq"], "l_hr_f": pf["l_hr"],
             "l_hr_a": pa["l_hr"], "l_time": pa["l_time"], "l_pv_f": pf["l_pv"],
             "l_pv_a": pa["l_pv"]}
    return total, {k: _mean(v) for k, v in parts.items()}


def _training_windows(windows, train: TrainConfig, epoch: int):
    if not train.augment_ratios:
        return windows, None
    plan = augment.make_plan(windows, train.seed * 100003 + epoch, train.augment_ratios)
    return augment.apply_plan(windows, plan), plan


def train_stage1(windows: list[WindowSample], train: TrainConfig = TrainConfig(),
                 drp_config: DrpConfig | None = None, out_dir=None, net: DrpNet | None = None,
                 progress=None) -> StageResult:
    """Fit the DRP network on pseudo-PPG and HR labels."""
    if not windows:
        raise ValueError("stage 1 needs at least one window")
    t0 = time.time()
    out_dir = Path(out_dir) if out_dir is not None else None
    if net is None:
        c = windows[0].clip.shape
        drp_config = drp_config or DrpConfig(T=c[1], H=c[2], W=c[3], seed=train.seed)
        net = DrpNet(drp_config)
    rate = windows[0].abp.rate
    fp = dataset_fingerprint(windows)
    state = AdamState(train.beta1, train.beta2, train.eps)
    params = list(net.named_parameters())
    loss_log = LossLog(out_dir / "loss_stage1.csv" if out_dir else None)
    rng = np.random.default_rng(np.random.SeedSequence([train.seed, 101]))
    epoch_losses = []
    step = 0
    ckpt = None
    try:
        for epoch in range(train.epochs):
            data, plan = _training_windows(windows, train, epoch)
            if plan is not None and out_dir is not None:
                plan.save(out_dir / f"augment_plan_e{epoch:03d}.json")
            totals = []
            for idx in _batches(len(data), train.batch_size, rng):
                x = _clip_batch(data, idx)
                ppg, hr = _targets(data, idx)
                net.zero_grad()
                out = net(Tensor(x))
                total, parts = stage1_loss(out, ppg, hr, train.weights, rate)
                _check_finite(total.item(), "stage-1 loss", out_dir,
                              {"clips": x, "pseudo_ppg": ppg, "hr": hr,
                               "ids": np.array([data[i].window_id for i in idx])})
                total.backward()
                clip_grad_norm(params, train.max_grad_norm)
                adam_step(params, state, train.lr)
                step += 1
                loss_log.append(dict(step=step, **parts))
                totals.append(total.item())
            epoch_losses.append(float(np.mean(totals)))
            log.info("stage1 epoch %d loss %.5f", epoch + 1, epoch_losses[-1])
            if progress:
                progress(epoch + 1, epoch_losses[-1])
            if out_dir is not None and train.checkpoint_every and (epoch + 1) % train.checkpoint_every == 0:
                save_checkpoint(out_dir / f"drp_e{epoch + 1:03d}.ckpt", net.state_dict(),
                                _checkpoint_meta("drp", net.config, train, fp, epoch + 1))
    finally:
        loss_log.close()
    if out_dir is not None:
        ckpt = save_checkpoint(out_dir / "drp.ckpt", net.state_dict(),
                               _checkpoint_meta("drp", net.config, train, fp, train.epochs))
    return StageResult(net, loss_log.rows, ckpt, time.time() - t0, epoch_losses)


# -- stage 2 -------------------------------------------------------------------
def stage2_loss(sbp_hat: Tensor, dbp_hat: Tensor, sbp, dbp, acral: np.ndarray, abp: np.ndarray,
                delta: float) -> tuple[Tensor, dict]:
    l_s = losses.huber_bp(sbp_hat, sbp, delta)
    l_d = losses.huber_bp(dbp_hat, dbp, delta)
    l_a = losses.l_abp(acral, sbp_hat, dbp_hat, abp)
    total = (l_s + l_d + l_a).mean()
    return total, {"l_bp_sbp": _mean(l_s), "l_bp_dbp": _mean(l_d), "l_abp": _mean(l_a)}


@dataclass
class Stage2Data:
    stacks: np.ndarray  # [N, 6, T]
    acral: np.ndarray  # [N, T], raw DRP output
    abp: np.ndarray  # [N, T]
    sbp: np.ndarray
    dbp: np.ndarray


def stage2_data(drp: DrpNet, windows: list[WindowSample], mode: str = "both") -> Stage2Data:
    facial, acral = drp_infer(drp, windows)
    rate = windows[0].abp.rate if windows else sig.DEFAULT_RATE
    stacks = build_bbp_batch(facial, acral, rate, mode)
    abp = np.stack([w.abp.samples for w in windows]).astype(np.float32)
    sbp = np.array([w.sbp_gt for w in windows], dtype=np.float32)
    dbp = np.array([w.dbp_gt for w in windows], dtype=np.float32)
    return Stage2Data(stacks, acral.astype(np.float32), abp, sbp, dbp)


def train_stage2(windows: list[WindowSample], drp: DrpNet, train: TrainConfig = TrainConfig(),
                 bbp_config: BbpConfig | None = None, out_dir=None, data: Stage2Data | None = None,
                 progress=None) -> StageResult:
    """Fit the BBP network on frozen DRP outputs; DRP parameters are never touched."""
    if not windows:
        raise ValueError("stage 2 needs at least one window")
    t0 = time.time()
    out_dir = Path(out_dir) if out_dir is not None else None
    bbp_config = bbp_config or BbpConfig(seed=train.seed)
    net = BbpNet(bbp_config)
    data = data or stage2_data(drp, windows, bbp_config.input_mode)
    if not np.all(np.isfinite(data.stacks)):
        raise TrainingDiverged("frozen DRP produced non-finite signals")
    fp = dataset_fingerprint(windows)
    state = AdamState(train.beta1, train.beta2, train.eps)
    params = list(net.named_parameters())
    loss_log = LossLog(out_dir / "loss_stage2.csv" if out_dir else None)
    rng = np.random.default_rng(np.random.SeedSequence([train.seed, 202]))
    epoch_losses = []
    step = 0
    ckpt = None
    try:
        for epoch in range(train.epochs):
            totals = []
            for idx in _batches(len(data.stacks), train.batch_size, rng):
                net.zero_grad()
                sbp_hat, dbp_hat = net(Tensor(data.stacks[idx]))
                total, parts = stage2_loss(sbp_hat, dbp_hat, data.sbp[idx], data.dbp[idx],
                                           data.acral[idx], data.abp[idx], train.weights.delta)
                _check_finite(total.item(), "stage-2 loss", out_dir,
                              {"stacks": data.stacks[idx], "sbp": data.sbp[idx],
                               "dbp": data.dbp[idx]})
                total.backward()
                clip_grad_norm(params, train.max_grad_norm)
                adam_step(params, state, train.lr)
                step += 1
                loss_log.append(dict(step=step, **parts))
                totals.append(total.item())
            epoch_losses.append(float(np.mean(totals)))
            log.info("stage2 epoch %d loss %.5f", epoch + 1, epoch_losses[-1])
            if progress:
                progress(epoch + 1, epoch_losses[-1])
            if out_dir is not None and train.checkpoint_every and (epoch + 1) % train.checkpoint_every == 0:
                save_checkpoint(out_dir / f"bbp_e{epoch + 1:03d}.ckpt", net.state_dict(),
                                _checkpoint_meta("bbp", bbp_config, train, fp, epoch + 1,
                                                 {"stack_order": list(STACK_ORDER)}))
    finally:
        loss_log.close()
    if out_dir is not None:
        ckpt = save_checkpoint(out_dir / "bbp.ckpt", net.state_dict(),
                               _checkpoint_meta("bbp", bbp_config, train, fp, train.epochs,
                                                {"stack_order": list(STACK_ORDER),
                                                 "bounds": bbp_config.bounds.to_json()}))
    return StageResult(net, loss_log.rows, ckpt, time.time() - t0, epoch_losses)


# -- checkpoint loading ----------------------------------------------------------
def load_drp(path) -> DrpNet:
    state, manifest = load_checkpoint(path)
    meta = manifest.get("meta", {})
    if meta.get("stage") != "drp":
        raise ValueError(f"{path} is not a DRP checkpoint")
    net = DrpNet(DrpConfig.from_json(meta["net_config"]))
    net.load_state_dict(state)
    return net


def load_bbp(path) -> BbpNet:
    state, manifest = load_checkpoint(path)
    meta = manifest.get("meta", {})
    if meta.get("stage") != "bbp":
        raise ValueError(f"{path} is not a BBP checkpoint")
    net = BbpNet(BbpConfig.from_json(meta["net_config"]))
    net.load_state_dict(state)
    return net


def hr_from_signals(signals: np.ndarray, rate: float = sig.DEFAULT_RATE) -> np.ndarray:
    """Spectral HR (BPM) of each row."""
    return np.array([sig.trace_rate(s, rate) for s in signals])


def save_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True))
