"""Acceptance suite: one test per criterion, each recording a PASS/FAIL summary line.

The training-based criteria share two session fixtures: a 200-window constant-delay
set (phase mechanism, stage-1 overfit) and a delay-coupled set (dual-signal ablation,
stage-2 overfit).
"""

import time

import numpy as np
import pytest

import test_autodiff as TA
from gradcheck import RTOL, check_grads, directional_check, t64
from test_signal import brute_extrema
from phasebp import evalkit, losses, synth, trainer
from phasebp import signal as sig
from phasebp.autodiff import functional as F
from phasebp.autodiff.tensor import Tensor
from phasebp.bbpnet import BbpConfig, BbpNet, BpBounds, scaled_sigmoid
from phasebp.drpnet import DrpConfig, DrpNet, profile
from phasebp.signal import PhysioSignal
from phasebp.synth import SpecDistribution
from phasebp.trainer import TrainConfig

SEEDS = range(20)
RATE = 25.0
BIN_BPM = 60 * RATE / 2048

# phase-shift run: 200 noiseless windows, constant 0.16 s = 4-sample facial-to-acral delay
PHASE_WINDOWS = 200
PHASE_EPOCHS = 15
PHASE_DELAY = 4
# dual-signal run: delay falls by 4 ms per mmHg of SBP above 100
COUPLED_WINDOWS = 64
COUPLED_STAGE1_EPOCHS = 25
COUPLED_STAGE2_EPOCHS = 300


def _train_all(windows):
    for w in windows:
        w.split = "train"
    return windows


@pytest.fixture(scope="session")
def phase_run():
    dist = SpecDistribution(ptt_base=PHASE_DELAY / RATE, ptt_coupling=0.0, noise_sigma=0.0)
    windows = _train_all(synth.make_dataset(PHASE_WINDOWS, dist, seed=0))
    t0 = time.process_time()
    res = trainer.train_stage1(windows, TrainConfig(epochs=PHASE_EPOCHS), profile("small"))
    return windows, res, time.process_time() - t0


@pytest.fixture(scope="session")
def coupled_runs():
    dist = SpecDistribution(ptt_base=0.24, ptt_coupling=0.004)
    windows = _train_all(synth.make_dataset(COUPLED_WINDOWS, dist, seed=1))
    drp = trainer.train_stage1(windows, TrainConfig(epochs=COUPLED_STAGE1_EPOCHS),
                               profile("small", seed=1)).net
    out = {}
    for mode in ("both", "facial", "acral"):
        res = trainer.train_stage2(windows, drp, TrainConfig(epochs=COUPLED_STAGE2_EPOCHS),
                                   BbpConfig(input_mode=mode))
        data = trainer.stage2_data(drp, windows, mode)
        sbp, dbp = trainer.bbp_infer(res.net, data.stacks)
        out[mode] = (np.abs(sbp - data.sbp).mean(), np.abs(dbp - data.dbp).mean())
    return out


# -- 1 -----------------------------------------------------------------------------------------
TINY_DRP = DrpConfig(T=12, H=8, W=8, channels=(3, 4, 4, 4), dilations=(1, 2, 1), pools=((2, 2),),
                     m_inter_layer=2, attention_channels=3, head_channels=(4, 4),
                     head_dilations=(1, 2))
TINY_BBP = BbpConfig(stem=4, blocks=((4, 4), (4, 6)), c_mid=3, head_reduction=2, head_dilation=2)


def _op_checks(rng):
    """Per-coordinate central differences for every differentiable primitive and loss."""
    errs = {}
    for name, (f, shapes) in TA.OPS.items():
        errs[name] = check_grads(f, [t64(rng, s) for s in shapes])
    for groups, dil in ((1, 1), (2, 2)):
        x, w, b = t64(rng, (2, 4, 9)), t64(rng, (4, 4 // groups, 3)), t64(rng, (4,))
        errs[f"conv1d_g{groups}_d{dil}"] = check_grads(
            lambda x, w, b: F.conv1d(x, w, b, dilation=dil, groups=groups), [x, w, b])
    x, w, b = t64(rng, (1, 2, 4, 4, 3)), t64(rng, (2, 2, 3, 3, 3)), t64(rng, (2,))
    errs["conv3d"] = check_grads(lambda x, w, b: F.conv3d(x, w, b, dilation=(2, 1, 1)), [x, w, b])
    x = t64(rng, (2, 3, 4, 4))
    errs["maxpool"] = check_grads(lambda x: F.maxpool_spatial(x, (1, 2, 2)), [x])
    errs["meanpool"] = check_grads(lambda x: F.pool_blocks(x, (2, 2), "mean"), [x])
    v, w, b = t64(rng, (3, 5)), t64(rng, (4, 5)), t64(rng, (4,))
    errs["linear"] = check_grads(lambda v, w, b: F.linear(v, w, b), [v, w, b])
    z = t64(rng, (6,), 3.0)
    errs["scaled_sigmoid"] = check_grads(lambda z: scaled_sigmoid(z, 85.0, 155.0), [z])

    n = 40
    tt = np.arange(n) / RATE
    y = np.sin(2 * np.pi * rng.uniform(0.8, 2.5) * tt) + 0.1 * rng.standard_normal(n)
    yy = np.stack([y, y])
    x = t64(rng, (2, n))
    for name, f in {"l_freq": lambda x: losses.l_freq(x, yy), "l_hr": lambda x: losses.soft_hr(x),
                    "l_time": lambda x: losses.l_time(x, yy), "l_pv": lambda x: losses.l_pv(x, yy),
                    "l_facial": lambda x: losses.l_facial(x, yy, [70.0, 90.0]),
                    "l_acral": lambda x: losses.l_acral(x, yy, [70.0, 90.0])}.items():
        errs[name] = check_grads(f, [x])
    s, d = t64(rng, (2,), 5.0), t64(rng, (2,), 5.0)
    s.data += 125.0
    d.data += 75.0
    abp = np.stack([80 + 40 * (0.5 + 0.5 * y)] * 2)
    errs["l_abp"] = check_grads(lambda x, s, d: losses.l_abp(x, s, d, abp), [x, s, d])
    b = Tensor(rng.choice([-1, 1], 3) * rng.uniform(0.1, 0.9, 3) + rng.choice([0, 2.5], 3),
               requires_grad=True, dtype=np.float64)
    errs["huber"] = check_grads(lambda b: losses.huber_bp(b, np.zeros(3)), [b])
    return errs


def _network_checks(seed, rng):
    drp = DrpNet(TINY_DRP.replace(seed=seed)).astype(np.float64)
    x = rng.random((2, 3, 12, 8, 8))
    ppg = np.stack([np.sin(2 * np.pi * 1.5 * np.arange(12) / RATE)] * 2)
    hr = np.array([90.0, 90.0])

    def drp_loss():
        out = drp(Tensor(x, dtype=np.float64))
        return losses.l_acral(out.acral, ppg, hr).sum() + losses.l_facial(out.facial, ppg, hr).sum()

    bbp = BbpNet(BbpConfig(**{**TINY_BBP.to_json(), "bounds": BpBounds(), "seed": seed}))
    bbp.astype(np.float64)
    stack = Tensor(rng.standard_normal((2, 6, 24)), dtype=np.float64)
    target = rng.uniform(80, 130, 2)

    def bbp_loss():
        s, d = bbp(stack)
        return ((s - target) * (s - target) + (d - target + 40) * (d - target + 40)).sum()

    return {"drp_net": directional_check(drp_loss, drp.parameters(), rng, h=1e-6),
            "bbp_net": directional_check(bbp_loss, bbp.parameters(), rng, h=1e-6)}


def test_criterion_01_gradient_integrity(criterion):
    t0 = time.time()
    worst: dict[str, float] = {}
    for seed in SEEDS:
        rng = np.random.default_rng(1000 + seed)
        for name, e in {**_op_checks(rng), **_network_checks(seed, rng)}.items():
            worst[name] = max(worst.get(name, 0.0), e)
    elapsed = time.time() - t0
    bad = {k: v for k, v in worst.items() if not v < RTOL}
    ok = not bad and elapsed < 600
    criterion(1, ok, f"{len(worst)} operations x {len(SEEDS)} seeds, worst rel err "
                     f"{max(worst.values()):.2e} ({max(worst, key=worst.get)}), {elapsed:.0f} s"
                     + (f"; failing {sorted(bad)}" if bad else ""))
    assert ok


# -- 2 -----------------------------------------------------------------------------------------
def test_criterion_02_oracle_equivalence(criterion):
    rng = np.random.default_rng(2)
    conv_err = 0.0
    for dil, pad in (((1, 1, 1), (1, 1, 1)), ((2, 1, 1), (2, 1, 1)), ((2, 2, 2), (2, 2, 2))):
        x, w, b = rng.standard_normal((2, 5, 6, 6)), rng.standard_normal((3, 2, 3, 3, 3)), \
            rng.standard_normal(3)
        out = F.conv3d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                       Tensor(b, dtype=np.float64), dilation=dil, padding=pad).data
        conv_err = max(conv_err, np.max(np.abs(out - TA.conv3d_loops(x, w, b, dil, pad))))
    for groups, dil in ((1, 1), (1, 3), (2, 2), (4, 1)):
        x, w, b = rng.standard_normal((4, 20)), rng.standard_normal((4, 4 // groups, 3)), \
            rng.standard_normal(4)
        out = F.conv1d(Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
                       Tensor(b, dtype=np.float64), dilation=dil, padding=dil, groups=groups).data
        conv_err = max(conv_err, np.max(np.abs(out - TA.conv1d_loops(x, w, b, dil, dil, groups))))
    pool_exact = True
    for k in (2, 4):
        x = rng.standard_normal((3, 4, 8, 8))
        pool_exact &= np.array_equal(F.maxpool_spatial(Tensor(x, dtype=np.float64),
                                                       (1, k, k)).data, TA.maxpool_loops(x, k, k))
    mismatches = 0
    for k in range(1000):
        n = int(rng.integers(3, 60))
        x = rng.integers(-3, 4, n).astype(float) if k % 3 == 0 else rng.standard_normal(n)
        ex = sig.extrema_sets(x)
        got = tuple(list(a) for a in (ex.peak_times, ex.valley_times, ex.refined_peak_times,
                                      ex.refined_valley_times))
        mismatches += got != tuple(brute_extrema(x))
    ok = conv_err <= 1e-6 and pool_exact and mismatches == 0
    criterion(2, ok, f"conv max abs err {conv_err:.1e}, maxpool exact {pool_exact}, "
                     f"extrema mismatches {mismatches}/1000")
    assert ok


# -- 3 -----------------------------------------------------------------------------------------
def test_criterion_03_spectral_hr(criterion):
    rng = np.random.default_rng(3)
    t = np.arange(150) / RATE
    bpm = np.linspace(30, 180, 50)
    est = np.array([sig.hr_from_spectrum(sig.power_spectrum(
        PhysioSignal(np.sin(2 * np.pi * b / 60 * t + rng.uniform(0, 2 * np.pi))))) for b in bpm])
    err = np.abs(est - bpm)
    ok = bool(np.all(err <= 0.8))
    criterion(3, ok, f"{int(np.sum(err <= 0.8))}/50 sinusoids within 0.8 BPM, "
                     f"worst {err.max():.3f} BPM")
    assert ok


# -- 4 -----------------------------------------------------------------------------------------
def test_criterion_04_bounding(criterion):
    rng = np.random.default_rng(4)
    z = rng.standard_normal(100_000) * rng.choice([1.0, 10.0, 1e3, 1e6], 100_000)
    b = BpBounds()
    violations = 0
    for values in (z, z.astype(np.float32)):
        zs = Tensor(values) if values.dtype == np.float32 else values
        s = scaled_sigmoid(zs, b.sbp_min, b.sbp_max, b.tau)
        d = scaled_sigmoid(zs, b.dbp_min, b.dbp_max, b.tau)
        if isinstance(s, Tensor):
            s, d = s.data, d.data
        violations += int(np.sum(~((s > 85) & (s < 155))) + np.sum(~((d > 45) & (d < 95))))
    mid = (float(scaled_sigmoid(0.0, 85, 155, 2.0)), float(scaled_sigmoid(0.0, 45, 95, 2.0)))
    ok = violations == 0 and mid == (120.0, 70.0)
    criterion(4, ok, f"{violations} bound violations over 2 x 10^5 samples, z=0 -> {mid}")
    assert ok


# -- 5 -----------------------------------------------------------------------------------------
def test_criterion_05_loss_closed_forms(criterion):
    h = losses.huber_bp(Tensor(np.array([0.0, 0.5, 3.0]), dtype=np.float64), np.zeros(3), 1.0)
    huber = [float(v) for v in h.data]
    huber_ok = huber == [0.0, 0.125, 2.5]
    rng = np.random.default_rng(5)
    y = np.sin(2 * np.pi * 1.2 * np.arange(150) / RATE) + 0.05 * rng.standard_normal(150)
    worst = 0.0
    for c in (-3.0, -0.4, 0.7, 5.0):
        v = float(losses.l_pv(Tensor(y + c, dtype=np.float64), y).data.ravel()[0])
        worst = max(worst, abs(v - abs(c) * np.sqrt(2)))
    ok = huber_ok and worst < 1e-9
    criterion(5, ok, f"huber {huber}, L_pv shift worst err {worst:.1e}")
    assert ok


# -- 6 -----------------------------------------------------------------------------------------
@pytest.mark.slow
def test_criterion_06_phase_shift(criterion, phase_run):
    windows, res, cpu = phase_run
    facial, acral = trainer.drp_infer(res.net, windows)
    lags = np.array([sig.xcorr_lag(f, a, 10) for f, a in zip(facial, acral)])
    frac = float(np.mean(np.abs(lags - PHASE_DELAY) <= 2))
    vals, counts = np.unique(lags, return_counts=True)
    hist = ", ".join(f"{v:+d}:{c}" for v, c in zip(vals, counts))
    ok = frac >= 0.8 and cpu <= 1800
    criterion(6, ok, f"{100 * frac:.1f}% of {len(windows)} windows with lag(facial, acral) "
                     f"within 2 of +{PHASE_DELAY} (need 80%); lag histogram {{{hist}}}; "
                     f"{cpu:.0f} s CPU")
    assert frac >= 0.8
    assert cpu <= 1800


# -- 7 -----------------------------------------------------------------------------------------
@pytest.mark.slow
def test_criterion_07_dual_signal(criterion, coupled_runs):
    mae = {m: v[0] for m, v in coupled_runs.items()}
    ok = mae["both"] < mae["facial"] and mae["both"] < mae["acral"]
    criterion(7, ok, "training SBP MAE both {both:.2f} / facial {facial:.2f} / acral {acral:.2f} "
                     "mmHg".format(**mae))
    assert ok


# -- 8 -----------------------------------------------------------------------------------------
def test_criterion_08_augmentation_law(criterion):
    from phasebp import augment

    hits, worst = 0, 0.0
    rng = np.random.default_rng(8)
    for i in range(20):
        hr = float(rng.uniform(62, 88))
        spec = synth.SynthSpec(hr=hr, seed=i, T=300)
        clip = synth.gen_clip(spec)
        mask = synth.skin_mask(spec)
        slow = sig.trace_rate(synth.skin_trace(augment.slow_down(clip[:, :75], 150), mask))
        fast = sig.trace_rate(synth.skin_trace(augment.speed_up(clip), mask))
        # reference is the generator rate times the label scale
        err_slow, err_fast = abs(slow - hr / 2), abs(fast - 2 * hr)
        worst = max(worst, err_slow, err_fast)
        hits += err_slow <= BIN_BPM and err_fast <= BIN_BPM
    ok = hits == 20
    criterion(8, ok, f"{hits}/20 clips halve and double within one bin ({BIN_BPM:.3f} BPM), "
                     f"worst deviation {worst:.3f} BPM")
    assert ok


# -- 9 -----------------------------------------------------------------------------------------
@pytest.mark.slow
def test_criterion_09_overfit(criterion, phase_run, coupled_runs):
    windows, res, _ = phase_run
    facial, acral = trainer.drp_infer(res.net, windows)
    hr = np.array([w.hr_gt for w in windows])
    hr_f = float(np.abs(trainer.hr_from_signals(facial) - hr).mean())
    hr_a = float(np.abs(trainer.hr_from_signals(acral) - hr).mean())
    sbp, dbp = coupled_runs["both"]
    ok = hr_f < 3 and sbp < 5 and dbp < 5
    criterion(9, ok, f"stage-1 HR MAE facial {hr_f:.2f} (acral {hr_a:.2f}) BPM; stage-2 SBP "
                     f"{sbp:.2f}, DBP {dbp:.2f} mmHg")
    assert ok


# -- 10 ----------------------------------------------------------------------------------------
def test_criterion_10_metrics(criterion):
    g1 = evalkit.grade_from_percentages(81.42, 92.04, 94.69)
    g2 = evalkit.grade_from_percentages(64.17, 80.11, 86.63)
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(20):
        p, r = rng.normal(120, 12, 200), rng.normal(118, 9, 200)
        d = p - r
        sd = np.sqrt(np.mean((d - d.mean()) ** 2))
        direct = np.array([d.mean(), d.mean() - 1.96 * sd, d.mean() + 1.96 * sd])
        worst = max(worst, float(np.max(np.abs(np.array(evalkit.bland_altman(p, r)) - direct))))
    ok = (g1, g2) == ("B", "C") and worst <= 1e-9
    criterion(10, ok, f"grades {g1}, {g2}; Bland-Altman max deviation {worst:.1e}")
    assert ok


# -- 11 ----------------------------------------------------------------------------------------
def _pipeline(root):
    dist = SpecDistribution(ptt_base=0.24, ptt_coupling=0.004)
    windows = _train_all(synth.make_dataset(8, dist, seed=11))
    cfg = TrainConfig(epochs=2, seed=11)
    drp = trainer.train_stage1(windows, cfg, profile("small", seed=11), root / "drp")
    bbp = trainer.train_stage2(windows, drp.net, cfg, BbpConfig(seed=11), root / "bbp")
    evalkit.evaluate_run(drp.checkpoint, bbp.checkpoint, windows, root / "report")
    names = ["drp/drp.ckpt", "drp/drp.ckpt.json", "drp/loss_stage1.csv", "bbp/bbp.ckpt",
             "bbp/bbp.ckpt.json", "bbp/loss_stage2.csv", "report/report.json",
             "report/bland_altman_sbp.csv", "report/hr_scatter_facial.csv"]
    return {n: (root / n).read_bytes() for n in names}


def test_criterion_11_determinism(criterion, tmp_path):
    a, b = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
    differing = [n for n in a if a[n] != b[n]]
    ok = not differing
    criterion(11, ok, f"{len(a) - len(differing)}/{len(a)} artifacts bit-identical across runs"
                      + (f"; differing {differing}" if differing else ""))
    assert ok
