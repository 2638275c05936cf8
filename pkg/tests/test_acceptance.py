"""Acceptance criteria, one PASS/FAIL line per criterion.

Lines are printed as each check finishes and repeated in the pytest terminal
summary under "acceptance criteria". The two training-heavy checks (full
desk-scale run and the paired-seed ablation sweep) take roughly 20 and 90
minutes on one CPU core; their artifacts land in ``results/``.
"""
import math
import time
from pathlib import Path

import numpy as np
import pytest

from scape import checkpoint
from scape.ablation import Budget, run_ablation
from scape.cli import main as cli_main
from scape.data import Dataset
from scape.evaluate import eval_episodes, evaluate
from scape.metrics import auc, nme, pck
from scape.model import EpisodeBatch, ModelConfig, ScapeModel, decode_argmax
from scape.tensor import Tensor, grad_check, l1_loss, layer_norm, matmul, softmax_rows
from scape.train import overfit_episode, train

from test_model import kar_zeroed_pair, toy_gradient_error
from test_tensor import _op_cases, naive_matmul, naive_softmax

RESULTS = Path(__file__).resolve().parent.parent / "results"

# desk-scale settings shared by the full run and the sweep
N_CATEGORIES = 72  # 50 train / 7 val / 15 test
DATA_SEED = 0
BATCH = 8
LR = 2e-3
FULL_STEPS = 180 * 111  # 19980
SWEEP_STEPS = 180 * 11  # 1980 per run
SEEDS = (0, 1, 2, 3, 4)
EVAL_EPISODES = 300
SWEEP_VARIANTS = ("scape", "no_kar", "no_gkp", "shared_qk", "mask_kk",
                  "matching_head", "map_regression_head")


def _dataset():
    return Dataset.generate(N_CATEGORIES, DATA_SEED)


# ---------------------------------------------------------------- gradients

def test_gradient_correctness(criterion):
    t0 = time.time()
    op_err = 0.0
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        for f, shape in _op_cases(rng).values():
            op_err = max(op_err, grad_check(f, Tensor(rng.normal(size=shape)), 1e-6))
    e2e = toy_gradient_error()
    dt = time.time() - t0
    ok = op_err < 1e-5 and e2e < 1e-4 and dt < 120
    assert criterion("gradient correctness", ok,
                     f"per-op max rel err {op_err:.2e} (<1e-5, 10 seeds), end-to-end toy {e2e:.2e} "
                     f"(<1e-4), {dt:.0f}s (<120s)")


# ---------------------------------------------------------------- attention invariants

def test_attention_invariants(criterion):
    ds = _dataset()
    rng = np.random.default_rng(7)
    variants = ("scape", "no_kar", "mask_kk", "no_gkp", "lite")
    worst_row = worst_assign = 0.0
    min_entry = 0.0
    kk_mass = 0.0
    for i in range(100):
        v = variants[i % len(variants)]
        m = ScapeModel(ModelConfig(variant=v, seed=i))
        m.training = False
        batch = EpisodeBatch.from_episodes([ds.sample_episode("train", 1, rng) for _ in range(2)], 12)
        rec = m.forward(batch, record=True, with_loss=False).record
        K = m.cfg.K_max
        for layer in rec.layers:
            worst_row = max(worst_row, np.abs(layer.attn.sum(-1) - 1).max())
            min_entry = min(min_entry, layer.attn.min())
            if layer.assign is not None:
                a = layer.assign[batch.valid]
                worst_assign = max(worst_assign, np.abs(a.sum(-1) - 1).max())
            if v == "mask_kk" and layer.kind == "interactor":
                kk_mass = max(kk_mass, np.abs(layer.attn[:, :, :K, :K]).max())
    ok = worst_row <= 1e-9 and worst_assign <= 1e-9 and kk_mass == 0.0 and min_entry >= 0
    assert criterion("attention invariants", ok,
                     f"100 forwards: max |row sum - 1| {worst_row:.1e} (base + refined), "
                     f"assign {worst_assign:.1e}, min entry {min_entry:.1e}, mask_kk kk mass {kk_mass}")


def test_kar_zero_identity(criterion):
    full, base = kar_zeroed_pair(seed=3)
    ds = _dataset()
    rng = np.random.default_rng(11)
    same = 0
    for _ in range(20):
        batch = EpisodeBatch.from_episodes([ds.sample_episode("test", 1, rng)], 12)
        a, b = full.forward(batch), base.forward(batch)
        same += a.raw.data.tobytes() == b.raw.data.tobytes() and a.loss.data.tobytes() == b.loss.data.tobytes()
    assert criterion("KAR-zero identity", same == 20, f"{same}/20 episodes bitwise equal")


# ---------------------------------------------------------------- oracles

def test_oracle_equivalences(criterion):
    rng = np.random.default_rng(21)
    errs = {}
    a, b = rng.normal(size=(6, 7)), rng.normal(size=(7, 5))
    errs["matmul"] = np.abs(matmul(Tensor(a), Tensor(b)).data - naive_matmul(a, b)).max()
    x = rng.normal(size=(5, 9)) * 3
    keep = rng.random((5, 9)) > 0.3
    keep[:, 0] = True
    sm = softmax_rows(Tensor(x), keep).data
    errs["softmax"] = max(np.abs(sm[i] - naive_softmax(list(x[i]), list(keep[i]))).max() for i in range(5))
    v, g, bb = rng.normal(size=9), rng.normal(size=9), rng.normal(size=9)
    mu = sum(v) / 9
    var = sum((t - mu) ** 2 for t in v) / 9
    ln = [(t - mu) / math.sqrt(var + 1e-5) * gi + bi for t, gi, bi in zip(v, g, bb)]
    errs["layernorm"] = np.abs(layer_norm(Tensor(v), Tensor(g), Tensor(bb), 1e-5).data - ln).max()
    p, t = rng.normal(size=(3, 6, 2)), rng.normal(size=(3, 6, 2))
    vis = rng.random((3, 6)) > 0.3
    tot, cnt = 0.0, 0
    for i in range(3):
        for j in range(6):
            if vis[i, j]:
                tot += abs(p[i, j, 0] - t[i, j, 0]) + abs(p[i, j, 1] - t[i, j, 1])
                cnt += 2
    errs["l1"] = abs(float(l1_loss(Tensor(p), t, vis).data) - tot / cnt)
    maps = rng.integers(0, 4, size=(100, 64)).astype(float)
    dec = decode_argmax(maps, 8)
    mism = 0
    for m_, xy in zip(maps, dec):
        best = max(range(64), key=lambda c: (m_[c], -c))
        mism += tuple(xy) != ((best % 8 + 0.5) / 8, (best // 8 + 0.5) / 8)
    errs["decode_mismatches"] = mism
    # metrics against loops
    gt, pr = rng.random((40, 2)), rng.random((40, 2))
    vis = rng.random(40) > 0.2
    d = [math.hypot(*(pr[i] - gt[i])) / 0.6 for i in range(40) if vis[i]]
    errs["pck"] = abs(pck(pr, gt, vis, 0.6) - sum(x <= 0.2 for x in d) / len(d))
    ts = [0.2 * i / 20 for i in range(21)]
    curve = [sum(x <= s for x in d) / len(d) for s in ts]
    area = sum((curve[i] + curve[i + 1]) / 2 * (ts[i + 1] - ts[i]) for i in range(20)) / 0.2
    errs["auc"] = abs(auc(d) - area)
    errs["nme"] = abs(nme(d) - sum(d) / len(d))
    tol = {"matmul": 1e-12, "softmax": 1e-12, "layernorm": 1e-10, "l1": 1e-12,
           "decode_mismatches": 0, "pck": 0, "auc": 1e-12, "nme": 1e-12}
    ok = all(errs[k] <= tol[k] for k in tol)
    detail = ", ".join(f"{k} {errs[k]:.1e}" if isinstance(errs[k], float) else f"{k} {errs[k]}" for k in tol)
    assert criterion("oracle equivalences", ok, detail)


# ---------------------------------------------------------------- trainability

def test_single_episode_overfit(criterion):
    ds = _dataset()
    batch = EpisodeBatch.from_episodes([ds.sample_episode("train", 1, np.random.default_rng(5))], 12)
    losses = overfit_episode(ScapeModel(ModelConfig()), batch, steps=300, lr=1e-3)
    below = next((i + 1 for i, l in enumerate(losses) if l < 0.02), None)
    ok = below is not None
    assert criterion("trainability: single-episode overfit", ok,
                     f"L1 {losses[0]:.3f} -> {losses[-1]:.4f}; first below 0.02 at step {below} (<=300)")


@pytest.mark.slow
def test_full_desk_scale_training(criterion):
    ds = _dataset()
    assert len(ds.splits["train"]) == 50
    model = ScapeModel(ModelConfig())
    t0 = time.time()
    log = train(model, ds, FULL_STEPS, batch_size=BATCH, base_lr=LR, seed=0, steps_per_epoch=111,
                log_every=50)
    dt = time.time() - t0
    res = evaluate(model, eval_episodes(ds, "test", EVAL_EPISODES), 12)
    RESULTS.mkdir(exist_ok=True)
    checkpoint.save(model, RESULTS / "full_scape.ckpt")
    (RESULTS / "full_scape_loss.csv").write_text(log.to_csv())
    s = res.summary()
    (RESULTS / "full_scape_metrics.txt").write_text(
        "".join(f"{k}={v:.6f}\n" for k, v in s.items()) + f"train_seconds={dt:.0f}\n")
    ok = res.pck >= 0.75 and dt <= 1800
    assert criterion("trainability: full desk-scale run", ok,
                     f"{FULL_STEPS} steps x batch {BATCH}, 50 train categories: test PCK@0.2 {res.pck:.3f} "
                     f"(>=0.75), AUC {res.auc:.3f}, NME {res.nme:.3f}, {dt / 60:.1f} min (<=30)")


# ---------------------------------------------------------------- ablation trends

@pytest.fixture(scope="module")
def sweep():
    budget = Budget(SWEEP_STEPS, BATCH, LR, eval_episodes=EVAL_EPISODES)
    report = run_ablation(SWEEP_VARIANTS, SEEDS, budget, _dataset())
    RESULTS.mkdir(exist_ok=True)
    (RESULTS / "ablation.csv").write_text(report.to_csv())
    (RESULTS / "ablation_summary.txt").write_text(report.summary())
    return report


def _ordering(report, pairs, metric="pck"):
    parts, ok = [], True
    for better, worse in pairs:
        d = report.paired_deltas(better, worse, metric)
        mean_d = float(np.mean(list(d.values()))) if d else math.nan
        held = bool(report.holds(better, worse, metric)) and len(d) >= 5
        ok &= held
        parts.append(f"{better} {report.mean(better, metric):.3f} > {worse} {report.mean(worse, metric):.3f} "
                     f"(paired delta {mean_d:+.4f}, n={len(d)})")
    return ok, "; ".join(parts)


@pytest.mark.slow
def test_component_ablation_trend(sweep, criterion):
    ok, detail = _ordering(sweep, [("scape", "no_kar"), ("scape", "no_gkp"),
                                   ("no_kar", "shared_qk"), ("no_gkp", "shared_qk")])
    assert criterion("component ablation trend (full > no_kar, no_gkp > shared_qk)", ok, detail)


@pytest.mark.slow
def test_head_ablation_trend(sweep, criterion):
    ok, detail = _ordering(sweep, [("shared_qk", "map_regression_head"),
                                   ("map_regression_head", "matching_head")])
    assert criterion("head ablation trend (coordinate > token-regressed map > explicit matching)", ok, detail)


@pytest.mark.slow
def test_keypoint_masking_trend(sweep, criterion):
    ok = sweep.mean("mask_kk") < sweep.mean("scape") and len(sweep.per_seed("mask_kk")) >= 5
    d = sweep.paired_deltas("scape", "mask_kk")
    assert criterion("keypoint self-attention masking trend (mask_kk < full)", ok,
                     f"full {sweep.mean('scape'):.3f} vs mask_kk {sweep.mean('mask_kk'):.3f}, "
                     f"paired delta {np.mean(list(d.values())):+.4f}")


@pytest.mark.slow
def test_strata_trend(sweep, criterion):
    ok1, d1 = _ordering(sweep, [("scape", "no_kar")], "pck_occluded")
    ok2, d2 = _ordering(sweep, [("scape", "no_gkp")], "pck_symmetric")
    assert criterion("strata trend (occluded: full > no_kar; symmetric: full > no_gkp)", ok1 and ok2,
                     f"occluded {d1}; symmetric {d2}")


# ---------------------------------------------------------------- reproducibility

def test_reproducibility(criterion, tmp_path):
    tiny = ["--d-model", "16", "--n-heads", "2", "--batch-size", "4", "--base-lr", "1e-3",
            "--categories", "20", "--epochs", "3", "--steps-per-epoch", "4", "--eval-episodes", "40"]
    blobs = []
    for run in ("a", "b"):
        out = tmp_path / run
        for cmd in ("gen", "train", "eval"):
            assert cli_main([cmd, "--out-dir", str(out), *tiny]) == 0
        blobs.append({f: (out / f).read_bytes() for f in ("manifest.csv", "loss.csv", "metrics.csv",
                                                          "model.ckpt")})
    same = {f: blobs[0][f] == blobs[1][f] for f in blobs[0]}
    model = checkpoint.load(tmp_path / "a" / "model.ckpt")
    round_trip = checkpoint.save(model, tmp_path / "again.ckpt") == blobs[0]["model.ckpt"]
    ok = all(same.values()) and round_trip
    assert criterion("reproducibility", ok,
                     ", ".join(f"{f} {'identical' if v else 'DIFFERS'}" for f, v in same.items())
                     + f", checkpoint round-trip {'byte-exact' if round_trip else 'DIFFERS'}")
