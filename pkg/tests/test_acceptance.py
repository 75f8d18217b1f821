"""Acceptance criteria 1-9. Each test prints one ``CRITERION`` line with its verdict.

Criterion 7 runs the desk-scale end-to-end experiment (about 20 minutes on one CPU
core). Set ``AVSSL_ACCEPT_DIR`` to keep its workdir and reports for inspection.
"""
import dataclasses
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from avssl import experiments as ex, metrics, models, pretext, signal as sig, traindown
from avssl.data import SyntheticSpec, generate_synthetic
from avssl.traindown import DownstreamData, DownstreamSchedule, PretrainSchedule
from helpers import fd_relative_error, tiny_config

CRITERION7_BUDGET_S = 30 * 60


@pytest.fixture
def verdict(capsys):
    def say(label, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {label}: {'PASS' if ok else 'FAIL'} | {detail}", flush=True)
        return ok
    return say


def ccc_brute(y, yhat):
    n = len(y)
    my, mp = sum(y) / n, sum(yhat) / n
    vy = sum((a - my) ** 2 for a in y) / n
    vp = sum((b - mp) ** 2 for b in yhat) / n
    cov = sum((a - my) * (b - mp) for a, b in zip(y, yhat)) / n
    return 2 * cov / (vy + vp + (my - mp) ** 2)


# -- 1 ------------------------------------------------------------------------------------

def test_criterion_1_ccc_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 65))
        y = rng.normal(size=n) * rng.uniform(0.1, 5)
        p = rng.normal(size=n) * rng.uniform(0.1, 5) + rng.normal() + 0.5 * y
        worst = max(worst, abs(metrics.ccc(y, p).ccc - ccc_brute(list(y), list(p))))
    y = rng.normal(size=40)
    identity = metrics.ccc(y, y).ccc
    anti = metrics.ccc([1, 2, 3], [3, 2, 1]).ccc
    third = metrics.ccc([0, 1], [1, 2]).ccc
    elapsed = time.perf_counter() - t0
    ok = (worst <= 1e-9 and abs(identity - 1) <= 1e-12 and anti == -1.0
          and third == pytest.approx(1 / 3, abs=1e-15) and elapsed < 5)
    assert verdict(1, ok, f"max |ccc - brute| {worst:.1e}, ccc(y,y) {identity!r}, "
                          f"cases {anti!r} / {third!r}, {elapsed:.2f}s")


# -- 2 ------------------------------------------------------------------------------------

def _tiny_model():
    torch.manual_seed(0)
    return models.PretextModel(tiny_config()).double()


def _recon_batch():
    g = torch.Generator().manual_seed(0)
    audio = torch.randn(2, 8, 6, generator=g, dtype=torch.float64)
    video = torch.rand(2, 2, 3, 64, 128, generator=g, dtype=torch.float64) * 2 - 1
    return pretext.ReconBatch(video[:, 0], audio, video, torch.tensor([1, 0]))


def _odd_groups():
    rng = np.random.default_rng(4)
    return pretext.build_odd_groups([rng.normal(size=(7, 6)) for _ in range(8)], 4, seed=5)


def test_criterion_2_gradients(verdict):
    t0 = time.perf_counter()
    errs = {}
    y = torch.randn(3, 17, dtype=torch.float64)
    pred = torch.randn(3, 17, dtype=torch.float64, requires_grad=True)
    errs["ccc"] = fd_relative_error(lambda: metrics.ccc_loss_torch(y, pred), [pred])
    m = _tiny_model()
    batch, groups = _recon_batch(), _odd_groups()
    errs["l1"] = fd_relative_error(lambda: pretext.l1_reconstruction_loss(batch, m, seed=3),
                                   m.parameters(), max_coords=8)
    odd_params = list(m.audio_encoder.parameters()) + list(m.odd_scorer.parameters())
    errs["odd"] = fd_relative_error(
        lambda: pretext.odd_one_out_loss(groups, m.audio_encoder, m.odd_scorer), odd_params)

    def composite():
        lv = pretext.l1_reconstruction_loss(batch, m, seed=3)
        la = pretext.odd_one_out_loss(groups, m.audio_encoder, m.odd_scorer)
        return pretext.multitask_loss(lv, la, 0.67)

    errs["composite"] = fd_relative_error(composite, m.parameters(), max_coords=8)
    elapsed = time.perf_counter() - t0
    ok = max(errs.values()) <= 1e-3 and elapsed < 120
    assert verdict(2, ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
                   + f", {elapsed:.1f}s")


# -- 3 ------------------------------------------------------------------------------------

TINY_MODEL = {"enc_hidden": 6, "feat_dim": 6, "id_channels": [2, 2, 2, 2, 2, 2],
              "scorer_hidden": 3, "down_hidden": 4}


def tiny_experiment(**over) -> ex.ExperimentConfig:
    body = {
        "pretrain_data": {"synthetic": {"n_speakers": 4, "clips_per_speaker": 4,
                                        "clip_seconds": 0.5,
                                        "split_ratios": [0.5, 0.25, 0.25], "seed": 1}},
        "downstream_data": {"synthetic": {"n_speakers": 4, "clips_per_speaker": 4,
                                          "clip_seconds": 0.5,
                                          "split_ratios": [0.5, 0.25, 0.25],
                                          "with_video": False, "seed": 2}},
        "pretrain_schedule": {"epochs": 1, "batch_size": 4},
        "downstream_schedule": {"epochs": 2, "batch_size": 4},
        "model": TINY_MODEL, "n_runs": 1,
    }
    body.update(over)
    return ex.build_config(body)


def test_criterion_3_multitask_contracts(verdict, tmp_path):
    lv = torch.tensor(0.3127, dtype=torch.float64)
    la = torch.tensor(1.0871, dtype=torch.float64)
    ends = (torch.equal(pretext.multitask_loss(lv, la, 1.0), lv)
            and torch.equal(pretext.multitask_loss(lv, la, 0.0), la))
    alphas = np.linspace(0, 1, 11)
    vals = np.array([float(pretext.multitask_loss(lv, la, float(a))) for a in alphas])
    linear = float(np.max(np.abs(np.diff(vals, 2))))
    cfg = tiny_experiment(alpha_grid=[0.17, 0.33, 0.50, 0.67, 0.83])
    rep = ex.run_command("ablate-alpha", cfg, ex.Workspace(tmp_path))
    rows = [r["alpha"] for r in rep["table"]]
    ok = ends and linear <= 1e-12 and rows == [0.17, 0.33, 0.50, 0.67, 0.83]
    assert verdict(3, ok, f"endpoints bitwise {ends}, max second difference {linear:.1e}, "
                          f"grid rows {rows}")


# -- 4 ------------------------------------------------------------------------------------

def test_criterion_4_jumbling_and_groups(verdict):
    rng = np.random.default_rng(11)
    invol = multiset = True
    for _ in range(300):
        t = int(rng.integers(2, 400))
        x = rng.normal(size=(t, 3))
        y, spec = sig.jumble(x, seed=rng)
        invol &= sig.jumble(y, spec)[0].tobytes() == x.tobytes()
        multiset &= sorted(map(tuple, x)) == sorted(map(tuple, y))
    clips = [rng.normal(size=(20, 2)) for _ in range(400)]
    groups = pretext.build_odd_groups(clips, 4, seed=1)
    fraction = sum(1 for g in groups for i in range(g.k) if i == g.odd_index) / (4 * len(groups))
    counts = np.zeros(4)
    small = clips[:4]
    for _ in range(10_000):
        counts[pretext.build_odd_groups(small, 4, seed=rng)[0].odd_index] += 1
    band = 3 * math.sqrt(10_000 * 0.25 * 0.75)
    uniform = bool(np.all(np.abs(counts - 2500) <= band))
    ln4 = pretext.odd_cross_entropy(torch.zeros(6, 4, dtype=torch.float64), [0, 1, 2, 3, 0, 1])
    ln4_err = abs(ln4.item() - math.log(4))
    ok = invol and multiset and fraction == 0.25 and uniform and ln4_err <= 1e-9
    assert verdict(4, ok, f"involution {invol}, multiset {multiset}, jumbled fraction "
                          f"{fraction}, odd-index counts {counts.astype(int).tolist()} "
                          f"(3 sigma {band:.0f}), |loss - ln 4| {ln4_err:.1e}")


# -- 5 ------------------------------------------------------------------------------------

def sliding_count(n, win=400, hop=160):
    count, start = 0, 0
    while start + win <= n:
        count, start = count + 1, start + hop
    return count


def test_criterion_5_signal(verdict):
    rng = np.random.default_rng(5)
    lengths = rng.integers(400, 48_000, size=200)
    framing = all(sig.num_frames(int(n)) == sliding_count(int(n)) for n in lengths)
    worst_db = 0.0
    for snr in (-5, 0, 5, 10, 15, 20):
        clean = rng.normal(0, 0.1, 16_000)
        noise = rng.normal(0, 0.4, 9_000)
        mixed = sig.mix_at_snr(clean, noise, snr).samples
        got = 10 * np.log10(np.mean(clean ** 2) / np.mean((mixed - clean) ** 2))
        worst_db = max(worst_db, abs(got - snr))
    x = rng.uniform(-0.5, 0.5, 12_345)
    t = sliding_count(x.size)
    shapes = (sig.compute_log_mel(x).shape, sig.compute_mfcc(x).shape)
    ok = framing and worst_db < 0.1 and shapes == ((t, 80), (t, 39))
    assert verdict(5, ok, f"framing matches oracle {framing}, worst SNR error "
                          f"{worst_db:.1e} dB, log-mel {shapes[0]}, MFCC {shapes[1]}")


# -- 6 ------------------------------------------------------------------------------------

def test_criterion_6_architecture(verdict):
    torch.manual_seed(0)
    m = models.PretextModel(models.canonical_config()).eval()
    lengths = sorted({1, 512} | set(np.random.default_rng(6).integers(1, 513, 10).tolist()))
    with torch.no_grad():
        enc_ok = all(m.audio_encoder(torch.randn(t, 80)).shape == (t, 512) for t in lengths)
        z_id, skips = m.identity_encoder(torch.rand(3, 64, 128) * 2 - 1)
        z_aud = m.audio_encoder(torch.randn(100, 80))
        z_n = m.noise_generator(25, seed=0)[0]
        code = models.assemble_latent(z_aud, z_id, z_n)
        slices = (torch.equal(code[:, :512], z_aud[::4]) and
                  torch.equal(code[:, 512:576], z_id.expand(25, -1)) and
                  torch.equal(code[:, 576:], z_n))
        frames = m.frame_decoder(code * 5, skips)
        x, tail = torch.randn(60, 80), torch.randn(17, 80)
        causal = (m.audio_encoder(torch.cat([x, tail]))[:60].numpy().tobytes()
                  == m.audio_encoder(x).numpy().tobytes())
    ok = (enc_ok and z_id.shape == (64,) and len(skips) == 6 and code.shape == (25, 586)
          and slices and frames.shape == (25, 3, 64, 128)
          and frames.min() >= -1 and frames.max() <= 1 and causal)
    assert verdict(6, ok, f"encoder t x 512 for {len(lengths)} lengths {enc_ok}, identity "
                          f"{tuple(z_id.shape)} with {len(skips)} skips, latent "
                          f"{tuple(code.shape)} slices {slices}, decoder "
                          f"{tuple(frames.shape)} in [{frames.min():.3f}, {frames.max():.3f}]"
                          f", causal prefix bitwise {causal}")


# -- 7 ------------------------------------------------------------------------------------

ACCEPT_ALPHA = 0.83   # validation-selected on the desk corpus; see README


def smoothed(trace, width=3):
    return np.convolve(np.asarray(trace, dtype=float), np.ones(width) / width, mode="valid")


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    """Desk-scale end-to-end run through the experiment harness."""
    torch.set_num_threads(1)
    root = os.environ.get("AVSSL_ACCEPT_DIR")
    ws = ex.Workspace(Path(root) if root else tmp_path_factory.mktemp("accept"))
    t0 = time.perf_counter()
    cfg = ex.build_config({"alpha": ACCEPT_ALPHA, "label_fraction": 0.1, "n_runs": 5,
                           "baselines": ["none", "Odd"], "seed": 0})
    out = {"cfg": cfg}
    out["eval"] = ex.run_command("eval", cfg, ws)
    noise = dataclasses.replace(cfg, n_runs=3, snr_list=[-5.0, 20.0],
                                noise_methods=["L1", "Odd", "L1+Odd", "mfcc"])
    out["noise"] = ex.run_command("ablate-noise", noise, ws)
    out["l1"] = next(s for s in out["noise"]["artifacts"]["pretraining"].values()
                     if s["method"] == "L1")
    out["noise_files"] = ex.write_report(out["noise"], ws.path("reports", "noise"))
    size = dataclasses.replace(cfg, n_runs=3, fraction_list=[0.2, 1.0],
                               size_methods=["L1+Odd"])
    out["size"] = ex.run_command("ablate-size", size, ws)
    ex.write_report(out["eval"], ws.path("reports", "eval"))
    ex.write_report(out["size"], ws.path("reports", "size"))
    out["elapsed"] = time.perf_counter() - t0
    return out


def _result(e2e, method):
    return e2e["eval"]["results"][method]["test"]


def test_criterion_7a_odd_accuracy(e2e, verdict):
    summaries = e2e["eval"]["artifacts"]["pretraining"].values()
    acc = next(s["odd_accuracy_heldout"] for s in summaries if s["method"] == "Odd")
    epochs = e2e["cfg"].pretrain_schedule["epochs"]
    assert verdict("7a", acc >= 0.90 and epochs <= 20,
                   f"held-out odd-one-out accuracy {acc:.3f} after {epochs} epochs")


def test_criterion_7b_l1_loss_decreases(e2e, verdict):
    trace = e2e["l1"]["video_trace"]
    s = smoothed(trace[:7])
    ok = len(s) == 5 and bool(np.all(np.diff(s) < 0))
    assert verdict("7b", ok, f"3-epoch smoothed L1 loss {np.round(s, 4).tolist()}")


def test_criterion_7c_beats_random_init(e2e, verdict):
    ours, rand = _result(e2e, "L1+Odd"), _result(e2e, "none")
    gap = ours["mean"] - rand["mean"]
    assert verdict("7c", gap >= 0.10,
                   f"L1+Odd {ours['mean']:.3f} +- {ours['std']:.3f} vs random-init "
                   f"{rand['mean']:.3f} +- {rand['std']:.3f} macro-F1, gap {gap:+.3f} "
                   f"(need >= +0.10), 5 runs")


def test_criterion_7d_beats_odd(e2e, verdict):
    ours, odd = _result(e2e, "L1+Odd"), _result(e2e, "Odd")
    p = e2e["eval"]["comparisons"]["Odd"]["p"]
    assert verdict("7d", ours["mean"] >= odd["mean"],
                   f"L1+Odd {ours['mean']:.3f} vs Odd {odd['mean']:.3f} macro-F1, "
                   f"paired t-test p {p}")


def test_criterion_7e_noise_sweep(e2e, verdict):
    rows = e2e["noise"]["table"]
    parts, ok = [], True
    for m in e2e["noise"]["config"]["noise_methods"]:
        at = {r["snr_db"]: r["mean"] for r in rows if r["method"] == m}
        ok &= at[20.0] >= at[-5.0]
        parts.append(f"{m} {at[-5.0]:.3f}@-5dB -> {at[20.0]:.3f}@20dB")
    files = [p.suffix for p in e2e["noise_files"]]
    ok &= files == [".json", ".csv", ".svg"] and all(p.exists() for p in e2e["noise_files"])
    assert verdict("7e", ok, "; ".join(parts) + f"; emitted {files}")


def test_criterion_7f_size_sweep(e2e, verdict):
    at = {r["fraction"]: r["mean"] for r in e2e["size"]["table"]}
    assert verdict("7f", at[1.0] >= at[0.2],
                   f"L1+Odd macro-F1 {at[0.2]:.3f} at fraction 0.2, {at[1.0]:.3f} at 1.0; "
                   f"nested {e2e['size']['subsets']['nested']}")


def test_criterion_7_runtime(e2e, verdict):
    t = e2e["elapsed"]
    assert verdict("7 (runtime)", t <= CRITERION7_BUDGET_S,
                   f"end-to-end {t / 60:.1f} min (budget 30)")


# -- 8 ------------------------------------------------------------------------------------

def test_criterion_8_mode_contracts(verdict, monkeypatch):
    torch.set_num_threads(1)
    clips = generate_synthetic(SyntheticSpec(n_speakers=4, clips_per_speaker=3,
                                             clip_seconds=0.4, with_video=False, seed=8))
    cfg = tiny_config(n_mels=80, enc_hidden=6, feat_dim=6, down_hidden=4)
    data = DownstreamData.from_clips(clips, [c.logmel for c in clips], "classify", 4)
    enc = traindown.random_init_encoder(cfg, seed=3)
    before = models.parameter_digest(enc)
    one = DownstreamSchedule(epochs=1, lr0=1e-2, batch_size=64)
    frozen = traindown.train_downstream("classify", data, "frozen", one, encoder=enc,
                                        model_cfg=cfg)
    frozen_ok = frozen.encoder_digest_after == before == models.parameter_digest(enc)
    tuned = traindown.train_downstream("classify", data, "finetune", one, encoder=enc,
                                       model_cfg=cfg)
    finetune_ok = tuned.encoder_digest_before == before != tuned.encoder_digest_after

    reads = []
    monkeypatch.setattr(models, "read_checkpoint", lambda *a, **k: reads.append(a))
    monkeypatch.setattr(traindown, "load_audio_encoder", lambda *a, **k: reads.append(a))
    traindown.train_downstream("classify", data, "scratch", one, model_cfg=cfg)
    scratch_ok = not reads

    want_pre = {0: 0.06, 10: 0.0588, 40: 0.0553420896, 99: 0.050024865727808995}
    want_down = {0: 1e-4, 10: 1e-4, 40: 1e-5, 99: 1e-6}
    lr_ok = all(PretrainSchedule().lr(e) == pytest.approx(v, rel=1e-12, abs=0)
                for e, v in want_pre.items()) and \
        all(DownstreamSchedule().lr(e) == pytest.approx(v, rel=1e-12, abs=0)
            for e, v in want_down.items())
    ok = frozen_ok and finetune_ok and scratch_ok and lr_ok
    assert verdict(8, ok, f"frozen digest unchanged {frozen_ok}, finetune digest changed "
                          f"{finetune_ok}, scratch reads no checkpoint {scratch_ok}, "
                          f"lr closed forms {lr_ok}")


# -- 9 ------------------------------------------------------------------------------------

def test_criterion_9_determinism(verdict, tmp_path):
    from avssl import cli
    import json

    cfg_file = tmp_path / "cfg.json"
    body = tiny_experiment(baselines=["none", "scratch", "mfcc"], n_runs=2,
                           snr_list=[-5.0, 20.0], fraction_list=[0.5, 1.0],
                           alpha_grid=[0.33, 0.67], noise_methods=["Odd", "mfcc"],
                           size_methods=["Odd"]).to_dict()
    cfg_file.write_text(json.dumps(body))
    commands = ["synth-data", "pretrain", "extract", "eval", "ablate-alpha", "ablate-noise",
                "ablate-size"]
    outputs = {}
    for run in ("first", "second"):
        work = tmp_path / run
        for c in commands:
            code = cli.main([c, "--config", str(cfg_file), "--workdir", str(work),
                             "--out", str(work / "out" / c)])
            assert code == 0, c
        outputs[run] = {p.name: p.read_bytes() for p in sorted((work / "out").iterdir())}
    same = outputs["first"] == outputs["second"]
    assert verdict(9, same and len(outputs["first"]) == 2 * len(commands) + 3,
                   f"{len(outputs['first'])} report files across {len(commands)} commands "
                   f"byte-identical in separate workdirs: {same}")
