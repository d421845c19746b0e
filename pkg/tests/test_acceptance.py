"""Acceptance criteria, one test per criterion; each prints a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s``.
"""

import csv
import json
import math
import struct
import time

import numpy as np
import pytest

from conftest import CRITERIA
from mvfuse import autodiff as ad
from mvfuse import branch_sampler as bs
from mvfuse import checkpoint as ck
from mvfuse import datagen as dg
from mvfuse import gradprobe as gp
from mvfuse import model as mdl
from mvfuse import trainer as tr
from mvfuse.cli import main as cli_main
from mvfuse.config import RunConfig


def verdict(n: int, title: str, ok: bool, detail: str = "") -> None:
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {title}" + (f" ({detail})" if detail else "")
    print(line)
    CRITERIA.append(line)
    assert ok, line


# -- 1 -------------------------------------------------------------------------

def _all_ops(tape, p):
    h = ad.add(ad.matmul(p["x"], p["w"]), p["b"])
    # normalise before the kink so layer norm always sees a well-spread row
    h = ad.sub(ad.relu(ad.layer_norm(h, p["g"], p["beta"])), p["c"])
    gate = ad.scale(ad.sigmoid(ad.matmul(p["x"], p["v"])), 2.0)
    z = ad.add(ad.hadamard(gate, h), ad.take_rows(p["e"], [0, 2, 1]))
    logits = ad.matmul(ad.concat(z, h), p["o"])
    spread = ad.scale(ad.sum_all(ad.hadamard(logits, logits)), 1e-2)
    return ad.add(ad.add(ad.softmax_cross_entropy(logits, [0, 2, 1], 0.1),
                         ad.mse(gate, tape.const(np.ones(gate.shape)))), spread)


def _op_params(rng):
    u = lambda *s: rng.uniform(-2, 2, s)
    return {"x": u(3, 3), "w": u(3, 4), "b": u(4), "g": u(4), "beta": u(4), "c": u(4),
            "v": u(3, 4), "e": u(3, 4), "o": u(8, 3)}


def _model_check(seed, linear_mode):
    """Full model, fusion branch: gsgn gates on even seeds, concat gate on odd ones."""
    rng = np.random.default_rng([seed, int(linear_mode)])
    mode = "concat" if seed % 2 else "gsgn"
    rc = RunConfig.from_flat({"model.linear_mode": linear_mode, "train.mode": mode})
    # hidden width 5 keeps layer norm away from its scale-invariant corner
    # (a single active unit per row), where finite differences are pure noise
    mcfg = mdl.ModelConfig(hidden_dim=5, acoustic_layers=1, textual_layers=1, decoder_layers=1,
                           vocab_size=3, fbank_dim=2, unit_dim=2, linear_mode=linear_mode)
    params = tr.init_all_params(mcfg, seed)
    for k in params:
        params[k] = params[k] + rng.uniform(-0.3, 0.3, params[k].shape)
    batch = dg.Batch(rng.uniform(-1, 1, (3, 2)), rng.uniform(-1, 1, (3, 2)),
                     rng.integers(0, 3, 3), None)
    # parameters of the other fusion path are not on this graph at all
    idle = "gate." if mode == "concat" else "concat."
    params = {k: v for k, v in params.items() if not k.startswith(idle)}

    def f(tape, pv):
        return tr.build_loss(tape, pv, batch, bs.FUSION, rc, mcfg, gate_target=1.3).loss

    return ad.grad_check(f, params)


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    worst_ops = worst_full = worst_lin = 0.0
    for seed in range(100):
        worst_ops = max(worst_ops, ad.grad_check(_all_ops, _op_params(np.random.default_rng(seed))).max_rel_error)
        worst_full = max(worst_full, _model_check(seed, False).max_rel_error)
        worst_lin = max(worst_lin, _model_check(seed, True).max_rel_error)
    dt = time.perf_counter() - t0
    ok = worst_ops < 1e-4 and worst_full < 1e-4 and worst_lin < 1e-6 and dt < 30
    verdict(1, "gradient correctness", ok,
            f"ops {worst_ops:.2e}, full {worst_full:.2e}, linear {worst_lin:.2e}, {dt:.1f}s")


# -- 2 -------------------------------------------------------------------------

def test_criterion_2_deconfliction_algebra():
    t0 = time.perf_counter()
    worst_orth = worst_closed = worst_idem = 0.0
    for dim in (2, 8, 64, 4096):
        rng = np.random.default_rng(dim)
        for i in range(1000):
            a, b = rng.normal(size=dim), rng.normal(size=dim)
            if i % 2 and a @ b > 0:
                b = -b  # half the pairs conflict
            na, nb = np.linalg.norm(a), np.linalg.norm(b)
            d = gp.deconflict(a, b)
            worst_orth = max(worst_orth, abs(a @ d) / (na * nb))
            worst_idem = max(worst_idem, np.abs(gp.deconflict(a, d) - d).max())
            c = (a @ b) / (na * nb)
            closed = ((1 - nb * c / na) * a + b) if c < 0 else a + b
            got = gp.corrected_gradient(a, b)
            worst_closed = max(worst_closed, np.linalg.norm(got - closed) / np.linalg.norm(closed))
    dt = time.perf_counter() - t0
    ok = worst_orth <= 1e-10 and worst_closed <= 1e-12 and worst_idem <= 1e-10 and dt < 5
    verdict(2, "deconfliction algebra", ok,
            f"orth {worst_orth:.1e}, closed form {worst_closed:.1e}, idempotence {worst_idem:.1e}, {dt:.2f}s")


# -- 3 -------------------------------------------------------------------------

def test_criterion_3_fused_gradient_decomposition():
    t0 = time.perf_counter()
    worst = 0.0
    for case in range(50):
        rng = np.random.default_rng([3, case])
        d = int(rng.integers(2, 9))
        # one block per stack: depth 3, the most the criterion allows
        cfg = mdl.ModelConfig(hidden_dim=d, acoustic_layers=1, textual_layers=1,
                              decoder_layers=1, vocab_size=3, linear_mode=True)
        params = mdl.init_params(cfg, rng)
        for k in params:
            if k.endswith(".b"):
                params[k] = np.zeros_like(params[k])
        coeff = rng.normal(size=(5, 3))
        loss = lambda logits, _t: ad.sum_all(ad.hadamard(logits, logits.tape.const(coeff)))
        xf, xu = rng.normal(size=(5, d)), rng.normal(size=(5, d))
        g_f, g_u = rng.uniform(0, 2, 2)
        fused = gp.fused_input_gradients(params, xf, xu, g_f, g_u, cfg, loss)
        a = gp.projected_view_gradients(params, xf, cfg, loss)
        b = gp.projected_view_gradients(params, xu, cfg, loss)
        for k in fused:
            if k.endswith(".w"):
                worst = max(worst, np.abs(fused[k] - (g_f * a[k] + g_u * b[k])).max())
    dt = time.perf_counter() - t0
    verdict(3, "fused-input gradient decomposition", worst <= 1e-9 and dt < 10,
            f"max abs gap {worst:.1e}, {dt:.2f}s")


# -- 4 -------------------------------------------------------------------------

def _snap(norm_f, norm_u, cos):
    return gp.GradSnapshot(np.array([norm_f]), np.array([norm_u]), [], cos, 0.0)


def test_criterion_4_gate_target_table():
    rows = [(_snap(1, 1, 0.3), 2.0, 1.0), (_snap(1, 1, -0.5), 2.0, 1.5),
            (_snap(1, 1, -1.0), 2.0, 2.0), (_snap(1, 1, -1.0), 1.5, 1.5),
            (_snap(3, 3, -0.5), 2.0, 1.5)]
    gaps = [abs(gp.gate_target(s, scale) - want) for s, scale, want in rows]
    verdict(4, "gate-target table", max(gaps) <= 1e-12, f"max gap {max(gaps):.1e}")


# -- 5 -------------------------------------------------------------------------

def test_criterion_5_branch_frequencies():
    worst = 0.0
    for i, (df, du) in enumerate([(0.3, 0.0), (0.5, 0.3), (0.3, 0.0)]):
        rng = np.random.default_rng([5, i])
        draws = [bs.draw_branch(rng, df, du) for _ in range(100_000)]
        for name, want in zip(bs.BRANCHES, (df, du, 1 - df - du)):
            worst = max(worst, abs(draws.count(name) / len(draws) - want))
    boundary = bs.sample_branch(0.5, 0.5, 0.3)
    verdict(5, "branch-sampling frequencies", worst <= 0.01 and boundary == bs.UNIT,
            f"max deviation {worst:.4f}, p=delta_fbank -> {boundary}")


# -- 6 -------------------------------------------------------------------------

def test_criterion_6_stage_schedule():
    sched = bs.default_schedule()
    got = [bs.stage_for_epoch(sched, e) for e in (5, 15, 30)]
    want = [(0.3, 0.0), (0.5, 0.3), (0.3, 0.0)]
    verdict(6, "stage schedule", got == want, f"{got}")


# -- 7 -------------------------------------------------------------------------

def test_criterion_7_lloyd():
    monotone = True
    for seed in range(50):
        rng = np.random.default_rng([7, seed])
        pts = rng.normal(size=(int(rng.integers(50, 300)), int(rng.integers(1, 6))))
        pts[: len(pts) // 3] += 4.0
        h = dg.kmeans_fit(pts, int(rng.integers(2, 12)), max_iters=50, seed=seed).distortions
        monotone &= all(b <= a for a, b in zip(h, h[1:]))
    rng = np.random.default_rng(77)
    cb = dg.kmeans_fit(rng.normal(size=(400, 3)), 9, seed=1)
    pts = rng.normal(size=(1000, 3))
    ids, _ = dg.quantize(pts, cb)
    brute = [min(range(cb.k), key=lambda j: (sum((p[t] - cb.centroids[j][t]) ** 2 for t in range(3)), j))
             for p in pts]
    agree = int((ids == np.array(brute)).sum())
    verdict(7, "Lloyd monotonicity and nearest-centroid oracle", monotone and agree == 1000,
            f"monotone on 50 datasets: {monotone}, brute-force agreement {agree}/1000")


# -- 8 -------------------------------------------------------------------------

def test_criterion_8_convergence_trend():
    t0 = time.perf_counter()
    wins, details = 0, []
    for seed in (0, 1, 2):
        rc = RunConfig().with_overrides(**{"corpus.seed": seed, "train.seed": seed})
        corpus = dg.generate_corpus(rc.corpus)
        base = tr.train_run(rc.with_overrides(**{"train.mode": "fbank_only"}), corpus).summary
        fused = tr.train_run(rc.with_overrides(**{"train.mode": "gsgn"}), corpus).summary
        sp = tr.speedup(base, fused)
        ratio = sp["speedup_at_level"]
        ok = ratio is not None and ratio >= 1.0 and \
            fused["best_valid_accuracy"] >= base["best_valid_accuracy"] - 0.02
        wins += ok
        details.append(f"seed {seed}: x{ratio if ratio is None else round(ratio, 2)}, "
                       f"best {fused['best_valid_accuracy']:.3f} vs {base['best_valid_accuracy']:.3f}")
    dt = time.perf_counter() - t0
    verdict(8, "surrogate convergence trend", wins >= 2 and dt < 600,
            f"{wins}/3 seeds; " + "; ".join(details) + f"; {dt:.0f}s")


# -- 9 -------------------------------------------------------------------------

SMALL_RUN = """\
corpus.n_train = 64
corpus.n_valid = 16
corpus.n_test = 16
corpus.seq_len = 6
corpus.codebook_k = 8
model.hidden_dim = 8
train.max_epochs = 4
train.batch_size = 16
train.warmup_steps = 8
"""


def test_criterion_9_identical_views(tmp_path):
    cfg = tmp_path / "same.cfg"
    cfg.write_text(SMALL_RUN + "corpus.identical_views = true\ncorpus.unit_dim = 16\n")
    assert cli_main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
    run = tmp_path / "run"
    assert cli_main(["train", "--config", str(cfg), "--data", str(tmp_path / "data"),
                     "--out", str(run)]) == 0
    with open(run / "grads.csv") as fh:
        probes = [r for r in csv.DictReader(fh) if r["layer"] == gp.GLOBAL]
    cos_gap = max(abs(float(r["global_cos"]) - 1.0) for r in probes)
    frac = max(float(r["conflict_fraction"]) for r in probes)
    assert cli_main(["report", "--run", str(run)]) == 0
    with open(run / "report.csv") as fh:
        above = [float(r["g_fbank_frac_above_1"]) for r in csv.DictReader(fh) if r["g_fbank_frac_above_1"]]
    ok = bool(probes) and cos_gap <= 1e-9 and frac == 0.0 and all(0.0 <= a <= 1.0 for a in above)
    verdict(9, "identical-view diagnostics", ok,
            f"{len(probes)} probes, max |cos-1| {cos_gap:.1e}, max conflict {frac}, "
            f"frac>1 in [{min(above, default=0):.3f}, {max(above, default=0):.3f}]")


# -- 10 ------------------------------------------------------------------------

def test_criterion_10_persistence(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(SMALL_RUN)
    data, run = tmp_path / "data", tmp_path / "run"
    assert cli_main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    assert cli_main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run)]) == 0

    src = run / "ckpt" / "epoch_002.ckpt"
    ck.save(ck.load(src), tmp_path / "copy.ckpt")
    round_trip = src.read_bytes() == (tmp_path / "copy.ckpt").read_bytes()

    one = ck.load(src)
    avg = ck.average([ck.load(src) for _ in range(10)])
    exact = all(avg.params[k].tobytes() == one.params[k].tobytes() for k in one.params)

    outs = []
    for flags in ([], [], ["--paper-inference"], ["--paper-inference"]):
        capsys.readouterr()
        assert cli_main(["eval", "--ckpt", str(run / "avg10.ckpt"), "--data", str(data), *flags]) == 0
        outs.append(capsys.readouterr().out)
    deterministic = outs[0] == outs[1] and outs[2] == outs[3]
    verdict(10, "persistence", round_trip and exact and deterministic,
            f"byte-identical {round_trip}, avg of 10 identical exact {exact}, eval deterministic {deterministic}")


# -- 11 ------------------------------------------------------------------------

def _train_unit_range(path):
    """Independent parse of a partition file: (min, max) of the unit view."""
    meta = json.loads((path.parent / "meta.json").read_text())["spec"]
    df, du = meta["fbank_dim"], meta["unit_dim"]
    buf = path.read_bytes()
    (count,) = struct.unpack_from("<Q", buf, 0)
    off, lo, hi = 8, math.inf, -math.inf
    for _ in range(count):
        (T,) = struct.unpack_from("<I", buf, off)
        off += 4 + 8 * T * df
        unit = struct.unpack_from(f"<{T * du}d", buf, off)
        off += 8 * T * du + 4 * T
        lo, hi = min(lo, *unit), max(hi, *unit)
    return lo, hi


def test_criterion_11_noise_replace(tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(SMALL_RUN)
    data, run = tmp_path / "data", tmp_path / "run"
    assert cli_main(["gen-data", "--config", str(cfg), "--out", str(data)]) == 0
    code = cli_main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run),
                     "--mode", "gsgn", "--noise", "replace"])
    want = _train_unit_range(data / "train.bin")
    summary = json.loads((run / "summary.json").read_text())
    stored = tuple(summary["unit_range"])
    in_ckpt = tuple(ck.load(run / "avg10.ckpt").meta["unit_range"])
    ok = code == 0 and stored == want and in_ckpt == want and summary["noise"] == "replace"
    verdict(11, "noise-replace plumbing", ok, f"stored {stored}, recomputed {want}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
