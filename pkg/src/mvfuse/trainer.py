"""Training loop: branch sampling, gated fusion, probing, Adam, checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import branch_sampler as bs
from . import checkpoint as ckpt_io
from . import gradprobe, gsgn
from . import model as mdl
from .config import RunConfig, TrainConfig
from .datagen import Batch, Corpus, Partition, noise_replace, noise_sum
from .errors import ConfigError, NumericAbort

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("epoch", "train_loss", "valid_loss", "valid_accuracy", "g_fbank_mean",
                   "g_unit_mean", "conflict_fraction", "wall_seconds")
GRADS_COLUMNS = ("step", "epoch", "layer", "cos_theta", "norm_fbank", "norm_unit",
                 "global_cos", "conflict_fraction", "gate_target")
GATES_COLUMNS = ("step", "epoch", "g_fbank_mean", "g_unit_mean", "g_fbank_frac_above_1")


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    valid_loss: float
    valid_accuracy: float
    g_fbank_mean: float | None
    g_unit_mean: float | None
    conflict_fraction: float | None
    wall_seconds: float


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params):
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``cfg.lr`` then inverse square-root decay."""
    return cfg.lr * min(step ** -0.5 * cfg.warmup_steps ** 0.5, step / cfg.warmup_steps)


def adam_step(params, grads, state: AdamState, step: int, cfg: TrainConfig) -> dict[str, np.ndarray]:
    if step < 1:
        raise ValueError("adam step counts from 1")
    lr = learning_rate(step, cfg)
    b1, b2 = cfg.beta1, cfg.beta2
    out = {}
    for k, p in params.items():
        g = grads[k]
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = state.m[k] / (1 - b1 ** step)
        vhat = state.v[k] / (1 - b2 ** step)
        out[k] = p - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
    return out


def early_stop(valid_losses, patience: int = 10) -> bool:
    """True once the best loss is ``patience`` or more epochs old."""
    if not valid_losses:
        raise ValueError("empty history")
    best = int(np.argmin(valid_losses))
    return len(valid_losses) - 1 - best >= patience


def init_all_params(mcfg: mdl.ModelConfig, seed: int) -> dict[str, np.ndarray]:
    # every mode owns gate and concat parameters so checkpoints interchange
    rng = np.random.default_rng([seed, 0])
    p = mdl.init_params(mcfg, rng)
    p.update(gsgn.init_gate_params(mcfg.fbank_dim, mcfg.unit_dim,
                                   mcfg.hidden_dim, rng))
    p.update(gsgn.init_concat_params(mcfg.hidden_dim, rng))
    return p


# -- loss assembly ---------------------------------------------------------

@dataclass
class StepOutput:
    loss: ad.Var
    task: ad.Var
    logits: ad.Var
    gates: gsgn.GateOutput | None = None


def _branch_input(pv, tape, batch: Batch, branch, mode, mcfg, gcfg):
    xf = tape.const(batch.x_fbank)
    xu = mdl.unit_features(tape, pv, batch.x_unit, mcfg, batch.unit_ids)
    if branch == bs.FBANK:
        return mdl.project(pv, xf, "fbank", mcfg), None
    if branch == bs.UNIT:
        return mdl.project(pv, xu, "unit", mcfg), None
    pf, pu = mdl.project(pv, xf, "fbank", mcfg), mdl.project(pv, xu, "unit", mcfg)
    if mode == "concat":
        return gsgn.concat_gate_fuse(pv, pf, pu), None
    gates = gsgn.compute_gates(pv, xf, xu, gcfg)
    return gsgn.fuse(gates, pf, pu), gates


def forced_branch(mode: str, sampled: str) -> str:
    if mode == "fbank_only":
        return bs.FBANK
    if mode == "unit_only":
        return bs.UNIT
    return sampled


def build_loss(tape: ad.Tape, params, batch: Batch, branch, rc: RunConfig,
               mcfg: mdl.ModelConfig, gate_target: float = 1.0) -> StepOutput:
    """Loss for one batch.

    ``branch`` is a single branch name, or an array of per-row branch names
    when sampling per example. ``params`` may be arrays or Vars already
    registered on ``tape``.
    """
    pv = params if all(isinstance(v, ad.Var) for v in params.values()) else tape.params(params)
    mode, gcfg = rc.train.mode, rc.gate
    if isinstance(branch, str):
        x, gates = _branch_input(pv, tape, batch, forced_branch(mode, branch), mode, mcfg, gcfg)
        fusion_rows = None
    else:
        rows = np.asarray([forced_branch(mode, b) for b in branch])
        x, gates = None, None
        for b in bs.BRANCHES:
            mask = (rows == b).astype(np.float64)
            if not mask.any():
                continue
            xb, gb = _branch_input(pv, tape, batch, b, mode, mcfg, gcfg)
            term = ad.hadamard(xb, tape.const(np.repeat(mask[:, None], xb.shape[1], axis=1)))
            x = term if x is None else ad.add(x, term)
            gates = gb or gates
        fusion_rows = np.flatnonzero(rows == bs.FUSION)
    logits = mdl.forward(pv, x, mcfg)
    task = mdl.task_loss(logits, batch.targets, mcfg)
    loss = task
    if gates is not None and rc.gate.weight > 0:
        g = gates
        if fusion_rows is not None:
            g = gsgn.GateOutput(ad.take_rows(gates.g_fbank, fusion_rows),
                                ad.take_rows(gates.g_unit, fusion_rows), gates.scale)
        loss = gsgn.final_loss(task, gsgn.gate_loss(g, gate_target, rc.gate.hard_unit_gate),
                               rc.gate.weight)
    return StepOutput(loss, task, logits, gates)


# -- evaluation --------------------------------------------------------------

def eval_branch(mode: str) -> str:
    return forced_branch(mode, bs.FUSION)


def evaluate(params, part: Partition, rc: RunConfig, mcfg: mdl.ModelConfig,
             paper_inference: bool = False, seed: int = 0,
             unit_range: tuple[float, float] | None = None) -> tuple[float, float]:
    """(task loss, token accuracy) with greedy per-position decoding.

    Deterministic fusion unless ``paper_inference``, which draws a branch
    per batch from the final schedule stage.
    """
    rng = np.random.default_rng([seed, 2])
    n = len(part)
    bsz = rc.train.batch_size if paper_inference else max(n, 1)
    total_loss, correct, count = 0.0, 0, 0
    for s in range(0, n, bsz):
        batch = part.batch(np.arange(s, min(n, s + bsz)))
        if rc.train.noise == "replace":
            batch = noise_replace(batch, unit_range, rng)
        if paper_inference:
            st = rc.schedule.final
            branch = bs.draw_branch(rng, st.delta_fbank, st.delta_unit)
        else:
            branch = eval_branch(rc.train.mode)
        tape = ad.Tape()
        out = build_loss(tape, params, batch, branch, replace(rc, gate=replace(rc.gate, weight=0.0)), mcfg)
        rows = batch.targets.size
        total_loss += float(out.task.value) * rows
        correct += int((mdl.greedy_decode(out.logits) == batch.targets).sum())
        count += rows
    return total_loss / count, correct / count


# -- run -----------------------------------------------------------------------

@dataclass
class RunResult:
    params: dict[str, np.ndarray]
    metrics: list[MetricsRecord]
    snapshots: list[gradprobe.GradSnapshot] = field(default_factory=list)
    gate_records: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    checkpoints: list[ckpt_io.Checkpoint] = field(default_factory=list)


def _fmt(x):
    if x is None:
        return ""
    if isinstance(x, float):
        return repr(x)
    return str(x)


class _CsvSink:
    def __init__(self, path: Path | None, columns):
        self.columns = columns
        self.fh = None
        if path is not None:
            self.fh = open(path, "w", newline="")
            self.w = csv.writer(self.fh, lineterminator="\n")
            self.w.writerow(columns)

    def row(self, values):
        if self.fh is not None:
            self.w.writerow([_fmt(v) for v in values])

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _snapshot_rows(s: gradprobe.GradSnapshot, target: float):
    for ls in s.per_layer:
        yield (s.step, s.epoch, ls.name, ls.cos, ls.norm_fbank, ls.norm_unit,
               s.global_cos, s.conflict_fraction, target)
    yield (s.step, s.epoch, gradprobe.GLOBAL, s.global_cos, s.norm_fbank, s.norm_unit,
           s.global_cos, s.conflict_fraction, target)


def _ckpt_meta(rc, epoch, step, vloss, vacc, gate_target, unit_range):
    return {"config_hash": rc.hash(), "config": rc.to_dict(), "epoch": epoch, "step": step,
            "valid_loss": vloss, "valid_accuracy": vacc, "metric": vacc,
            "gate_target": gate_target, "unit_range": list(unit_range)}


def train_run(rc: RunConfig, corpus: Corpus, out_dir=None,
              init_params: dict[str, np.ndarray] | None = None) -> RunResult:
    """Train, evaluate and (optionally) write every run artefact to ``out_dir``."""
    tc = rc.train
    mcfg = rc.model_config(corpus.spec)
    if tc.noise == "replace" and mcfg.embed_ids:
        raise ConfigError("noise 'replace' cannot be combined with embed_ids")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "ckpt").mkdir(parents=True, exist_ok=True)

    params = init_all_params(mcfg, tc.seed)
    if init_params is not None:
        for k, v in init_params.items():
            if k in params:
                if params[k].shape != v.shape:
                    raise ConfigError(f"warm start: {k} has shape {v.shape}, expected {params[k].shape}")
                params[k] = np.array(v, dtype=np.float64)
    adam = AdamState.zeros_like(params)
    rng = np.random.default_rng([tc.seed, 1])
    unit_range = corpus.unit_range
    train = corpus.train

    metrics_sink = _CsvSink(out / "metrics.csv" if out else None, METRICS_COLUMNS)
    grads_sink = _CsvSink(out / "grads.csv" if out else None, GRADS_COLUMNS)
    gates_sink = _CsvSink(out / "gates.csv" if out else None, GATES_COLUMNS)

    init_vloss, init_vacc = evaluate(params, corpus.valid, rc, mcfg, unit_range=unit_range)
    result = RunResult(params, [])
    step, gate_target, last_snapshot = 0, 1.0, None
    valid_losses: list[float] = []
    ckpt_paths = []
    t0 = time.perf_counter()
    try:
        for epoch in range(tc.max_epochs):
            e = epoch + 1
            d_f, d_u = bs.stage_for_epoch(rc.schedule, epoch)
            perm = rng.permutation(len(train))
            losses, g_means, u_means, fracs = [], [], [], []
            for bi, s in enumerate(range(0, len(train), tc.batch_size)):
                step += 1
                idx = perm[s:s + tc.batch_size]
                batch = train.batch(idx)
                if tc.noise == "sum":
                    batch = noise_sum(batch, unit_range, rng, view="fbank")
                elif tc.noise == "replace":
                    batch = noise_replace(batch, unit_range, rng)
                if tc.per_example_sampling:
                    draws = [bs.draw_branch(rng, d_f, d_u) for _ in range(len(idx))]
                    branch = np.repeat(draws, corpus.spec.seq_len)
                else:
                    branch = bs.draw_branch(rng, d_f, d_u)
                if tc.probe_every and (step - 1) % tc.probe_every == 0:
                    snap = gradprobe.per_view_gradients(params, batch, mcfg, step=step, epoch=e)
                    gate_target = gradprobe.gate_target(snap, rc.gate.scale)
                    last_snapshot = snap
                    result.snapshots.append(snap)
                    fracs.append(snap.conflict_fraction)
                    for row in _snapshot_rows(snap, gate_target):
                        grads_sink.row(row)
                tape = ad.Tape()
                so = build_loss(tape, params, batch, branch, rc, mcfg, gate_target)
                lv = float(so.loss.value)
                if not math.isfinite(lv):
                    raise NumericAbort(
                        f"non-finite loss at epoch {e}, batch {bi}",
                        {"epoch": e, "batch_index": bi, "step": step, "loss": repr(lv),
                         "last_snapshot": None if last_snapshot is None else {
                             "step": last_snapshot.step, "global_cos": last_snapshot.global_cos,
                             "conflict_fraction": last_snapshot.conflict_fraction}})
                grads = tape.backward(so.loss)
                if so.gates is not None:
                    gf, gu = so.gates.g_fbank.value, so.gates.g_unit.value
                    rec = {"step": step, "epoch": e, "g_fbank_mean": float(gf.mean()),
                           "g_unit_mean": float(gu.mean()),
                           "g_fbank_frac_above_1": float((gf > 1.0).mean())}
                    result.gate_records.append(rec)
                    gates_sink.row([rec[c] for c in GATES_COLUMNS])
                    g_means.append(rec["g_fbank_mean"])
                    u_means.append(rec["g_unit_mean"])
                params = adam_step(params, grads, adam, step, tc)
                losses.append(lv)

            vloss, vacc = evaluate(params, corpus.valid, rc, mcfg, unit_range=unit_range)
            rec = MetricsRecord(e, float(np.mean(losses)), vloss, vacc,
                                float(np.mean(g_means)) if g_means else None,
                                float(np.mean(u_means)) if u_means else None,
                                float(np.mean(fracs)) if fracs else None,
                                time.perf_counter() - t0)
            result.metrics.append(rec)
            metrics_sink.row([getattr(rec, c) for c in METRICS_COLUMNS])
            log.info("epoch %d train %.4f valid %.4f acc %.4f", e, rec.train_loss, vloss, vacc)
            ck = ckpt_io.Checkpoint(dict(params), _ckpt_meta(rc, e, step, vloss, vacc, gate_target, unit_range))
            result.checkpoints.append(ck)
            if out is not None:
                path = out / "ckpt" / f"epoch_{e:03d}.ckpt"
                ckpt_io.save(ck, path)
                ckpt_paths.append(path)
            valid_losses.append(vloss)
            if early_stop(valid_losses, tc.patience):
                log.info("early stop at epoch %d", e)
                break
    finally:
        for sink in (metrics_sink, grads_sink, gates_sink):
            sink.close()

    result.params = params
    if result.checkpoints:
        ranked = sorted(result.checkpoints, key=lambda c: (c.meta["valid_loss"], c.meta["epoch"]))
        avg = ckpt_io.average(ranked[:tc.avg_k])
    else:
        avg = ckpt_io.Checkpoint(dict(params), _ckpt_meta(rc, 0, 0, init_vloss, init_vacc, 1.0, unit_range))
        avg.meta.update(source_epochs=[], averaged=0, avg_window_end=0)
    avg_vloss, avg_vacc = evaluate(avg.params, corpus.valid, rc, mcfg, unit_range=unit_range)
    avg_tloss, avg_tacc = evaluate(avg.params, corpus.test, rc, mcfg, unit_range=unit_range)
    accs = [m.valid_accuracy for m in result.metrics]
    best_i = int(np.argmax(accs)) if accs else None
    result.summary = {
        "mode": tc.mode,
        "noise": tc.noise,
        "seed": tc.seed,
        "config_hash": rc.hash(),
        "epochs_run": len(result.metrics),
        "initial_valid_loss": init_vloss,
        "initial_valid_accuracy": init_vacc,
        "best_valid_accuracy": accs[best_i] if accs else init_vacc,
        "epochs_to_best": result.metrics[best_i].epoch if accs else 0,
        "avg_window_end": avg.meta.get("avg_window_end"),
        "avg_source_epochs": avg.meta.get("source_epochs"),
        "avg10_valid_loss": avg_vloss,
        "avg10_valid_accuracy": avg_vacc,
        "avg10_test_loss": avg_tloss,
        "avg10_test_accuracy": avg_tacc,
        "unit_range": list(unit_range),
        "valid_accuracy_curve": accs,
    }
    if out is not None:
        ckpt_io.save(avg, out / "avg10.ckpt")
    return result


def epochs_to_level(accuracy_curve, level: float) -> int | None:
    """First (1-based) epoch whose accuracy reaches ``level``."""
    for i, a in enumerate(accuracy_curve):
        if a >= level:
            return i + 1
    return None


def speedup(baseline_summary: dict, summary: dict, level_fraction: float = 0.9) -> dict:
    """Convergence speedup of ``summary`` relative to a baseline run.

    ``speedup`` compares epochs-to-best; ``speedup_at_level`` compares the
    epochs each run needs to reach ``level_fraction`` of the baseline's
    best validation accuracy.
    """
    level = level_fraction * baseline_summary["best_valid_accuracy"]
    eb = epochs_to_level(baseline_summary["valid_accuracy_curve"], level)
    er = epochs_to_level(summary["valid_accuracy_curve"], level)
    return {
        "baseline_epochs_to_best": baseline_summary["epochs_to_best"],
        "speedup": baseline_summary["epochs_to_best"] / summary["epochs_to_best"]
        if summary["epochs_to_best"] else None,
        "level": level,
        "baseline_epochs_to_level": eb,
        "epochs_to_level": er,
        "speedup_at_level": (eb / er) if (eb and er) else None,
    }


def write_summary(summary: dict, out_dir) -> None:
    Path(out_dir, "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
