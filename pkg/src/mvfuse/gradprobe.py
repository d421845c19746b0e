"""Per-view gradient probing, conflict statistics and gradient deconfliction.

The probe freezes the parameters, runs the fbank-only and unit-only
branches separately and compares the resulting gradients of the shared
backbone. The fbank gradient is the main direction ``a`` and the unit
gradient is ``b``.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import model as mdl

log = logging.getLogger(__name__)

GLOBAL = "_global"


class DegenerateInputError(ValueError):
    pass


@dataclass
class LayerStat:
    name: str
    cos: float | None  # None when either gradient is exactly zero
    norm_fbank: float
    norm_unit: float


@dataclass
class GradSnapshot:
    grad_fbank_flat: np.ndarray
    grad_unit_flat: np.ndarray
    per_layer: list[LayerStat]
    global_cos: float | None
    conflict_fraction: float
    step: int = 0
    epoch: int = 0

    @property
    def norm_fbank(self) -> float:
        return float(np.linalg.norm(self.grad_fbank_flat))

    @property
    def norm_unit(self) -> float:
        return float(np.linalg.norm(self.grad_unit_flat))


def cosine(a, b) -> float | None:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    aa, bb = np.dot(a, a), np.dot(b, b)
    if aa == 0.0 or bb == 0.0:
        return None
    return float(np.clip(np.dot(a, b) / np.sqrt(aa * bb), -1.0, 1.0))


def deconflict(a, b) -> np.ndarray:
    """b - (|b| cos / |a|) a, i.e. b minus its projection onto a."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aa = float(np.dot(a.ravel(), a.ravel()))
    if aa == 0.0:
        raise DegenerateInputError("deconflict: main gradient has zero norm")
    # |b| cos / |a| == a.b / |a|^2
    return b - (np.dot(a.ravel(), b.ravel()) / aa) * a


def correction_coefficient(a, b) -> float:
    """Weight on ``a`` in the corrected gradient: 1, or 1 - |b|cos/|a| on conflict."""
    c = cosine(a, b)
    if c is None or c >= 0:
        return 1.0
    return 1.0 - np.linalg.norm(b) * c / np.linalg.norm(a)


def corrected_gradient(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not np.any(a):
        raise DegenerateInputError("corrected_gradient: main gradient has zero norm")
    c = cosine(a, b)
    if c is None or c >= 0:
        return a + b
    return a + deconflict(a, b)


def gate_target(snapshot: GradSnapshot, scale: float = 2.0) -> float:
    """Regression target for g_fbank derived from the global gradient statistics."""
    na = snapshot.norm_fbank
    if na == 0.0:
        log.warning("fbank gradient is zero at step %d; gate target falls back to 1.0", snapshot.step)
        return 1.0
    c = snapshot.global_cos
    if c is None or c >= 0:
        return 1.0
    t = 1.0 - snapshot.norm_unit * c / na
    return float(min(max(t, 0.0), scale))


LossFn = Callable[[ad.Var, np.ndarray], ad.Var]


def view_gradients(params: dict[str, np.ndarray], batch, cfg: mdl.ModelConfig,
                   view: str, loss_fn: LossFn | None = None) -> dict[str, np.ndarray]:
    """Gradients of the task loss when only one view is fed to the backbone."""
    tape = ad.Tape()
    pv = tape.params(params)
    if view == "fbank":
        x = tape.const(batch.x_fbank)
    else:
        x = mdl.unit_features(tape, pv, batch.x_unit, cfg, getattr(batch, "unit_ids", None))
    logits = mdl.forward(pv, mdl.project(pv, x, view, cfg), cfg)
    loss = loss_fn(logits, batch.targets) if loss_fn else mdl.task_loss(logits, batch.targets, cfg)
    return tape.backward(loss)


def snapshot_from_grads(grads_f: dict[str, np.ndarray], grads_u: dict[str, np.ndarray],
                        groups: Sequence[tuple[str, Sequence[str]]],
                        step: int = 0, epoch: int = 0) -> GradSnapshot:
    stats = []
    flat_f, flat_u = [], []
    for name, keys in groups:
        gf = np.concatenate([grads_f[k].ravel() for k in keys])
        gu = np.concatenate([grads_u[k].ravel() for k in keys])
        flat_f.append(gf)
        flat_u.append(gu)
        stats.append(LayerStat(name, cosine(gf, gu), float(np.linalg.norm(gf)),
                               float(np.linalg.norm(gu))))
    ff, fu = np.concatenate(flat_f), np.concatenate(flat_u)
    defined = [s.cos for s in stats if s.cos is not None]
    frac = sum(c < 0 for c in defined) / len(defined) if defined else 0.0
    return GradSnapshot(ff, fu, stats, cosine(ff, fu), float(frac), step, epoch)


def per_view_gradients(params: dict[str, np.ndarray], batch, cfg: mdl.ModelConfig,
                       loss_fn: LossFn | None = None, step: int = 0,
                       epoch: int = 0) -> GradSnapshot:
    """Probe both views under the same frozen parameters.

    ``params`` is only read; each pass builds its own tape from copies.
    """
    gf = view_gradients(params, batch, cfg, "fbank", loss_fn)
    gu = view_gradients(params, batch, cfg, "unit", loss_fn)
    return snapshot_from_grads(gf, gu, mdl.backbone_groups(cfg), step, epoch)


def fused_input_gradients(params: dict[str, np.ndarray], x_fbank_proj: np.ndarray,
                          x_unit_proj: np.ndarray, g_fbank: float, g_unit: float,
                          cfg: mdl.ModelConfig, loss_fn: LossFn, targets=None) -> dict[str, np.ndarray]:
    """Backbone gradients for x = g_fbank * x_fbank + g_unit * x_unit with fixed gates.

    Views are already projected to the hidden width; gates are scalars
    broadcast over every element.
    """
    tape = ad.Tape()
    pv = tape.params(params)
    x = tape.const(g_fbank * np.asarray(x_fbank_proj) + g_unit * np.asarray(x_unit_proj))
    return tape.backward(loss_fn(mdl.forward(pv, x, cfg), targets))


def projected_view_gradients(params, x_proj, cfg, loss_fn, targets=None) -> dict[str, np.ndarray]:
    tape = ad.Tape()
    pv = tape.params(params)
    return tape.backward(loss_fn(mdl.forward(pv, tape.const(x_proj), cfg), targets))


@dataclass
class ReportRow:
    epoch: int
    global_cos: float | None
    conflict_fraction: float
    g_fbank_mean: float | None = None
    g_fbank_frac_above_1: float | None = None
    n_probes: int = 0
    extra: dict = field(default_factory=dict)


def _mean(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def conflict_report(snapshots: Iterable, gate_records: Iterable[dict] = ()) -> list[ReportRow]:
    """Per-epoch means of probe statistics and gate statistics.

    ``snapshots`` may be :class:`GradSnapshot` objects or anything with
    ``epoch``, ``global_cos`` and ``conflict_fraction`` attributes. Gate
    records are dicts with ``epoch``, ``g_fbank_mean`` and
    ``g_fbank_frac_above_1``. Rows cover only probed epochs.
    """
    by_epoch: dict[int, list] = defaultdict(list)
    for s in snapshots:
        by_epoch[int(s.epoch)].append(s)
    gates: dict[int, list[dict]] = defaultdict(list)
    for g in gate_records:
        gates[int(g["epoch"])].append(g)
    rows = []
    for epoch in sorted(by_epoch):
        snaps = by_epoch[epoch]
        grs = gates.get(epoch, [])
        rows.append(ReportRow(
            epoch=epoch,
            global_cos=_mean(s.global_cos for s in snaps),
            conflict_fraction=_mean(s.conflict_fraction for s in snaps) or 0.0,
            g_fbank_mean=_mean(g["g_fbank_mean"] for g in grs),
            g_fbank_frac_above_1=_mean(g["g_fbank_frac_above_1"] for g in grs),
            n_probes=len(snaps),
        ))
    return rows
