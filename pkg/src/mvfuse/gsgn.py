"""Gradient-sensitive gating: per-view gates, Hadamard fusion, gate loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad

VIEWS = ("fbank", "unit")


@dataclass(frozen=True)
class GateConfig:
    scale: float = 2.0
    hard_unit_gate: bool = False
    weight: float = 1.0  # lambda in L_final = L + lambda * L_gate

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("gate scale must be positive")
        if self.weight < 0:
            raise ValueError("gate loss weight must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GateOutput:
    g_fbank: ad.Var
    g_unit: ad.Var
    scale: float


def init_gate_params(fbank_dim: int, unit_dim: int, hidden_dim: int,
                     rng: np.random.Generator, init_std: float = 0.1) -> dict[str, np.ndarray]:
    p = {}
    for g in VIEWS:
        p[f"gate.{g}.lin_f"] = rng.normal(0.0, init_std / np.sqrt(fbank_dim), (fbank_dim, hidden_dim))
        p[f"gate.{g}.lin_u"] = rng.normal(0.0, init_std / np.sqrt(unit_dim), (unit_dim, hidden_dim))
        p[f"gate.{g}.bias"] = np.zeros(hidden_dim)
    return p


def init_concat_params(hidden_dim: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
    w = np.vstack([np.eye(hidden_dim), np.eye(hidden_dim)]) * 0.5
    w += rng.normal(0.0, 0.1 / np.sqrt(2 * hidden_dim), w.shape)
    return {"concat.w": w, "concat.b": np.zeros(hidden_dim)}


def _gate(pv, name, xf, xu, s):
    pre = ad.add(ad.add(ad.matmul(xf, pv[f"gate.{name}.lin_f"]),
                        ad.matmul(xu, pv[f"gate.{name}.lin_u"])),
                 pv[f"gate.{name}.bias"])
    out = ad.sigmoid(pre)
    return out if s == 1.0 else ad.scale(out, s)


def compute_gates(pv: dict[str, ad.Var], x_fbank: ad.Var, x_unit: ad.Var,
                  cfg: GateConfig) -> GateOutput:
    """g = s * sigmoid(x_fbank W1 + x_unit W2 + bias), one gate per view.

    With ``hard_unit_gate`` the unit gate is the constant 1.
    """
    if x_fbank.shape[0] != x_unit.shape[0]:
        raise ad.ShapeError(f"views differ in length: {x_fbank.shape[0]} vs {x_unit.shape[0]}")
    g_f = _gate(pv, "fbank", x_fbank, x_unit, cfg.scale)
    if cfg.hard_unit_gate:
        g_u = x_fbank.tape.const(np.ones(g_f.shape))
    else:
        g_u = _gate(pv, "unit", x_fbank, x_unit, cfg.scale)
    return GateOutput(g_f, g_u, cfg.scale)


def fuse(gates: GateOutput, x_fbank_proj, x_unit_proj) -> ad.Var:
    return ad.add(ad.hadamard(gates.g_fbank, x_fbank_proj),
                  ad.hadamard(gates.g_unit, x_unit_proj))


def concat_gate_fuse(pv: dict[str, ad.Var], x_fbank_proj: ad.Var, x_unit_proj: ad.Var) -> ad.Var:
    """Baseline fusion: Linear([x_fbank; x_unit]) back to D."""
    if x_fbank_proj.shape != x_unit_proj.shape:
        raise ad.ShapeError(f"concat fusion: {x_fbank_proj.shape} vs {x_unit_proj.shape}")
    return ad.add(ad.matmul(ad.concat(x_fbank_proj, x_unit_proj), pv["concat.w"]), pv["concat.b"])


def gate_loss(gates: GateOutput, target_fbank: float, hard_unit_gate: bool = False) -> ad.Var:
    """MSE(g_fbank, target) + MSE(g_unit, 1).

    The unit term is a soft version of pinning g_unit to 1; it is dropped
    when the unit gate is already hard-wired.
    """
    tape = gates.g_fbank.tape
    loss = ad.mse(gates.g_fbank, tape.const(np.full(gates.g_fbank.shape, float(target_fbank))))
    if not hard_unit_gate:
        loss = ad.add(loss, ad.mse(gates.g_unit, tape.const(np.ones(gates.g_unit.shape))))
    return loss


def final_loss(task, gate, weight: float = 1.0):
    """task + weight * gate; accepts tape nodes or plain floats."""
    if weight < 0:
        raise ValueError("gate loss weight must be >= 0")
    if isinstance(task, ad.Var):
        if weight == 0.0 or gate is None:
            return task
        return ad.add(task, ad.scale(gate, weight))
    return float(task) + weight * float(gate)
