"""Position-wise residual encoder-decoder used as the fusion backbone.

Every block computes ``h_{i+1} = F(h_i) + h_i`` on row vectors, with
``F(h) = h w + b`` in linear mode and ``layer_norm(relu(h w + b))``
otherwise. Blocks run acoustic encoder -> textual encoder -> decoder, and
the logits are ``h_out @ w_out``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad

STACKS = ("enc_a", "enc_t", "dec")


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 32
    acoustic_layers: int = 4
    textual_layers: int = 2
    decoder_layers: int = 2
    vocab_size: int = 16
    fbank_dim: int = 16
    unit_dim: int = 8
    linear_mode: bool = False
    residual: bool = True
    label_smoothing: float = 0.1
    # unit view reuses P_fbank (only meaningful when the two views coincide)
    shared_projection: bool = False
    # unit view is looked up from a learned table indexed by codebook id
    embed_ids: bool = False
    n_codes: int = 0

    def __post_init__(self):
        if min(self.acoustic_layers, self.textual_layers, self.decoder_layers) < 1:
            raise ValueError("every stack needs at least one layer")
        if self.hidden_dim < 2 or self.vocab_size < 2:
            raise ValueError("hidden_dim and vocab_size must be >= 2")
        if self.embed_ids and self.n_codes < 1:
            raise ValueError("embed_ids requires n_codes >= 1")

    def layer_names(self) -> list[str]:
        counts = (self.acoustic_layers, self.textual_layers, self.decoder_layers)
        return [f"{s}.{i}" for s, n in zip(STACKS, counts) for i in range(n)]

    def to_dict(self) -> dict:
        return asdict(self)


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Backbone and projection parameters in canonical order."""
    d = cfg.hidden_dim
    p: dict[str, np.ndarray] = {}
    if cfg.embed_ids:
        p["embed.unit"] = rng.normal(0.0, 1.0, (cfg.n_codes, cfg.unit_dim))
    p["proj.fbank"] = rng.normal(0.0, 1.0 / np.sqrt(cfg.fbank_dim), (cfg.fbank_dim, d))
    if not cfg.shared_projection:
        p["proj.unit"] = rng.normal(0.0, 1.0 / np.sqrt(cfg.unit_dim), (cfg.unit_dim, d))
    for name in cfg.layer_names():
        p[f"{name}.w"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, d))
        p[f"{name}.b"] = np.zeros(d)
        if not cfg.linear_mode:
            p[f"{name}.ln_g"] = np.ones(d)
            p[f"{name}.ln_b"] = np.zeros(d)
    p["out.w"] = rng.normal(0.0, 1.0 / np.sqrt(d), (d, cfg.vocab_size))
    return p


def backbone_groups(cfg: ModelConfig) -> list[tuple[str, list[str]]]:
    """Per-layer weight matrices shared by both views (probe granularity).

    Biases and layer-norm parameters are left out: their gradients do not
    depend on the input and would mask the view-dependent part.
    """
    return [(name, [f"{name}.w"]) for name in cfg.layer_names()] + [("out", ["out.w"])]


def unit_features(tape: ad.Tape, pv: dict[str, ad.Var], x_unit, cfg: ModelConfig,
                  unit_ids=None) -> ad.Var:
    """The unit view as a tape node (centroids, or learned rows when embed_ids)."""
    if cfg.embed_ids:
        if unit_ids is None:
            raise ValueError("embed_ids model needs unit ids")
        return ad.take_rows(pv["embed.unit"], unit_ids)
    return x_unit if isinstance(x_unit, ad.Var) else tape.const(x_unit)


def project(pv: dict[str, ad.Var], x: ad.Var, view: str, cfg: ModelConfig) -> ad.Var:
    """Map a raw view to the hidden dimension."""
    if view == "unit" and not cfg.shared_projection:
        return ad.matmul(x, pv["proj.unit"])
    return ad.matmul(x, pv["proj.fbank"])


def forward(pv: dict[str, ad.Var], x: ad.Var, cfg: ModelConfig,
            capture: list | None = None) -> ad.Var:
    """Run the residual stacks on ``x`` [rows x D] and return logits.

    If ``capture`` is a list, the input of every block (h_i) and the final
    state h_out are appended to it.
    """
    if x.shape[-1] != cfg.hidden_dim:
        raise ad.ShapeError(f"forward: input width {x.shape[-1]} != hidden_dim {cfg.hidden_dim}")
    h = x
    for name in cfg.layer_names():
        if capture is not None:
            capture.append(h)
        z = ad.add(ad.matmul(h, pv[f"{name}.w"]), pv[f"{name}.b"])
        if not cfg.linear_mode:
            z = ad.layer_norm(ad.relu(z), pv[f"{name}.ln_g"], pv[f"{name}.ln_b"])
        h = ad.add(z, h) if cfg.residual else z
    if capture is not None:
        capture.append(h)
    return ad.matmul(h, pv["out.w"])


def task_loss(logits: ad.Var, targets, cfg: ModelConfig) -> ad.Var:
    return ad.softmax_cross_entropy(logits, targets, cfg.label_smoothing)


def greedy_decode(logits) -> np.ndarray:
    """Per-position argmax; the lowest id wins exact ties."""
    z = logits.value if isinstance(logits, ad.Var) else np.asarray(logits)
    return np.argmax(z, axis=-1)
