"""Run configuration: a flat ``namespace.key = <json>`` text file.

Example::

    # comments and blank lines are ignored
    corpus.n_train = 2000
    train.mode = "gsgn"
    schedule.stages = [[0, 10, 0.3, 0.0], [10, 25, 0.5, 0.3], [25, null, 0.3, 0.0]]
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .branch_sampler import StageSchedule, default_schedule
from .datagen import CorpusSpec
from .errors import ConfigError, CorpusIOError
from .gsgn import GateConfig
from .model import ModelConfig

MODES = ("gsgn", "concat", "fbank_only", "unit_only")
NOISE = (None, "sum", "replace")

# model fields settable from config; the rest come from the corpus
MODEL_KEYS = ("hidden_dim", "acoustic_layers", "textual_layers", "decoder_layers",
              "linear_mode", "residual", "shared_projection", "embed_ids")


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    warmup_steps: int = 200
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    label_smoothing: float = 0.1
    patience: int = 10
    probe_every: int = 1
    mode: str = "gsgn"
    noise: str | None = None
    seed: int = 0
    per_example_sampling: bool = False
    paper_inference: bool = False
    avg_k: int = 10

    def __post_init__(self):
        if self.max_epochs < 0 or self.batch_size < 1 or self.warmup_steps < 1:
            raise ConfigError("max_epochs >= 0, batch_size >= 1, warmup_steps >= 1 required")
        if self.patience < 1 or self.probe_every < 0 or self.avg_k < 1:
            raise ConfigError("patience >= 1, probe_every >= 0, avg_k >= 1 required")
        if self.mode not in MODES:
            raise ConfigError(f"train.mode must be one of {MODES}, got {self.mode!r}")
        if self.noise not in NOISE:
            raise ConfigError(f"train.noise must be one of {NOISE}, got {self.noise!r}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError("label_smoothing must be in [0, 1)")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")


def _default_model() -> dict:
    base = ModelConfig()
    return {k: getattr(base, k) for k in MODEL_KEYS}


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: dict = field(default_factory=_default_model)
    gate: GateConfig = field(default_factory=GateConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: StageSchedule = field(default_factory=default_schedule)

    def model_config(self, spec: CorpusSpec | None = None) -> ModelConfig:
        spec = spec or self.corpus
        m = dict(self.model)
        if spec.identical_views:
            m["shared_projection"] = True
        return ModelConfig(fbank_dim=spec.fbank_dim, unit_dim=spec.unit_dim,
                           vocab_size=spec.vocab_size,
                           n_codes=spec.codebook_k if m.get("embed_ids") else 0,
                           label_smoothing=self.train.label_smoothing, **m)

    def to_dict(self) -> dict:
        return {"corpus": self.corpus.to_dict(), "model": dict(self.model),
                "gate": self.gate.to_dict(), "train": asdict(self.train),
                "schedule": {"stages": self.schedule.to_records()}}

    def flat(self) -> dict:
        return {f"{ns}.{k}": v for ns, sub in self.to_dict().items() for k, v in sub.items()}

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        flat = {f"{ns}.{k}": v for ns, sub in d.items() for k, v in sub.items()}
        return cls.from_flat(flat)

    @classmethod
    def from_flat(cls, flat: dict, base: "RunConfig | None" = None) -> "RunConfig":
        base = base or cls()
        current = base.flat()
        for key, value in flat.items():
            if key not in current:
                raise ConfigError(f"unknown config key {key!r}")
            current[key] = _check_type(key, value, current[key])
        groups: dict[str, dict] = {}
        for key, value in current.items():
            ns, name = key.split(".", 1)
            groups.setdefault(ns, {})[name] = value
        try:
            return cls(corpus=CorpusSpec(**groups["corpus"]), model=groups["model"],
                       gate=GateConfig(**groups["gate"]), train=TrainConfig(**groups["train"]),
                       schedule=StageSchedule.from_records(groups["schedule"]["stages"]))
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def with_overrides(self, **flat) -> "RunConfig":
        return RunConfig.from_flat({k.replace("__", "."): v for k, v in flat.items()}, self)


def _check_type(key, value, default):
    if key == "train.noise":
        if value not in NOISE:
            raise ConfigError(f"{key}: expected one of {NOISE}, got {value!r}")
        return value
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


def parse_config_text(text: str, where: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{where}:{lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        try:
            out[key] = json.loads(value.strip())
        except json.JSONDecodeError:
            raise ConfigError(f"{where}:{lineno}: value for {key!r} is not valid JSON") from None
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    flat = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise CorpusIOError(f"{path}: cannot read config ({exc.strerror or exc})") from None
        flat = parse_config_text(text, str(path))
    flat.update(overrides or {})
    return RunConfig.from_flat(flat)


def dump_config(rc: RunConfig) -> str:
    return "".join(f"{k} = {json.dumps(v)}\n" for k, v in rc.flat().items())


def with_corpus(rc: RunConfig, spec: CorpusSpec) -> RunConfig:
    return replace(rc, corpus=spec)
