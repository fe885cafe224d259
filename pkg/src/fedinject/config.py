"""Run configuration: one JSON file, every field defaulted, unknown keys rejected.

Sections mirror the library dataclasses. Defaults describe the desk-scale
run; the library classes keep their own larger defaults.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import BenchmarkSpec, ConfigError, default_benchmark


@dataclass
class FederationSection:
    n_clients: int = 5
    rounds: int = 10
    strategy: str = "fedavg"
    prox_lambda: float = 1e-4
    lr_local: float = 0.1
    lr_foundation: float = 1e-3
    server_steps: int | None = None
    server_epochs: int = 3
    local_epochs: int = 1
    batch_size: int = 16
    jobs: int = 1


@dataclass
class ModelSection:
    d: int = 64
    n_layers: int = 2
    d_ff: int = 128
    n_experts: int = 8
    rank: int = 4
    d_k: int = 32
    adapter_targets: list[str] = field(default_factory=lambda: ["ffn/w1", "ffn/w2"])
    enc_out_dim: int = 32


@dataclass
class PretrainSection:
    steps: int = 400
    batch_size: int = 32
    lr: float = 3e-3


@dataclass
class BenchmarkSection:
    n_train: int = 600
    n_val: int = 300
    noise: float = 0.3
    counts: dict[str, int] = field(default_factory=dict)
    # restrict federated training to these training tasks (single-task runs)
    train_tasks: list[str] | None = None


@dataclass
class RunConfig:
    seed: int = 0
    variant: str = "fedkim"
    out: str = "run"
    federation: FederationSection = field(default_factory=FederationSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        """Digest of everything that can change results.

        The output directory and the worker count are left out: neither
        changes a single number.
        """
        d = self.to_dict()
        del d["out"], d["federation"]["jobs"]
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def benchmark_spec(self) -> BenchmarkSpec:
        b = self.benchmark
        spec = default_benchmark(b.n_train, b.n_val)
        spec.noise = b.noise
        known = {t.id for t in spec.tasks}
        for tid, n in b.counts.items():
            if tid not in known:
                raise ConfigError(f"benchmark.counts: unknown task {tid!r}")
            spec.task(tid).n_samples = int(n)
        if b.train_tasks is not None:
            for tid in b.train_tasks:
                if tid not in known or spec.task(tid).role != "training":
                    raise ConfigError(f"benchmark.train_tasks: {tid!r} is not a training task")
            spec.tasks = [t for t in spec.tasks
                          if t.role == "validation" or t.id in b.train_tasks]
        spec.validate()
        return spec


_SECTIONS = {"federation": FederationSection, "model": ModelSection,
             "pretrain": PretrainSection, "benchmark": BenchmarkSection}


def _build(cls, raw: dict, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where or 'config'}: expected an object")
    names = {f.name for f in fields(cls)}
    for key in raw:
        if key not in names:
            raise ConfigError(f"unknown config key {where + key!r}")
    kwargs = {}
    for key, value in raw.items():
        if key in _SECTIONS and cls is RunConfig:
            kwargs[key] = _build(_SECTIONS[key], value, f"{key}.")
        else:
            kwargs[key] = value
    return cls(**kwargs)


def from_dict(raw: dict) -> RunConfig:
    cfg = _build(RunConfig, raw, "")
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    from .federated import VARIANTS

    if cfg.variant not in VARIANTS:
        raise ConfigError(f"unknown variant {cfg.variant!r} (key 'variant')")
    f = cfg.federation
    if f.strategy not in ("fedavg", "fedprox"):
        raise ConfigError(f"unknown strategy {f.strategy!r} (key 'federation.strategy')")
    if f.n_clients < 1:
        raise ConfigError("federation.n_clients must be >= 1")
    if f.rounds < 0:
        raise ConfigError("federation.rounds must be >= 0")
    if f.prox_lambda < 0:
        raise ConfigError("federation.prox_lambda must be >= 0")
    if f.jobs < 1:
        raise ConfigError("federation.jobs must be >= 1")
    if cfg.model.d % 2:
        raise ConfigError("model.d must be even")


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return from_dict(raw)
