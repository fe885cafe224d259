"""Metrics, evaluation protocols, variant runs and reports.

Metric values are percentages (0 to 100). A model/task pair the model
cannot run end to end is reported as ``{"incapacity": true, ...}`` rather
than raising.
"""
from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .client import EncoderConfig
from .config import RunConfig
from .data import (ConfigError, PartitionedDataset, SyntheticSample, TaskSpec,
                   generate_benchmark, partition_benchmark)
from .federated import (VARIANTS, Federation, FederationConfig, RoundState, Server, Wiring,
                        init_server, wiring_for)
from .foundation import (FoundationConfig, PretrainConfig, Vocab, init_backbone,
                         pretrain_backbone, pretrain_extra_tokens)
from .params import ParamTree
from .peft import PeftConfig
from .tensor import ContractError

EVAL_BATCH = 64
METRICS = ("accuracy", "precision", "recall", "f1")
VARIANT_ORDER = tuple(VARIANTS)


# ---------------------------------------------------------------- metrics


def _pct(num: float, den: float) -> float:
    return 100.0 * num / den if den else 0.0


def _binary(pred: np.ndarray, gold: np.ndarray, positive: int) -> dict:
    tp = int(np.sum((pred == positive) & (gold == positive)))
    fp = int(np.sum((pred == positive) & (gold != positive)))
    fn = int(np.sum((pred != positive) & (gold == positive)))
    tn = int(len(gold) - tp - fp - fn)
    p, r = _pct(tp, tp + fp), _pct(tp, tp + fn)
    return {"tp": tp, "fp": fp, "tn": tn, "fn": fn, "precision": p, "recall": r,
            "f1": 2 * p * r / (p + r) if p + r > 0 else 0.0}


def classification_metrics(predictions: Sequence[int], labels: Sequence[int],
                           n_classes: int = 2) -> dict:
    """Confusion-matrix metrics in percent.

    Binary problems score class 1 as positive. With more classes precision,
    recall and F1 are unweighted means of the one-vs-rest binary scores,
    and the counts become per-class lists.
    """
    pred = np.asarray(predictions, dtype=np.int64)
    gold = np.asarray(labels, dtype=np.int64)
    if pred.shape != gold.shape:
        raise ContractError(f"{len(pred)} predictions for {len(gold)} labels")
    if gold.size == 0:
        raise ContractError("cannot score an empty prediction set")
    out = {"n": int(gold.size), "accuracy": _pct(np.sum(pred == gold), gold.size)}
    if n_classes == 2:
        out.update(_binary(pred, gold, 1))
        return out
    per = [_binary(pred, gold, c) for c in range(n_classes)]
    for key in ("precision", "recall", "f1"):
        out[key] = float(np.mean([m[key] for m in per]))
    for key in ("tp", "fp", "tn", "fn"):
        out[key] = [m[key] for m in per]
    return out


def _strip(ids: Sequence[int], eos: int) -> list[int]:
    out = []
    for i in ids:
        if i == eos:
            break
        out.append(int(i))
    return out


def unigram_overlap(pred: Sequence, ref: Sequence) -> float:
    """Clipped unigram precision of ``pred`` against ``ref`` (a fraction)."""
    if not pred:
        return 0.0
    ref_counts = Counter(ref)
    hits = sum(min(c, ref_counts[tok]) for tok, c in Counter(pred).items())
    return hits / len(pred)


def token_accuracy(pred: Sequence, ref: Sequence) -> float:
    """Fraction of reference positions reproduced at the same position."""
    if not ref:
        return float(not pred)
    return sum(1 for i, tok in enumerate(ref) if i < len(pred) and pred[i] == tok) / len(ref)


def generation_metrics(generated: Sequence[Sequence[int]], samples: Sequence[SyntheticSample],
                       answer_ids: Sequence[Sequence[int]], eos: int, n_classes: int) -> dict:
    """Token accuracy and unigram overlap, plus class metrics on exact answers.

    A generation that matches no class answer counts as the wrong class.
    """
    if not samples:
        raise ContractError("cannot score an empty prediction set")
    answers = [_strip(a, eos) for a in answer_ids]
    tok, uni, pred = [], [], []
    for g, s in zip(generated, samples):
        g, ref = _strip(g, eos), answers[s.label]
        tok.append(token_accuracy(g, ref))
        uni.append(unigram_overlap(g, ref))
        pred.append(answers.index(g) if g in answers else (s.label + 1) % n_classes)
    out = classification_metrics(pred, [s.label for s in samples], n_classes)
    out["token_accuracy"] = 100.0 * float(np.mean(tok))
    out["unigram_overlap"] = 100.0 * float(np.mean(uni))
    return out


# ---------------------------------------------------------------- artifacts


@dataclass
class Artifacts:
    """Everything needed to evaluate one trained (or untrained) model."""

    config: RunConfig
    variant: str
    data: PartitionedDataset
    server: Server
    state: RoundState | None  # None: no client knowledge at all (backbone alone)

    def encoders(self) -> ParamTree | None:
        return None if self.state is None else self.state.encoders()

    def leaves(self) -> dict:
        enc = self.encoders()
        leaves = dict(self.server.peft.tensors())
        if enc is not None:
            leaves.update(enc.tensors())
        return leaves

    def digest(self) -> str:
        parts = [self.server.peft.digest(), self.server.backbone.digest()]
        if self.state is not None:
            parts.append(self.state.globals.digest())
        return "/".join(parts)


def prepare_data(cfg: RunConfig) -> PartitionedDataset:
    spec = cfg.benchmark_spec()
    return partition_benchmark(spec, generate_benchmark(spec, cfg.seed),
                               cfg.federation.n_clients, cfg.seed)


def build_vocab(cfg: RunConfig, data: PartitionedDataset) -> Vocab:
    return Vocab.build(data.spec.texts(), pretrain_extra_tokens(pretrain_config(cfg)))


def pretrain_config(cfg: RunConfig) -> PretrainConfig:
    p = cfg.pretrain
    return PretrainConfig(steps=p.steps, batch_size=p.batch_size, lr=p.lr)


def foundation_config(cfg: RunConfig, vocab: Vocab) -> FoundationConfig:
    m = cfg.model
    return FoundationConfig(len(vocab), d=m.d, n_layers=m.n_layers, d_ff=m.d_ff)


def peft_config(cfg: RunConfig) -> PeftConfig:
    m = cfg.model
    return PeftConfig(n_experts=m.n_experts, rank=m.rank, d_k=m.d_k,
                      targets=tuple(m.adapter_targets))


def encoder_config(cfg: RunConfig) -> EncoderConfig:
    return EncoderConfig(out_dim=cfg.model.enc_out_dim)


def federation_config(cfg: RunConfig) -> FederationConfig:
    f = cfg.federation
    return FederationConfig(
        n_clients=f.n_clients, rounds=f.rounds, strategy=f.strategy, prox_lambda=f.prox_lambda,
        lr_local=f.lr_local, lr_foundation=f.lr_foundation, server_steps=f.server_steps,
        server_epochs=f.server_epochs, local_epochs=f.local_epochs, batch_size=f.batch_size,
        seed=cfg.seed, jobs=f.jobs)


def pretrained_backbone(cfg: RunConfig, vocab: Vocab) -> tuple[ParamTree, list[float]]:
    fcfg = foundation_config(cfg, vocab)
    backbone = init_backbone(fcfg, np.random.default_rng([cfg.seed, 1]))
    trace = pretrain_backbone(backbone, vocab, fcfg, pretrain_config(cfg), cfg.seed)
    return backbone, trace


def build_server(cfg: RunConfig, data: PartitionedDataset, vocab: Vocab, backbone: ParamTree,
                 variant: str | None = None) -> Server:
    wiring = wiring_for(variant or cfg.variant)
    return init_server(backbone, vocab, foundation_config(cfg, vocab), peft_config(cfg), wiring,
                       data.spec.modalities, encoder_config(cfg),
                       data.spec.modality_names("training"), cfg.seed)


def build_federation(cfg: RunConfig, data: PartitionedDataset, server: Server) -> Federation:
    return Federation(federation_config(cfg), data, server, encoder_config(cfg),
                      len(server.vocab))


def backbone_alone(cfg: RunConfig, data: PartitionedDataset, vocab: Vocab,
                   backbone: ParamTree) -> Artifacts:
    """The frozen model before any injection: no projectors, encoders or adapters."""
    wiring = Wiring("backbone", federated=False, adapters=False, router=False)
    server = Server(backbone, ParamTree(), vocab, foundation_config(cfg, vocab), peft_config(cfg),
                    wiring, data.spec.modalities, encoder_config(cfg))
    return Artifacts(cfg, "backbone", data, server, None)


# ---------------------------------------------------------------- protocols


@dataclass
class MetricsReport:
    variant: str
    mode: str
    seed: int
    config_hash: str
    tasks: dict[str, dict] = field(default_factory=dict)
    info: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"variant": self.variant, "mode": self.mode, "seed": self.seed,
                "config_hash": self.config_hash, "tasks": self.tasks, "info": self.info}

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        return cls(d["variant"], d["mode"], d["seed"], d["config_hash"], d["tasks"], d["info"])

    def capable(self, task_id: str) -> bool:
        return not self.tasks[task_id].get("incapacity", False)

    def macro(self, metric: str, task_ids: Sequence[str] | None = None) -> float:
        ids = [t for t in (task_ids or sorted(self.tasks)) if self.capable(t)]
        return float(np.mean([self.tasks[t][metric] for t in ids])) if ids else 0.0


def _batches(samples, size=EVAL_BATCH):
    for s in range(0, len(samples), size):
        yield samples[s:s + size]


def evaluate_task(art: Artifacts, task: TaskSpec, samples: Sequence[SyntheticSample],
                  leaves: dict | None = None) -> dict:
    """Align, route, run the injected model and score one task's samples."""
    server = art.server
    if not server.supports(task, art.encoders()):
        missing = [m for m in task.encoded_modalities if not server.has_modality(m, art.encoders())]
        return {"incapacity": True, "reason": "no encoder for modality " + ",".join(missing)}
    if not samples:
        raise ConfigError(f"task {task.id}: empty test shard")
    leaves = art.leaves() if leaves is None else leaves
    ctx = server.context(task)
    if task.kind == "classification":
        pred = np.concatenate([server.classify(leaves, ctx, b) for b in _batches(samples)])
        out = classification_metrics(pred, [s.label for s in samples], task.n_classes)
    else:
        gen = []
        for b in _batches(samples):
            gen.extend(server.generate(leaves, ctx, b).tolist())
        out = generation_metrics(gen, samples, ctx.answer_ids, server.vocab.eos, task.n_classes)
    alpha = server.expert_weights(leaves, ctx)
    if alpha is not None:
        out["alpha"] = [float(a) for a in alpha.data]
    return out


def _report(art: Artifacts, mode: str, tasks: Sequence[TaskSpec]) -> MetricsReport:
    leaves = art.leaves()
    rep = MetricsReport(art.variant, mode, art.config.seed, art.config.hash())
    for t in tasks:
        if t.id not in art.data.cells:
            raise ConfigError(f"no test shard for task {t.id}")
        rep.tasks[t.id] = evaluate_task(art, t, art.data.test(t.id), leaves)
    if art.state is not None:
        rep.info["rounds"] = art.state.round
        rep.info["communication_rounds"] = art.state.communication_rounds
    return rep


def fine_tune_eval(art: Artifacts, tasks: Sequence[TaskSpec] | None = None) -> MetricsReport:
    """Test-shard metrics on the tasks the model was injected with."""
    return _report(art, "fine-tune", art.data.spec.training_tasks if tasks is None else tasks)


def zero_shot_eval(art: Artifacts, tasks: Sequence[TaskSpec] | None = None) -> MetricsReport:
    """Metrics on unseen tasks; the router only sees their descriptions.

    Raises ContractError if anything in the model changed while scoring.
    """
    before = art.digest()
    rep = _report(art, "zero-shot", art.data.spec.validation_tasks if tasks is None else tasks)
    if art.digest() != before:
        raise ContractError("zero-shot evaluation modified model parameters")
    for tid, entry in rep.tasks.items():
        alpha = entry.get("alpha")
        if alpha is not None and (not np.all(np.isfinite(alpha)) or abs(sum(alpha) - 1) > 1e-9):
            raise ContractError(f"task {tid}: expert weights off the simplex")
    return rep


@dataclass
class CoverageReport:
    foundation_modalities: list[str]
    foundation_tasks: list[str]
    client_modalities: list[str]
    client_tasks: list[str]

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def coverage(art: Artifacts) -> CoverageReport:
    """Which modalities and tasks ``art`` can execute end to end, against the clients'."""
    spec = art.data.spec
    enc = art.encoders()
    mods = {"text"} | {m for m in spec.modalities if art.server.has_modality(m, enc)}
    tasks = [t.id for t in spec.tasks if art.server.supports(t, enc)]
    client_mods = {"text"} | {m for t in spec.training_tasks for m in t.encoded_modalities}
    return CoverageReport(sorted(mods), sorted(tasks), sorted(client_mods),
                          sorted(t.id for t in spec.training_tasks))


def coverage_report(before: Artifacts, after: Artifacts) -> dict:
    return {"before": coverage(before).to_dict(), "after": coverage(after).to_dict()}


# ---------------------------------------------------------------- variants


@dataclass
class VariantResult:
    artifacts: Artifacts
    fine_tune: MetricsReport
    zero_shot: MetricsReport
    coverage: CoverageReport

    def report_text(self) -> str:
        body = {"variant": self.artifacts.variant, "seed": self.artifacts.config.seed,
                "config_hash": self.artifacts.config.hash(),
                "fine_tune": self.fine_tune.to_dict(), "zero_shot": self.zero_shot.to_dict(),
                "coverage": self.coverage.to_dict(),
                "server_losses": list(self.artifacts.state.server_losses)}
        return json.dumps(body, sort_keys=True, indent=1) + "\n"


def run_variant(variant: str, cfg: RunConfig, data: PartitionedDataset | None = None,
                backbone: tuple[Vocab, ParamTree] | None = None,
                on_round=None) -> VariantResult:
    """Train ``variant`` from scratch under ``cfg`` and evaluate it.

    ``data`` and a pretrained ``(vocab, backbone)`` may be shared across
    variants; the backbone is frozen, so sharing it is safe.
    """
    wiring_for(variant)
    data = prepare_data(cfg) if data is None else data
    if backbone is None:
        vocab = build_vocab(cfg, data)
        tree, _ = pretrained_backbone(cfg, vocab)
    else:
        vocab, tree = backbone
    server = build_server(cfg, data, vocab, tree, variant)
    fed = build_federation(cfg, data, server)
    state = fed.run(on_round=on_round)
    art = Artifacts(cfg, variant, data, server, state)
    return VariantResult(art, fine_tune_eval(art), zero_shot_eval(art), coverage(art))


# ---------------------------------------------------------------- output


def write_report(root: str | Path, run_id: str, variant: str, text: str) -> Path:
    path = Path(root) / "reports" / run_id / f"{variant}.report"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def summary_table(reports: dict[str, MetricsReport]) -> str:
    """CSV with one row per (task, metric) and one column per variant."""
    variants = list(reports)
    tasks = sorted({t for r in reports.values() for t in r.tasks})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["task", "metric"] + variants)
    for t in tasks:
        for metric in METRICS:
            row = [t, metric]
            for v in variants:
                entry = reports[v].tasks.get(t)
                if entry is None or entry.get("incapacity"):
                    row.append("x")
                else:
                    row.append(f"{entry[metric]:.2f}")
            w.writerow(row)
    return buf.getvalue()


def ablation_table(results: dict[str, VariantResult]) -> str:
    """One row per variant: macro metrics over training tasks and rounds used."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["variant", "communication_rounds", "Accuracy", "Precision", "Recall", "F1"])
    for v, res in results.items():
        w.writerow([v, res.artifacts.state.communication_rounds]
                   + [f"{res.fine_tune.macro(m):.2f}" for m in METRICS])
    return buf.getvalue()
