"""Communication rounds: local training, aggregation, injection, redistribution.

At the end of every round the distributed globals and the server's PEFT
state are rounded to float32, the precision of the ``.fkim`` checkpoint.
Resuming from a checkpoint therefore continues from exactly the state an
uninterrupted run holds in memory.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .client import ClientModel, EncoderConfig, encode_batch, init_client_params, local_train
from .data import ConfigError, PartitionedDataset, SyntheticSample, TaskSpec
from .foundation import (FoundationConfig, Vocab, adapter_sites, autoregressive_loss,
                         embed_text, foundation_forward, greedy_decode)
from .optim import Adam
from .params import ParamTree, StructureError
from .peft import PeftConfig, align_features, init_adapters, init_projectors, init_router, route_experts
from .tensor import Tensor

log = logging.getLogger(__name__)


class AggregationError(StructureError):
    pass


@dataclass
class FederationConfig:
    n_clients: int = 5
    rounds: int = 10
    strategy: str = "fedavg"
    prox_lambda: float = 1e-4
    lr_local: float = 1e-4
    lr_foundation: float = 5e-4
    server_steps: int | None = None  # None: server_epochs passes over the public data
    server_epochs: int = 1
    local_epochs: int = 1
    batch_size: int = 16
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.n_clients < 1:
            raise ConfigError("n_clients must be >= 1")
        if self.prox_lambda < 0:
            raise ConfigError("prox_lambda must be >= 0")
        if self.strategy not in ("fedavg", "fedprox"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")

    @property
    def effective_lambda(self) -> float:
        return self.prox_lambda if self.strategy == "fedprox" else 0.0


@dataclass(frozen=True)
class Wiring:
    """Which server pieces exist and train for a given variant."""

    name: str = "fedkim"
    federated: bool = True
    adapters: bool = True
    router: bool = True
    single_expert: bool = False
    task_desc: bool = True
    modality_desc: bool = True


VARIANTS: dict[str, Wiring] = {
    "fedkim": Wiring("fedkim"),
    "fedkim_pub": Wiring("fedkim_pub", federated=False),
    "fedkim_no_task_desc": Wiring("fedkim_no_task_desc", task_desc=False),
    "fedkim_no_modality_desc": Wiring("fedkim_no_modality_desc", modality_desc=False),
    "fedplug": Wiring("fedplug", adapters=False, router=False),
    "fedplug_lora": Wiring("fedplug_lora", router=False, single_expert=True),
}


def wiring_for(variant: str) -> Wiring:
    try:
        return VARIANTS[variant]
    except KeyError:
        raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}") from None


# ---------------------------------------------------------------- aggregation


def aggregate(uploads: Sequence[ParamTree], strategy: str = "fedavg") -> ParamTree:
    """Unweighted elementwise mean of structurally identical trees.

    FedProx only changes the clients' objective, so both strategies share
    this mean. Each element is summed exactly (``math.fsum``) before the
    division, so the result does not depend on upload order at all.
    """
    if strategy not in ("fedavg", "fedprox"):
        raise ConfigError(f"unknown strategy {strategy!r}")
    if not uploads:
        raise AggregationError("nothing to aggregate")
    first = uploads[0]
    for other in uploads[1:]:
        try:
            first.check_same_structure(other)
        except StructureError as e:
            raise AggregationError(str(e)) from None
    if len(uploads) == 1:
        return first.copy()
    out = ParamTree()
    n = len(uploads)
    for path, p in first.items():
        cols = np.stack([u.value(path).reshape(-1) for u in uploads], axis=1)
        total = np.fromiter((math.fsum(c) for c in cols), np.float64, cols.shape[0])
        out.add(path, (total / n).reshape(p.value.shape), frozen=p.frozen)
    return out


# ---------------------------------------------------------------- server


@dataclass
class TaskContext:
    task: TaskSpec
    prompt_ids: list[int]
    task_desc_ids: list[int]
    modality_desc_ids: list[int]
    label_ids: list[int]
    answer_ids: list[list[int]]  # per class, EOS-terminated


def build_context(task: TaskSpec, vocab: Vocab, modalities, wiring: Wiring) -> TaskContext:
    pad = [vocab.pad]
    return TaskContext(
        task,
        vocab.encode(task.prompt),
        vocab.encode(task.task_description) if wiring.task_desc else pad,
        vocab.encode(task.modality_description(modalities)) if wiring.modality_desc else pad,
        [vocab.id(t) for t in task.label_tokens],
        [vocab.encode(task.answer_tokens(c)) for c in range(task.n_classes)],
    )


@dataclass
class Server:
    """The frozen backbone plus all server-side trainable state."""

    backbone: ParamTree
    peft: ParamTree  # proj/..., router/..., adapter/...
    vocab: Vocab
    fcfg: FoundationConfig
    pcfg: PeftConfig
    wiring: Wiring
    modalities: dict
    enc_cfg: EncoderConfig
    _frozen_leaves: dict | None = field(default=None, repr=False)

    def frozen_leaves(self) -> dict[str, Tensor]:
        if self._frozen_leaves is None:
            self._frozen_leaves = self.backbone.tensors()
        return self._frozen_leaves

    def context(self, task: TaskSpec) -> TaskContext:
        return build_context(task, self.vocab, self.modalities, self.wiring)

    def has_modality(self, m: str, encoders: ParamTree | None) -> bool:
        if m == "text":
            return True
        if f"proj/{m}/w" not in self.peft or encoders is None:
            return False
        return any(p.startswith(f"enc/{m}/") for p in encoders.paths())

    def supports(self, task: TaskSpec, encoders: ParamTree | None) -> bool:
        """True when every non-text modality of ``task`` has an encoder and projector."""
        return all(self.has_modality(m, encoders) for m in task.encoded_modalities)

    def expert_weights(self, leaves: Mapping[str, Tensor], ctx: TaskContext) -> Tensor | None:
        if not self.wiring.adapters:
            return None
        if not self.wiring.router:
            return Tensor(np.ones(1))
        bb = self.frozen_leaves()
        return route_experts(leaves, embed_text(bb, ctx.task_desc_ids),
                             embed_text(bb, ctx.modality_desc_ids))

    def prefix(self, leaves: Mapping[str, Tensor], ctx: TaskContext,
               samples: Sequence[SyntheticSample]) -> Tensor:
        bb = self.frozen_leaves()
        feats = encode_batch(leaves, self.modalities, ctx.task, samples, self.enc_cfg)
        prompt = embed_text(bb, ctx.prompt_ids)
        if not ctx.task.encoded_modalities:
            return T.add(Tensor(np.zeros((len(samples),) + prompt.shape)), prompt)
        return align_features(feats, leaves, ctx.task.encoded_modalities, prompt)

    def adapters(self, leaves):
        return leaves if self.wiring.adapters else None

    def loss(self, leaves, ctx: TaskContext, samples: Sequence[SyntheticSample]) -> Tensor:
        h = self.prefix(leaves, ctx, samples)
        answers, weights = answer_matrix(ctx, samples)
        alpha = self.expert_weights(leaves, ctx)
        return autoregressive_loss(self.frozen_leaves(), h, answers, self.fcfg.n_layers,
                                   self.adapters(leaves), alpha, weights)

    def logits(self, leaves, ctx: TaskContext, samples) -> np.ndarray:
        h = self.prefix(leaves, ctx, samples)
        alpha = self.expert_weights(leaves, ctx)
        return foundation_forward(self.frozen_leaves(), h, self.fcfg.n_layers,
                                  self.adapters(leaves), alpha).data

    def classify(self, leaves, ctx: TaskContext, samples) -> np.ndarray:
        last = self.logits(leaves, ctx, samples)[:, -1]
        return last[:, ctx.label_ids].argmax(axis=-1)

    def generate(self, leaves, ctx: TaskContext, samples) -> np.ndarray:
        h = self.prefix(leaves, ctx, samples)
        alpha = self.expert_weights(leaves, ctx)
        return greedy_decode(self.frozen_leaves(), h, self.fcfg.n_layers, ctx.task.max_answer_len,
                             self.vocab.eos, self.adapters(leaves), alpha)


def answer_matrix(ctx: TaskContext, samples) -> tuple[np.ndarray, np.ndarray]:
    rows = [ctx.answer_ids[s.label] for s in samples]
    width = max(len(r) for r in rows)
    ids = np.zeros((len(rows), width), dtype=np.int64)
    w = np.zeros((len(rows), width))
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
        w[i, :len(r)] = 1.0
    return ids, w


def init_server(backbone: ParamTree, vocab: Vocab, fcfg: FoundationConfig, pcfg: PeftConfig,
                wiring: Wiring, modalities: dict, enc_cfg: EncoderConfig,
                modality_names: Sequence[str], seed: int) -> Server:
    rng = np.random.default_rng([seed, 4242])
    peft = init_projectors({m: enc_cfg.out_dim for m in modality_names}, fcfg.d, rng)
    if wiring.adapters:
        cfg = PeftConfig(1, pcfg.rank, pcfg.d_k, pcfg.targets, pcfg.a_init_scale) \
            if wiring.single_expert else pcfg
        peft = peft.merge(init_adapters(adapter_sites(fcfg, cfg.targets), cfg, rng))
    if wiring.router:
        peft = peft.merge(init_router(fcfg.d, pcfg, rng))
    return Server(backbone, peft, vocab, fcfg, pcfg, wiring, modalities, enc_cfg)


def public_batches(public: Mapping[str, Sequence[SyntheticSample]], tasks: Sequence[TaskSpec],
                   batch_size: int, rng: np.random.Generator):
    per_task = []
    for t in tasks:
        if not public.get(t.id):
            raise ConfigError(f"empty public shard for task {t.id}")
        order = rng.permutation(len(public[t.id]))
        per_task.append([(t, [public[t.id][i] for i in order[s:s + batch_size]])
                         for s in range(0, len(order), batch_size)])
    out = []
    for i in range(max(len(b) for b in per_task)):
        for b in per_task:
            if i < len(b):
                out.append(b[i])
    return out


def inject_knowledge(server: Server, encoders: ParamTree,
                     public: Mapping[str, Sequence[SyntheticSample]], tasks: Sequence[TaskSpec],
                     steps: int | None, lr: float, rng: np.random.Generator,
                     batch_size: int = 16, epochs: int = 1) -> list[float]:
    """Train encoders and server PEFT state on public data; returns per-step losses.

    ``encoders`` and ``server.peft`` are updated in place. Only the encoder
    tree is taken, so task decoders cannot influence the server pass.
    ``steps=None`` runs ``epochs`` passes over the public shards. Adam moments
    start from zero on every call.
    """
    batches = []
    for _ in range(max(epochs, 1)):
        batches += public_batches(public, tasks, batch_size, rng)
    if steps is None:
        steps = len(batches)
    contexts = {t.id: server.context(t) for t in tasks}
    opt = Adam(lr)
    trace = []
    for step in range(steps):
        task, batch = batches[step % len(batches)]
        enc_leaves = encoders.tensors()
        peft_leaves = server.peft.tensors()
        leaves = {**enc_leaves, **peft_leaves}
        with T.Tape() as tape:
            loss = server.loss(leaves, contexts[task.id], batch)
        grads = T.backward(tape, loss)
        opt.step(encoders, encoders.gradients(enc_leaves, grads))
        opt.step(server.peft, server.peft.gradients(peft_leaves, grads))
        trace.append(float(loss.data))
    return trace


# ---------------------------------------------------------------- rounds


@dataclass
class RoundState:
    round: int
    globals: ParamTree  # enc/... and dec/...
    client_losses: dict[int, list[float]] = field(default_factory=dict)
    server_losses: list[float] = field(default_factory=list)
    communication_rounds: int = 0

    def encoders(self) -> ParamTree:
        return self.globals.subtree("enc").prefixed("enc")

    def decoders(self) -> ParamTree:
        return self.globals.subtree("dec").prefixed("dec")


def state_tree(state: RoundState, server: Server) -> ParamTree:
    """Everything needed to resume (and evaluate) after ``state.round``."""
    tree = state.globals.prefixed("global").merge(server.peft.prefixed("server"), server.backbone)
    tree.add("meta/round", [float(state.round)], frozen=True)
    tree.add("meta/communication_rounds", [float(state.communication_rounds)], frozen=True)
    if state.server_losses:
        tree.add("trace/server", state.server_losses, frozen=True)
    for cid in sorted(state.client_losses):
        tree.add(f"trace/client{cid}", state.client_losses[cid], frozen=True)
    return tree


def split_state_tree(tree: ParamTree) -> tuple[RoundState, ParamTree, ParamTree]:
    """Inverse of :func:`state_tree`: (state, server peft, backbone)."""
    if "meta/round" not in tree:
        raise StructureError("checkpoint has no meta/round entry")
    glob = tree.subtree("global").copy()
    state = RoundState(int(tree.value("meta/round")[0]), glob,
                       communication_rounds=int(tree.value("meta/communication_rounds")[0]))
    if "trace/server" in tree:
        state.server_losses = [float(v) for v in tree.value("trace/server")]
    for p in tree.paths():
        if p.startswith("trace/client"):
            state.client_losses[int(p[len("trace/client"):])] = [float(v) for v in tree.value(p)]
    peft = tree.subtree("server").copy()
    backbone = tree.subtree("backbone").prefixed("backbone").copy()
    return state, peft, backbone


def _f32(values: list[float]) -> list[float]:
    return [float(np.float32(v)) for v in values]


@dataclass
class Federation:
    """Clients, data and server for one run."""

    config: FederationConfig
    data: PartitionedDataset
    server: Server
    enc_cfg: EncoderConfig
    vocab_size: int

    @property
    def tasks(self) -> list[TaskSpec]:
        return self.data.spec.training_tasks

    def initial_state(self) -> RoundState:
        rng = np.random.default_rng([self.config.seed, 777])
        glob = init_client_params(self.data.spec, self.tasks, self.enc_cfg, self.vocab_size, rng)
        glob.round_f32()
        return RoundState(0, glob)

    def _train_client(self, cid: int, state: RoundState, round_idx: int):
        model = ClientModel(cid, state.globals.copy(), self.data.spec.modalities, self.tasks,
                            self.enc_cfg, self.vocab_size)
        rng = np.random.default_rng([self.config.seed, cid, round_idx])
        prox = self.config.strategy == "fedprox"
        res = local_train(model, self.data.client_shard(cid), self.config.local_epochs,
                          self.config.lr_local, rng, self.config.batch_size,
                          anchor=state.globals if prox else None,
                          prox_lambda=self.config.effective_lambda)
        return cid, res

    def run_round(self, state: RoundState) -> RoundState:
        k = state.round + 1
        cfg = self.config
        client_losses: dict[int, list[float]] = {}
        if self.server.wiring.federated:
            ids = list(range(cfg.n_clients))
            if cfg.jobs > 1:
                with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
                    results = list(pool.map(lambda c: self._train_client(c, state, k), ids))
            else:
                results = [self._train_client(c, state, k) for c in ids]
            results.sort(key=lambda r: r[0])
            enc_up = [r.params.subtree("enc").prefixed("enc") for _, r in results]
            dec_up = [r.params.subtree("dec").prefixed("dec") for _, r in results]
            client_losses = {cid: _f32(r.epoch_losses) for cid, r in results}
            theta_e = aggregate(enc_up, cfg.strategy)
            theta_d = aggregate(dec_up, cfg.strategy)
            comm = state.communication_rounds + 1
        else:
            theta_e, theta_d = state.encoders().copy(), state.decoders().copy()
            comm = state.communication_rounds
        rng = np.random.default_rng([cfg.seed, 99, k])
        trace = inject_knowledge(self.server, theta_e, self.data.public(), self.tasks,
                                 cfg.server_steps, cfg.lr_foundation, rng, cfg.batch_size,
                                 cfg.server_epochs)
        glob = theta_e.merge(theta_d)
        glob.round_f32()
        self.server.peft.round_f32()
        log.info("round %d: server loss %.4f -> %.4f", k, trace[0] if trace else float("nan"),
                 trace[-1] if trace else float("nan"))
        return RoundState(k, glob, client_losses, _f32(trace), comm)

    def run(self, state: RoundState | None = None, rounds: int | None = None,
            on_round: Callable[[RoundState], None] | None = None) -> RoundState:
        state = self.initial_state() if state is None else state
        target = self.config.rounds if rounds is None else rounds
        while state.round < target:
            state = self.run_round(state)
            if on_round is not None:
                on_round(state)
        return state
