"""Client models: modality-specific encoders and task-specific decoders.

Parameter paths are ``enc/<modality>/...`` and ``dec/<task>/...`` so the
encoder and decoder halves of a client tree split by prefix.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import BenchmarkSpec, ConfigError, ModalitySpec, SyntheticSample, TaskSpec
from .optim import SGD
from .params import ParamTree
from .tensor import Tensor

ARCHETYPES = ("image-patch", "signal-conv", "sequence", "tabular")


class MissingModalityError(ValueError):
    pass


@dataclass
class EncoderConfig:
    out_dim: int = 32
    patch: int = 4
    conv_channels: tuple[int, int] = (8, 16)
    kernel: int = 5
    stride: int = 2


# ---------------------------------------------------------------- init


def _dense(tree: ParamTree, prefix: str, n_in: int, n_out: int, rng, bias: bool = True):
    tree.add(f"{prefix}/w", rng.normal(0.0, 1.0 / np.sqrt(n_in), (n_in, n_out)))
    if bias:
        tree.add(f"{prefix}/b", np.zeros(n_out))


def _attention_block(tree: ParamTree, prefix: str, d: int, rng) -> None:
    for name in ("wq", "wk", "wv", "wo"):
        tree.add(f"{prefix}/{name}", rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)))
    _dense(tree, f"{prefix}/mlp", d, d, rng)


def init_encoder(m: ModalitySpec, cfg: EncoderConfig, rng) -> ParamTree:
    tree = ParamTree()
    d = cfg.out_dim
    pre = f"enc/{m.name}"
    if m.archetype == "image-patch":
        h, w = m.shape
        p = cfg.patch
        if h % p or w % p:
            raise ConfigError(f"image {m.shape} not divisible into {p}x{p} patches")
        _dense(tree, f"{pre}/patch", p * p, d, rng)
        tree.add(f"{pre}/pos", rng.normal(0.0, 0.1, ((h // p) * (w // p), d)))
        for i in range(2):
            _attention_block(tree, f"{pre}/block{i}", d, rng)
    elif m.archetype == "signal-conv":
        c, _ = m.shape
        c1, c2 = cfg.conv_channels
        _dense(tree, f"{pre}/conv0", c * cfg.kernel, c1, rng)
        _dense(tree, f"{pre}/conv1", c1 * cfg.kernel, c2, rng)
        _dense(tree, f"{pre}/out", c2, d, rng)
    elif m.archetype == "sequence":
        steps, feats = m.shape
        _dense(tree, f"{pre}/embed", feats, d, rng)
        tree.add(f"{pre}/pos", rng.normal(0.0, 0.1, (steps, d)))
        for i in range(2):
            _attention_block(tree, f"{pre}/block{i}", d, rng)
    elif m.archetype == "tabular":
        (feats,) = m.shape
        _dense(tree, f"{pre}/l0", feats, d, rng)
        _dense(tree, f"{pre}/l1", d, d, rng)
    else:
        raise ConfigError(f"unknown encoder archetype {m.archetype!r}")
    return tree


def init_decoder(task: TaskSpec, enc_dim: int, vocab_size: int, rng) -> ParamTree:
    tree = ParamTree()
    width = enc_dim * len(task.encoded_modalities)
    if task.kind == "classification":
        _dense(tree, f"dec/{task.id}/head", width, task.n_classes, rng)
    else:
        _dense(tree, f"dec/{task.id}/head", width, (task.max_answer_len + 1) * vocab_size, rng)
    return tree


@dataclass
class ClientModel:
    client_id: int
    params: ParamTree
    modalities: dict[str, ModalitySpec]
    tasks: list[TaskSpec]
    enc_cfg: EncoderConfig = field(default_factory=EncoderConfig)
    vocab_size: int = 0

    def encoder_tree(self) -> ParamTree:
        return self.params.subtree("enc").prefixed("enc")

    def decoder_tree(self) -> ParamTree:
        return self.params.subtree("dec").prefixed("dec")


def init_client_params(spec: BenchmarkSpec, tasks: Sequence[TaskSpec], cfg: EncoderConfig,
                       vocab_size: int, rng) -> ParamTree:
    needed = []
    for t in tasks:
        for m in t.encoded_modalities:
            if m not in needed:
                needed.append(m)
    tree = ParamTree()
    for m in sorted(needed):
        tree = tree.merge(init_encoder(spec.modalities[m], cfg, rng))
    for t in tasks:
        tree = tree.merge(init_decoder(t, cfg.out_dim, vocab_size, rng))
    return tree


# ---------------------------------------------------------------- forward


def _attend(params: Mapping[str, Tensor], pre: str, x: Tensor) -> Tensor:
    d = x.shape[-1]
    a = T.layer_norm(x)
    q, k, v = (a @ params[f"{pre}/{n}"] for n in ("wq", "wk", "wv"))
    att = T.softmax(T.mul(q @ T.transpose(k), 1.0 / np.sqrt(d)), axis=-1)
    x = T.add(x, (att @ v) @ params[f"{pre}/wo"])
    m = T.tanh(T.linear(T.layer_norm(x), params[f"{pre}/mlp/w"], params[f"{pre}/mlp/b"]))
    return T.add(x, m)


def _windows(length: int, kernel: int, stride: int) -> np.ndarray:
    starts = np.arange(0, length - kernel + 1, stride)
    return starts[:, None] + np.arange(kernel)[None, :]


def encode(params: Mapping[str, Tensor], m: ModalitySpec, x: np.ndarray,
           cfg: EncoderConfig) -> Tensor:
    """Encode a batch ``x`` of shape ``[B, *m.shape]`` into ``[B, out_dim]``."""
    pre = f"enc/{m.name}"
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != m.shape:
        raise T.ShapeError(f"{m.name}: sample shape {x.shape[1:]} != declared {m.shape}")
    b = x.shape[0]
    if m.archetype == "image-patch":
        h, w = m.shape
        p = cfg.patch
        patches = x.reshape(b, h // p, p, w // p, p).transpose(0, 1, 3, 2, 4)
        patches = patches.reshape(b, (h // p) * (w // p), p * p)
        z = T.add(T.linear(Tensor(patches), params[f"{pre}/patch/w"], params[f"{pre}/patch/b"]),
                  params[f"{pre}/pos"])
        for i in range(2):
            z = _attend(params, f"{pre}/block{i}", z)
        return T.mean(z, axis=1)
    if m.archetype == "signal-conv":
        c, steps = m.shape
        idx = _windows(steps, cfg.kernel, cfg.stride)
        cols = x[:, :, idx].transpose(0, 2, 1, 3).reshape(b, len(idx), c * cfg.kernel)
        z = T.tanh(T.linear(Tensor(cols), params[f"{pre}/conv0/w"], params[f"{pre}/conv0/b"]))
        idx2 = _windows(z.shape[1], cfg.kernel, cfg.stride)
        ch = z.shape[2]
        cols2 = T.reshape(T.index(z, (slice(None), idx2)), (b, len(idx2), cfg.kernel * ch))
        z = T.tanh(T.linear(cols2, params[f"{pre}/conv1/w"], params[f"{pre}/conv1/b"]))
        return T.linear(T.mean(z, axis=1), params[f"{pre}/out/w"], params[f"{pre}/out/b"])
    if m.archetype == "sequence":
        z = T.add(T.linear(Tensor(x), params[f"{pre}/embed/w"], params[f"{pre}/embed/b"]),
                  params[f"{pre}/pos"])
        for i in range(2):
            z = _attend(params, f"{pre}/block{i}", z)
        return T.mean(z, axis=1)
    if m.archetype == "tabular":
        z = T.tanh(T.linear(Tensor(x), params[f"{pre}/l0/w"], params[f"{pre}/l0/b"]))
        return T.linear(z, params[f"{pre}/l1/w"], params[f"{pre}/l1/b"])
    raise ConfigError(f"unknown encoder archetype {m.archetype!r}")


def stack_modality(samples: Sequence[SyntheticSample], modality: str) -> np.ndarray:
    for s in samples:
        if modality not in s.modalities:
            raise MissingModalityError(f"sample {s.index} lacks modality {modality!r}")
    return np.stack([s.modalities[modality] for s in samples])


def encode_batch(params: Mapping[str, Tensor], modalities: Mapping[str, ModalitySpec],
                 task: TaskSpec, samples: Sequence[SyntheticSample],
                 cfg: EncoderConfig) -> dict[str, Tensor]:
    return {m: encode(params, modalities[m], stack_modality(samples, m), cfg)
            for m in task.encoded_modalities}


def decode(params: Mapping[str, Tensor], task: TaskSpec, features: Sequence[Tensor]) -> Tensor:
    z = features[0] if len(features) == 1 else T.concat(list(features), axis=-1)
    return T.linear(z, params[f"dec/{task.id}/head/w"], params[f"dec/{task.id}/head/b"])


def client_forward(model: ClientModel, samples: Sequence[SyntheticSample] | SyntheticSample,
                   task: TaskSpec, params: Mapping[str, Tensor] | None = None) -> Tensor:
    """Logits ``DEC_t(concat_m ENC_m(x_m))`` for a sample or a batch of samples."""
    single = isinstance(samples, SyntheticSample)
    batch = [samples] if single else list(samples)
    leaves = model.params.tensors() if params is None else params
    feats = encode_batch(leaves, model.modalities, task, batch, model.enc_cfg)
    logits = decode(leaves, task, [feats[m] for m in task.encoded_modalities])
    return T.index(logits, 0) if single else logits


def targets_for(task: TaskSpec, samples: Sequence[SyntheticSample], vocab_ids=None):
    if task.kind == "classification":
        return np.array([s.label for s in samples], dtype=np.int64)
    raise ConfigError("generation targets need answer token ids")


def task_loss(model: ClientModel, params: Mapping[str, Tensor], task: TaskSpec,
              samples: Sequence[SyntheticSample], answer_ids: Callable | None = None) -> Tensor:
    """Mean per-sample loss of one task on ``samples``."""
    logits = client_forward(model, samples, task, params)
    if task.kind == "classification":
        return T.cross_entropy(logits, targets_for(task, samples))
    # generation head: one independent softmax per answer position, padded by EOS
    steps = task.max_answer_len + 1
    ids = np.array([_pad(answer_ids(task, s), steps) for s in samples])
    logits = T.reshape(logits, (len(samples), steps, model.vocab_size))
    return T.cross_entropy(logits, ids)


def _pad(ids: list[int], steps: int, eos: int = 2) -> list[int]:
    return (list(ids) + [eos] * steps)[:steps]


def multitask_loss(model: ClientModel, params: Mapping[str, Tensor],
                   shard: Mapping[str, Sequence[SyntheticSample]], answer_ids=None) -> Tensor:
    """Unweighted mean over tasks of each task's mean sample loss."""
    losses = [task_loss(model, params, t, shard[t.id], answer_ids) for t in model.tasks]
    total = losses[0]
    for loss in losses[1:]:
        total = T.add(total, loss)
    return T.mul(total, 1.0 / len(losses))


# ---------------------------------------------------------------- local training


def fedprox_penalty(params: Mapping[str, Tensor], anchor: ParamTree, lam: float,
                    paths: Sequence[str]) -> Tensor:
    """``(lam / 2) * ||theta - theta*||^2`` over ``paths``."""
    total = Tensor(0.0)
    for p in paths:
        diff = T.sub(params[p], Tensor(anchor.value(p)))
        total = T.add(total, T.tsum(T.square(diff)))
    return T.mul(total, lam / 2.0)


def fedprox_local_objective(local_loss: Callable[[Mapping[str, Tensor]], Tensor],
                            params: Mapping[str, Tensor], theta: ParamTree,
                            anchor: ParamTree, lam: float) -> Tensor:
    """``J = L(theta) + (lam / 2) ||theta - theta*||^2`` on the trainable entries."""
    if lam < 0:
        raise ValueError("FedProx lambda must be >= 0")
    theta.check_same_structure(anchor)
    loss = local_loss(params)
    return T.add(loss, fedprox_penalty(params, anchor, lam, theta.trainable_paths()))


@dataclass
class LocalResult:
    params: ParamTree
    epoch_losses: list[float]


def round_robin_batches(shard: Mapping[str, Sequence[SyntheticSample]], tasks: Sequence[TaskSpec],
                        batch_size: int, rng: np.random.Generator):
    """Interleave per-task mini-batches: task order repeats within the epoch."""
    per_task = []
    for t in tasks:
        order = rng.permutation(len(shard[t.id]))
        per_task.append([(t, [shard[t.id][i] for i in order[s:s + batch_size]])
                         for s in range(0, len(order), batch_size)])
    out = []
    for i in range(max(len(b) for b in per_task)):
        for batches in per_task:
            if i < len(batches):
                out.append(batches[i])
    return out


def local_train(model: ClientModel, shard: Mapping[str, Sequence[SyntheticSample]],
                epochs: int, lr: float, rng: np.random.Generator, batch_size: int = 16,
                anchor: ParamTree | None = None, prox_lambda: float = 0.0,
                answer_ids=None) -> LocalResult:
    """Mini-batch SGD on the multi-task loss; updates ``model.params`` in place.

    With an ``anchor`` each batch objective gains the FedProx term
    ``(prox_lambda / 2) ||theta - anchor||^2``, even when ``prox_lambda`` is 0.
    """
    if lr < 0:
        raise ValueError("lr must be non-negative")
    for t in model.tasks:
        if not shard.get(t.id):
            raise ConfigError(f"client {model.client_id}: empty shard for task {t.id}")
    opt = SGD(lr)
    tree = model.params
    trainable = tree.trainable_paths()
    epoch_losses = []
    for _ in range(epochs):
        sums = {t.id: [0.0, 0] for t in model.tasks}
        for task, batch in round_robin_batches(shard, model.tasks, batch_size, rng):
            leaves = tree.tensors()
            with T.Tape() as tape:
                loss = task_loss(model, leaves, task, batch, answer_ids)
                obj = loss
                if anchor is not None:
                    obj = T.add(loss, fedprox_penalty(leaves, anchor, prox_lambda, trainable))
            grads = T.backward(tape, obj)
            opt.step(tree, tree.gradients(leaves, grads))
            sums[task.id][0] += float(loss.data) * len(batch)
            sums[task.id][1] += len(batch)
        epoch_losses.append(float(np.mean([s / n for s, n in sums.values()])))
    return LocalResult(tree, epoch_losses)
