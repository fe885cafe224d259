"""The frozen server-side generative model and its in-repo pretraining.

A tiny pre-norm causal transformer: tied token embedding, ``L`` blocks of
single-head attention plus a GELU feed-forward, sinusoidal positions. Any
frozen matrix listed in ``PeftConfig.targets`` is evaluated through the
LoRA expert mixture when adapters are supplied.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .optim import Adam
from .params import ParamTree
from .peft import expert_delta
from .tensor import ContractError, ShapeError, Tensor

MASK_VALUE = -1e9


class VocabularyError(KeyError):
    pass


class Vocab:
    """Whitespace word vocabulary with PAD/BOS/EOS at ids 0/1/2."""

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[:3]) != ["PAD", "BOS", "EOS"]:
            raise ValueError("vocabulary must start with PAD, BOS, EOS")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self._ids = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts: Sequence[str], extra: Sequence[str] = ()) -> "Vocab":
        words = set(extra)
        for text in texts:
            words.update(text.split())
        words -= {"PAD", "BOS", "EOS"}
        return cls(["PAD", "BOS", "EOS"] + sorted(words))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise VocabularyError(f"unknown token {token!r}") from None

    def encode(self, text: str | Sequence[str]) -> list[int]:
        words = text.split() if isinstance(text, str) else list(text)
        return [self.id(w) for w in words]

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]

    @property
    def pad(self) -> int:
        return 0

    @property
    def bos(self) -> int:
        return 1

    @property
    def eos(self) -> int:
        return 2


@dataclass
class FoundationConfig:
    vocab_size: int
    d: int = 64
    n_layers: int = 2
    d_ff: int = 128
    max_len: int = 64


def init_backbone(cfg: FoundationConfig, rng: np.random.Generator) -> ParamTree:
    d, f = cfg.d, cfg.d_ff
    tree = ParamTree()
    tree.add("backbone/emb", rng.normal(0.0, 1.0, (cfg.vocab_size, d)))
    for i in range(cfg.n_layers):
        for name in ("wq", "wk", "wv", "wo"):
            tree.add(f"backbone/block{i}/attn/{name}", rng.normal(0.0, 1.0 / np.sqrt(d), (d, d)))
        tree.add(f"backbone/block{i}/ffn/w1", rng.normal(0.0, 1.0 / np.sqrt(d), (d, f)))
        tree.add(f"backbone/block{i}/ffn/w2", rng.normal(0.0, 1.0 / np.sqrt(f), (f, d)))
    return tree


def adapter_sites(cfg: FoundationConfig, targets: Sequence[str]) -> dict[str, tuple[int, int]]:
    shapes = {"attn/wq": (cfg.d, cfg.d), "attn/wk": (cfg.d, cfg.d), "attn/wv": (cfg.d, cfg.d),
              "attn/wo": (cfg.d, cfg.d), "ffn/w1": (cfg.d, cfg.d_ff), "ffn/w2": (cfg.d_ff, cfg.d)}
    sites = {}
    for i in range(cfg.n_layers):
        for t in targets:
            if t not in shapes:
                raise ValueError(f"unknown adapter target {t!r}")
            sites[f"block{i}/{t.replace('/', '_')}"] = shapes[t]
    return sites


def positions(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    k = np.arange(0, d, 2)[None, :]
    ang = pos / np.power(10000.0, k / d)
    pe = np.zeros((n, d))
    pe[:, 0::2] = np.sin(ang)
    pe[:, 1::2] = np.cos(ang[:, : d // 2])
    return pe


def embed_text(params: Mapping[str, Tensor], ids: Sequence[int]) -> Tensor:
    """Rows of the embedding table for ``ids`` (``[len, d]``)."""
    emb = params["backbone/emb"]
    ids = np.asarray(list(ids), dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= emb.shape[0]):
        raise VocabularyError(f"token id out of range [0, {emb.shape[0]})")
    return T.take(emb, ids)


def _site(params, adapters, alpha, block: int, name: str, x: Tensor) -> Tensor:
    w = params[f"backbone/block{block}/{name}"]
    y = T.matmul(x, w)
    if adapters is not None:
        key = f"adapter/block{block}/{name.replace('/', '_')}"
        if f"{key}/A" in adapters:
            y = T.add(y, expert_delta(adapters[f"{key}/A"], adapters[f"{key}/B"], x, alpha))
    return y


def foundation_forward(params: Mapping[str, Tensor], h: Tensor, n_layers: int,
                       adapters: Mapping[str, Tensor] | None = None,
                       alpha: Tensor | None = None) -> Tensor:
    """Causal pass over ``h`` ([B, n, d] or [n, d]); returns vocabulary logits."""
    emb = params["backbone/emb"]
    d = emb.shape[1]
    if h.shape[-1] != d:
        raise ShapeError(f"input width {h.shape[-1]} != model width {d}")
    if adapters is not None and alpha is None:
        raise ContractError("adapters need expert weights alpha")
    n = h.shape[-2]
    x = T.add(h, Tensor(positions(n, d)))
    mask = Tensor(np.triu(np.full((n, n), MASK_VALUE), k=1))
    scale = 1.0 / np.sqrt(d)
    for i in range(n_layers):
        a = T.layer_norm(x)
        q = _site(params, adapters, alpha, i, "attn/wq", a)
        k = _site(params, adapters, alpha, i, "attn/wk", a)
        v = _site(params, adapters, alpha, i, "attn/wv", a)
        scores = T.add(T.mul(T.matmul(q, T.transpose(k)), scale), mask)
        att = T.matmul(T.softmax(scores, axis=-1), v)
        x = T.add(x, _site(params, adapters, alpha, i, "attn/wo", att))
        a = T.layer_norm(x)
        f = T.gelu(_site(params, adapters, alpha, i, "ffn/w1", a))
        x = T.add(x, _site(params, adapters, alpha, i, "ffn/w2", f))
    x = T.layer_norm(x)
    return T.matmul(x, T.transpose(emb))


def autoregressive_loss(params: Mapping[str, Tensor], h: Tensor, answers, n_layers: int,
                        adapters=None, alpha=None, weights=None) -> Tensor:
    """Mean next-token cross-entropy over answer positions given prefix ``h``.

    ``answers`` is ``[B, A]`` token ids (or a flat list for a single
    sequence); ``weights`` masks padding positions.
    """
    answers = np.asarray(answers, dtype=np.int64)
    single = h.ndim == 2
    if single:
        h = T.reshape(h, (1,) + h.shape)
        answers = answers.reshape(1, -1)
        weights = None if weights is None else np.asarray(weights).reshape(1, -1)
    if answers.shape[1] == 0:
        raise ContractError("autoregressive_loss: empty answer")
    b, n = h.shape[0], h.shape[1]
    a = answers.shape[1]
    seq = h
    if a > 1:
        prev = T.reshape(embed_text(params, answers[:, :-1].reshape(-1)), (b, a - 1, h.shape[2]))
        seq = T.concat([h, prev], axis=1)
    logits = foundation_forward(params, seq, n_layers, adapters, alpha)
    picked = T.index(logits, (slice(None), slice(n - 1, n - 1 + a)))
    return T.cross_entropy(picked, answers, weights)


def greedy_decode(params: Mapping[str, Tensor], h: Tensor, n_layers: int, max_len: int,
                  eos: int, adapters=None, alpha=None) -> np.ndarray:
    """Greedy generation for a batch ``h`` [B, n, d]; returns ``[B, <=max_len]`` ids.

    Positions after a sequence's EOS are filled with EOS.
    """
    b = h.shape[0]
    out = np.zeros((b, 0), dtype=np.int64)
    seq = h
    done = np.zeros(b, dtype=bool)
    for _ in range(max_len):
        logits = foundation_forward(params, seq, n_layers, adapters, alpha).data[:, -1]
        nxt = np.where(done, eos, logits.argmax(axis=-1))
        out = np.concatenate([out, nxt[:, None]], axis=1)
        done |= nxt == eos
        if done.all():
            break
        e = embed_text(params, nxt)
        seq = T.concat([seq, T.reshape(e, (b, 1, e.shape[-1]))], axis=1)
    return out


# ---------------------------------------------------------------- pretraining


@dataclass
class PretrainConfig:
    steps: int = 600
    batch_size: int = 32
    lr: float = 3e-3
    n_items: int = 24
    n_concepts: int = 6


def pretrain_words(cfg: PretrainConfig) -> tuple[list[str], list[str]]:
    return [f"item{i}" for i in range(cfg.n_items)], [f"concept{i}" for i in range(cfg.n_concepts)]


PRETRAIN_TEMPLATE = "does the {kind} show {concept} ?"
PRETRAIN_KINDS = ("item", "record")


def pretrain_extra_tokens(cfg: PretrainConfig) -> list[str]:
    items, concepts = pretrain_words(cfg)
    words = set(items) | set(concepts) | set(PRETRAIN_KINDS) | {"YES", "NO"}
    for kind in PRETRAIN_KINDS:
        words.update(PRETRAIN_TEMPLATE.format(kind=kind, concept="x").split())
    words.discard("x")
    return sorted(words)


def make_pretrain_batch(vocab: Vocab, cfg: PretrainConfig, table: np.ndarray,
                        rng: np.random.Generator, n_content: int):
    """Text-only QA pairs: content words, a question about a concept, YES/NO.

    ``table[item, concept]`` is +1/-1; the answer is YES when the content
    items' summed score for the asked concept is positive.
    """
    items, concepts = pretrain_words(cfg)
    kind = PRETRAIN_KINDS[n_content - 1]
    prefixes, answers = [], []
    while len(prefixes) < cfg.batch_size:
        chosen = rng.choice(cfg.n_items, size=n_content, replace=False)
        c = int(rng.integers(cfg.n_concepts))
        score = table[chosen, c].sum()
        if score == 0:
            continue
        prompt = PRETRAIN_TEMPLATE.format(kind=kind, concept=concepts[c])
        prefixes.append([vocab.id(items[i]) for i in chosen] + vocab.encode(prompt))
        answers.append([vocab.id("YES" if score > 0 else "NO"), vocab.eos])
    return np.asarray(prefixes), np.asarray(answers)


def pretrain_backbone(backbone: ParamTree, vocab: Vocab, fcfg: FoundationConfig,
                      cfg: PretrainConfig, seed: int) -> list[float]:
    """Fit the backbone on synthetic text QA for a fixed budget, then freeze it.

    Values are rounded to float32 precision afterwards, which is what the
    checkpoint stores; the frozen weights are therefore exactly reloadable.
    """
    rng = np.random.default_rng([seed, 31337])
    table = rng.choice([-1.0, 1.0], size=(cfg.n_items, cfg.n_concepts))
    opt = Adam(cfg.lr)
    trace = []
    for step in range(cfg.steps):
        n_content = 1 + step % 2
        prefixes, answers = make_pretrain_batch(vocab, cfg, table, rng, n_content)
        leaves = backbone.tensors()
        with T.Tape() as tape:
            b, n = prefixes.shape
            h = T.reshape(embed_text(leaves, prefixes.reshape(-1)), (b, n, fcfg.d))
            loss = autoregressive_loss(leaves, h, answers, fcfg.n_layers)
        grads = T.backward(tape, loss)
        opt.step(backbone, backbone.gradients(leaves, grads))
        trace.append(float(loss.data))
    backbone.freeze()
    backbone.round_f32()
    return trace
