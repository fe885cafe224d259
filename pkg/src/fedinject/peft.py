"""Knowledge-injection math: feature alignment, expert routing, LoRA experts.

Router
    Descriptions are embedded with the backbone's (frozen) table.  With
    ``E_M`` the modality-description rows and ``E_T`` the task-description
    rows::

        beta  = ((E_M Wq) (E_T Wk)^T / sqrt(d_k)) (E_T Wv)      # [len(M), d_k]
        alpha = softmax(W2 tanh(W1 mean_rows(beta) + b1) + b2)  # [P]

    There is deliberately no softmax over the attention scores.

Experts
    Every wrapped frozen matrix ``W`` becomes
    ``h W + sum_p alpha_p (h A_p) B_p``. ``A`` is stored stacked as
    ``[P, d_in, r]`` and ``B`` as ``[P, r, d_out]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .params import ParamTree
from .tensor import ShapeError, Tensor


@dataclass
class PeftConfig:
    n_experts: int = 12
    rank: int = 4
    d_k: int = 32
    targets: tuple[str, ...] = ("ffn/w1", "ffn/w2")
    a_init_scale: float = 0.02

    def __post_init__(self):
        self.targets = tuple(self.targets)


# ---------------------------------------------------------------- initialisation


def init_projectors(enc_dims: dict[str, int], d: int, rng: np.random.Generator) -> ParamTree:
    tree = ParamTree()
    for m in sorted(enc_dims):
        tree.add(f"proj/{m}/w", rng.normal(0.0, 1.0 / np.sqrt(enc_dims[m]), (enc_dims[m], d)))
        tree.add(f"proj/{m}/b", np.zeros(d))
    return tree


def init_router(d: int, cfg: PeftConfig, rng: np.random.Generator) -> ParamTree:
    dk, p = cfg.d_k, cfg.n_experts
    tree = ParamTree()
    for name in ("wq", "wk", "wv"):
        tree.add(f"router/{name}", rng.normal(0.0, 1.0 / np.sqrt(d), (d, dk)))
    tree.add("router/mlp/w1", rng.normal(0.0, 1.0 / np.sqrt(dk), (dk, dk)))
    tree.add("router/mlp/b1", np.zeros(dk))
    tree.add("router/mlp/w2", rng.normal(0.0, 1.0 / np.sqrt(dk), (dk, p)))
    tree.add("router/mlp/b2", np.zeros(p))
    return tree


def init_adapters(shapes: dict[str, tuple[int, int]], cfg: PeftConfig,
                  rng: np.random.Generator) -> ParamTree:
    """One expert stack per wrapped matrix; ``shapes`` maps site -> (d_in, d_out)."""
    tree = ParamTree()
    for site in sorted(shapes):
        d_in, d_out = shapes[site]
        tree.add(f"adapter/{site}/A",
                 rng.normal(0.0, cfg.a_init_scale, (cfg.n_experts, d_in, cfg.rank)))
        tree.add(f"adapter/{site}/B", np.zeros((cfg.n_experts, cfg.rank, d_out)))
    return tree


# ---------------------------------------------------------------- step 1


def project(proj: dict[str, Tensor], modality: str, features: Tensor) -> Tensor:
    w = proj[f"proj/{modality}/w"]
    if features.shape[-1] != w.shape[0]:
        raise ShapeError(f"projector {modality}: expects width {w.shape[0]}, "
                         f"encoder gave {features.shape[-1]}")
    return T.linear(features, w, proj[f"proj/{modality}/b"])


def align_features(features: dict[str, Tensor], proj: dict[str, Tensor], modalities,
                   prompt_emb: Tensor) -> Tensor:
    """Build ``h = [g(enc_1(x)); ...; g(enc_M(x)); EMB(prompt)]``.

    ``features`` maps each encoded modality to a ``[B, out_dim]`` batch; the
    result is ``[B, len(modalities) + len(prompt), d]`` with one position per
    modality, in the task's declared order.
    """
    if not modalities:
        return prompt_emb
    batch = features[modalities[0]].shape[0]
    segs = []
    for m in modalities:
        e = project(proj, m, features[m])
        segs.append(T.reshape(e, (batch, 1, e.shape[-1])))
    if prompt_emb.shape[-1] != segs[0].shape[-1]:
        raise ShapeError(f"prompt width {prompt_emb.shape[-1]} != projector width "
                         f"{segs[0].shape[-1]}")
    if prompt_emb.shape[0] > 0:
        tiled = prompt_emb if prompt_emb.ndim == 3 else T.add(
            Tensor(np.zeros((batch,) + prompt_emb.shape)), prompt_emb)
        segs.append(tiled)
    return T.concat(segs, axis=1)


# ---------------------------------------------------------------- step 2


def route_experts(router: dict[str, Tensor], task_emb: Tensor, modality_emb: Tensor) -> Tensor:
    """Expert weights ``alpha`` (length P) from embedded descriptions."""
    if task_emb.shape[0] == 0 or modality_emb.shape[0] == 0:
        raise T.ContractError("route_experts: descriptions must be non-empty")
    wq, wk, wv = router["router/wq"], router["router/wk"], router["router/wv"]
    dk = wq.shape[1]
    q = modality_emb @ wq
    k = task_emb @ wk
    v = task_emb @ wv
    beta = T.matmul(T.mul(q @ T.transpose(k), 1.0 / np.sqrt(dk)), v)
    pooled = T.reshape(T.mean(beta, axis=0), (1, dk))
    hidden = T.tanh(T.linear(pooled, router["router/mlp/w1"], router["router/mlp/b1"]))
    logits = T.linear(hidden, router["router/mlp/w2"], router["router/mlp/b2"])
    return T.softmax(T.reshape(logits, (logits.shape[-1],)))


# ---------------------------------------------------------------- step 3


def expert_delta(a: Tensor, b: Tensor, h: Tensor, alpha: Tensor) -> Tensor:
    """``sum_p alpha_p (h A_p) B_p`` evaluated as one stacked product."""
    p, d_in, r = a.shape
    if b.shape[0] != p or b.shape[1] != r:
        raise ShapeError(f"adapter shapes A{a.shape} / B{b.shape} disagree")
    if alpha.shape != (p,):
        raise ShapeError(f"alpha has shape {alpha.shape}, expected ({p},)")
    if h.shape[-1] != d_in:
        raise ShapeError(f"adapter input width {h.shape[-1]} != {d_in}")
    a_cat = T.reshape(T.transpose(a, (1, 0, 2)), (d_in, p * r))
    b_cat = T.reshape(b, (p * r, b.shape[2]))
    gate = T.take(alpha, np.repeat(np.arange(p), r))
    return T.matmul(T.mul(T.matmul(h, a_cat), gate), b_cat)


def lora_moe_forward(a: Tensor, b: Tensor, w_frozen: Tensor, h: Tensor, alpha: Tensor) -> Tensor:
    """Position-wise ``h W + sum_p alpha_p (h A_p) B_p``."""
    if h.shape[-1] != w_frozen.shape[0]:
        raise ShapeError(f"input width {h.shape[-1]} != frozen matrix rows {w_frozen.shape[0]}")
    return T.add(T.matmul(h, w_frozen), expert_delta(a, b, h, alpha))
