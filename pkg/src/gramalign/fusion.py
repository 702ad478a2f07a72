"""Cross-modal transformer fusion.

Each entity contributes four tokens (structure, relation, attribute, image)
laid out entity-major: row 4*e + m is modality m of entity e.  Attention runs
only inside an entity's block of four rows.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

MODALITIES = ("g", "r", "a", "v")
N_MOD = len(MODALITIES)
LN_EPS = 1e-6


@dataclass
class FusionConfig:
    heads: int = 5
    ffn_dim: int = 400
    weight_mode: str = "incoming"   # incoming | outgoing
    weight_scope: str = "global"    # global | per_entity

    def __post_init__(self):
        if self.weight_mode not in ("incoming", "outgoing"):
            raise ValueError(f"unknown weight mode {self.weight_mode!r}")
        if self.weight_scope not in ("global", "per_entity"):
            raise ValueError(f"unknown weight scope {self.weight_scope!r}")


@dataclass
class FusionParams:
    q: list
    k: list
    v: list
    w_o: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln1_gain: Tensor
    ln1_bias: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    type_emb: Tensor

    @property
    def heads(self):
        return len(self.q)

    def named(self):
        out = {}
        for i in range(self.heads):
            out[f"fusion.q{i}"] = self.q[i]
            out[f"fusion.k{i}"] = self.k[i]
            out[f"fusion.v{i}"] = self.v[i]
        for name in ("w_o", "w1", "b1", "w2", "b2", "ln1_gain", "ln1_bias",
                     "ln2_gain", "ln2_bias", "type_emb"):
            out[f"fusion.{name}"] = getattr(self, name)
        return out

    @classmethod
    def from_named(cls, params: dict, heads: int):
        get = lambda key: params[f"fusion.{key}"]
        return cls(q=[get(f"q{i}") for i in range(heads)],
                   k=[get(f"k{i}") for i in range(heads)],
                   v=[get(f"v{i}") for i in range(heads)],
                   **{name: get(name) for name in ("w_o", "w1", "b1", "w2", "b2", "ln1_gain",
                                                   "ln1_bias", "ln2_gain", "ln2_bias", "type_emb")})


def init_fusion(d: int, config: FusionConfig, rng: np.random.Generator) -> FusionParams:
    if d % config.heads:
        raise ValueError(f"hidden size {d} is not divisible by {config.heads} heads")
    dh = d // config.heads

    def xavier(fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return T.parameter(rng.uniform(-bound, bound, size=(fan_in, fan_out)))

    q = [xavier(d, dh) for _ in range(config.heads)]
    k = [xavier(d, dh) for _ in range(config.heads)]
    v = [xavier(d, dh) for _ in range(config.heads)]
    b = 1.0 / np.sqrt(d)
    return FusionParams(
        q=q, k=k, v=v,
        w_o=xavier(config.heads * dh, d),
        w1=xavier(d, config.ffn_dim), b1=T.parameter(np.zeros((1, config.ffn_dim))),
        w2=xavier(config.ffn_dim, d), b2=T.parameter(np.zeros((1, d))),
        ln1_gain=T.parameter(np.ones((1, d))), ln1_bias=T.parameter(np.zeros((1, d))),
        ln2_gain=T.parameter(np.ones((1, d))), ln2_bias=T.parameter(np.zeros((1, d))),
        type_emb=T.parameter(rng.uniform(-b, b, size=(N_MOD, d))),
    )


def cross_modal_attention(tokens: Tensor, params: FusionParams, block: int = N_MOD):
    """Multi-head attention inside each entity's token block.

    Returns the projected output and the attention probabilities as one
    (rows, heads * block) tensor: columns h*block .. h*block + block - 1 of
    a row hold head h's distribution for that query token.
    """
    nh = params.heads
    dh = params.q[0].cols
    q = tokens @ T.concat_cols(params.q)
    k = tokens @ T.concat_cols(params.k)
    v = tokens @ T.concat_cols(params.v)
    scores = T.block_scores(q, k, block, nh)
    # one softmax row per (query token, head)
    p = T.reshape(T.row_softmax(T.reshape(scores, -1, block), 1.0 / np.sqrt(dh)),
                  tokens.rows, nh * block)
    heads = T.block_apply(p, v, block, nh)
    return heads @ params.w_o, p


def head_matrices(probs: Tensor, heads: int, block: int = N_MOD) -> np.ndarray:
    """(heads, entities, block, block) view of attention probabilities."""
    return probs.values.reshape(-1, block, heads, block).transpose(2, 0, 1, 3).copy()


def transformer_block(tokens: Tensor, params: FusionParams, block: int = N_MOD):
    """Post-norm block: x1 = LN(t + MA(t)); out = LN(x1 + FFN(x1))."""
    att, probs = cross_modal_attention(tokens, params, block)
    x1 = T.layer_norm(tokens + att, params.ln1_gain, params.ln1_bias, LN_EPS)
    ffn = T.relu(x1 @ params.w1 + params.b1) @ params.w2 + params.b2
    return T.layer_norm(x1 + ffn, params.ln2_gain, params.ln2_bias, LN_EPS), probs


def modality_weights(probs, mode: str = "incoming", scope: str = "global",
                     exclude=()) -> Tensor:
    """Softmax of per-modality attention mass, scaled by sqrt(|M| * heads).

    `probs` is a (4n, 4h) attention tensor in the layout of
    :func:`cross_modal_attention`, or a list of such tensors whose head
    counts add up.  In "incoming" mode a modality scores the attention it
    receives (column sums within its entity block); in "outgoing" mode it
    scores what it hands out (row sums, always 1 per head).  Global scope
    averages over entities and returns (1, 4); per-entity scope returns
    (n, 4).  Modalities listed in `exclude` get weight zero.
    """
    if isinstance(probs, Tensor):
        probs = [probs]
    n = probs[0].rows // N_MOD
    n_heads = 0
    total = None
    for p in probs:
        h = p.cols // N_MOD
        n_heads += h
        flat = T.reshape(p, -1, N_MOD)            # row ((e*4 + i)*h + head)
        if mode == "incoming":
            s = T.segment_sum(flat, np.repeat(np.arange(n), N_MOD * h), n)
        elif mode == "outgoing":
            per_query = T.sum(T.reshape(T.sum(flat, axis=1), n * N_MOD, h), axis=1)
            s = T.reshape(per_query, n, N_MOD)
        else:
            raise ValueError(f"unknown weight mode {mode!r}")
        total = s if total is None else total + s
    if scope == "global":
        total = T.mean(total, axis=0)
    elif scope != "per_entity":
        raise ValueError(f"unknown weight scope {scope!r}")
    if exclude:
        off = np.zeros((1, N_MOD))
        off[0, [MODALITIES.index(m) for m in exclude]] = -1e300
        total = total + T.constant(off)
    return T.row_softmax(total, 1.0 / np.sqrt(N_MOD * n_heads))


def fuse_joint(h_g: Tensor, hidden: dict, weights: Tensor) -> Tensor:
    """[H_g | w_r H_r | w_a H_a | w_v H_v] with unit-length rows.

    `weights` is (1, 4) or (n, 4) in modality order g, r, a, v.
    """
    blocks = [h_g]
    for m in ("r", "a", "v"):
        pick = np.zeros((N_MOD, 1))
        pick[MODALITIES.index(m), 0] = 1.0
        w_m = weights @ T.constant(pick)
        blocks.append(hidden[m] * w_m)
    return T.l2_normalize_rows(T.concat_cols(blocks))


def interleave(parts) -> Tensor:
    """Stack four (n, d) modality matrices into entity-major (4n, d) tokens."""
    n = parts[0].rows
    stacked = T.concat_rows(parts)
    order = (np.arange(N_MOD)[None, :] * n + np.arange(n)[:, None]).reshape(-1)
    return T.gather_rows(stacked, order)


def split_tokens(tokens: Tensor) -> dict:
    n = tokens.rows // N_MOD
    return {m: T.gather_rows(tokens, np.arange(n) * N_MOD + i) for i, m in enumerate(MODALITIES)}


@dataclass
class FusionOutput:
    hidden: dict             # modality -> (n, d) post-transformer states
    weights: Tensor          # (1, 4) or (n, 4)
    joint: Tensor            # (n, 4d), rows unit length
    attn: list = field(default_factory=list)  # per head (n, 4, 4) arrays

    def weight_values(self):
        return self.weights.values
