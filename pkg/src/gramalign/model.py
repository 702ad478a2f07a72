"""Learnable parameters and the full forward pass for a pair of graphs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .diffusion import diffuse
from .encoders import EdgeList, project_modality, rrgat_encode
from .fusion import (MODALITIES, N_MOD, FusionOutput, FusionParams, fuse_joint, head_matrices, init_fusion,
                     interleave, modality_weights, transformer_block)
from .kgdata import MultiModalKG, NormalizedAdjacency, build_adjacency
from .objective import GramBatch, gram_loss, infonce_loss, total_loss

FEATURE_MODALITIES = ("r", "a", "v")

VARIANTS = ("full", "no_relation", "no_attribute", "no_image", "no_mgd", "no_gram")
_DROPPED = {"no_relation": "r", "no_attribute": "a", "no_image": "v"}


def check_variant(variant: str) -> str:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    return variant


@dataclass(frozen=True, eq=False)
class GraphInputs:
    """Constant per-graph data needed by the forward pass."""
    kg: MultiModalKG
    adj: NormalizedAdjacency
    edges: EdgeList
    features: dict

    @classmethod
    def from_kg(cls, kg: MultiModalKG) -> "GraphInputs":
        feats = {"r": kg.rel_features, "a": kg.attr_features, "v": kg.visual_features}
        return cls(kg, build_adjacency(kg), EdgeList.from_kg(kg),
                   {m: T.constant(x) for m, x in feats.items()})

    @property
    def n(self):
        return self.kg.entity_count


class ModelParams:
    """Named parameter tensors, in a fixed order."""

    def __init__(self, tensors: dict, heads: int, layers: int):
        self.tensors = dict(tensors)
        self.heads = heads
        self.layers = layers

    def __getitem__(self, key):
        return self.tensors[key]

    def items(self):
        return self.tensors.items()

    def values(self):
        return self.tensors.values()

    @property
    def fusion(self) -> FusionParams:
        return FusionParams.from_named(self.tensors, self.heads)

    def copy(self) -> "ModelParams":
        return ModelParams({k: T.parameter(v.values.copy(), name=k) for k, v in self.items()},
                           self.heads, self.layers)

    def same_as(self, other: "ModelParams") -> bool:
        if list(self.tensors) != list(other.tensors):
            return False
        return all(a.values.tobytes() == other[k].values.tobytes() for k, a in self.items())

    @classmethod
    def init(cls, g1: GraphInputs, g2: GraphInputs, cfg: TrainConfig, rng: np.random.Generator):
        d = cfg.hidden_dim
        b = 1.0 / np.sqrt(d)
        rel_count = max(g1.kg.relation_count, g2.kg.relation_count, 1)
        rel = rng.standard_normal((rel_count, d))
        rel /= np.linalg.norm(rel, axis=1, keepdims=True)
        out = {
            "struct.x_g1": rng.uniform(-b, b, size=(g1.n, d)),
            "struct.x_g2": rng.uniform(-b, b, size=(g2.n, d)),
            "struct.rel": rel,
            "struct.omega": rng.uniform(-b, b, size=(1, 2 * d)),
        }
        bo = np.sqrt(6.0 / (cfg.rrgat_layers * d + d))
        out["struct.w_out"] = rng.uniform(-bo, bo, size=(cfg.rrgat_layers * d, d))
        for m in FEATURE_MODALITIES:
            d_m = g1.features[m].cols
            if g2.features[m].cols != d_m:
                raise ValueError(f"modality {m!r}: graphs disagree on feature width")
            bm = 1.0 / np.sqrt(max(d_m, 1))
            out[f"proj.{m}.W"] = rng.uniform(-bm, bm, size=(d, d_m))
            out[f"proj.{m}.b"] = rng.uniform(-bm, bm, size=(1, d))
        tensors = {k: T.parameter(v, name=k) for k, v in out.items()}
        for k, v in init_fusion(d, cfg.fusion, rng).named().items():
            v.name = k
            tensors[k] = v
        return cls(tensors, cfg.fusion.heads, cfg.rrgat_layers)

    def save(self, path):
        T.save_params(path, self.tensors)

    @classmethod
    def load(cls, path, cfg: TrainConfig):
        return cls(T.load_params(path), cfg.fusion.heads, cfg.rrgat_layers)


@dataclass
class GraphEncoding:
    structure: T.Tensor   # RRGAT output, (n, d)
    hidden: dict          # post-transformer states per modality
    joint: T.Tensor       # (n, 4d) unit rows


def encode_graph_tokens(params: ModelParams, g: GraphInputs, side: int, cfg: TrainConfig,
                        training: bool, rng, variant: str):
    h_g = rrgat_encode(params[f"struct.x_g{side}"], params["struct.rel"], params["struct.omega"],
                       params["struct.w_out"], g.edges, params.layers)
    mods = {"g": h_g}
    for m in FEATURE_MODALITIES:
        h = project_modality(params[f"proj.{m}.W"], params[f"proj.{m}.b"], g.features[m])
        if variant != "no_mgd":
            h = diffuse(h, g.adj, cfg.diffusion_for(m), training, rng)
        if _DROPPED.get(variant) == m:
            h = T.constant(np.zeros(h.shape))
        mods[m] = h
    return h_g, interleave([mods[m] for m in MODALITIES])


def forward(params: ModelParams, g1: GraphInputs, g2: GraphInputs, cfg: TrainConfig,
            training: bool = False, rng=None, variant: str = "full"):
    """Encode both graphs through one shared fusion pass.

    Returns (encoding of graph 1, encoding of graph 2, FusionOutput over both).
    """
    check_variant(variant)
    fp = params.fusion
    h_g1, tok1 = encode_graph_tokens(params, g1, 1, cfg, training, rng, variant)
    h_g2, tok2 = encode_graph_tokens(params, g2, 2, cfg, training, rng, variant)
    n1, n2 = g1.n, g2.n
    tokens = T.concat_rows([tok1, tok2])
    tokens = tokens + T.gather_rows(fp.type_emb, np.tile(np.arange(N_MOD), n1 + n2))
    hidden, probs = transformer_block(tokens, fp)
    dropped = (_DROPPED[variant],) if variant in _DROPPED else ()
    weights = modality_weights(probs, cfg.fusion.weight_mode, cfg.fusion.weight_scope, dropped)

    encodings = []
    for offset, n, h_g in ((0, n1, h_g1), (n1, n2, h_g2)):
        rows = (offset + np.arange(n)) * N_MOD
        hid = {m: T.gather_rows(hidden, rows + i) for i, m in enumerate(MODALITIES)}
        w = weights if weights.rows == 1 else T.gather_rows(weights, offset + np.arange(n))
        encodings.append(GraphEncoding(h_g, hid, fuse_joint(h_g, hid, w)))

    attn = list(head_matrices(probs, fp.heads))
    fused = FusionOutput(
        hidden={m: T.concat_rows([encodings[0].hidden[m], encodings[1].hidden[m]]) for m in MODALITIES},
        weights=weights,
        joint=T.concat_rows([encodings[0].joint, encodings[1].joint]),
        attn=attn,
    )
    return encodings[0], encodings[1], fused


def batch_loss(enc1: GraphEncoding, enc2: GraphEncoding, pairs, cfg: TrainConfig,
               variant: str = "full"):
    """(total, infonce, gram) for a batch of (source, target) training pairs."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    src, tgt = pairs[:, 0], pairs[:, 1]
    nce = infonce_loss(T.gather_rows(enc1.joint, src), T.gather_rows(enc2.joint, tgt), cfg.loss)
    lam = 0.0 if variant == "no_gram" else cfg.loss.lam
    if lam == 0.0:
        return nce, nce, None
    batch = GramBatch.build(T.gather_rows(enc1.hidden["g"], src), enc2.hidden["v"],
                            enc2.hidden["a"], enc2.hidden["r"], tgt, cfg.loss.K)
    gram = gram_loss(batch, cfg.loss)
    return total_loss(nce, gram, lam), nce, gram
