"""Per-modality entity encoders.

Structure goes through a relational-reflection graph attention network:
each relation owns a unit vector r and messages are reflected by
M_r = I - 2 r r^T before attention-weighted aggregation.  Relation,
attribute and image features get one affine projection each.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .kgdata import MultiModalKG
from .tensor import Tensor

ATTENTION_SLOPE = 0.2


def reflection_matrix(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64).reshape(-1)
    if abs(np.linalg.norm(r) - 1.0) > 1e-8:
        raise ValueError("reflection needs a unit vector")
    return np.eye(len(r)) - 2.0 * np.outer(r, r)


@dataclass(frozen=True)
class EdgeList:
    """Directed message edges target <- source under a relation, self-loops last."""
    target: np.ndarray
    source: np.ndarray
    relation: np.ndarray   # relation_count marks the identity (self) reflection
    entity_count: int

    @classmethod
    def from_kg(cls, kg: MultiModalKG) -> "EdgeList":
        t = kg.triples
        h, r, tl = t[:, 0], t[:, 1], t[:, 2]
        off = h != tl
        tgt = np.concatenate([h[off], tl[off]])
        src = np.concatenate([tl[off], h[off]])
        rel = np.concatenate([r[off], r[off]])
        if len(tgt):
            uniq = np.unique(np.stack([tgt, src, rel], axis=1), axis=0)
            tgt, src, rel = uniq[:, 0], uniq[:, 1], uniq[:, 2]
        n = kg.entity_count
        loops = np.arange(n)
        return cls(np.concatenate([tgt, loops]), np.concatenate([src, loops]),
                   np.concatenate([rel, np.full(n, kg.relation_count)]), n)


def reflect(h_src: Tensor, r_rows: Tensor) -> Tensor:
    """Row-wise M_r h = h - 2 (r . h) r without forming M_r."""
    proj = T.row_dot(h_src, r_rows)
    return h_src - (proj * r_rows) * 2.0


def rrgat_layer(h: Tensor, rel_vecs: Tensor, omega: Tensor, edges: EdgeList,
                return_attention=False):
    """One round of reflected, attention-weighted neighbour aggregation with tanh.

    `omega` is a (1, 2d) attention vector scoring [h_target, M_r h_source].
    """
    d = h.cols
    table = T.concat_rows([rel_vecs, T.constant(np.zeros((1, d)))])
    msgs = reflect(T.gather_rows(h, edges.source), T.gather_rows(table, edges.relation))
    w = T.transpose(omega)
    w_tgt = T.gather_rows(w, np.arange(d))
    w_msg = T.gather_rows(w, np.arange(d, 2 * d))
    score = T.gather_rows(h @ w_tgt, edges.target) + msgs @ w_msg
    att = T.segment_softmax(T.leaky_relu(score, ATTENTION_SLOPE), edges.target, edges.entity_count)
    out = T.tanh(T.segment_sum(msgs * att, edges.target, edges.entity_count))
    return (out, att) if return_attention else out


def rrgat_encode(x_g: Tensor, rel_vecs: Tensor, omega: Tensor, w_out: Tensor,
                 edges: EdgeList, layers: int = 2) -> Tensor:
    """Stack `layers` reflection-attention rounds, concatenate them, project to d."""
    h, outs = x_g, []
    for _ in range(layers):
        h = rrgat_layer(h, rel_vecs, omega, edges)
        outs.append(h)
    return T.concat_cols(outs) @ w_out


def project_modality(weight: Tensor, bias: Tensor, features) -> Tensor:
    """h = W x + b for every entity row; `weight` is (d, d_m)."""
    x = features if isinstance(features, Tensor) else T.constant(features)
    if x.cols != weight.cols:
        raise ValueError(f"features have {x.cols} columns, projection expects {weight.cols}")
    return x @ T.transpose(weight) + bias


def renormalize_relations(rel_vecs: Tensor) -> None:
    """Project relation vectors back onto the unit sphere in place."""
    v = rel_vecs.values
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    v /= np.where(norms > 0, norms, 1.0)
