"""Training objective: parallelotope-volume contrastive loss plus InfoNCE."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

# Gram entries (a, b) with a <= b, and where each lands in the row-major 4x4
_UPPER = [(a, b) for a in range(4) for b in range(a, 4)]


@dataclass
class LossConfig:
    tau: float = 0.1          # volume temperature
    T: float = 0.1            # InfoNCE temperature
    lam: float = 0.1          # weight on the volume loss
    K: int = 16
    epsilon: float = 1e-8
    normalize: bool = True    # unit-length parallelotope edges
    include_positive: bool = True

    def __post_init__(self):
        if self.tau <= 0 or self.T <= 0:
            raise ValueError("temperatures must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def similarity_matrix(src, tgt) -> np.ndarray:
    """Cosine similarity between rows; zero rows score 0 against everything."""
    a = np.asarray(src.values if isinstance(src, Tensor) else src, dtype=np.float64)
    b = np.asarray(tgt.values if isinstance(tgt, Tensor) else tgt, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise ValueError("similarity needs matching widths")

    def unit(x):
        norms = np.linalg.norm(x, axis=1, keepdims=True)
        return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)

    return unit(a) @ unit(b).T


def topk_candidates(sim, K: int) -> np.ndarray:
    """Indices of the K largest entries per row, best first, ties to the lower index."""
    sim = np.asarray(sim)
    if K > sim.shape[1]:
        raise ValueError(f"K={K} exceeds {sim.shape[1]} candidates")
    # stable sort on the negated row keeps equal scores in index order
    return np.argsort(-sim, axis=1, kind="stable")[:, :K]


def gram_volume(m: Tensor, epsilon: float) -> Tensor:
    """sqrt(|det(m^T m)| + eps) for a (d, 4) edge matrix."""
    if m.cols != 4:
        raise ValueError("the parallelotope needs exactly 4 edges")
    g = T.transpose(m) @ m
    return T.sqrt(T.add_scalar(T.absolute(T.det4(g)), epsilon))


def gram_volume_rows(cols, epsilon: float) -> Tensor:
    """Volumes for many parallelotopes at once.

    `cols` holds four (B, d) tensors; row b of each is one edge of
    parallelotope b.  Returns (B, 1).
    """
    dots = {}
    for a, b in _UPPER:
        dots[a, b] = T.row_dot(cols[a], cols[b])
    flat = [dots[min(a, b), max(a, b)] for a in range(4) for b in range(4)]
    det = T.det4_rows(T.concat_cols(flat))
    return T.sqrt(T.add_scalar(T.absolute(det), epsilon))


@dataclass
class GramBatch:
    src_struct: Tensor   # (M, d) source structure states
    tgt_visual: Tensor   # (n2, d) target states for all candidates
    tgt_attr: Tensor
    tgt_rel: Tensor
    topk_idx: np.ndarray  # (M, K)
    mask: np.ndarray      # (M, K) 0/1
    target: np.ndarray    # (M,)

    @classmethod
    def build(cls, src_struct, tgt_visual, tgt_attr, tgt_rel, target, K):
        sim = similarity_matrix(src_struct, tgt_visual)
        idx = topk_candidates(sim, K)
        target = np.asarray(target, dtype=np.int64)
        mask = (idx == target[:, None]).astype(np.float64)
        return cls(src_struct, tgt_visual, tgt_attr, tgt_rel, idx, mask, target)


def build_parallelotope(batch: GramBatch, i: int, k: int, normalize: bool = True) -> Tensor:
    """(d, 4) edges [source structure, target image, target attribute, target relation]."""
    c = batch.topk_idx[i, k]
    cols = [T.gather_rows(batch.src_struct, [i]), T.gather_rows(batch.tgt_visual, [c]),
            T.gather_rows(batch.tgt_attr, [c]), T.gather_rows(batch.tgt_rel, [c])]
    if normalize:
        cols = [T.l2_normalize_rows(x) for x in cols]
    return T.transpose(T.concat_rows(cols))


def batch_volumes(batch: GramBatch, config: LossConfig) -> Tensor:
    """(M, K) volumes for every (sample, candidate) pair."""
    M, K = batch.topk_idx.shape
    flat = batch.topk_idx.reshape(-1)
    src = batch.src_struct
    if config.normalize:
        src = T.l2_normalize_rows(src)
    cols = [T.gather_rows(src, np.repeat(np.arange(M), K))]
    for t in (batch.tgt_visual, batch.tgt_attr, batch.tgt_rel):
        x = T.gather_rows(t, flat)
        cols.append(T.l2_normalize_rows(x) if config.normalize else x)
    return T.reshape(gram_volume_rows(cols, config.epsilon), M, K)


def gram_loss(batch: GramBatch, config: LossConfig) -> Tensor:
    """Softmax over -volume/tau across the K candidates, scored at the true target.

    Samples whose target is not among their candidates are left out of the mean.
    """
    hit = batch.mask.sum(axis=1) > 0
    n_hit = int(hit.sum())
    if n_hit == 0:
        return T.constant(np.zeros((1, 1)))
    vol = batch_volumes(batch, config)
    logits = vol * (-1.0 / config.tau)
    lse = T.logsumexp_rows(logits)
    picked = T.sum(logits * T.constant(batch.mask), axis=1)
    per_sample = (lse - picked) * T.constant(hit.astype(np.float64)[:, None])
    return T.sum(per_sample) * (1.0 / n_hit)


def _nce_direction(sim: Tensor, include_positive: bool) -> Tensor:
    B = sim.rows
    pos = T.sum(sim * T.constant(np.eye(B)), axis=1)
    if include_positive:
        denom = T.logsumexp_rows(sim)
    else:
        denom = T.logsumexp_rows(sim + T.constant(np.eye(B) * -1e300))
    return T.mean(denom - pos)


def infonce_loss(src: Tensor, tgt: Tensor, config: LossConfig) -> Tensor:
    """Symmetric in-batch InfoNCE on cosine similarity.

    Row i of `src` and row i of `tgt` are an aligned pair; every other target
    in the batch is a negative.
    """
    if src.rows < 2 or src.shape != tgt.shape:
        raise ValueError("InfoNCE needs at least two aligned pairs of equal width")
    s = T.l2_normalize_rows(src)
    t = T.l2_normalize_rows(tgt)
    sim = (s @ T.transpose(t)) * (1.0 / config.T)
    fwd = _nce_direction(sim, config.include_positive)
    bwd = _nce_direction(T.transpose(sim), config.include_positive)
    return (fwd + bwd) * 0.5


def total_loss(infonce, gram, lam: float):
    return infonce + gram * lam
