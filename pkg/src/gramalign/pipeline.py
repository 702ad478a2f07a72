"""Training, ranking evaluation, ablations and low-resource sweeps."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .encoders import renormalize_relations
from .kgdata import MultiModalKG, SeedAlignments, split_seeds
from .objective import similarity_matrix
from .model import GraphInputs, ModelParams, batch_loss, check_variant, forward

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """A loss term went non-finite."""


@dataclass
class AlignmentData:
    g1: GraphInputs
    g2: GraphInputs
    seeds: SeedAlignments

    @classmethod
    def from_graphs(cls, kg1: MultiModalKG, kg2: MultiModalKG, seeds: SeedAlignments):
        return cls(GraphInputs.from_kg(kg1), GraphInputs.from_kg(kg2), seeds)

    def resplit(self, ratio: float, seed: int) -> "AlignmentData":
        return replace(self, seeds=split_seeds(self.seeds.pairs, ratio, seed))


class Adam:
    def __init__(self, params, lr=5e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.values) for p in self.params]
        self.v = [np.zeros_like(p.values) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.values -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        T.zero_grads(self.params)


@dataclass
class TrainResult:
    params: ModelParams
    history: list = field(default_factory=list)       # total loss per epoch
    infonce_history: list = field(default_factory=list)
    gram_history: list = field(default_factory=list)  # None entries when the term is off


def _rngs(seed):
    init, drop, shuffle = np.random.SeedSequence(seed).spawn(3)
    return (np.random.default_rng(init), np.random.default_rng(drop),
            np.random.default_rng(shuffle))


def train(data: AlignmentData, cfg: TrainConfig, variant: str = "full",
          params: ModelParams | None = None) -> TrainResult:
    """Adam on InfoNCE + lambda * volume loss; deterministic for a fixed seed."""
    check_variant(variant)
    pairs = data.seeds.train_pairs
    if len(pairs) == 0:
        raise ValueError("no training pairs")
    init_rng, drop_rng, shuffle_rng = _rngs(cfg.seed)
    if params is None:
        params = ModelParams.init(data.g1, data.g2, cfg, init_rng)
    opt = Adam(params.values(), lr=cfg.learning_rate)
    result = TrainResult(params)
    bs = max(cfg.batch_size, 2)

    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(pairs))
        batches = [order[i:i + bs] for i in range(0, len(order), bs)]
        if len(batches) > 1 and len(batches[-1]) < 2:
            batches[-2] = np.concatenate([batches[-2], batches.pop()])
        totals, nces, grams = [], [], []
        for b, idx in enumerate(batches):
            opt.zero_grad()
            enc1, enc2, _ = forward(params, data.g1, data.g2, cfg, True, drop_rng, variant)
            loss, nce, gram = batch_loss(enc1, enc2, pairs[idx], cfg, variant)
            for label, term in (("total", loss), ("infonce", nce), ("gram", gram)):
                if term is not None and not math.isfinite(term.item()):
                    raise TrainingDiverged(f"non-finite {label} loss at epoch {epoch}, batch {b}")
            T.backward(loss)
            opt.step()
            renormalize_relations(params["struct.rel"])
            totals.append(loss.item())
            nces.append(nce.item())
            grams.append(None if gram is None else gram.item())
        result.history.append(float(np.mean(totals)))
        result.infonce_history.append(float(np.mean(nces)))
        result.gram_history.append(None if grams[0] is None else float(np.mean(grams)))
        if epoch % 50 == 0:
            log.debug("epoch %d loss %.5f", epoch, result.history[-1])
    opt.zero_grad()
    return result


@dataclass
class RankingReport:
    hits1: float
    hits10: float
    mrr: float
    per_query_rank: list

    @classmethod
    def from_ranks(cls, ranks) -> "RankingReport":
        ranks = np.asarray(ranks, dtype=np.int64)
        if len(ranks) == 0 or ranks.min() < 1:
            raise ValueError("ranks must be a non-empty list of integers >= 1")
        return cls(hits1=float(np.mean(ranks <= 1)), hits10=float(np.mean(ranks <= 10)),
                   mrr=float(np.mean(1.0 / ranks)), per_query_rank=[int(r) for r in ranks])

    def to_dict(self):
        return {"hits1": self.hits1, "hits10": self.hits10, "mrr": self.mrr,
                "ranks": list(self.per_query_rank)}


def rank_targets(src_emb, tgt_emb, pairs) -> np.ndarray:
    """Pessimistic rank of each true target among all target rows by cosine."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    sim = similarity_matrix(src_emb[pairs[:, 0]], tgt_emb)
    true = sim[np.arange(len(pairs)), pairs[:, 1]][:, None]
    return (sim >= true).sum(axis=1)


def embed(params: ModelParams, data: AlignmentData, cfg: TrainConfig, variant="full"):
    """Joint embeddings of both graphs in evaluation mode."""
    with T.no_grad():
        enc1, enc2, _ = forward(params, data.g1, data.g2, cfg, False, None, variant)
    return enc1.joint.values, enc2.joint.values


def evaluate(params: ModelParams, data: AlignmentData, cfg: TrainConfig,
             variant: str = "full", pairs=None) -> RankingReport:
    pairs = data.seeds.test_pairs if pairs is None else pairs
    if len(pairs) == 0:
        raise ValueError("no test pairs to evaluate")
    e1, e2 = embed(params, data, cfg, variant)
    return RankingReport.from_ranks(rank_targets(e1, e2, pairs))


def ablate(data: AlignmentData, cfg: TrainConfig, variant: str = "full"):
    """Train and evaluate one variant under the same budget as the full model."""
    check_variant(variant)
    result = train(data, cfg, variant)
    return evaluate(result.params, data, cfg, variant), result


def seed_sweep(data: AlignmentData, cfg: TrainConfig, ratios) -> list:
    """Retrain from scratch at each seed ratio; reports follow `ratios` order."""
    reports = []
    for ratio in ratios:
        if not 0.0 < ratio < 1.0:
            raise ValueError(f"seed ratio {ratio} outside (0, 1)")
        sub = data.resplit(ratio, cfg.seed)
        result = train(sub, cfg)
        reports.append(evaluate(result.params, sub, cfg))
    return reports
