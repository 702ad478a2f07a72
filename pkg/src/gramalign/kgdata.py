"""Multi-modal knowledge graphs: containers, directory ingestion, synthetic pairs."""
from __future__ import annotations

import json
import os
import struct
from collections import Counter
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp


class DatasetError(ValueError):
    """Raised for malformed or inconsistent dataset directories."""


def _frozen(arr, dtype):
    out = np.array(arr, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class MultiModalKG:
    entity_count: int
    relation_count: int
    triples: np.ndarray            # (T, 3) int64: head, relation, tail
    attr_features: np.ndarray      # (n, d_a) 0/1
    rel_features: np.ndarray       # (n, d_r) 0/1
    visual_features: np.ndarray    # (n, d_v)
    visual_present: np.ndarray     # (n,) bool
    uris: tuple = ()
    ids: np.ndarray | None = None  # raw ids as found on disk
    attr_tokens: tuple = ()        # per-entity token lists, kept for saving

    def __post_init__(self):
        n = self.entity_count
        triples = np.asarray(self.triples, dtype=np.int64).reshape(-1, 3)
        if n < 0 or self.relation_count < 0:
            raise DatasetError("counts must be non-negative")
        if len(triples):
            if triples[:, [0, 2]].min() < 0 or triples[:, [0, 2]].max() >= n:
                raise DatasetError("triple references an entity outside the graph")
            if triples[:, 1].min() < 0 or triples[:, 1].max() >= self.relation_count:
                raise DatasetError("triple references an unknown relation")
        for name in ("attr_features", "rel_features"):
            mat = np.asarray(getattr(self, name), dtype=np.float64)
            if mat.ndim != 2 or mat.shape[0] != n:
                raise DatasetError(f"{name} must have {n} rows")
            if not np.isin(mat, (0.0, 1.0)).all():
                raise DatasetError(f"{name} must be 0/1")
            object.__setattr__(self, name, _frozen(mat, np.float64))
        vis = np.asarray(self.visual_features, dtype=np.float64)
        if vis.ndim != 2 or vis.shape[0] != n:
            raise DatasetError(f"visual_features must have {n} rows")
        present = np.asarray(self.visual_present, dtype=bool).reshape(-1)
        if present.shape != (n,):
            raise DatasetError("visual_present needs one flag per entity")
        ids = np.arange(n) if self.ids is None else self.ids
        object.__setattr__(self, "triples", _frozen(triples, np.int64))
        object.__setattr__(self, "visual_features", _frozen(vis, np.float64))
        object.__setattr__(self, "visual_present", _frozen(present, bool))
        object.__setattr__(self, "ids", _frozen(ids, np.int64))
        object.__setattr__(self, "uris", tuple(self.uris) or tuple(f"e{i}" for i in ids))
        object.__setattr__(self, "attr_tokens", tuple(tuple(t) for t in self.attr_tokens))

    def same_as(self, other: "MultiModalKG") -> bool:
        """Field-by-field bit equality."""
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            if isinstance(a, np.ndarray):
                if a.shape != b.shape or a.dtype != b.dtype or a.tobytes() != b.tobytes():
                    return False
            elif a != b:
                return False
        return True


@dataclass(frozen=True)
class SeedAlignments:
    pairs: np.ndarray   # (P, 2) int64
    train: np.ndarray   # bool mask over pairs

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        train = np.asarray(self.train, dtype=bool).reshape(-1)
        if train.shape[0] != pairs.shape[0]:
            raise DatasetError("split tags must match pairs")
        for side in (0, 1):
            if len(np.unique(pairs[:, side])) != len(pairs):
                raise DatasetError(f"entity repeated on side {side} of the alignment")
        object.__setattr__(self, "pairs", _frozen(pairs, np.int64))
        object.__setattr__(self, "train", _frozen(train, bool))

    @property
    def train_pairs(self):
        return self.pairs[self.train]

    @property
    def test_pairs(self):
        return self.pairs[~self.train]


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    dimension: int
    entries: sp.csr_matrix

    def to_dense(self):
        return self.entries.toarray()


@dataclass
class IngestOptions:
    attr_vocab_cap: int = 1000
    rel_vocab_cap: int = 1000
    visual_dim: int = 4096     # used only when no visual file exists
    visual_seed: int = 0
    train_ratio: float = 0.3
    split_seed: int = 0


# --------------------------------------------------------------------------
# features and adjacency
# --------------------------------------------------------------------------

def build_adjacency(kg: MultiModalKG) -> NormalizedAdjacency:
    """Symmetric D^-1/2 (A + I) D^-1/2 with direction and multiplicity dropped."""
    n = kg.entity_count
    t = kg.triples
    heads, tails = t[:, 0], t[:, 2]
    off = heads != tails
    rows = np.concatenate([heads[off], tails[off], np.arange(n)])
    cols = np.concatenate([tails[off], heads[off], np.arange(n)])
    a = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    a.data[:] = 1.0  # collapse duplicates summed by the constructor
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)
    d = sp.diags(inv_sqrt)
    norm = (d @ a @ d).tocsr()
    norm.sort_indices()
    return NormalizedAdjacency(n, norm)


def build_bow_features(raw_attributes, vocabulary_cap: int):
    """Binary bag-of-words over the `vocabulary_cap` most frequent tokens.

    Frequency is counted over all token occurrences; ties go to the
    lexicographically smaller token.  Returns (matrix, vocabulary).
    """
    if vocabulary_cap < 1:
        raise ValueError("vocabulary_cap must be at least 1")
    counts = Counter(tok for toks in raw_attributes for tok in toks)
    vocab = sorted(counts, key=lambda tok: (-counts[tok], tok))[:vocabulary_cap]
    col = {tok: j for j, tok in enumerate(vocab)}
    mat = np.zeros((len(raw_attributes), len(vocab)))
    for i, toks in enumerate(raw_attributes):
        for tok in toks:
            j = col.get(tok)
            if j is not None:
                mat[i, j] = 1.0
    return mat, vocab


def relation_tokens(triples, entity_count):
    """Per-entity list of relation ids it takes part in (either end)."""
    toks = [[] for _ in range(entity_count)]
    for h, r, t in np.asarray(triples).reshape(-1, 3):
        toks[h].append(str(r))
        if t != h:
            toks[t].append(str(r))
    return toks


def random_visual(n, dim, rng):
    bound = 1.0 / np.sqrt(dim)
    return rng.uniform(-bound, bound, size=(n, dim))


def read_visual_file(path):
    """Returns {entity id: vector} and the dimension of a visual_*.bin file."""
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise DatasetError(f"{path}: truncated header")
    count, dim = struct.unpack_from("<II", data, 0)
    rec = 4 + 4 * dim
    if len(data) != 8 + count * rec:
        raise DatasetError(f"{path}: size does not match {count} records of dim {dim}")
    out = {}
    for k in range(count):
        off = 8 + k * rec
        (eid,) = struct.unpack_from("<I", data, off)
        out[eid] = np.frombuffer(data, dtype="<f4", count=dim, offset=off + 4).astype(np.float64)
    return out, dim


def write_visual_file(path, vectors: dict, dim: int):
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", len(vectors), dim))
        for eid in sorted(vectors):
            vec = np.asarray(vectors[eid], dtype="<f4")
            if vec.shape != (dim,):
                raise DatasetError(f"vector for {eid} has shape {vec.shape}, expected ({dim},)")
            fh.write(struct.pack("<I", int(eid)))
            fh.write(vec.tobytes())


def load_visual_features(kg: MultiModalKG, feature_file=None, rng_seed: int = 0,
                         dim: int | None = None) -> MultiModalKG:
    """Attach image vectors; entities lacking one get a seeded uniform draw."""
    vectors, file_dim = ({}, None) if feature_file is None else read_visual_file(feature_file)
    if dim is not None and file_dim is not None and dim != file_dim:
        raise DatasetError(f"visual dimension {file_dim} in file, expected {dim}")
    d = file_dim or dim or kg.visual_features.shape[1]
    if d <= 0:
        raise DatasetError("visual dimension must be positive")
    rng = np.random.default_rng(rng_seed)
    feats = random_visual(kg.entity_count, d, rng)
    present = np.zeros(kg.entity_count, dtype=bool)
    row_of = {int(e): i for i, e in enumerate(kg.ids)}
    for eid, vec in vectors.items():
        i = row_of.get(eid)
        if i is None:
            continue
        feats[i] = vec
        present[i] = True
    return replace(kg, visual_features=feats, visual_present=present)


def split_seeds(pairs, train_ratio: float, rng_seed: int) -> SeedAlignments:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    if not 0.0 < train_ratio < 1.0:
        raise ValueError("train_ratio must lie strictly between 0 and 1")
    if len(pairs) < 2:
        raise ValueError("need at least two pairs to split")
    n_train = int(np.floor(train_ratio * len(pairs) + 0.5))
    n_train = min(max(n_train, 1), len(pairs) - 1)
    order = np.random.default_rng(rng_seed).permutation(len(pairs))
    train = np.zeros(len(pairs), dtype=bool)
    train[order[:n_train]] = True
    return SeedAlignments(pairs, train)


# --------------------------------------------------------------------------
# dataset directories
# --------------------------------------------------------------------------

def _read_rows(path, width=None):
    if not path.exists():
        raise DatasetError(f"missing file: {path}")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if width is not None and len(parts) != width:
                raise DatasetError(f"{path}:{lineno}: expected {width} tab-separated fields")
            rows.append(parts)
    return rows


def _int(value, path):
    try:
        return int(value)
    except ValueError as exc:
        raise DatasetError(f"{path}: non-integer id {value!r}") from exc


def load_dataset(root_path, config: IngestOptions | None = None):
    """Read a dataset directory into two graphs plus a seed split."""
    cfg = config or IngestOptions()
    root = Path(root_path)
    ents, index = [], []
    for side in (1, 2):
        rows = _read_rows(root / f"ent_ids_{side}", 2)
        ids = [_int(r[0], root / f"ent_ids_{side}") for r in rows]
        if len(set(ids)) != len(ids):
            raise DatasetError(f"ent_ids_{side}: duplicate entity id")
        ents.append((np.array(ids, dtype=np.int64), tuple(r[1] for r in rows)))
        index.append({e: i for i, e in enumerate(ids)})

    raw_triples = []
    for side in (1, 2):
        path = root / f"triples_{side}"
        raw_triples.append([tuple(_int(v, path) for v in r) for r in _read_rows(path, 3)])
    rel_ids = sorted({r for trip in raw_triples for _, r, _ in trip})
    rel_index = {r: i for i, r in enumerate(rel_ids)}
    triples = []
    for side, trip in enumerate(raw_triples):
        idx = index[side]
        out = []
        for h, r, t in trip:
            if h not in idx or t not in idx:
                raise DatasetError(f"triples_{side + 1}: dangling entity id in ({h}, {r}, {t})")
            out.append((idx[h], rel_index[r], idx[t]))
        triples.append(np.array(out, dtype=np.int64).reshape(-1, 3))

    attr_tokens = []
    for side in (1, 2):
        path = root / f"attrs_{side}"
        uri_row = {u: i for i, u in enumerate(ents[side - 1][1])}
        toks = [[] for _ in uri_row]
        if path.exists():
            for parts in _read_rows(path):
                if parts[0] not in uri_row:
                    raise DatasetError(f"{path}: unknown entity uri {parts[0]!r}")
                toks[uri_row[parts[0]]].extend(tok for p in parts[1:] for tok in p.split())
        attr_tokens.append(toks)

    pairs = []
    path = root / "ill_ent_ids"
    for r in _read_rows(path, 2):
        a, b = _int(r[0], path), _int(r[1], path)
        if a not in index[0] or b not in index[1]:
            raise DatasetError(f"ill_ent_ids: dangling entity id in ({a}, {b})")
        pairs.append((index[0][a], index[1][b]))
    pairs = np.array(pairs, dtype=np.int64).reshape(-1, 2)
    for side in (0, 1):
        if len(np.unique(pairs[:, side])) != len(pairs):
            raise DatasetError(f"ill_ent_ids: duplicate alignment on side {side + 1}")

    n1, n2 = len(ents[0][0]), len(ents[1][0])
    attr_all, _ = build_bow_features(attr_tokens[0] + attr_tokens[1], cfg.attr_vocab_cap)
    rel_toks = relation_tokens(triples[0], n1) + relation_tokens(triples[1], n2)
    rel_all, _ = build_bow_features(rel_toks, cfg.rel_vocab_cap)

    visual_files = [root / f"visual_{s}.bin" for s in (1, 2)]
    dims = {read_visual_file(f)[1] for f in visual_files if f.exists()}
    if len(dims) > 1:
        raise DatasetError(f"visual files disagree on dimension: {sorted(dims)}")
    vis_dim = dims.pop() if dims else cfg.visual_dim

    graphs = []
    for side, (n, lo) in enumerate(((n1, 0), (n2, n1))):
        kg = MultiModalKG(
            entity_count=n,
            relation_count=len(rel_ids),
            triples=triples[side],
            attr_features=attr_all[lo:lo + n],
            rel_features=rel_all[lo:lo + n],
            visual_features=np.zeros((n, vis_dim)),
            visual_present=np.zeros(n, dtype=bool),
            uris=ents[side][1],
            ids=ents[side][0],
            attr_tokens=attr_tokens[side],
        )
        vf = visual_files[side]
        graphs.append(load_visual_features(kg, vf if vf.exists() else None,
                                           cfg.visual_seed + side, dim=vis_dim))
    if len(pairs) < 2:
        # nothing to split; keep the lone pair (if any) for training
        seeds = SeedAlignments(pairs, np.ones(len(pairs), dtype=bool))
    else:
        seeds = split_seeds(pairs, cfg.train_ratio, cfg.split_seed)
    return graphs[0], graphs[1], seeds


def save_dataset(root_path, kg1: MultiModalKG, kg2: MultiModalKG, seeds: SeedAlignments):
    """Write the directory layout that :func:`load_dataset` reads.

    Relation ids are written in their dense form; visual vectors are stored
    as float32 for the entities flagged present.
    """
    root = Path(root_path)
    root.mkdir(parents=True, exist_ok=True)
    for side, kg in ((1, kg1), (2, kg2)):
        with open(root / f"ent_ids_{side}", "w", encoding="utf-8") as fh:
            for eid, uri in zip(kg.ids, kg.uris):
                fh.write(f"{eid}\t{uri}\n")
        with open(root / f"triples_{side}", "w", encoding="utf-8") as fh:
            for h, r, t in kg.triples:
                fh.write(f"{kg.ids[h]}\t{r}\t{kg.ids[t]}\n")
        with open(root / f"attrs_{side}", "w", encoding="utf-8") as fh:
            for uri, toks in zip(kg.uris, kg.attr_tokens):
                if toks:
                    fh.write(uri + "\t" + " ".join(toks) + "\n")
        vecs = {int(kg.ids[i]): kg.visual_features[i] for i in np.flatnonzero(kg.visual_present)}
        vf = root / f"visual_{side}.bin"
        if vecs:
            write_visual_file(vf, vecs, kg.visual_features.shape[1])
        elif vf.exists():
            os.remove(vf)
    with open(root / "ill_ent_ids", "w", encoding="utf-8") as fh:
        for a, b in seeds.pairs:
            fh.write(f"{kg1.ids[a]}\t{kg2.ids[b]}\n")


# --------------------------------------------------------------------------
# synthetic benchmark
# --------------------------------------------------------------------------

@dataclass
class SyntheticSpec:
    n: int = 200
    relations: int = 12
    avg_degree: float = 3.0          # triples per entity
    attr_vocab: int = 80
    attrs_per_entity: int = 6
    visual_dim: int = 64
    edge_drop: float = 0.1
    feature_noise: float = 0.05
    duplicate_fraction: float = 0.2
    missing_visual: float = 0.0
    train_ratio: float = 0.3

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**raw)


def generate_synthetic(spec: SyntheticSpec | None = None, rng_seed: int = 0):
    """A graph, a perturbed relabelled copy of it, and the full alignment.

    Entity i of the first graph corresponds to entity perm[i] of the second.
    Duplicate entities copy another entity's image vector and attribute tokens
    exactly; only the cross-graph noise separates them, so structure has to
    break the tie.
    """
    spec = spec or SyntheticSpec()
    n = spec.n
    if n < 4:
        raise ValueError("synthetic graphs need at least 4 entities")
    rng = np.random.default_rng(rng_seed)

    n_triples = int(round(spec.avg_degree * n))
    heads = rng.integers(0, n, size=n_triples)
    tails = (heads + rng.integers(1, n, size=n_triples)) % n
    rels = rng.integers(0, spec.relations, size=n_triples)
    triples = np.unique(np.stack([heads, rels, tails], axis=1), axis=0)
    # dense relation ids, as the loader assigns them
    _, triples[:, 1] = np.unique(triples[:, 1], return_inverse=True)
    n_rel = int(triples[:, 1].max()) + 1

    # skewed token popularity so the vocabulary cap matters
    pop = 1.0 / np.arange(1, spec.attr_vocab + 1)
    pop /= pop.sum()
    tokens = []
    for _ in range(n):
        picks = rng.choice(spec.attr_vocab, size=min(spec.attrs_per_entity, spec.attr_vocab),
                           replace=False, p=pop)
        tokens.append(sorted(f"a{t}" for t in picks))

    visual = rng.standard_normal((n, spec.visual_dim))
    n_dup = int(np.ceil(spec.duplicate_fraction * n))
    if n_dup:
        order = rng.permutation(n)
        copies, sources = order[:n_dup], order[n_dup:]
        originals = rng.choice(sources, size=n_dup, replace=True)
        for c, o in zip(copies, originals):
            visual[c] = visual[o]
            tokens[c] = list(tokens[o])

    present = rng.random(n) >= spec.missing_visual

    perm = rng.permutation(n)             # entity i -> perm[i]
    inv = np.argsort(perm)
    keep = rng.random(len(triples)) >= spec.edge_drop
    t2 = triples[keep].copy()
    t2[:, 0] = perm[t2[:, 0]]
    t2[:, 2] = perm[t2[:, 2]]
    t2 = t2[np.lexsort((t2[:, 2], t2[:, 1], t2[:, 0]))]
    visual2 = visual[inv] + spec.feature_noise * rng.standard_normal((n, spec.visual_dim))
    tokens2 = [tokens[i] for i in inv]
    present2 = present[inv]

    opts = IngestOptions()
    rel_toks = relation_tokens(triples, n) + relation_tokens(t2, n)
    rel_all, _ = build_bow_features(rel_toks, opts.rel_vocab_cap)
    attr_all, _ = build_bow_features(tokens + tokens2, opts.attr_vocab_cap)

    # stored vectors are float32 on disk and missing ones are redrawn on load
    # with the default visual seed, so do the same here
    def finish(side, vis, flags, feats_a, feats_r, trip, ids, toks):
        kg = MultiModalKG(n, n_rel, trip, feats_a, feats_r, np.zeros((n, spec.visual_dim)),
                          np.zeros(n, dtype=bool), ids=ids,
                          uris=[f"g{side + 1}/e{i}" for i in range(n)], attr_tokens=toks)
        vecs = {int(ids[i]): vis[i].astype(np.float32).astype(np.float64)
                for i in np.flatnonzero(flags)}
        feats = random_visual(n, spec.visual_dim, np.random.default_rng(opts.visual_seed + side))
        for i in np.flatnonzero(flags):
            feats[i] = vecs[int(ids[i])]
        return replace(kg, visual_features=feats, visual_present=flags.copy())

    kg1 = finish(0, visual, present, attr_all[:n], rel_all[:n], triples, np.arange(n), tokens)
    kg2 = finish(1, visual2, present2, attr_all[n:], rel_all[n:], t2, np.arange(n, 2 * n), tokens2)
    pairs = np.stack([np.arange(n), perm], axis=1)
    seeds = split_seeds(pairs, spec.train_ratio, rng_seed)
    return kg1, kg2, seeds
