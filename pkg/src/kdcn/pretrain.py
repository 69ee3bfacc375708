"""Joint pretraining of entity embeddings on the conversation graph.

Two modules are trained together: a stacked graph-convolution encoder that
propagates neighbor information through sigmoid layers, and a translation
scorer that rates a triple (h, r, t) by the L2 norm of h + r - t (lower is
more plausible). The encoder output is the entity table the scorer sees, so
one margin ranking loss drives both. Gradients are hand-derived per layer;
the whole loss is checkable against finite differences.

Encoding runs in one of two modes:
  full    - dense/sparse normalized-adjacency product over the whole graph
            (guarded by the dense size limit);
  sampled - per-entity mean over a bounded sample of neighbors, the scalable
            path. With fanout >= max degree the sample covers every neighbor
            and sampled mode reproduces full mode under mean normalization.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import CapacityError, DimensionError, FormatError, SamplingError, TrainingError
from .graph import DENSE_ADJACENCY_GUARD, Graph, Triple, TripleSet
from .numeric import ParamStore, adam_step, sigmoid
from .rng import RngStream


@dataclass
class PretrainConfig:
    dim: int = 64
    layers: int = 2
    fanout: int = 10
    margin: float = 1.0
    lr: float = 1e-4
    batch_size: int = 512
    epochs: int = 5
    negatives_per_positive: int = 1
    mode: str = "full"  # or "sampled"
    aggregation: str = "sym"  # or "mean"
    self_loops: bool = True

    def __post_init__(self):
        if self.dim < 1 or self.layers < 1 or self.fanout < 1:
            raise ValueError("dim, layers and fanout must all be >= 1")
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.mode not in ("full", "sampled"):
            raise ValueError(f"unknown mode '{self.mode}'")
        if self.aggregation not in ("sym", "mean"):
            raise ValueError(f"unknown aggregation '{self.aggregation}'")


class PretrainParams:
    """View over a ParamStore holding the encoder and scorer parameters."""

    def __init__(self, store: ParamStore, layers: int):
        self.store = store
        self.layers = layers

    @property
    def entity_table(self) -> np.ndarray:
        return self.store.value("entity_table")

    @property
    def relation_table(self) -> np.ndarray:
        return self.store.value("relation_table")

    @property
    def gcn_weights(self) -> list[np.ndarray]:
        return [self.store.value(f"gcn_w{i}") for i in range(self.layers)]


def init_params(n_entities: int, n_relations: int, cfg: PretrainConfig, rng: RngStream) -> PretrainParams:
    """Uniform init in [-6/sqrt(d), 6/sqrt(d)] for all tables and weights."""
    bound = 6.0 / np.sqrt(cfg.dim)
    store = ParamStore()
    store.add("entity_table", rng.uniform(-bound, bound, (n_entities, cfg.dim)))
    store.add("relation_table", rng.uniform(-bound, bound, (n_relations, cfg.dim)))
    for i in range(cfg.layers):
        store.add(f"gcn_w{i}", rng.uniform(-bound, bound, (cfg.dim, cfg.dim)))
    return PretrainParams(store, cfg.layers)


def gcn_layer(x: np.ndarray, a_norm: np.ndarray, w: np.ndarray) -> np.ndarray:
    """One propagation step: sigmoid(a_norm @ x @ w)."""
    n = a_norm.shape[0]
    if a_norm.shape != (n, n):
        raise DimensionError(f"a_norm must be square, got {a_norm.shape}")
    if x.shape[0] != n:
        raise DimensionError(f"x has {x.shape[0]} rows, adjacency has {n}")
    if w.shape != (x.shape[1], x.shape[1]):
        raise DimensionError(f"w shape {w.shape} does not match feature dim {x.shape[1]}")
    return sigmoid(a_norm @ x @ w)


def _sparse_norm_adjacency(g: Graph, self_loops: bool, kind: str):
    """Sparse normalized adjacency and its transpose (CSR)."""
    rows, cols = [], []
    for i, neigh in enumerate(g.adjacency):
        rows.extend([i] * len(neigh))
        cols.extend(neigh)
    if self_loops:
        rows.extend(range(g.n_entities))
        cols.extend(range(g.n_entities))
    n = g.n_entities
    a = sp.csr_matrix(
        (np.ones(len(rows)), (np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64))),
        shape=(n, n),
        dtype=np.float64,
    )
    deg = np.asarray(a.sum(axis=1)).ravel()
    if kind == "sym":
        with np.errstate(divide="ignore"):
            dinv = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
        norm = sp.diags(dinv) @ a @ sp.diags(dinv)
    else:
        with np.errstate(divide="ignore"):
            dinv = np.where(deg > 0, 1.0 / deg, 0.0)
        norm = sp.diags(dinv) @ a
    norm = norm.tocsr()
    return norm, norm.T.tocsr()


def sample_layer_draws(g: Graph, cfg: PretrainConfig, rng: RngStream) -> list[dict]:
    """Draw the neighbor index sets used by one sampled-mode forward pass.

    Per entity the draw covers all neighbors when degree <= fanout, otherwise
    a uniform fanout-sized subset without replacement; the entity itself is
    appended when self-loops are on (isolated entities fall back to just
    themselves). One draw list per layer, entities visited in id order.
    """
    draws = []
    for _ in range(cfg.layers):
        src, owner = [], []
        counts = np.zeros(g.n_entities, dtype=np.int64)
        for i in range(g.n_entities):
            neigh = g.adjacency[i]
            if len(neigh) == 0:
                chosen = [i]
            else:
                if len(neigh) <= cfg.fanout:
                    chosen = list(neigh)
                else:
                    chosen = list(rng.choice(neigh, size=cfg.fanout, replace=False))
                if cfg.self_loops:
                    chosen.append(i)
            src.extend(chosen)
            owner.extend([i] * len(chosen))
            counts[i] = len(chosen)
        draws.append(
            {
                "src": np.array(src, dtype=np.int64),
                "owner": np.array(owner, dtype=np.int64),
                "counts": counts,
            }
        )
    return draws


def _encode_forward(params: PretrainParams, g: Graph, cfg: PretrainConfig, draws=None):
    """Run the encoder; returns (output, cache) for the matching backward."""
    x = params.entity_table
    cache: dict = {"mode": cfg.mode, "inputs": [], "outputs": []}
    if cfg.mode == "full":
        if g.n_entities > DENSE_ADJACENCY_GUARD:
            raise CapacityError(
                f"full mode on {g.n_entities} entities exceeds the guard of "
                f"{DENSE_ADJACENCY_GUARD}; use sampled mode"
            )
        norm, norm_t = _sparse_norm_adjacency(g, cfg.self_loops, cfg.aggregation)
        cache["norm_t"] = norm_t
        for w in params.gcn_weights:
            propagated = norm @ x
            out = sigmoid(propagated @ w)
            cache["inputs"].append(propagated)
            cache["outputs"].append(out)
            x = out
    else:
        if draws is None:
            raise ValueError("sampled mode requires precomputed draws")
        cache["draws"] = draws
        for layer, w in enumerate(params.gcn_weights):
            d = draws[layer]
            agg = np.zeros_like(x)
            np.add.at(agg, d["owner"], x[d["src"]])
            agg /= d["counts"][:, None]
            out = sigmoid(agg @ w)
            cache["inputs"].append(agg)
            cache["outputs"].append(out)
            x = out
    return x, cache


def _encode_backward(params: PretrainParams, cache: dict, d_out: np.ndarray):
    """Backprop through the encoder stack; returns (d_entity_table, [dW...])."""
    weights = params.gcn_weights
    d_ws = [None] * len(weights)
    grad = d_out
    for layer in range(len(weights) - 1, -1, -1):
        out = cache["outputs"][layer]
        pre = grad * out * (1.0 - out)
        d_ws[layer] = cache["inputs"][layer].T @ pre
        d_agg = pre @ weights[layer].T
        if cache["mode"] == "full":
            grad = cache["norm_t"] @ d_agg
        else:
            d = cache["draws"][layer]
            d_agg = d_agg / d["counts"][:, None]
            grad = np.zeros_like(d_agg)
            np.add.at(grad, d["src"], d_agg[d["owner"]])
    return grad, d_ws


def encode_entities(
    params: PretrainParams, g: Graph, cfg: PretrainConfig, rng: RngStream | None = None
) -> np.ndarray:
    """Entity embeddings from the encoder stack, shape n_entities x dim."""
    draws = None
    if cfg.mode == "sampled":
        if rng is None:
            raise ValueError("sampled mode needs an rng stream")
        draws = sample_layer_draws(g, cfg, rng)
    out, _ = _encode_forward(params, g, cfg, draws)
    return out


def transe_score(h: np.ndarray, r: np.ndarray, t: np.ndarray) -> float:
    """L2 norm of h + r - t; lower means a more plausible triple."""
    h, r, t = (np.asarray(v, dtype=np.float64).ravel() for v in (h, r, t))
    if not (h.shape == r.shape == t.shape):
        raise DimensionError(f"mismatched dims {h.shape}, {r.shape}, {t.shape}")
    return float(np.linalg.norm(h + r - t))


def margin_loss(pos, neg, gamma: float) -> float:
    """Sum over pairs of max(0, pos + gamma - neg)."""
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if pos.shape != neg.shape:
        raise DimensionError(f"pos has {pos.size} scores, neg has {neg.size}")
    return float(np.maximum(0.0, pos + gamma - neg).sum())


def negative_sample(triple: Triple, g: Graph, rng: RngStream, max_attempts: int = 100) -> Triple:
    """Corrupt the head or tail (p=0.5 each) with a uniform entity.

    Resamples until the corrupted triple is absent from the known set;
    relations are never replaced.
    """
    tset = g.triples
    n = tset.n_entities
    if n == 0:
        raise SamplingError("cannot sample from an empty graph")
    for _ in range(max_attempts):
        replace_head = rng.random() < 0.5
        candidate = int(rng.integers(0, n))
        if replace_head:
            corrupted = Triple(candidate, triple.relation, triple.tail)
        else:
            corrupted = Triple(triple.head, triple.relation, candidate)
        if not tset.has(corrupted.head, corrupted.relation, corrupted.tail):
            return corrupted
    raise SamplingError(
        f"no valid corruption found for {triple} after {max_attempts} attempts"
    )


def _pair_scores(x: np.ndarray, rel: np.ndarray, pos: np.ndarray, neg: np.ndarray):
    diff_p = x[pos[:, 0]] + rel[pos[:, 1]] - x[pos[:, 2]]
    diff_n = x[neg[:, 0]] + rel[neg[:, 1]] - x[neg[:, 2]]
    s_p = np.linalg.norm(diff_p, axis=1)
    s_n = np.linalg.norm(diff_n, axis=1)
    return diff_p, diff_n, s_p, s_n


def pretrain_loss(
    params: PretrainParams,
    g: Graph,
    cfg: PretrainConfig,
    pos: np.ndarray,
    neg: np.ndarray,
    draws=None,
) -> float:
    """Margin ranking loss of fixed positive/negative pairs (pure forward)."""
    x, _ = _encode_forward(params, g, cfg, draws)
    _, _, s_p, s_n = _pair_scores(x, params.relation_table, pos, neg)
    return margin_loss(s_p, s_n, cfg.margin)


def pretrain_loss_grads(
    params: PretrainParams,
    g: Graph,
    cfg: PretrainConfig,
    pos: np.ndarray,
    neg: np.ndarray,
    draws=None,
) -> float:
    """Compute the pair loss and accumulate analytic grads into the store."""
    x, cache = _encode_forward(params, g, cfg, draws)
    rel = params.relation_table
    diff_p, diff_n, s_p, s_n = _pair_scores(x, rel, pos, neg)
    margins = s_p + cfg.margin - s_n
    active = margins > 0
    loss = float(margins[active].sum())

    # d loss / d score: +1 for active positives, -1 for active negatives
    with np.errstate(invalid="ignore", divide="ignore"):
        unit_p = np.where(s_p[:, None] > 0, diff_p / np.where(s_p[:, None] > 0, s_p[:, None], 1.0), 0.0)
        unit_n = np.where(s_n[:, None] > 0, diff_n / np.where(s_n[:, None] > 0, s_n[:, None], 1.0), 0.0)
    unit_p[~active] = 0.0
    unit_n[~active] = 0.0

    d_x = np.zeros_like(x)
    np.add.at(d_x, pos[:, 0], unit_p)
    np.add.at(d_x, pos[:, 2], -unit_p)
    np.add.at(d_x, neg[:, 0], -unit_n)
    np.add.at(d_x, neg[:, 2], unit_n)

    d_rel = np.zeros_like(rel)
    np.add.at(d_rel, pos[:, 1], unit_p)
    np.add.at(d_rel, neg[:, 1], -unit_n)

    d_entity, d_ws = _encode_backward(params, cache, d_x)
    store = params.store
    store.grad("entity_table")[...] += d_entity
    store.grad("relation_table")[...] += d_rel
    for i, dw in enumerate(d_ws):
        store.grad(f"gcn_w{i}")[...] += dw
    return loss


@dataclass
class PretrainCheckpoint:
    """Final embedding tables: encoder output per entity, learned relations."""

    entity_table: np.ndarray
    relation_table: np.ndarray

    @property
    def dim(self) -> int:
        return self.entity_table.shape[1]


@dataclass
class PretrainResult:
    checkpoint: PretrainCheckpoint
    epoch_losses: list[float] = field(default_factory=list)
    params: PretrainParams | None = None


def pretrain(tset: TripleSet, g: Graph, cfg: PretrainConfig, rng: RngStream) -> PretrainResult:
    """Minibatch joint training of encoder and scorer with Adam.

    Each batch corrupts its positives, encodes the graph with the current
    parameters, applies the margin ranking loss, and steps all parameters.
    Per-epoch mean loss (per positive pair) is recorded. The returned
    checkpoint holds the encoder output as the entity table.
    """
    rng_init = rng.child("init")
    rng_shuffle = rng.child("shuffle")
    rng_negative = rng.child("negative")
    rng_encode = rng.child("encode")

    params = init_params(tset.n_entities, tset.n_relations, cfg, rng_init)
    triples = np.array(
        [[tr.head, tr.relation, tr.tail] for tr in tset.triples], dtype=np.int64
    )
    npp = cfg.negatives_per_positive
    losses: list[float] = []
    for epoch in range(cfg.epochs):
        order = rng_shuffle.permutation(len(triples))
        total, pairs = 0.0, 0
        for bstart in range(0, len(order), cfg.batch_size):
            bidx = order[bstart : bstart + cfg.batch_size]
            pos = np.repeat(triples[bidx], npp, axis=0)
            neg = np.empty_like(pos)
            for i, row in enumerate(pos):
                corrupted = negative_sample(Triple(*row), g, rng_negative)
                neg[i] = (corrupted.head, corrupted.relation, corrupted.tail)
            draws = (
                sample_layer_draws(g, cfg, rng_encode) if cfg.mode == "sampled" else None
            )
            loss = pretrain_loss_grads(params, g, cfg, pos, neg, draws)
            if not np.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {bstart // cfg.batch_size}"
                )
            total += loss
            pairs += len(pos)
            adam_step(params.store, cfg.lr)
        losses.append(total / max(pairs, 1))

    entity_out = encode_entities(params, g, cfg, rng_encode)
    ckpt = PretrainCheckpoint(entity_out, params.relation_table.copy())
    return PretrainResult(ckpt, losses, params)


CHECKPOINT_MAGIC = b"CKGE"
CHECKPOINT_VERSION = 1
# header: magic(4) + version u32 + n_entities u64 + n_relations u64 + dim u32
_HEADER = struct.Struct("<4sIQQI")


def export_checkpoint(ckpt: PretrainCheckpoint, path) -> None:
    """Write the checkpoint: fixed header, then f32 little-endian rows."""
    n_e, dim = ckpt.entity_table.shape
    n_r = ckpt.relation_table.shape[0]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, n_e, n_r, dim))
        fh.write(ckpt.entity_table.astype("<f4").tobytes())
        fh.write(ckpt.relation_table.astype("<f4").tobytes())


def load_checkpoint(path) -> PretrainCheckpoint:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise FormatError(f"{path}: truncated header")
        magic, version, n_e, n_r, dim = _HEADER.unpack(raw)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        payload = fh.read()
    expected = 4 * dim * (n_e + n_r)
    if len(payload) != expected:
        raise FormatError(f"{path}: expected {expected} payload bytes, got {len(payload)}")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    entity = flat[: n_e * dim].reshape(n_e, dim)
    relation = flat[n_e * dim :].reshape(n_r, dim)
    return PretrainCheckpoint(entity, relation)


def hits_at_k(
    ckpt: PretrainCheckpoint,
    tset: TripleSet,
    eval_triples: list[Triple],
    rng: RngStream,
    k: int = 10,
    n_candidates: int = 50,
) -> float:
    """Filtered tail-prediction Hits@k among uniformly sampled candidates.

    For each triple the true tail competes against n_candidates-1 distinct
    entities that do not form a known-true triple with the same head and
    relation. Rank counts candidates scoring <= the true tail (ties count
    against the hit).
    """
    x, rel = ckpt.entity_table, ckpt.relation_table
    n = tset.n_entities
    hits = 0
    for tr in eval_triples:
        chosen: list[int] = []
        seen = {tr.tail}
        attempts = 0
        while len(chosen) < n_candidates - 1 and attempts < 50 * n_candidates:
            cand = int(rng.integers(0, n))
            attempts += 1
            if cand in seen or tset.has(tr.head, tr.relation, cand):
                continue
            seen.add(cand)
            chosen.append(cand)
        base = x[tr.head] + rel[tr.relation]
        true_score = np.linalg.norm(base - x[tr.tail])
        cand_scores = np.linalg.norm(base[None, :] - x[chosen], axis=1)
        rank = 1 + int(np.sum(cand_scores <= true_score))
        if rank <= k:
            hits += 1
    return hits / max(len(eval_triples), 1)
