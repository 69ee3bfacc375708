"""Conversation knowledge graph storage.

The graph holds typed triples over ten entity kinds connected by exactly
nine schema relations (user tags, item catalog facts, and conversation
session facts). Triples keep their direction for the translation scorer;
the structural encoder sees an undirected, deduplicated adjacency.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, IngestionError, ParseError, SchemaError
from .rng import RngStream

DENSE_ADJACENCY_GUARD = 10_000

# relation name -> (head kind, tail kind); ids are assigned in this order
RELATION_SIGNATURES: dict[str, tuple[str, str]] = {
    "user-has-tag": ("user", "user_tag"),
    "item-belongs-to-category": ("item", "category"),
    "seller-has-item": ("seller", "item"),
    "item-has-value": ("item", "value"),
    "property-has-value": ("property", "value"),
    "user-created-session": ("user", "session"),
    "session-relates-to-seller": ("session", "seller"),
    "session-has-intention": ("session", "intention"),
    "intention-has-keyword": ("intention", "keyword"),
}
RELATIONS: tuple[str, ...] = tuple(RELATION_SIGNATURES)
RELATION_IDS: dict[str, int] = {name: i for i, name in enumerate(RELATIONS)}
ENTITY_KINDS: frozenset[str] = frozenset(
    kind for sig in RELATION_SIGNATURES.values() for kind in sig
)


@dataclass(frozen=True)
class EntityRef:
    id: int
    kind: str
    name: str


@dataclass(frozen=True)
class Triple:
    head: int
    relation: int
    tail: int


class TripleSet:
    """Entity vocabulary plus an ordered, deduplicated list of triples.

    Entity ids are dense and assigned at first mention, scanning each triple
    head-first; serializing and re-reading a TripleSet therefore reproduces
    the same ids.
    """

    def __init__(self):
        self.entities: list[EntityRef] = []
        self.triples: list[Triple] = []
        self._id_by_key: dict[tuple[str, str], int] = {}
        self._triple_keys: set[tuple[int, int, int]] = set()

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    @property
    def n_relations(self) -> int:
        return len(RELATIONS)

    def __len__(self) -> int:
        return len(self.triples)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TripleSet):
            return NotImplemented
        return self.entities == other.entities and self.triples == other.triples

    def entity_id(self, kind: str, name: str, create: bool = False) -> int:
        key = (kind, name)
        eid = self._id_by_key.get(key)
        if eid is None:
            if not create:
                raise KeyError(f"unknown entity {kind}:{name}")
            if kind not in ENTITY_KINDS:
                raise SchemaError(f"unknown entity kind '{kind}'")
            eid = len(self.entities)
            self.entities.append(EntityRef(eid, kind, name))
            self._id_by_key[key] = eid
        return eid

    def add(self, head_name: str, relation: str, tail_name: str) -> bool:
        """Add one triple by entity names; returns False if it was a duplicate."""
        sig = RELATION_SIGNATURES.get(relation)
        if sig is None:
            raise SchemaError(f"unknown relation '{relation}'")
        h = self.entity_id(sig[0], head_name, create=True)
        t = self.entity_id(sig[1], tail_name, create=True)
        key = (h, RELATION_IDS[relation], t)
        if key in self._triple_keys:
            return False
        self._triple_keys.add(key)
        self.triples.append(Triple(*key))
        return True

    def has(self, head: int, relation: int, tail: int) -> bool:
        return (head, relation, tail) in self._triple_keys

    def kind_of(self, eid: int) -> str:
        return self.entities[eid].kind

    def name_of(self, eid: int) -> str:
        return self.entities[eid].name

    def ids_of_kind(self, kind: str) -> list[int]:
        return [e.id for e in self.entities if e.kind == kind]


_EVENT_FIELDS = {
    "user_profile": ("user", "tags"),
    "item_listing": ("item", "category", "seller"),
    "session_log": ("user", "session", "seller", "intention", "keywords"),
}


def ingest_events(records, tset: TripleSet | None = None) -> TripleSet:
    """Turn an iterable of event dicts into schema triples.

    Three event types are understood: user_profile (tag facts), item_listing
    (catalog facts; extra fields such as "title" or "dense" are ignored), and
    session_log (conversation facts). Identical triples are deduplicated and
    entities are created on first mention.
    """
    tset = tset if tset is not None else TripleSet()
    for lineno, rec in enumerate(records, start=1):
        if not isinstance(rec, dict) or "type" not in rec:
            raise IngestionError(f"record {lineno}: missing 'type' field")
        etype = rec["type"]
        required = _EVENT_FIELDS.get(etype)
        if required is None:
            raise IngestionError(f"record {lineno}: unknown event type '{etype}'")
        missing = [f for f in required if f not in rec]
        if missing:
            raise IngestionError(f"record {lineno}: missing field(s) {missing} for '{etype}'")
        if etype == "user_profile":
            for tag in rec["tags"]:
                tset.add(rec["user"], "user-has-tag", tag)
        elif etype == "item_listing":
            tset.add(rec["item"], "item-belongs-to-category", rec["category"])
            tset.add(rec["seller"], "seller-has-item", rec["item"])
            for prop in rec.get("properties", []):
                tset.add(rec["item"], "item-has-value", prop["value"])
                tset.add(prop["property"], "property-has-value", prop["value"])
        else:  # session_log
            tset.add(rec["user"], "user-created-session", rec["session"])
            tset.add(rec["session"], "session-relates-to-seller", rec["seller"])
            tset.add(rec["session"], "session-has-intention", rec["intention"])
            for kw in rec["keywords"]:
                tset.add(rec["intention"], "intention-has-keyword", kw)
    return tset


def load_events(path) -> list[dict]:
    """Read events.jsonl; raises ParseError with the offending line number."""
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
    return records


def save_events(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def prune_triples(tset: TripleSet, min_count: int = 1) -> TripleSet:
    """Drop triples whose tail attribute occurs fewer than min_count times.

    With the default threshold of 1 this is the identity (every mentioned
    entity appears at least once). Rebuilds ids densely.
    """
    if min_count <= 1:
        return tset
    counts = np.zeros(tset.n_entities, dtype=np.int64)
    for tr in tset.triples:
        counts[tr.tail] += 1
    out = TripleSet()
    for tr in tset.triples:
        if counts[tr.tail] >= min_count:
            out.add(tset.name_of(tr.head), RELATIONS[tr.relation], tset.name_of(tr.tail))
    return out


class Graph:
    """Undirected view of a TripleSet for structural aggregation.

    Adjacency is symmetric, deduplicated across relations, sorted per entity,
    and never contains the entity itself (self-loops are a separate,
    configurable step of normalization).
    """

    def __init__(self, tset: TripleSet):
        self.triples = tset
        self.n_entities = tset.n_entities
        neighbor_sets: list[set[int]] = [set() for _ in range(self.n_entities)]
        for tr in tset.triples:
            if tr.head != tr.tail:
                neighbor_sets[tr.head].add(tr.tail)
                neighbor_sets[tr.tail].add(tr.head)
        self.adjacency = [np.array(sorted(s), dtype=np.int64) for s in neighbor_sets]
        self.degrees = np.array([len(a) for a in self.adjacency], dtype=np.int64)

    def max_degree(self) -> int:
        return int(self.degrees.max()) if self.n_entities else 0


def normalized_adjacency(g: Graph, self_loops: bool = True, kind: str = "sym") -> np.ndarray:
    """Dense normalized adjacency for small graphs.

    kind="sym" gives the symmetric normalization D^-1/2 (A + I) D^-1/2;
    kind="mean" gives row normalization D^-1 (A + I), the dense counterpart
    of mean-of-neighbors aggregation. Degree-zero rows stay all-zero.
    """
    n = g.n_entities
    if n > DENSE_ADJACENCY_GUARD:
        raise CapacityError(
            f"graph has {n} entities, above the dense guard of {DENSE_ADJACENCY_GUARD}"
        )
    if kind not in ("sym", "mean"):
        raise ValueError(f"unknown normalization kind '{kind}'")
    a = np.zeros((n, n), dtype=np.float64)
    for i, neigh in enumerate(g.adjacency):
        a[i, neigh] = 1.0
    if self_loops:
        np.fill_diagonal(a, 1.0)
    deg = a.sum(axis=1)
    if kind == "sym":
        with np.errstate(divide="ignore"):
            dinv = np.where(deg > 0, 1.0 / np.sqrt(deg), 0.0)
        return dinv[:, None] * a * dinv[None, :]
    with np.errstate(divide="ignore"):
        dinv = np.where(deg > 0, 1.0 / deg, 0.0)
    return dinv[:, None] * a


def sample_neighbors(g: Graph, entity: int, fanout: int, rng: RngStream) -> np.ndarray:
    """Draw exactly fanout neighbor ids for one entity.

    Degree >= fanout samples uniformly without replacement; a smaller positive
    degree samples with replacement up to fanout; an isolated entity falls
    back to itself repeated fanout times.
    """
    if not 0 <= entity < g.n_entities:
        raise IndexError(f"entity {entity} out of range [0, {g.n_entities})")
    if fanout < 1:
        raise ValueError("fanout must be >= 1")
    neigh = g.adjacency[entity]
    if len(neigh) == 0:
        return np.full(fanout, entity, dtype=np.int64)
    if len(neigh) >= fanout:
        return rng.choice(neigh, size=fanout, replace=False).astype(np.int64)
    return rng.choice(neigh, size=fanout, replace=True).astype(np.int64)


TRIPLES_HEADER = "head\trelation\ttail"


def save_triples(tset: TripleSet, path) -> None:
    """Write a TripleSet as TSV: header line, then name\trelation\tname rows."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(TRIPLES_HEADER + "\n")
        for tr in tset.triples:
            fh.write(
                f"{tset.name_of(tr.head)}\t{RELATIONS[tr.relation]}\t{tset.name_of(tr.tail)}\n"
            )


def load_triples(path) -> TripleSet:
    tset = TripleSet()
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != TRIPLES_HEADER:
            raise ParseError(f"{path}:1: expected header '{TRIPLES_HEADER}', got '{header}'")
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields")
            head, relation, tail = parts
            if relation not in RELATION_SIGNATURES:
                raise ParseError(f"{path}:{lineno}: unknown relation '{relation}'")
            tset.add(head, relation, tail)
    return tset


def save_vocab(tset: TripleSet, path) -> None:
    """Write the entity vocabulary as TSV lines id\tkind\tname."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for ent in tset.entities:
            fh.write(f"{ent.id}\t{ent.kind}\t{ent.name}\n")


def load_vocab(path) -> list[EntityRef]:
    entities = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields")
            eid, kind, name = parts
            try:
                entities.append(EntityRef(int(eid), kind, name))
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: bad entity id '{eid}'") from exc
    return entities
