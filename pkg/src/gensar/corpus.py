"""Interaction histories, the synthetic corpus generator, leave-one-out
splits, and instruction datasets for the five training tasks."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np

from .errors import ConfigError
from .identifier import Behavior, ItemIdentifier, TokenVocabulary, behavior_identifier, tokenize_words

log = logging.getLogger(__name__)

TASKS = ("nrip", "nsqp", "nsip", "desc2id", "id2desc")
MAX_HISTORY = 20

# fixed instruction wording per task; every word is a vocabulary token
PROMPTS = {
    "nrip": ["recommend", "next", "item"],
    "nsqp": ["predict", "next", "query"],
    "nsip": ["predict", "search", "item"],
    "desc2id": ["identify", "item"],
    "id2desc": ["describe", "item"],
}
KIND_WORDS = {"semantic": "semantic", "collab": "collaborative"}

TOPICS = (
    "audio", "camera", "laptop", "phone", "kitchen", "garden", "toys", "books",
    "fitness", "music", "travel", "office", "beauty", "pets", "tools", "games",
)
MODIFIERS = (
    "wireless", "portable", "compact", "deluxe", "classic", "smart", "vintage", "rugged",
    "premium", "mini", "pro", "eco", "digital", "foldable", "heavy", "silent",
)


@dataclass(frozen=True)
class Interaction:
    behavior: Behavior
    payload: int  # item id, or query id for SEARCH_QUERY
    t: int

    def to_json(self) -> dict:
        return {"b": self.behavior.value, "x": self.payload, "t": self.t}

    @classmethod
    def from_json(cls, rec: dict) -> "Interaction":
        return cls(Behavior(rec["b"]), int(rec["x"]), int(rec["t"]))


@dataclass
class UserHistory:
    user: int
    interactions: List[Interaction]

    def __post_init__(self):
        ts = [x.t for x in self.interactions]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"user {self.user}: timestamps are not strictly increasing")
        for i, x in enumerate(self.interactions):
            if x.behavior is Behavior.SEARCH_ITEM and (i == 0 or self.interactions[i - 1].behavior is not Behavior.SEARCH_QUERY):
                raise ValueError(f"user {self.user}: search click at position {i} does not follow a query")

    def __len__(self) -> int:
        return len(self.interactions)

    def items(self) -> Set[int]:
        return {x.payload for x in self.interactions if x.behavior.is_item}

    def positions(self, behavior: Behavior) -> List[int]:
        return [i for i, x in enumerate(self.interactions) if x.behavior is behavior]


@dataclass(frozen=True)
class CatalogItem:
    item: int
    description: str
    cluster: int


@dataclass(frozen=True)
class Query:
    query: int
    text: str
    cluster: int

    @property
    def words(self) -> List[str]:
        return tokenize_words(self.text)


@dataclass
class InstructionExample:
    task: str
    instruction: List[str]
    response: List[str]
    item: Optional[int] = None  # set on alignment examples


@dataclass
class SynthConfig:
    n_users: int = 500
    n_items: int = 2000
    n_queries: int = 40
    n_clusters: int = 8
    n_communities: int = 4  # co-consumption groups inside each cluster
    history_length: int = 24
    search_rate: float = 0.35
    community_loyalty: float = 0.75
    popularity_exponent: float = 1.1
    preference_concentration: float = 0.3
    background_users: int = 1000  # extra log used only to fit collaborative vectors
    semantic_dim: int = 32
    collab_dim: int = 32
    collab_rank: int = 16  # factorization rank, rotated into collab_dim
    semantic_noise: float = 0.05
    collab_noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 1 or self.n_clusters > self.n_items:
            raise ConfigError(f"need 1 <= n_clusters <= n_items, got {self.n_clusters} clusters for {self.n_items} items")
        if self.n_queries < self.n_clusters:
            raise ConfigError("every cluster needs at least one query")
        if self.history_length < 3:
            raise ConfigError("history_length must be >= 3")
        if not 0.0 <= self.search_rate <= 1.0 or not 0.0 <= self.community_loyalty <= 1.0:
            raise ConfigError("search_rate and community_loyalty must lie in [0, 1]")
        if self.n_communities < 1:
            raise ConfigError("n_communities must be >= 1")
        if not 1 <= self.collab_rank <= self.collab_dim:
            raise ConfigError("need 1 <= collab_rank <= collab_dim")
        per_cluster = -(-self.n_queries // self.n_clusters)
        if per_cluster > len(MODIFIERS):
            raise ConfigError(f"at most {len(MODIFIERS) * self.n_clusters} queries supported")


@dataclass
class SyntheticCorpus:
    catalog: List[CatalogItem]
    queries: List[Query]
    histories: List[UserHistory]
    semantic: np.ndarray
    collab: np.ndarray
    preferences: np.ndarray  # users x clusters, the planted mixture
    popularity: np.ndarray  # per item, within-cluster sampling weight
    community: np.ndarray  # per item

    @property
    def item_ids(self) -> List[int]:
        return [c.item for c in self.catalog]


def _topic(c: int) -> str:
    return TOPICS[c] if c < len(TOPICS) else f"topic{c}"


class _World:
    """Planted item structure shared by the real and background users."""

    def __init__(self, cfg: SynthConfig, rng: np.random.Generator):
        k = cfg.n_clusters
        per_cluster = -(-cfg.n_queries // k)
        self.cfg = cfg
        self.cluster = rng.permutation(np.arange(cfg.n_items) % k)
        self.community = np.empty(cfg.n_items, dtype=np.int64)
        self.members = [np.flatnonzero(self.cluster == c) for c in range(k)]
        for m in self.members:
            self.community[m] = rng.permutation(np.arange(len(m)) % cfg.n_communities)
        self.groups = {
            (c, g): m[self.community[m] == g] for c, m in enumerate(self.members) for g in range(cfg.n_communities)
        }
        self.cluster_mods = [sorted(rng.choice(len(MODIFIERS), size=per_cluster, replace=False).tolist()) for _ in range(k)]
        self.item_mods = []
        for i in range(cfg.n_items):
            mods = self.cluster_mods[self.cluster[i]]
            n_mod = min(len(mods), int(rng.integers(2, 4)))
            self.item_mods.append(sorted(rng.choice(mods, size=n_mod, replace=False).tolist()))
        self.popularity = np.empty(cfg.n_items)
        for m in self.members:
            self.popularity[m] = (rng.permutation(len(m)) + 1.0) ** -cfg.popularity_exponent
        self.queries = [
            Query(q, f"{_topic(q % k)} {MODIFIERS[self.cluster_mods[q % k][q // k]]}", q % k) for q in range(cfg.n_queries)
        ]
        self.query_pool = []
        for q in self.queries:
            mod = self.cluster_mods[q.cluster][q.query // k]
            self.query_pool.append(np.array([i for i in self.members[q.cluster] if mod in self.item_mods[i]]))
        self.queries_of = [[q.query for q in self.queries if q.cluster == c] for c in range(k)]

    def user(self, rng):
        k = self.cfg.n_clusters
        prefs = rng.dirichlet(np.full(k, self.cfg.preference_concentration))
        return prefs, rng.integers(0, self.cfg.n_communities, size=k)

    def history(self, user: int, prefs, communities, rng) -> UserHistory:
        cfg = self.cfg
        seen: Set[int] = set()
        events: List[Interaction] = []

        def draw(pool):
            cand = np.array([i for i in pool if i not in seen], dtype=np.int64)
            if not len(cand):
                return None
            w = self.popularity[cand]
            item = int(cand[rng.choice(len(cand), p=w / w.sum())])
            seen.add(item)
            return item

        while len(events) < cfg.history_length:
            c = int(rng.choice(cfg.n_clusters, p=prefs))
            if cfg.history_length - len(events) >= 2 and rng.random() < cfg.search_rate:
                q = int(rng.choice(self.queries_of[c]))
                item = draw(self.query_pool[q])
                if item is not None:
                    events.append(Interaction(Behavior.SEARCH_QUERY, q, len(events)))
                    events.append(Interaction(Behavior.SEARCH_ITEM, item, len(events)))
                    continue
            pool = self.groups[(c, int(communities[c]))] if rng.random() < cfg.community_loyalty else self.members[c]
            item = draw(pool)
            if item is None:
                item = draw(self.members[c])
            if item is not None:
                events.append(Interaction(Behavior.REC_ITEM, item, len(events)))
        return UserHistory(user, events)


def generate_synthetic(cfg: SynthConfig) -> SyntheticCorpus:
    """Corpus with planted structure.

    Items belong to latent clusters and, inside a cluster, to co-consumption
    communities. Semantic vectors are the cluster centroid plus keyword
    vectors plus noise. A query names one cluster and one keyword; the search
    click after it is drawn by popularity from that cluster's items carrying
    the keyword. A recommendation click draws the cluster from the user's
    preference mixture, then usually stays inside the user's community for
    that cluster, and picks by popularity. Users never click an item twice.

    Collaborative vectors factorize item co-occurrence (PPMI) over a
    background log from the same process plus the real users' training
    positions, so they never see held-out clicks.
    """
    rng = np.random.default_rng(cfg.seed)
    world = _World(cfg, rng)

    catalog = []
    for i in range(cfg.n_items):
        c = int(world.cluster[i])
        words = " ".join(MODIFIERS[m] for m in world.item_mods[i])
        catalog.append(CatalogItem(i, f"cluster-{c} item {i} {_topic(c)} {words}", c))

    centroids = rng.standard_normal((cfg.n_clusters, cfg.semantic_dim))
    mod_vecs = 0.5 * rng.standard_normal((len(MODIFIERS), cfg.semantic_dim))
    semantic = centroids[world.cluster] + cfg.semantic_noise * rng.standard_normal((cfg.n_items, cfg.semantic_dim))
    for i, mods in enumerate(world.item_mods):
        semantic[i] += mod_vecs[mods].sum(axis=0)

    preferences = np.empty((cfg.n_users, cfg.n_clusters))
    histories = []
    for u in range(cfg.n_users):
        prefs, comms = world.user(rng)
        preferences[u] = prefs
        histories.append(world.history(u, prefs, comms, rng))

    bg_rng = np.random.default_rng([cfg.seed, 1])
    background = [world.history(-1, *world.user(bg_rng), bg_rng) for _ in range(cfg.background_users)]
    sp = split(histories)
    baskets = [h.interactions for h in background] + [h.interactions[: sp.cutoff[h.user]] for h in histories]
    collab = _collaborative_vectors(baskets, cfg, rng)
    return SyntheticCorpus(
        catalog, world.queries, histories, semantic.astype(np.float32), collab, preferences, world.popularity, world.community
    )


def _collaborative_vectors(baskets: Sequence[Sequence[Interaction]], cfg: SynthConfig, rng) -> np.ndarray:
    """Rows of a rank-``collab_rank`` eigendecomposition of the item PPMI
    matrix, rescaled to unit RMS per dimension, rotated into ``collab_dim``
    dimensions, plus noise."""
    n = cfg.n_items
    rows, cols = [], []
    for b, events in enumerate(baskets):
        items = sorted({x.payload for x in events if x.behavior.is_item})
        rows += [b] * len(items)
        cols += items
    basket_items = np.zeros((len(baskets), n))
    basket_items[rows, cols] = 1.0
    co = basket_items.T @ basket_items
    np.fill_diagonal(co, 0.0)
    total = co.sum()
    marg = co.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        pmi = np.log(co * total / np.outer(marg, marg))
    ppmi = np.where(np.isfinite(pmi) & (pmi > 0), pmi, 0.0)
    vals, vecs = np.linalg.eigh(ppmi)
    top = np.argsort(vals)[::-1][: cfg.collab_rank]
    factors = vecs[:, top] * np.sqrt(np.maximum(vals[top], 0.0))
    norms = np.linalg.norm(factors, axis=1, keepdims=True)
    factors = np.where(norms > 0, factors / np.where(norms > 0, norms, 1.0), 0.0) * np.sqrt(cfg.collab_dim)
    rotation, _ = np.linalg.qr(rng.standard_normal((cfg.collab_dim, cfg.collab_rank)))
    factors = factors @ rotation.T
    factors += cfg.collab_noise * rng.standard_normal(factors.shape)
    return factors.astype(np.float32)


# --- splits --------------------------------------------------------------

@dataclass(frozen=True)
class EvalRow:
    user: int
    task: str  # "recommendation" or "search"
    position: int  # index of the target click in the user's history
    target: int
    query: Optional[int] = None


@dataclass
class Split:
    cutoff: Dict[int, int]  # positions < cutoff[user] are training targets
    valid: List[EvalRow] = field(default_factory=list)
    test: List[EvalRow] = field(default_factory=list)
    excluded: Dict[str, List[int]] = field(default_factory=lambda: {"recommendation": [], "search": []})

    def rows(self, which: str, task: Optional[str] = None) -> List[EvalRow]:
        rows = getattr(self, which)
        return [r for r in rows if task is None or r.task == task]


def split(histories: Sequence[UserHistory]) -> Split:
    """Leave-one-out per user and task.

    The last recommendation click is the test target and the one before it
    validation; likewise for the last two search clicks. A task needs three
    eligible clicks, otherwise the user is left out of that task's
    evaluation. Every interaction before the earliest held-out one is
    training material.
    """
    out = Split(cutoff={})
    for h in histories:
        held: List[int] = []
        rec = h.positions(Behavior.REC_ITEM)
        if len(rec) >= 3:
            out.valid.append(EvalRow(h.user, "recommendation", rec[-2], h.interactions[rec[-2]].payload))
            out.test.append(EvalRow(h.user, "recommendation", rec[-1], h.interactions[rec[-1]].payload))
            held += rec[-2:]
        else:
            out.excluded["recommendation"].append(h.user)
        srch = h.positions(Behavior.SEARCH_ITEM)
        if len(srch) >= 3:
            for which, p in (("valid", srch[-2]), ("test", srch[-1])):
                row = EvalRow(h.user, "search", p, h.interactions[p].payload, h.interactions[p - 1].payload)
                getattr(out, which).append(row)
            held += [srch[-2] - 1, srch[-1] - 1]
        else:
            out.excluded["search"].append(h.user)
        out.cutoff[h.user] = min(held) if held else len(h)
    for task, users in out.excluded.items():
        if users:
            log.info("%d user(s) have too few %s targets and are left out of its evaluation", len(users), task)
    return out


# --- instructions ----------------------------------------------------------

def render_history(
    events: Sequence[Interaction],
    identifiers: Mapping[int, ItemIdentifier],
    queries: Mapping[int, Query],
    *,
    with_behavior: bool = True,
    max_history: int = MAX_HISTORY,
) -> List[str]:
    """Most recent ``max_history`` interactions, oldest first, each rendered
    with its behavior token."""
    tokens: List[str] = []
    for x in list(events)[-max_history:] if max_history else []:
        if x.behavior.is_item:
            if x.payload not in identifiers:
                raise KeyError(f"item {x.payload} has no identifier")
            payload = identifiers[x.payload]
        else:
            payload = queries[x.payload].words
        tokens += behavior_identifier(x.behavior, payload, with_behavior=with_behavior)
    return tokens


def rec_instruction(history: UserHistory, position: int, identifiers, queries, **kw) -> List[str]:
    return render_history(history.interactions[:position], identifiers, queries, **kw) + PROMPTS["nrip"]


def query_instruction(history: UserHistory, position: int, identifiers, queries, **kw) -> List[str]:
    return render_history(history.interactions[:position], identifiers, queries, **kw) + PROMPTS["nsqp"]


def search_instruction(history: UserHistory, position: int, identifiers, queries, *, with_behavior: bool = True, **kw) -> List[str]:
    """History before the query, then the current query, then the prompt.
    ``position`` indexes the search click; the query sits right before it."""
    query = history.interactions[position - 1]
    if query.behavior is not Behavior.SEARCH_QUERY:
        raise ValueError(f"position {position} of user {history.user} is not a search click")
    body = render_history(history.interactions[: position - 1], identifiers, queries, with_behavior=with_behavior, **kw)
    current = behavior_identifier(Behavior.SEARCH_QUERY, queries[query.payload].words, with_behavior=with_behavior)
    return body + current + PROMPTS["nsip"]


def target_tokens(behavior: Behavior, payload, identifiers, queries, *, with_behavior: bool = True) -> List[str]:
    if behavior.is_item:
        return behavior_identifier(behavior, identifiers[payload], with_behavior=with_behavior)
    return behavior_identifier(behavior, queries[payload].words, with_behavior=with_behavior)


def alignment_examples(
    catalog: Iterable[CatalogItem], identifiers: Mapping[int, ItemIdentifier], tasks: Iterable[str] = ("desc2id", "id2desc")
) -> List[InstructionExample]:
    """Description <-> bare identifier pairs, for both identifier kinds."""
    tasks = set(tasks)
    out = []
    for item in catalog:
        if not item.description.strip():
            raise ValueError(f"item {item.item} has an empty description")
        if item.item not in identifiers:
            raise KeyError(f"item {item.item} has no identifier")
        ident = identifiers[item.item]
        desc = tokenize_words(item.description)
        for kind in ("semantic", "collab"):
            ids = ident.tokens(kind)
            if "desc2id" in tasks:
                out.append(InstructionExample("desc2id", PROMPTS["desc2id"] + [KIND_WORDS[kind]] + desc, ids, item.item))
            if "id2desc" in tasks:
                out.append(InstructionExample("id2desc", PROMPTS["id2desc"] + ids, desc, item.item))
    return out


def build_instructions(
    histories: Sequence[UserHistory],
    sp: Split,
    identifiers: Mapping[int, ItemIdentifier],
    catalog: Sequence[CatalogItem],
    queries: Mapping[int, Query],
    tasks: Iterable[str] = TASKS,
    *,
    with_behavior: bool = True,
    max_history: int = MAX_HISTORY,
) -> List[InstructionExample]:
    """Training examples: one per training-region click or query for the
    history tasks, plus four alignment examples per catalog item."""
    tasks = set(tasks)
    unknown = tasks - set(TASKS)
    if unknown:
        raise ValueError(f"unknown task(s) {sorted(unknown)}")
    kw = dict(with_behavior=with_behavior, max_history=max_history)
    out: List[InstructionExample] = []
    for h in histories:
        for p in range(sp.cutoff[h.user]):
            x = h.interactions[p]
            if x.behavior is Behavior.REC_ITEM and "nrip" in tasks:
                ins = rec_instruction(h, p, identifiers, queries, **kw)
                task = "nrip"
            elif x.behavior is Behavior.SEARCH_QUERY and "nsqp" in tasks:
                ins = query_instruction(h, p, identifiers, queries, **kw)
                task = "nsqp"
            elif x.behavior is Behavior.SEARCH_ITEM and "nsip" in tasks:
                ins = search_instruction(h, p, identifiers, queries, **kw)
                task = "nsip"
            else:
                continue
            out.append(InstructionExample(task, ins, target_tokens(x.behavior, x.payload, identifiers, queries, with_behavior=with_behavior)))
    out += alignment_examples(catalog, identifiers, tasks & {"desc2id", "id2desc"})
    return out


def eval_example(row: EvalRow, histories: Mapping[int, UserHistory], identifiers, queries, *, with_behavior: bool = True, max_history: int = MAX_HISTORY) -> InstructionExample:
    h = histories[row.user]
    kw = dict(with_behavior=with_behavior, max_history=max_history)
    if row.task == "recommendation":
        ins = rec_instruction(h, row.position, identifiers, queries, **kw)
        return InstructionExample("nrip", ins, target_tokens(Behavior.REC_ITEM, row.target, identifiers, queries, with_behavior=with_behavior))
    ins = search_instruction(h, row.position, identifiers, queries, **kw)
    return InstructionExample("nsip", ins, target_tokens(Behavior.SEARCH_ITEM, row.target, identifiers, queries, with_behavior=with_behavior))


def corpus_words(catalog: Iterable[CatalogItem], queries: Iterable[Query]) -> List[str]:
    """Prompt words, then query and description words in first-seen order."""
    words: List[str] = []
    seen: Set[str] = set()

    def add(ws):
        for w in ws:
            if w not in seen:
                seen.add(w)
                words.append(w)

    for prompt in PROMPTS.values():
        add(prompt)
    add(KIND_WORDS.values())
    for q in queries:
        add(q.words)
    for item in catalog:
        add(tokenize_words(item.description))
    return words


# --- files -----------------------------------------------------------------

def _write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _read_jsonl(path) -> List[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_histories(path, histories: Iterable[UserHistory]) -> None:
    _write_jsonl(path, ({"user": h.user, "events": [x.to_json() for x in h.interactions]} for h in histories))


def read_histories(path) -> List[UserHistory]:
    return [UserHistory(int(r["user"]), [Interaction.from_json(e) for e in r["events"]]) for r in _read_jsonl(path)]


def write_catalog(path, catalog: Iterable[CatalogItem]) -> None:
    _write_jsonl(path, ({"item": c.item, "description": c.description, "cluster": c.cluster} for c in catalog))


def read_catalog(path) -> List[CatalogItem]:
    return [CatalogItem(int(r["item"]), r["description"], int(r["cluster"])) for r in _read_jsonl(path)]


def write_queries(path, queries: Iterable[Query]) -> None:
    _write_jsonl(path, ({"query": q.query, "text": q.text, "cluster": q.cluster} for q in queries))


def read_queries(path) -> List[Query]:
    return [Query(int(r["query"]), r["text"], int(r["cluster"])) for r in _read_jsonl(path)]


def write_instructions(path, examples: Iterable[InstructionExample], vocab: TokenVocabulary) -> None:
    _write_jsonl(
        path,
        (
            {"task": ex.task, "instruction": vocab.encode(ex.instruction), "response": vocab.encode(ex.response), "item": ex.item}
            for ex in examples
        ),
    )


def read_instructions(path, vocab: TokenVocabulary) -> List[InstructionExample]:
    return [
        InstructionExample(r["task"], vocab.decode(r["instruction"]), vocab.decode(r["response"]), r.get("item"))
        for r in _read_jsonl(path)
    ]
