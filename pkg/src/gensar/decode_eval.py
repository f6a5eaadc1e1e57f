"""Constrained beam search, candidate scoring, BM25 negatives and the
HR@k / NDCG@k evaluation protocol."""
from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from .identifier import Behavior, IdentifierTrie, ItemIdentifier, TokenVocabulary, tokenize_words
from .seqmodel import Seq2Seq

log = logging.getLogger(__name__)

N_CANDIDATES = 100
METRIC_KS = (1, 5, 10)


# --- decoding ---------------------------------------------------------------

@dataclass
class BeamState:
    tokens: Tuple[int, ...]  # identifier tokens after the forced prefix
    logprob: float
    alive: bool = True


@dataclass(frozen=True)
class Hit:
    item: int
    score: float
    tokens: Tuple[int, ...]


def _prefix(vocab: TokenVocabulary, behavior: Optional[Behavior]) -> List[int]:
    """Decoder prefix: ``<bos>`` then the forced behavior token, if any."""
    out = [vocab.bos_id]
    if behavior is not None:
        out.append(vocab.id_of(Behavior(behavior).token))
    return out


@torch.no_grad()
def _encode(model: Seq2Seq, instruction: Sequence[int]):
    src = torch.as_tensor([list(instruction)], dtype=torch.long)
    mask = torch.ones_like(src, dtype=torch.bool)
    return model.encode(src, mask), mask


@torch.no_grad()
def _step_logprobs(model, memory, mask, prefixes: Sequence[Sequence[int]]) -> np.ndarray:
    """Next-token log-probabilities after each (equal length) prefix."""
    n = len(prefixes)
    tgt = torch.as_tensor([list(p) for p in prefixes], dtype=torch.long)
    logits = model.decode(memory.expand(n, -1, -1), mask.expand(n, -1), tgt)[:, -1]
    return logits.double().log_softmax(dim=-1).numpy()


def constrained_beam_search(
    model: Seq2Seq,
    instruction: Sequence[int],
    behavior: Optional[Behavior],
    trie: IdentifierTrie,
    vocab: TokenVocabulary,
    *,
    beam_width: int,
    top_k: Optional[int] = None,
) -> List[Hit]:
    """Generate identifiers restricted to ``trie`` after forcing the behavior
    token (``behavior=None`` skips forcing, for models trained without them).

    Scores are summed log-probabilities of the behavior token and the
    identifier tokens. Ties go to the lexicographically smaller token-id
    sequence; items sharing one identifier are listed by item id.
    """
    if beam_width < 1:
        raise ValueError("beam width must be at least 1")
    if not trie:
        raise ValueError("cannot decode from an empty trie")
    top_k = beam_width if top_k is None else top_k
    if top_k > beam_width:
        raise ValueError(f"top_k {top_k} exceeds beam width {beam_width}")
    model.eval()
    memory, mask = _encode(model, instruction)
    prefix = _prefix(vocab, behavior)
    start = 0.0
    if behavior is not None:
        start = float(_step_logprobs(model, memory, mask, [prefix[:1]])[0, prefix[1]])
    beams = [BeamState((), start)]
    finished: List[BeamState] = []
    while beams:
        lp = _step_logprobs(model, memory, mask, [prefix + list(b.tokens) for b in beams])
        expanded = []
        for row, beam in enumerate(beams):
            for tok in trie.allowed_next(beam.tokens):
                expanded.append(BeamState(beam.tokens + (tok,), beam.logprob + float(lp[row, tok])))
        expanded.sort(key=lambda b: (-b.logprob, b.tokens))
        beams = []
        for b in expanded[:beam_width]:
            if trie.is_terminal(b.tokens):
                finished.append(BeamState(b.tokens, b.logprob, alive=False))
            if trie.allowed_next(b.tokens):
                beams.append(b)
        # a finished sequence cannot improve, so stop once the beam cannot beat the k-th best
        finished.sort(key=lambda b: (-b.logprob, b.tokens))
        if len(finished) >= top_k and (not beams or beams[0].logprob < finished[top_k - 1].logprob):
            break
    hits = []
    for b in finished[:top_k]:
        hits += [Hit(item, b.logprob, b.tokens) for item in sorted(trie.items_at(b.tokens))]
    return hits


@torch.no_grad()
def sequence_logprobs(
    model: Seq2Seq, instruction: Sequence[int], behavior: Optional[Behavior], sequences: Sequence[Sequence[int]], vocab: TokenVocabulary
) -> np.ndarray:
    """Teacher-forced log-probability of behavior token + each sequence."""
    lengths = {len(s) for s in sequences}
    if len(lengths) != 1:
        raise ValueError("identifier sequences must share one length")
    model.eval()
    memory, mask = _encode(model, instruction)
    prefix = _prefix(vocab, behavior)
    full = np.array([prefix + list(s) for s in sequences], dtype=np.int64)
    n = len(full)
    tgt = torch.from_numpy(full[:, :-1])
    logits = model.decode(memory.expand(n, -1, -1), mask.expand(n, -1), tgt)
    lp = logits.double().log_softmax(dim=-1).numpy()
    picked = np.take_along_axis(lp, full[:, 1:, None], axis=-1)[..., 0]
    return picked.sum(axis=1)


def score_candidates(
    model: Seq2Seq,
    instruction: Sequence[int],
    behavior: Optional[Behavior],
    candidates: Sequence[int],
    identifiers: Mapping[int, ItemIdentifier],
    vocab: TokenVocabulary,
    kind: str,
) -> List[Tuple[int, float]]:
    """Rank candidate items by the log-probability of their identifier."""
    missing = [c for c in candidates if c not in identifiers]
    if missing:
        raise KeyError(f"candidate item(s) without identifier: {missing[:5]}")
    seqs = [vocab.encode(identifiers[c].tokens(kind)) for c in candidates]
    scores = sequence_logprobs(model, instruction, behavior, seqs, vocab)
    ranked = sorted(zip(candidates, scores.tolist()), key=lambda cs: (-cs[1], cs[0]))
    return ranked


# --- BM25 -------------------------------------------------------------------

class Bm25Index:
    """Okapi BM25 over tokenized documents. Repeated query terms count once
    per occurrence."""

    def __init__(self, docs: Sequence[Sequence[str]], k1: float = 1.2, b: float = 0.75):
        self.k1, self.b = k1, b
        self.n_docs = len(docs)
        self.lengths = np.array([len(d) for d in docs], dtype=np.float64)
        self.avg_len = float(self.lengths.mean()) if self.n_docs else 0.0
        self.postings: Dict[str, Dict[int, int]] = {}
        for i, doc in enumerate(docs):
            for term, tf in Counter(doc).items():
                self.postings.setdefault(term, {})[i] = tf

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        return math.log((self.n_docs - df + 0.5) / (df + 0.5) + 1.0)

    def scores(self, query: Sequence[str]) -> np.ndarray:
        out = np.zeros(self.n_docs)
        norm = self.k1 * (1.0 - self.b + self.b * self.lengths / self.avg_len) if self.n_docs else out
        for term in query:
            post = self.postings.get(term)
            if not post:
                continue
            docs = np.fromiter(post.keys(), dtype=np.int64)
            tf = np.fromiter(post.values(), dtype=np.float64)
            out[docs] += self.idf(term) * tf * (self.k1 + 1.0) / (tf + norm[docs])
        return out

    def score(self, query: Sequence[str], doc: int) -> float:
        return float(self.scores(query)[doc])


# --- candidate lists --------------------------------------------------------

@dataclass
class CandidateList:
    user: int
    task: str
    target: int
    negatives: List[int]

    @property
    def candidates(self) -> List[int]:
        return [self.target] + list(self.negatives)

    def validate(self, history_items: Optional[set] = None) -> None:
        cands = self.candidates
        if len(cands) != N_CANDIDATES or len(set(cands)) != N_CANDIDATES:
            raise ValueError(f"user {self.user} {self.task}: need {N_CANDIDATES} distinct candidates")
        if self.task == "recommendation" and history_items is not None and set(self.negatives) & history_items:
            raise ValueError(f"user {self.user}: recommendation negative taken from the user's history")

    def to_json(self) -> dict:
        return {"user": self.user, "task": self.task, "target": self.target, "negatives": list(self.negatives)}

    @classmethod
    def from_json(cls, rec: dict) -> "CandidateList":
        return cls(int(rec["user"]), rec["task"], int(rec["target"]), [int(x) for x in rec["negatives"]])


def _random_negatives(pool: np.ndarray, exclude: set, n: int, rng: np.random.Generator) -> List[int]:
    allowed = np.array([i for i in pool if i not in exclude], dtype=np.int64)
    if len(allowed) < n:
        raise ValueError(f"only {len(allowed)} items available for {n} negatives")
    return sorted(rng.choice(allowed, size=n, replace=False).tolist())


def bm25_top_negatives(
    index: Bm25Index,
    query: Sequence[str],
    target: int,
    n: int,
    rng: np.random.Generator,
    *,
    exclude: Iterable[int] = (),
) -> List[int]:
    """Top-``n`` BM25 items other than ``target`` (ties by item id), padded
    with random items outside ``exclude`` when fewer than ``n`` score above 0."""
    scores = index.scores(query)
    if not query:
        log.warning("empty query; BM25 negatives fall back to random items")
    order = sorted((i for i in range(index.n_docs) if scores[i] > 0 and i != target), key=lambda i: (-scores[i], i))
    picked = order[:n]
    if len(picked) < n:
        skip = set(exclude) | set(picked) | {target}
        picked += _random_negatives(np.arange(index.n_docs), skip, n - len(picked), rng)
    return picked


def build_candidate_lists(
    rows,
    histories: Mapping[int, "object"],
    n_items: int,
    *,
    seed: int,
    negatives: str = "bm25",
    index: Optional[Bm25Index] = None,
    query_words: Optional[Mapping[int, Sequence[str]]] = None,
) -> List[CandidateList]:
    """99 negatives per evaluation row. Recommendation rows always use random
    items the user never touched; search rows use BM25 neighbours of the
    query (``negatives="bm25"``) or the same random scheme."""
    if negatives not in ("random", "bm25"):
        raise ValueError(f"unknown negative sampling {negatives!r}")
    rng = np.random.default_rng(seed)
    pool = np.arange(n_items)
    out = []
    for row in rows:
        seen = histories[row.user].items()
        if row.task == "search" and negatives == "bm25":
            if index is None or query_words is None:
                raise ValueError("BM25 negatives need an index and query texts")
            negs = bm25_top_negatives(index, query_words[row.query], row.target, N_CANDIDATES - 1, rng, exclude=seen)
        else:
            negs = _random_negatives(pool, seen | {row.target}, N_CANDIDATES - 1, rng)
        cl = CandidateList(row.user, row.task, row.target, negs)
        cl.validate(seen if row.task == "recommendation" else None)
        out.append(cl)
    return out


def write_candidate_lists(path, lists: Iterable[CandidateList]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cl in lists:
            fh.write(json.dumps(cl.to_json()) + "\n")


def read_candidate_lists(path) -> List[CandidateList]:
    with open(path, encoding="utf-8") as fh:
        return [CandidateList.from_json(json.loads(line)) for line in fh if line.strip()]


# --- metrics ----------------------------------------------------------------

def rank_of(ranked: Sequence[int], target: int) -> Optional[int]:
    """1-based rank of ``target``, or None when absent."""
    for i, item in enumerate(ranked):
        if item == target:
            return i + 1
    return None


def hr_at_k(rank: int, k: int) -> float:
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank: int, k: int) -> float:
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def aggregate(ranks: Sequence[Optional[int]]) -> Dict[str, float]:
    """Mean metrics over rows; ``None`` ranks are skipped rows."""
    valid = [r for r in ranks if r is not None]
    out: Dict[str, float] = {}
    for k in METRIC_KS:
        out[f"HR@{k}"] = float(np.mean([hr_at_k(r, k) for r in valid])) if valid else 0.0
    for k in (5, 10):
        out[f"NDCG@{k}"] = float(np.mean([ndcg_at_k(r, k) for r in valid])) if valid else 0.0
    out["n_rows"] = len(valid)
    out["skipped_rows"] = len(ranks) - len(valid)
    out["mean_rank"] = float(np.mean(valid)) if valid else float("nan")
    return out


TASK_SETUP = {
    "recommendation": (Behavior.REC_ITEM, "collab"),
    "search": (Behavior.SEARCH_ITEM, "semantic"),
}


def evaluate_rows(
    model: Seq2Seq,
    instructions: Sequence[Sequence[int]],
    lists: Sequence[CandidateList],
    identifiers: Mapping[int, ItemIdentifier],
    vocab: TokenVocabulary,
    *,
    with_behavior: bool = True,
) -> Tuple[Dict[str, Dict[str, float]], List[Optional[int]]]:
    """Score each candidate list under its instruction; returns per-task
    metric blocks and the per-row ranks."""
    if len(instructions) != len(lists):
        raise ValueError("one instruction per candidate list required")
    ranks: List[Optional[int]] = []
    by_task: Dict[str, List[Optional[int]]] = {}
    for ins, cl in zip(instructions, lists):
        behavior, kind = TASK_SETUP[cl.task]
        cands = cl.candidates
        if any(c not in identifiers for c in cands) or cands.count(cl.target) != 1:
            log.warning("user %d %s: candidate list failed integrity checks; row skipped", cl.user, cl.task)
            rank = None
        else:
            ranked = score_candidates(model, ins, behavior if with_behavior else None, cands, identifiers, vocab, kind)
            rank = rank_of([c for c, _ in ranked], cl.target)
        ranks.append(rank)
        by_task.setdefault(cl.task, []).append(rank)
    return {task: aggregate(r) for task, r in sorted(by_task.items())}, ranks


def description_index(descriptions: Sequence[str]) -> Bm25Index:
    return Bm25Index([tokenize_words(d) for d in descriptions])
