"""Token vocabulary, behavior-aware identifiers, collision rate and the prefix
trie that drives constrained decoding."""
from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Set, Tuple, Union

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, UNK)


class Behavior(str, Enum):
    REC_ITEM = "R_I"
    SEARCH_QUERY = "S_Q"
    SEARCH_ITEM = "S_I"

    @property
    def token(self) -> str:
        return f"<{self.value}>"

    @property
    def is_item(self) -> bool:
        return self is not Behavior.SEARCH_QUERY


BEHAVIOR_TOKENS = tuple(b.token for b in Behavior)

# code-token prefixes: shared levels, semantic-specific levels, collaborative-specific levels
SHARED, SEMANTIC, COLLAB = "M", "S", "R"


def code_token(family: str, level: int, index: int) -> str:
    """``code_token("M", 1, 23) == "<M1_23>"``; levels are 1-based."""
    return f"<{family}{level}_{index}>"


@dataclass(frozen=True)
class ItemIdentifier:
    item_id: int
    shared: Tuple[int, ...]
    semantic: Tuple[int, ...]
    collab: Tuple[int, ...]

    def __post_init__(self):
        if len(self.semantic) != len(self.collab):
            raise ValueError("semantic and collaborative specific codes must have equal length")

    @property
    def semantic_codes(self) -> Tuple[int, ...]:
        return self.shared + self.semantic

    @property
    def collab_codes(self) -> Tuple[int, ...]:
        return self.shared + self.collab

    @property
    def semantic_tokens(self) -> List[str]:
        return [code_token(SHARED, i + 1, c) for i, c in enumerate(self.shared)] + [
            code_token(SEMANTIC, i + 1, c) for i, c in enumerate(self.semantic)
        ]

    @property
    def collab_tokens(self) -> List[str]:
        return [code_token(SHARED, i + 1, c) for i, c in enumerate(self.shared)] + [
            code_token(COLLAB, i + 1, c) for i, c in enumerate(self.collab)
        ]

    def tokens(self, kind: str) -> List[str]:
        if kind == "semantic":
            return self.semantic_tokens
        if kind == "collab":
            return self.collab_tokens
        raise ValueError(f"unknown identifier kind {kind!r}")

    def to_json(self) -> dict:
        return {
            "item": self.item_id,
            "shared": list(self.shared),
            "semantic": list(self.semantic),
            "collab": list(self.collab),
        }

    @classmethod
    def from_json(cls, rec: dict) -> "ItemIdentifier":
        return cls(int(rec["item"]), tuple(rec["shared"]), tuple(rec["semantic"]), tuple(rec["collab"]))


def write_identifiers(path, identifiers: Iterable[ItemIdentifier]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ident in identifiers:
            fh.write(json.dumps(ident.to_json()) + "\n")


def read_identifiers(path) -> List[ItemIdentifier]:
    with open(path, encoding="utf-8") as fh:
        return [ItemIdentifier.from_json(json.loads(line)) for line in fh if line.strip()]


def tokenize_words(text: str) -> List[str]:
    return text.lower().split()


class TokenVocabulary:
    """Bijective token <-> id map.

    Ids are assigned in a fixed order: special tokens, behavior tokens, shared
    code tokens, semantic then collaborative specific code tokens, then words
    in the order given.
    """

    def __init__(self, tokens: Sequence[Tuple[str, str]]):
        self._tokens: List[str] = []
        self._families: List[str] = []
        self._ids: Dict[str, int] = {}
        for token, family in tokens:
            if token in self._ids:
                raise ValueError(f"duplicate token {token!r}")
            self._ids[token] = len(self._tokens)
            self._tokens.append(token)
            self._families.append(family)

    @classmethod
    def build(
        cls, shared_levels: int, specific_levels: int, codebook_size: int, words: Iterable[str] = ()
    ) -> "TokenVocabulary":
        entries = [(t, "special") for t in SPECIAL_TOKENS]
        entries += [(t, "behavior") for t in BEHAVIOR_TOKENS]
        for family, levels, tag in (
            (SHARED, shared_levels, "shared"),
            (SEMANTIC, specific_levels, "semantic"),
            (COLLAB, specific_levels, "collab"),
        ):
            for level in range(1, levels + 1):
                entries += [(code_token(family, level, k), tag) for k in range(codebook_size)]
        reserved = {t for t, _ in entries}
        seen: Set[str] = set()
        for w in words:
            if w not in reserved and w not in seen:
                seen.add(w)
                entries.append((w, "word"))
        return cls(entries)

    def __len__(self) -> int:
        return len(self._tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._ids

    @property
    def pad_id(self) -> int:
        return self._ids[PAD]

    @property
    def bos_id(self) -> int:
        return self._ids[BOS]

    @property
    def eos_id(self) -> int:
        return self._ids[EOS]

    @property
    def unk_id(self) -> int:
        return self._ids[UNK]

    def id_of(self, token: str) -> int:
        return self._ids[token]

    def token_of(self, idx: int) -> str:
        return self._tokens[idx]

    def family(self, token: str) -> str:
        return self._families[self._ids[token]]

    def encode(self, tokens: Iterable[str], *, strict: bool = True) -> List[int]:
        """Map tokens to ids; unknown tokens raise when ``strict`` and map to
        ``<unk>`` otherwise. Code tokens must always be known."""
        out = []
        for t in tokens:
            idx = self._ids.get(t)
            if idx is None:
                if strict or t.startswith("<"):
                    raise KeyError(f"token {t!r} not in vocabulary")
                idx = self.unk_id
            out.append(idx)
        return out

    def decode(self, ids: Iterable[int]) -> List[str]:
        return [self._tokens[i] for i in ids]

    def encode_text(self, text: str) -> List[int]:
        return self.encode(tokenize_words(text), strict=False)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for i, (t, f) in enumerate(zip(self._tokens, self._families)):
                fh.write(json.dumps({"token": t, "id": i, "family": f}) + "\n")

    @classmethod
    def load(cls, path) -> "TokenVocabulary":
        with open(path, encoding="utf-8") as fh:
            recs = [json.loads(line) for line in fh if line.strip()]
        recs.sort(key=lambda r: r["id"])
        if [r["id"] for r in recs] != list(range(len(recs))):
            raise ValueError(f"{path}: token ids are not contiguous")
        return cls([(r["token"], r["family"]) for r in recs])


Payload = Union[ItemIdentifier, Sequence[str]]


def behavior_identifier(behavior: Behavior, payload: Payload, *, with_behavior: bool = True) -> List[str]:
    """Render one interaction as tokens.

    Recommendation clicks use the collaborative identifier, search clicks the
    semantic identifier, queries their words.
    """
    behavior = Behavior(behavior)
    if behavior.is_item:
        if not isinstance(payload, ItemIdentifier):
            raise TypeError(f"{behavior.token} needs an item identifier, got {type(payload).__name__}")
        body = payload.collab_tokens if behavior is Behavior.REC_ITEM else payload.semantic_tokens
    else:
        if isinstance(payload, (ItemIdentifier, str)):
            raise TypeError(f"{behavior.token} needs a word sequence, got {type(payload).__name__}")
        body = list(payload)
    return ([behavior.token] if with_behavior else []) + body


def collision_rate(identifiers: Sequence[Sequence]) -> float:
    """``1 - unique identifiers / items`` for one identifier per unique item."""
    if not identifiers:
        raise ValueError("collision rate of an empty identifier list is undefined")
    unique = {tuple(x) for x in identifiers}
    return 1.0 - len(unique) / len(identifiers)


class _Node:
    __slots__ = ("children", "items")

    def __init__(self):
        self.children: Dict[int, "_Node"] = {}
        self.items: Set[int] = set()


class IdentifierTrie:
    """Prefix tree over identifier token-id sequences.

    Terminal nodes carry the item ids whose identifier ends there (more than
    one on a collision).
    """

    def __init__(self):
        self.root = _Node()
        self._n_sequences = 0

    @classmethod
    def from_identifiers(
        cls, identifiers: Iterable[ItemIdentifier], vocab: TokenVocabulary, kind: str
    ) -> "IdentifierTrie":
        trie = cls()
        for ident in identifiers:
            trie.insert(vocab.encode(ident.tokens(kind)), ident.item_id)
        return trie

    def insert(self, sequence: Sequence[int], item_id: int) -> None:
        node = self.root
        for tok in sequence:
            node = node.children.setdefault(int(tok), _Node())
        if not node.items:
            self._n_sequences += 1
        node.items.add(int(item_id))

    def _walk(self, prefix: Sequence[int]) -> Optional[_Node]:
        node = self.root
        for tok in prefix:
            node = node.children.get(int(tok))
            if node is None:
                return None
        return node

    def allowed_next(self, prefix: Sequence[int] = ()) -> Set[int]:
        """Children of the prefix node; empty for an unreachable prefix."""
        node = self._walk(prefix)
        return set(node.children) if node is not None else set()

    def is_terminal(self, sequence: Sequence[int]) -> bool:
        node = self._walk(sequence)
        return node is not None and bool(node.items)

    def items_at(self, sequence: Sequence[int]) -> FrozenSet[int]:
        node = self._walk(sequence)
        return frozenset(node.items) if node is not None else frozenset()

    def __len__(self) -> int:
        """Number of distinct terminal sequences."""
        return self._n_sequences

    def __bool__(self) -> bool:
        return self._n_sequences > 0

    def paths(self) -> Iterator[Tuple[Tuple[int, ...], FrozenSet[int]]]:
        stack: List[Tuple[Tuple[int, ...], _Node]] = [((), self.root)]
        while stack:
            prefix, node = stack.pop()
            if node.items:
                yield prefix, frozenset(node.items)
            for tok in sorted(node.children, reverse=True):
                stack.append((prefix + (tok,), node.children[tok]))
