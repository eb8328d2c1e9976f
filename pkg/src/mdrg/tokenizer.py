"""Byte-level BPE tokenizer with the reserved control tokens of the dialogue protocol.

Ids 0..3 are the control tokens [SEP], [DST], [EOS], [PAD], in that order.
Ids 4..259 are the 256 raw bytes, so every string is encodable and encoding is
total. Ids 260+ are learned merges. Control ids are never produced from raw
text: merges only ever combine byte/merge tokens.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Iterator

SPECIAL_TOKENS = ("[SEP]", "[DST]", "[EOS]", "[PAD]")
SEP, DST, EOS, PAD = 0, 1, 2, 3
N_SPECIAL = len(SPECIAL_TOKENS)
ALPHABET_SIZE = 256
BASE_VOCAB = N_SPECIAL + ALPHABET_SIZE

DEFAULT_VOCAB_SIZE = 512


class TokenizerError(ValueError):
    pass


@dataclass
class Vocab:
    """Immutable after training; safe to share across threads."""

    merges: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self._token_bytes: dict[int, bytes] = {
            N_SPECIAL + b: bytes([b]) for b in range(ALPHABET_SIZE)
        }
        self._ranks: dict[tuple[int, int], int] = {}
        for rank, (a, b) in enumerate(self.merges):
            new_id = BASE_VOCAB + rank
            self._token_bytes[new_id] = self._token_bytes[a] + self._token_bytes[b]
            self._ranks[(a, b)] = rank

    @property
    def size(self) -> int:
        return BASE_VOCAB + len(self.merges)

    def token_bytes(self, token_id: int) -> bytes:
        return self._token_bytes[token_id]

    def encode(self, text: str) -> list[int]:
        """Byte-split then apply merges in training order. Never emits ids < 4."""
        ids = [N_SPECIAL + b for b in text.encode("utf-8")]
        return self._apply_merges(ids)

    def _apply_merges(self, ids: list[int]) -> list[int]:
        if len(ids) < 2 or not self.merges:
            return ids
        while True:
            best_rank = None
            for pair in zip(ids, ids[1:]):
                rank = self._ranks.get(pair)
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
            if best_rank is None:
                return ids
            a, b = self.merges[best_rank]
            ids = _merge_pass(ids, a, b, BASE_VOCAB + best_rank)

    def decode(self, ids: Iterable[int]) -> str:
        """Control ids render as bracketed markers; [PAD] renders empty."""
        out: list[str] = []
        buf = bytearray()
        for i in ids:
            if i < 0 or i >= self.size:
                raise TokenizerError(f"token id {i} out of range for vocab of size {self.size}")
            if i < N_SPECIAL:
                if buf:
                    out.append(buf.decode("utf-8", errors="replace"))
                    buf = bytearray()
                if i != PAD:
                    out.append(SPECIAL_TOKENS[i])
            else:
                buf += self._token_bytes[i]
        if buf:
            out.append(buf.decode("utf-8", errors="replace"))
        return "".join(out)

    def to_json(self) -> str:
        doc = {
            "version": 1,
            "specials": list(SPECIAL_TOKENS),
            "alphabet_size": ALPHABET_SIZE,
            "merges": [[a, b] for a, b in self.merges],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        doc = json.loads(text)
        if doc.get("version") != 1:
            raise TokenizerError(f"unsupported vocab file version {doc.get('version')!r}")
        if doc.get("alphabet_size") != ALPHABET_SIZE:
            raise TokenizerError("vocab file alphabet size mismatch")
        if tuple(doc.get("specials", ())) != SPECIAL_TOKENS:
            raise TokenizerError("vocab file specials mismatch")
        merges = [(int(a), int(b)) for a, b in doc["merges"]]
        return cls(merges=merges)

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(f.read())


def _merge_pass(ids: list[int], a: int, b: int, new_id: int) -> list[int]:
    """Replace every left-to-right occurrence of the adjacent pair (a, b)."""
    out: list[int] = []
    i = 0
    n = len(ids)
    while i < n:
        if i + 1 < n and ids[i] == a and ids[i + 1] == b:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


def train_vocab(corpus: Iterable[str], target_size: int = DEFAULT_VOCAB_SIZE) -> Vocab:
    """Greedy pair-merge training until target_size or no pair occurs >= 2 times.

    Deterministic given corpus content: count ties break on the lexicographically
    smallest (left bytes, right bytes) pair.
    """
    if target_size < BASE_VOCAB:
        raise TokenizerError(
            f"target_size {target_size} below minimum {BASE_VOCAB} (alphabet + specials)"
        )
    # Collapse duplicate lines; merges never cross line boundaries.
    line_counts: dict[tuple[int, ...], int] = {}
    n_lines = 0
    for line in corpus:
        n_lines += 1
        key = tuple(N_SPECIAL + b for b in line.encode("utf-8"))
        line_counts[key] = line_counts.get(key, 0) + 1
    if n_lines == 0:
        raise TokenizerError("cannot train a vocabulary on an empty corpus")

    seqs = [list(k) for k in line_counts]
    counts = list(line_counts.values())
    vocab = Vocab()
    token_bytes = dict(vocab._token_bytes)

    merges: list[tuple[int, int]] = []
    while BASE_VOCAB + len(merges) < target_size:
        pair_counts: dict[tuple[int, int], int] = {}
        for seq, c in zip(seqs, counts):
            for pair in zip(seq, seq[1:]):
                pair_counts[pair] = pair_counts.get(pair, 0) + c
        if not pair_counts:
            break
        best = max(
            pair_counts.items(),
            key=lambda kv: (kv[1], _pair_sort_key(kv[0], token_bytes)),
        )
        (a, b), count = best
        if count < 2:
            break
        new_id = BASE_VOCAB + len(merges)
        merges.append((a, b))
        token_bytes[new_id] = token_bytes[a] + token_bytes[b]
        seqs = [_merge_pass(seq, a, b, new_id) for seq in seqs]

    return Vocab(merges=merges)


def _pair_sort_key(pair: tuple[int, int], token_bytes: dict[int, bytes]):
    # max() keeps the *largest* key, so invert: smaller byte strings must win ties.
    a, b = pair
    return (_NegatedBytes(token_bytes[a]), _NegatedBytes(token_bytes[b]))


class _NegatedBytes:
    """Orders bytes in reverse so max() selects the lexicographically smallest."""

    __slots__ = ("value",)

    def __init__(self, value: bytes) -> None:
        self.value = value

    def __lt__(self, other: "_NegatedBytes") -> bool:
        return self.value > other.value

    def __eq__(self, other: object) -> bool:
        return isinstance(other, _NegatedBytes) and self.value == other.value


def iter_lines(path: str) -> Iterator[str]:
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            yield line.rstrip("\n")
