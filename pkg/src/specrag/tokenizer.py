"""Token counting and token-window splitting.

Tokens are always contiguous source spans: whitespace is attached to the
token that follows it (trailing whitespace to the last token), so the spans
of a text partition it exactly.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

from .errors import ConfigError, InvalidChunkParams

# [^\W_] is "alphanumeric" without the underscore that \w includes.
_PIECE = re.compile(r"[^\W_]+|\S")


def _reference_cores(text: str) -> list[tuple[int, int]]:
    return [m.span() for m in _PIECE.finditer(text)]


def _cores_to_spans(text: str, cores: list[tuple[int, int]]) -> list[tuple[int, int]]:
    if not text:
        return []
    if not cores:
        # whitespace-only text still counts as one token
        return [(0, len(text))]
    spans = []
    start = 0
    for _, end in cores:
        spans.append((start, end))
        start = end
    spans[-1] = (spans[-1][0], len(text))
    return spans


@dataclass(frozen=True)
class TokenizerSpec:
    name: str = "reference"
    kind: str = "reference"
    merges: tuple = field(default=(), repr=False)

    def spans(self, text: str) -> list[tuple[int, int]]:
        cores = _reference_cores(text)
        if self.kind == "plugin":
            cores = [sub for core in cores for sub in _bpe_split(self.merges, text[core[0]:core[1]], core[0])]
        return _cores_to_spans(text, cores)


REFERENCE = TokenizerSpec()


def _bpe_split(merges: tuple, piece: str, offset: int) -> list[tuple[int, int]]:
    parts = _bpe_parts(merges, piece)
    out = []
    pos = offset
    for part in parts:
        out.append((pos, pos + len(part)))
        pos += len(part)
    return out


@lru_cache(maxsize=65536)
def _bpe_parts(merges: tuple, piece: str) -> tuple[str, ...]:
    ranks = _ranks(merges)
    parts = list(piece)
    while len(parts) > 1:
        best = None
        for i in range(len(parts) - 1):
            r = ranks.get((parts[i], parts[i + 1]))
            if r is not None and (best is None or r < best[0]):
                best = (r, i)
        if best is None:
            break
        i = best[1]
        parts[i:i + 2] = [parts[i] + parts[i + 1]]
    return tuple(parts)


@lru_cache(maxsize=32)
def _ranks(merges: tuple) -> dict:
    return {pair: i for i, pair in enumerate(merges)}


def load_bpe(path, name: str | None = None) -> TokenizerSpec:
    """Load a character-level BPE plugin from a merges file.

    One merge per line, ``left right``; lines starting with ``#`` are ignored
    (so GPT-2 style ``merges.txt`` files with a version header load as is).
    """
    path = Path(path)
    merges = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ConfigError(f"{path}: bad merge line {line!r}")
        merges.append((parts[0], parts[1]))
    return TokenizerSpec(name=name or f"bpe:{path.name}", kind="plugin", merges=tuple(merges))


def learn_merges(corpus: list[str], num_merges: int) -> list[tuple[str, str]]:
    """Greedy BPE merge learning over the reference pre-tokenization."""
    words = Counter(text[s:e] for text in corpus for s, e in _reference_cores(text))
    vocab = {tuple(w): c for w, c in words.items()}
    merges = []
    for _ in range(num_merges):
        pairs = Counter()
        for sym, c in vocab.items():
            for a, b in zip(sym, sym[1:]):
                pairs[a, b] += c
        if not pairs:
            break
        (a, b), _ = max(pairs.items(), key=lambda kv: (kv[1], kv[0]))
        merges.append((a, b))
        new_vocab = {}
        for sym, c in vocab.items():
            out, i = [], 0
            while i < len(sym):
                if i + 1 < len(sym) and sym[i] == a and sym[i + 1] == b:
                    out.append(a + b)
                    i += 2
                else:
                    out.append(sym[i])
                    i += 1
            new_vocab[tuple(out)] = new_vocab.get(tuple(out), 0) + c
        vocab = new_vocab
    return merges


def get_tokenizer(name: str) -> TokenizerSpec:
    """Resolve ``reference`` or ``bpe:<merges file>``."""
    if name in ("reference", "", None):
        return REFERENCE
    if name.startswith("bpe:"):
        return load_bpe(name[4:], name=name)
    raise ConfigError(f"unknown tokenizer {name!r}")


def count_tokens(tok: TokenizerSpec, text: str) -> int:
    return len(tok.spans(text))


def token_windows(n: int, s: int, l: int) -> list[tuple[int, int]]:
    """Token index ranges ``[start, end)`` of each window."""
    if s <= 0 or l < 0 or l >= s:
        raise InvalidChunkParams(f"need 0 <= l < s, got s={s}, l={l}")
    if n <= s:
        return [(0, n)]
    stride = s - l
    out = []
    start = 0
    while True:
        end = min(start + s, n)
        out.append((start, end))
        if end >= n:
            return out
        start += stride


def split_by_tokens(tok: TokenizerSpec, text: str, s: int, l: int) -> list[str]:
    spans = tok.spans(text)
    windows = token_windows(len(spans), s, l)
    if len(windows) == 1:
        return [text]
    return [text[spans[a][0]:spans[b - 1][1]] for a, b in windows]
