"""Vocabulary construction and caption tokenization.

Word-level tokenization: text is lowercased and split into runs of letters and
digits, so whitespace and punctuation both act as separators and punctuation
never becomes a token.

Every sequence is encoded to a fixed length ``max_len`` as
``[bos, t_1, ..., t_m, eos, pad, ...]``. The four special tokens occupy ids
0-3; regular tokens start at id 4.

All functions here are pure given an immutable ``Vocabulary``.
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Sequence

from diffcap.errors import VocabularyError

if TYPE_CHECKING:
    from diffcap.manifest import DatasetManifest

logger = logging.getLogger(__name__)


PAD_TOKEN = "<pad>"
BOS_TOKEN = "<bos>"
EOS_TOKEN = "<eos>"
UNK_TOKEN = "<unk>"
SPECIAL_TOKENS = (PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN)

PAD_ID, BOS_ID, EOS_ID, UNK_ID = range(len(SPECIAL_TOKENS))

_TOKEN_PATTERN = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase ``text`` and split it on whitespace and punctuation."""

    return _TOKEN_PATTERN.findall(text.lower())


def normalize(text: str) -> str:
    """Return the canonical single-spaced form of ``text``."""

    return " ".join(tokenize(text))


def describes_no_change(caption: str) -> bool:
    """True when ``caption`` says the two images show the same scene."""

    tokens = set(tokenize(caption))
    if "same" in tokens:
        return True
    if tokens & {"no", "nothing"}:
        return bool(tokens & {"change", "changed", "changes", "difference", "differences"})
    return False


@dataclass(frozen=True, slots=True)
class Vocabulary:
    """Bijective token/id mapping with fixed special ids.

    Parameters
    ----------
    tokens:
        Regular (non-special) tokens in id order; ``tokens[0]`` gets id 4.
    """

    tokens: tuple[str, ...]
    token_to_id: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.tokens:
            raise VocabularyError("vocabulary needs at least one regular token")
        mapping = {token: index for index, token in enumerate(SPECIAL_TOKENS)}
        for offset, token in enumerate(self.tokens):
            if token in mapping:
                raise VocabularyError(f"duplicate or reserved token: {token!r}")
            if not token or tokenize(token) != [token]:
                raise VocabularyError(f"token is not a normalized word: {token!r}")
            mapping[token] = len(SPECIAL_TOKENS) + offset
        object.__setattr__(self, "token_to_id", mapping)

    def __len__(self) -> int:
        return len(SPECIAL_TOKENS) + len(self.tokens)

    @property
    def id_to_token(self) -> tuple[str, ...]:
        return SPECIAL_TOKENS + self.tokens

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)


@dataclass(frozen=True, slots=True)
class TokenSequence:
    """Fixed-length encoding of one caption.

    Parameters
    ----------
    ids:
        Token ids, padded to the full sequence length.
    length:
        Effective length including bos and eos.
    """

    ids: tuple[int, ...]
    length: int

    def __post_init__(self) -> None:
        if not 2 <= self.length <= len(self.ids):
            raise ValueError(f"length {self.length} outside [2, {len(self.ids)}]")
        if self.ids[0] != BOS_ID:
            raise ValueError("ids[0] must be bos")
        if self.ids[self.length - 1] != EOS_ID:
            raise ValueError("ids[length - 1] must be eos")
        if EOS_ID in self.ids[1 : self.length - 1]:
            raise ValueError("eos must appear exactly once")
        if any(token_id != PAD_ID for token_id in self.ids[self.length :]):
            raise ValueError("positions after eos must be pad")
        if PAD_ID in self.ids[: self.length]:
            raise ValueError("pad must not appear before eos")

    @property
    def max_len(self) -> int:
        return len(self.ids)

    @property
    def content_ids(self) -> tuple[int, ...]:
        return self.ids[1 : self.length - 1]


def count_tokens(captions: Iterable[str]) -> Counter[str]:
    counts: Counter[str] = Counter()
    for caption in captions:
        counts.update(tokenize(caption))
    return counts


def build_vocab_from_captions(captions: Iterable[str], *, min_freq: int = 1) -> Vocabulary:
    """Build a vocabulary from raw captions.

    Tokens with frequency ``>= min_freq`` are kept, ordered by frequency
    (descending) then lexicographically, so identical corpora always get
    identical ids.

    Raises
    ------
    VocabularyError
        If the corpus has no tokens, or none survive ``min_freq``.
    """

    if min_freq < 1:
        raise VocabularyError(f"min_freq must be >= 1, got {min_freq}")

    counts = count_tokens(captions)
    if not counts:
        raise VocabularyError("empty caption corpus")

    kept = sorted(
        (token for token, count in counts.items() if count >= min_freq),
        key=lambda token: (-counts[token], token),
    )
    if not kept:
        raise VocabularyError(f"no token reaches min_freq={min_freq}")

    logger.info(
        "Built vocabulary: %s tokens kept of %s (min_freq=%s)", len(kept), len(counts), min_freq
    )
    return Vocabulary(tokens=tuple(kept))


def build_vocab(manifest: DatasetManifest, min_freq: int = 1) -> Vocabulary:
    """Build a vocabulary from the train-split captions of ``manifest``."""

    return build_vocab_from_captions(manifest.captions("train"), min_freq=min_freq)


def encode(vocab: Vocabulary, text: str, max_len: int) -> TokenSequence:
    """Encode ``text`` to a fixed-length token sequence.

    Unknown tokens map to unk; content beyond ``max_len - 2`` tokens is
    truncated before bos/eos are added. Empty text yields ``[bos, eos, pad...]``.
    """

    if max_len < 3:
        raise ValueError(f"max_len must be >= 3, got {max_len}")

    content = [vocab.lookup(token) for token in tokenize(text)][: max_len - 2]
    ids = [BOS_ID, *content, EOS_ID]
    length = len(ids)
    ids.extend([PAD_ID] * (max_len - length))
    return TokenSequence(ids=tuple(ids), length=length)


def decode(vocab: Vocabulary, ids: Sequence[int]) -> str:
    """Decode token ids to text.

    Content tokens are joined with single spaces; decoding stops at the first
    eos. bos and pad ids are skipped.

    Raises
    ------
    VocabularyError
        If an id is outside the vocabulary.
    """

    size = len(vocab)
    words: list[str] = []
    for token_id in ids:
        token_id = int(token_id)
        if not 0 <= token_id < size:
            raise VocabularyError(f"token id {token_id} out of range [0, {size})")
        if token_id == EOS_ID:
            break
        if token_id in (BOS_ID, PAD_ID):
            continue
        words.append(vocab.id_to_token[token_id])
    return " ".join(words)


def save_vocab(vocab: Vocabulary, path: Path) -> Path:
    """Write one regular token per line; line ``k`` (0-based) has id ``k + 4``."""

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(vocab.tokens) + "\n", encoding="utf-8")
    logger.info("Wrote vocabulary (%s ids) to %s", len(vocab), path)
    return path


def load_vocab(path: Path) -> Vocabulary:
    """Read a vocabulary written by ``save_vocab``."""

    if not path.is_file():
        raise FileNotFoundError(f"vocabulary file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    while lines and not lines[-1]:
        lines.pop()
    for line_number, line in enumerate(lines, start=1):
        if not line or line != line.strip():
            raise VocabularyError(f"{path}: line {line_number}: malformed token {line!r}")
    return Vocabulary(tokens=tuple(lines))
