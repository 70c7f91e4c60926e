"""Pure metric functions: retrieval ranks and caption scores.

Captions are tokenized with ``diffcap.text.tokenize`` before scoring, so
metric inputs may be raw strings.

Conventions
-----------
- Ranks: the rank of the ground truth is ``1 + (number of candidates with
  strictly greater similarity)``; ties are resolved optimistically.
- BLEU: corpus-level, clipped n-gram precisions, closest reference length for
  the brevity penalty, no smoothing (any zero precision gives 0).
- ROUGE-L: per-item LCS F-measure with ``beta2 = 1.44``, maximized over
  references, averaged over items.
- CIDEr-D: tf-idf n-gram vectors with document frequencies from the reference
  corpus, clipped candidate weights, a gaussian length penalty, averaged over
  n and references, scaled by 10.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from diffcap.errors import NumericalError
from diffcap.text import tokenize

logger = logging.getLogger(__name__)


DIRECTIONS = ("pair_to_text", "text_to_pair")
TIE_RULE = "optimistic: rank = 1 + count of strictly greater similarities"

Ngram = tuple[str, ...]


@dataclass(frozen=True, slots=True)
class RetrievalMetrics:
    """Rank statistics for one retrieval direction.

    ``recall`` maps ``K`` to R@K in percent.
    """

    direction: str
    recall: dict[int, float]
    median_rank: float
    mean_rank: float
    ranks: tuple[int, ...]

    def to_dict(self) -> dict[str, float]:
        summary = {f"R@{k}": value for k, value in sorted(self.recall.items())}
        summary["MdR"] = self.median_rank
        summary["MnR"] = self.mean_rank
        return summary


def ground_truth_ranks(similarities: np.ndarray) -> np.ndarray:
    """Rank of the diagonal entry within each row."""

    diagonal = np.diag(similarities)[:, None]
    return 1 + np.sum(similarities > diagonal, axis=1)


def rank_metrics(
    similarities: np.ndarray, direction: str, ks: Sequence[int] = (1, 5, 10)
) -> RetrievalMetrics:
    """Retrieval metrics from a ``B x B`` similarity matrix.

    Parameters
    ----------
    similarities:
        Rows are image pairs, columns are texts; the diagonal holds the
        ground-truth matches.
    direction:
        ``"pair_to_text"`` ranks texts for each pair (rows);
        ``"text_to_pair"`` ranks pairs for each text (columns).
    ks:
        Cut-offs for R@K.

    Returns
    -------
    RetrievalMetrics
        R@K in percent, median rank (lower middle for even ``B``) and mean rank.

    Raises
    ------
    ValueError
        If the matrix is not square and non-empty, or ``direction`` is unknown.
    NumericalError
        If the matrix contains non-finite values.
    """

    matrix = np.asarray(similarities, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] != matrix.shape[1] or matrix.shape[0] < 1:
        raise ValueError(f"similarity matrix must be square and non-empty, got {matrix.shape}")
    if direction not in DIRECTIONS:
        raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if not np.all(np.isfinite(matrix)):
        raise NumericalError("similarity matrix contains non-finite values")
    if not ks or any(k < 1 for k in ks):
        raise ValueError(f"ks must be positive, got {list(ks)}")

    ranks = ground_truth_ranks(matrix if direction == "pair_to_text" else matrix.T)
    ordered = np.sort(ranks)
    return RetrievalMetrics(
        direction=direction,
        recall={int(k): float(100.0 * np.mean(ranks <= k)) for k in ks},
        median_rank=float(ordered[(len(ordered) - 1) // 2]),
        mean_rank=float(np.mean(ranks)),
        ranks=tuple(int(rank) for rank in ranks),
    )


def _check_corpus(candidates: Sequence[str], references: Sequence[Sequence[str]]) -> None:
    if not candidates:
        raise ValueError("empty corpus")
    if len(candidates) != len(references):
        raise ValueError(
            f"{len(candidates)} candidates but {len(references)} reference lists"
        )
    for index, refs in enumerate(references):
        if not refs:
            raise ValueError(f"item {index} has no references")


def ngrams(tokens: Sequence[str], n: int) -> Counter[Ngram]:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(
    candidates: Sequence[str], references: Sequence[Sequence[str]], max_n: int = 4
) -> float:
    """Corpus-level BLEU-``max_n`` in [0, 1]."""

    _check_corpus(candidates, references)
    if max_n < 1:
        raise ValueError(f"max_n must be >= 1, got {max_n}")

    matches = [0] * max_n
    totals = [0] * max_n
    candidate_length = 0
    reference_length = 0
    for candidate, refs in zip(candidates, references):
        hypothesis = tokenize(candidate)
        ref_tokens = [tokenize(ref) for ref in refs]
        candidate_length += len(hypothesis)
        reference_length += min(
            (len(ref) for ref in ref_tokens), key=lambda length: (abs(length - len(hypothesis)), length)
        )
        for n in range(1, max_n + 1):
            counts = ngrams(hypothesis, n)
            max_ref_counts: Counter[Ngram] = Counter()
            for ref in ref_tokens:
                max_ref_counts |= ngrams(ref, n)
            matches[n - 1] += sum(min(count, max_ref_counts[gram]) for gram, count in counts.items())
            totals[n - 1] += max(0, len(hypothesis) - n + 1)

    if candidate_length == 0 or any(m == 0 for m in matches) or any(t == 0 for t in totals):
        return 0.0

    log_precision = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    if candidate_length > reference_length:
        brevity_penalty = 1.0
    else:
        brevity_penalty = math.exp(1.0 - reference_length / candidate_length)
    return brevity_penalty * math.exp(log_precision)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    previous = [0] * (len(b) + 1)
    for token_a in a:
        current = [0]
        for j, token_b in enumerate(b, start=1):
            if token_a == token_b:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l_item(candidate: str, refs: Sequence[str], beta2: float = 1.44) -> float:
    hypothesis = tokenize(candidate)
    if not hypothesis:
        return 0.0
    best = 0.0
    for ref in refs:
        ref_tokens = tokenize(ref)
        lcs = lcs_length(hypothesis, ref_tokens)
        if lcs == 0:
            continue
        precision = lcs / len(hypothesis)
        recall = lcs / len(ref_tokens)
        best = max(best, (1 + beta2) * precision * recall / (recall + beta2 * precision))
    return best


def rouge_l(
    candidates: Sequence[str], references: Sequence[Sequence[str]], beta2: float = 1.44
) -> float:
    """Mean ROUGE-L F-measure in [0, 1]."""

    _check_corpus(candidates, references)
    return float(
        np.mean([rouge_l_item(c, refs, beta2) for c, refs in zip(candidates, references)])
    )


def _ngram_counts(tokens: Sequence[str], max_n: int) -> Counter[Ngram]:
    counts: Counter[Ngram] = Counter()
    for n in range(1, max_n + 1):
        counts.update(ngrams(tokens, n))
    return counts


def _tfidf(
    counts: Counter[Ngram], document_frequency: Counter[Ngram], log_corpus_size: float, max_n: int
) -> tuple[list[dict[Ngram, float]], np.ndarray]:
    vectors: list[dict[Ngram, float]] = [{} for _ in range(max_n)]
    norms = np.zeros(max_n)
    for gram, term_frequency in counts.items():
        weight = term_frequency * (log_corpus_size - math.log(max(1.0, document_frequency[gram])))
        vectors[len(gram) - 1][gram] = weight
        norms[len(gram) - 1] += weight**2
    return vectors, np.sqrt(norms)


def cider_d_scores(
    candidates: Sequence[str],
    references: Sequence[Sequence[str]],
    *,
    max_n: int = 4,
    sigma: float = 6.0,
) -> np.ndarray:
    """Per-item CIDEr-D scores in [0, 10].

    Raises
    ------
    ValueError
        If the corpus has fewer than two items (idf is degenerate).
    """

    _check_corpus(candidates, references)
    if len(candidates) < 2:
        raise ValueError("CIDEr-D needs a corpus of at least 2 items")

    hypotheses = [tokenize(candidate) for candidate in candidates]
    ref_tokens = [[tokenize(ref) for ref in refs] for refs in references]

    document_frequency: Counter[Ngram] = Counter()
    ref_counts = [[_ngram_counts(ref, max_n) for ref in refs] for refs in ref_tokens]
    for counts_per_ref in ref_counts:
        document_frequency.update(set().union(*counts_per_ref))
    log_corpus_size = math.log(float(len(candidates)))

    scores = np.zeros(len(candidates))
    for index, hypothesis in enumerate(hypotheses):
        vec_hyp, norm_hyp = _tfidf(
            _ngram_counts(hypothesis, max_n), document_frequency, log_corpus_size, max_n
        )
        total = np.zeros(max_n)
        for ref, counts in zip(ref_tokens[index], ref_counts[index]):
            vec_ref, norm_ref = _tfidf(counts, document_frequency, log_corpus_size, max_n)
            delta = float(len(hypothesis) - len(ref))
            penalty = math.exp(-(delta**2) / (2 * sigma**2))
            for n in range(max_n):
                if norm_hyp[n] == 0 or norm_ref[n] == 0:
                    continue
                dot = sum(
                    min(weight, vec_ref[n].get(gram, 0.0)) * vec_ref[n].get(gram, 0.0)
                    for gram, weight in vec_hyp[n].items()
                )
                total[n] += penalty * dot / (norm_hyp[n] * norm_ref[n])
        scores[index] = 10.0 * float(np.mean(total)) / len(ref_tokens[index])

    if logger.isEnabledFor(logging.DEBUG):
        logger.debug("CIDEr-D per-item scores: %s", scores.tolist())
    return scores


def cider_d(
    candidates: Sequence[str],
    references: Sequence[Sequence[str]],
    *,
    max_n: int = 4,
    sigma: float = 6.0,
) -> float:
    """Corpus CIDEr-D: the mean of ``cider_d_scores``."""

    return float(np.mean(cider_d_scores(candidates, references, max_n=max_n, sigma=sigma)))
