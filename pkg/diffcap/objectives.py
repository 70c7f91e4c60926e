"""Training objectives.

- Adaptation: pair embeddings are pooled from the two class-token positions of
  the visual sequence and matched against caption embeddings with a symmetric
  InfoNCE loss, ``L = L_i2t + L_t2i``, each term the batch mean of a softmax
  cross-entropy over cosine similarities scaled by ``1 / tau``.
- Captioning: word-level cross-entropy under teacher forcing, averaged over
  non-pad target tokens.

Everything here is a pure function of its tensor inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from diffcap.errors import NumericalError
from diffcap.text import PAD_ID

logger = logging.getLogger(__name__)


XE_REDUCTION = "mean_over_tokens"


@dataclass(frozen=True, slots=True)
class ContrastiveLossOutput:
    """Total contrastive loss and its two directional components."""

    loss: torch.Tensor
    i2t: torch.Tensor
    t2i: torch.Tensor


def pool_pair(pair_seq: torch.Tensor, n_patches: int | None = None) -> torch.Tensor:
    """Mean of the two class-token positions (``0`` and ``n+1``, 0-based).

    Parameters
    ----------
    pair_seq:
        ``(2(n+1), d)`` or ``(B, 2(n+1), d)``.
    n_patches:
        Patches per image. Inferred from the sequence length when omitted.

    Raises
    ------
    ValueError
        If the sequence is shorter than ``n + 2`` or not of length ``2(n+1)``
        when ``n`` is inferred.
    """

    if pair_seq.ndim not in (2, 3):
        raise ValueError(f"expected a (N, d) or (B, N, d) sequence, got {tuple(pair_seq.shape)}")
    length = pair_seq.shape[-2]
    if n_patches is None:
        if length % 2 != 0 or length < 4:
            raise ValueError(f"cannot infer n from sequence length {length}")
        n_patches = length // 2 - 1
    if length < n_patches + 2:
        raise ValueError(f"sequence length {length} < n + 2 = {n_patches + 2}")

    first = pair_seq[..., 0, :]
    second = pair_seq[..., n_patches + 1, :]
    return (first + second) / 2.0


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last dimension.

    Raises
    ------
    NumericalError
        If either input has a zero vector.
    """

    a_norm = a.norm(dim=-1)
    b_norm = b.norm(dim=-1)
    if bool((a_norm == 0).any()) or bool((b_norm == 0).any()):
        raise NumericalError("cosine similarity of a zero vector is undefined")
    return (a * b).sum(dim=-1) / (a_norm * b_norm)


def _normalize_rows(x: torch.Tensor, *, name: str) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise NumericalError(f"{name} contains a zero embedding")
    return x / norms


def similarity_matrix(
    pair_embeddings: torch.Tensor, text_embeddings: torch.Tensor
) -> torch.Tensor:
    """``(B, B)`` cosine similarities; rows are pairs, columns are texts."""

    v = _normalize_rows(pair_embeddings, name="pair embeddings")
    g = _normalize_rows(text_embeddings, name="text embeddings")
    return v @ g.T


def contrastive_loss(
    pair_embeddings: torch.Tensor,
    text_embeddings: torch.Tensor,
    log_tau: torch.Tensor | float,
) -> ContrastiveLossOutput:
    """Symmetric image-pair/text contrastive loss.

    Parameters
    ----------
    pair_embeddings:
        ``(B, d)`` pooled pair embeddings ``v``.
    text_embeddings:
        ``(B, d)`` caption embeddings ``g``; row ``i`` matches pair ``i``.
    log_tau:
        Log temperature.

    Returns
    -------
    ContrastiveLossOutput
        ``loss = i2t + t2i``. With ``B == 1`` every term is exactly 0.

    Raises
    ------
    ValueError
        On shape mismatch.
    NumericalError
        On non-finite inputs or zero embeddings.
    """

    if pair_embeddings.ndim != 2 or pair_embeddings.shape != text_embeddings.shape:
        raise ValueError(
            "pair and text embeddings must both be (B, d), got "
            f"{tuple(pair_embeddings.shape)} and {tuple(text_embeddings.shape)}"
        )
    if pair_embeddings.shape[0] < 1:
        raise ValueError("contrastive loss needs B >= 1")

    log_tau = torch.as_tensor(log_tau, dtype=pair_embeddings.dtype, device=pair_embeddings.device)
    for name, tensor in (
        ("pair embeddings", pair_embeddings),
        ("text embeddings", text_embeddings),
        ("log_tau", log_tau),
    ):
        if not bool(torch.isfinite(tensor).all()):
            raise NumericalError(f"{name} contain non-finite values")

    logits = similarity_matrix(pair_embeddings, text_embeddings) * torch.exp(-log_tau.reshape(()))
    labels = torch.arange(logits.shape[0], device=logits.device)
    i2t = F.cross_entropy(logits, labels)
    t2i = F.cross_entropy(logits.T, labels)
    return ContrastiveLossOutput(loss=i2t + t2i, i2t=i2t, t2i=t2i)


def caption_xe_loss(logits: torch.Tensor, target_ids: torch.Tensor) -> torch.Tensor:
    """Teacher-forced cross-entropy, mean over non-pad target tokens.

    Parameters
    ----------
    logits:
        ``(B, L-1, V)`` from the captioner.
    target_ids:
        ``(B, L)`` encoded captions; position ``t`` of ``logits`` predicts
        ``target_ids[:, t + 1]``.
    """

    if logits.ndim != 3 or target_ids.ndim != 2:
        raise ValueError("expected (B, L-1, V) logits and (B, L) targets")
    if logits.shape[:2] != (target_ids.shape[0], target_ids.shape[1] - 1):
        raise ValueError(
            f"logits {tuple(logits.shape)} do not match targets {tuple(target_ids.shape)}"
        )

    targets = target_ids[:, 1:]
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]),
        targets.reshape(-1),
        ignore_index=PAD_ID,
        reduction="mean",
    )
