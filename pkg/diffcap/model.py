"""Differentiable networks.

- ``VisionEncoder``: paired-image encoder. Each image is patchified and run
  through the intra stage on its own; the two outputs are tagged with
  per-image embeddings, concatenated (image 1 first), given a joint
  positional embedding, and run through the inter stage; a final norm and the
  projection ``W`` map every position to ``d_text``.
- ``TextEncoder``: language encoder used only by the adaptation stage; the
  caption embedding is the final-layer output at the eos position.
- ``Captioner``: Transformer encoder over the visual sequence plus a causal
  decoder with cross-attention.

All Transformer blocks are pre-norm (norm -> attention -> residual, norm ->
MLP -> residual) with a 4x GELU MLP. Dropout is active only in training
mode; in evaluation mode every forward pass is deterministic.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from einops import rearrange
from torch import nn

from diffcap.config import ModelConfig
from diffcap.errors import ConfigError
from diffcap.objectives import pool_pair
from diffcap.text import BOS_ID, EOS_ID, PAD_ID, TokenSequence

logger = logging.getLogger(__name__)


PIXEL_MEAN = 0.5
PIXEL_STD = 0.25
INIT_STD = 0.02
INIT_TEMPERATURE = 0.07


class Attention(nn.Module):
    """Multi-head scaled dot-product attention that also returns its weights."""

    def __init__(self, dim: int, heads: int, dropout: float = 0.0) -> None:
        super().__init__()
        if dim % heads != 0:
            raise ConfigError(f"dim ({dim}) must be divisible by heads ({heads})")
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_q = nn.Linear(dim, dim)
        self.to_kv = nn.Linear(dim, 2 * dim)
        self.to_out = nn.Linear(dim, dim)
        self.attn_dropout = nn.Dropout(dropout)

    def forward(
        self,
        x: torch.Tensor,
        *,
        context: torch.Tensor | None = None,
        mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Attend from ``x`` to ``context`` (defaults to ``x``).

        ``mask`` is boolean, broadcastable to ``(batch, heads, queries, keys)``,
        True where attention is allowed. Returned weights are row-stochastic
        and taken before dropout.
        """

        context = x if context is None else context
        q = rearrange(self.to_q(x), "b n (h d) -> b h n d", h=self.heads)
        k, v = (
            rearrange(t, "b n (h d) -> b h n d", h=self.heads)
            for t in self.to_kv(context).chunk(2, dim=-1)
        )

        scores = torch.matmul(q, k.transpose(-1, -2)) * self.scale
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        weights = scores.softmax(dim=-1)

        out = torch.matmul(self.attn_dropout(weights), v)
        out = rearrange(out, "b h n d -> b n (h d)")
        return self.to_out(out), weights


class TransformerBlock(nn.Module):
    """Pre-norm block with optional cross-attention."""

    def __init__(
        self, dim: int, heads: int, dropout: float = 0.0, *, cross_attention: bool = False
    ) -> None:
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, heads, dropout)
        self.norm_cross = nn.LayerNorm(dim) if cross_attention else None
        self.cross_attn = Attention(dim, heads, dropout) if cross_attention else None
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(4 * dim, dim),
            nn.Dropout(dropout),
        )
        self.dropout = nn.Dropout(dropout)

    def forward(
        self,
        x: torch.Tensor,
        *,
        mask: torch.Tensor | None = None,
        context: torch.Tensor | None = None,
        context_mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        h, weights = self.attn(self.norm1(x), mask=mask)
        x = x + self.dropout(h)
        if self.cross_attn is not None:
            if context is None:
                raise ValueError("cross-attention block needs a context")
            h, _ = self.cross_attn(self.norm_cross(x), context=context, mask=context_mask)
            x = x + self.dropout(h)
        x = x + self.mlp(self.norm2(x))
        return x, weights


class TransformerStack(nn.Module):
    def __init__(
        self,
        dim: int,
        depth: int,
        heads: int,
        dropout: float = 0.0,
        *,
        cross_attention: bool = False,
    ) -> None:
        super().__init__()
        self.layers = nn.ModuleList(
            TransformerBlock(dim, heads, dropout, cross_attention=cross_attention)
            for _ in range(depth)
        )

    def forward(
        self,
        x: torch.Tensor,
        *,
        mask: torch.Tensor | None = None,
        context: torch.Tensor | None = None,
        context_mask: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, list[torch.Tensor]]:
        attention: list[torch.Tensor] = []
        for block in self.layers:
            x, weights = block(x, mask=mask, context=context, context_mask=context_mask)
            attention.append(weights)
        return x, attention


def _init_module(module: nn.Module) -> None:
    if isinstance(module, (nn.Linear, nn.Conv2d)):
        nn.init.trunc_normal_(module.weight, mean=0.0, std=INIT_STD)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.trunc_normal_(module.weight, mean=0.0, std=INIT_STD)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


@dataclass(frozen=True, slots=True)
class VisionAttention:
    """Per-layer attention weights of one forward pass.

    ``intra`` tensors are ``(2B, heads, n+1, n+1)`` with image-1 rows first;
    ``inter`` tensors are ``(B, heads, 2(n+1), 2(n+1))``.
    """

    intra: tuple[torch.Tensor, ...]
    inter: tuple[torch.Tensor, ...]


class VisionEncoder(nn.Module):
    """Paired-image encoder F followed by the projection W."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        n = config.n_patches
        d = config.d_image

        self.patch_embed = nn.Conv2d(
            3, d, kernel_size=config.patch_size, stride=config.patch_size, bias=False
        )
        self.class_embedding = nn.Parameter(torch.empty(d))
        self.pos_embedding = nn.Parameter(torch.empty(n + 1, d))
        self.intra = TransformerStack(d, config.n_intra, config.heads, config.dropout)
        # Rows are e_1 and e_2.
        self.pair_embedding = nn.Parameter(torch.zeros(2, d))
        self.joint_pos_embedding = nn.Parameter(torch.zeros(2 * (n + 1), d))
        self.inter = TransformerStack(d, config.n_inter, config.heads, config.dropout)
        self.ln_post = nn.LayerNorm(d)
        self.proj = nn.Parameter(torch.empty(d, config.d_text))

        self.apply(_init_module)
        nn.init.trunc_normal_(self.class_embedding, mean=0.0, std=INIT_STD)
        nn.init.trunc_normal_(self.pos_embedding, mean=0.0, std=INIT_STD)
        nn.init.trunc_normal_(self.proj, mean=0.0, std=INIT_STD)

    def _check_images(self, images: torch.Tensor) -> None:
        size = self.config.image_size
        if images.ndim != 4 or tuple(images.shape[1:]) != (3, size, size):
            raise ValueError(
                f"expected images of shape (B, 3, {size}, {size}), got {tuple(images.shape)}"
            )

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        """Map ``(B, 3, H, W)`` images to ``[x_cls, x_1..x_n] + p_I``, ``(B, n+1, d_image)``."""

        self._check_images(images)
        patches = self.patch_embed((images - PIXEL_MEAN) / PIXEL_STD)
        patches = rearrange(patches, "b d h w -> b (h w) d")
        cls = self.class_embedding.expand(patches.shape[0], 1, -1)
        return torch.cat([cls, patches], dim=1) + self.pos_embedding

    def encode(
        self, before: torch.Tensor, after: torch.Tensor
    ) -> tuple[torch.Tensor, VisionAttention]:
        """Encode a batch of pairs; returns the ``(B, 2(n+1), d_text)`` sequence and attention."""

        self._check_images(before)
        self._check_images(after)
        if before.shape[0] != after.shape[0]:
            raise ValueError("before and after batches differ in size")

        batch = before.shape[0]
        tokens = self.patchify(torch.cat([before, after], dim=0))
        hidden, intra_attention = self.intra(tokens)

        first = hidden[:batch] + self.pair_embedding[0]
        second = hidden[batch:] + self.pair_embedding[1]
        joint = torch.cat([first, second], dim=1) + self.joint_pos_embedding
        joint, inter_attention = self.inter(joint)

        output = self.ln_post(joint) @ self.proj
        return output, VisionAttention(intra=tuple(intra_attention), inter=tuple(inter_attention))

    def forward(self, before: torch.Tensor, after: torch.Tensor) -> torch.Tensor:
        output, _ = self.encode(before, after)
        return output


class TextEncoder(nn.Module):
    """Language encoder G: caption embedding read at the eos position."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        if config.vocab_size < 5:
            raise ConfigError("model.vocab_size must be resolved (>= 5) before building G")
        self.config = config
        self.token_embedding = nn.Embedding(config.vocab_size, config.d_text)
        self.pos_embedding = nn.Parameter(torch.empty(config.max_len, config.d_text))
        self.layers = TransformerStack(
            config.d_text, config.n_text_layers, config.heads, config.dropout
        )
        self.ln_final = nn.LayerNorm(config.d_text)

        self.apply(_init_module)
        nn.init.trunc_normal_(self.pos_embedding, mean=0.0, std=INIT_STD)

    def forward(
        self, token_ids: torch.Tensor, lengths: torch.Tensor | None = None
    ) -> torch.Tensor:
        """Map ``(B, L)`` padded ids to ``(B, d_text)`` embeddings.

        Each row ends at ``lengths`` (bos through eos inclusive); without
        ``lengths`` it ends at the row's first eos. Keys past the end are
        masked out of every attention row, so ids after eos never change the
        result.
        """

        if token_ids.ndim != 2 or token_ids.shape[1] > self.config.max_len:
            raise ValueError(f"expected (B, L<= {self.config.max_len}) ids, got {tuple(token_ids.shape)}")

        positions = torch.arange(token_ids.shape[1], device=token_ids.device)
        if lengths is None:
            is_eos = token_ids == EOS_ID
            if not torch.all(is_eos.any(dim=1)):
                raise ValueError("every sequence needs an eos token")
            lengths = torch.where(is_eos, positions, token_ids.shape[1]).min(dim=1).values + 1
        lengths = lengths.to(device=token_ids.device, dtype=torch.long)
        if lengths.shape != token_ids.shape[:1]:
            raise ValueError(f"expected {token_ids.shape[0]} lengths, got {tuple(lengths.shape)}")
        if torch.any(lengths < 2) or torch.any(lengths > token_ids.shape[1]):
            raise ValueError("every sequence needs at least bos and eos within its width")

        keep = positions[None, :] < lengths[:, None]
        x = self.token_embedding(token_ids) + self.pos_embedding[: token_ids.shape[1]]
        x, _ = self.layers(x, mask=keep[:, None, None, :])
        x = self.ln_final(x)
        eos_index = (lengths - 1).view(-1, 1, 1).expand(-1, 1, x.shape[-1])
        return x.gather(1, eos_index).squeeze(1)


def causal_mask(length: int, device: torch.device | None = None) -> torch.Tensor:
    """Boolean ``(length, length)`` mask, True on and below the diagonal."""

    return torch.ones(length, length, dtype=torch.bool, device=device).tril()


class Captioner(nn.Module):
    """Transformer encoder-decoder trained from scratch on the visual sequence."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        if config.vocab_size < 5:
            raise ConfigError("model.vocab_size must be resolved (>= 5) before building the captioner")
        self.config = config
        d = config.d_text
        self.visual_encoder = TransformerStack(
            d, config.n_caption_encoder, config.heads, config.dropout
        )
        self.visual_norm = nn.LayerNorm(d)
        self.word_embedding = nn.Embedding(config.vocab_size, d)
        self.pos_embedding = nn.Parameter(torch.empty(config.max_len, d))
        self.decoder = TransformerStack(
            d, config.n_caption_decoder, config.heads, config.dropout, cross_attention=True
        )
        self.ln_final = nn.LayerNorm(d)
        self.head = nn.Linear(d, config.vocab_size)

        self.apply(_init_module)
        nn.init.trunc_normal_(self.pos_embedding, mean=0.0, std=INIT_STD)

    def encode_visual(self, visual_seq: torch.Tensor) -> torch.Tensor:
        if visual_seq.ndim != 3 or visual_seq.shape[-1] != self.config.d_text:
            raise ValueError(
                f"expected visual sequence (B, N, {self.config.d_text}), got {tuple(visual_seq.shape)}"
            )
        memory, _ = self.visual_encoder(visual_seq)
        return self.visual_norm(memory)

    def decode_logits(self, memory: torch.Tensor, input_ids: torch.Tensor) -> torch.Tensor:
        """Logits ``(B, T, V)``; row ``t`` sees only ``input_ids[:, :t+1]``."""

        length = input_ids.shape[1]
        if length > self.config.max_len:
            raise ValueError(f"decoder input length {length} exceeds max_len {self.config.max_len}")
        x = self.word_embedding(input_ids) + self.pos_embedding[:length]
        x, _ = self.decoder(x, mask=causal_mask(length, input_ids.device), context=memory)
        return self.head(self.ln_final(x))

    def forward(self, visual_seq: torch.Tensor, target_ids: torch.Tensor) -> torch.Tensor:
        """Teacher-forced logits predicting ``target_ids[:, 1:]``, shape ``(B, L-1, V)``."""

        if target_ids.ndim != 2 or target_ids.shape[0] != visual_seq.shape[0]:
            raise ValueError("target ids must be (B, L) with the visual batch size")
        memory = self.encode_visual(visual_seq)
        return self.decode_logits(memory, target_ids[:, :-1])

    @torch.no_grad()
    def generate(self, visual_seq: torch.Tensor, max_steps: int) -> list[TokenSequence]:
        if max_steps > self.config.max_len:
            raise ValueError(f"max_steps ({max_steps}) must be <= max_len ({self.config.max_len})")
        memory = self.encode_visual(visual_seq)
        return greedy_decode(
            lambda ids: self.decode_logits(memory, ids)[:, -1],
            batch_size=visual_seq.shape[0],
            max_steps=max_steps,
            device=visual_seq.device,
        )


def greedy_decode(
    next_token_logits: Callable[[torch.Tensor], torch.Tensor],
    *,
    batch_size: int,
    max_steps: int,
    device: torch.device | None = None,
) -> list[TokenSequence]:
    """Greedy decoding from bos.

    Parameters
    ----------
    next_token_logits:
        Maps the ``(B, t)`` prefix to ``(B, V)`` logits for the next token.
    batch_size:
        Number of sequences.
    max_steps:
        Maximum number of content tokens.

    Returns
    -------
    list[TokenSequence]
        One sequence per batch row, each padded to ``max_steps + 2``. A
        sequence that hits ``max_steps`` gets eos appended.

    Notes
    -----
    Ties go to the smallest id (``argmax`` returns the first maximum). pad and
    bos are never emitted as content.
    """

    if max_steps < 1:
        raise ValueError(f"max_steps must be >= 1, got {max_steps}")

    prefix = torch.full((batch_size, 1), BOS_ID, dtype=torch.long, device=device)
    finished = torch.zeros(batch_size, dtype=torch.bool, device=device)
    for _ in range(max_steps):
        logits = next_token_logits(prefix).clone()
        logits[:, PAD_ID] = float("-inf")
        logits[:, BOS_ID] = float("-inf")
        next_ids = logits.argmax(dim=-1)
        next_ids = torch.where(finished, torch.full_like(next_ids, PAD_ID), next_ids)
        prefix = torch.cat([prefix, next_ids[:, None]], dim=1)
        finished |= next_ids == EOS_ID
        if bool(finished.all()):
            break

    sequences: list[TokenSequence] = []
    for row in prefix[:, 1:].tolist():
        content: list[int] = []
        for token_id in row:
            if token_id in (EOS_ID, PAD_ID):
                break
            content.append(token_id)
        ids = [BOS_ID, *content[:max_steps], EOS_ID]
        length = len(ids)
        ids.extend([PAD_ID] * (max_steps + 2 - length))
        sequences.append(TokenSequence(ids=tuple(ids), length=length))
    return sequences


class AdaptationModel(nn.Module):
    """Vision encoder, language encoder, and learnable temperature."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.vision = VisionEncoder(config)
        self.text = TextEncoder(config)
        self.log_tau = nn.Parameter(torch.full((1,), math.log(INIT_TEMPERATURE)))

    def embed_pairs(self, before: torch.Tensor, after: torch.Tensor) -> torch.Tensor:
        return pool_pair(self.vision(before, after), self.config.n_patches)

    def embed_texts(self, token_ids: torch.Tensor) -> torch.Tensor:
        return self.text(token_ids)

    def forward(
        self, before: torch.Tensor, after: torch.Tensor, token_ids: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        return self.embed_pairs(before, after), self.embed_texts(token_ids)

    @torch.no_grad()
    def clamp_temperature(self, low: float = 0.01, high: float = 100.0) -> None:
        self.log_tau.clamp_(math.log(low), math.log(high))


class CaptioningModel(nn.Module):
    """Vision encoder (optionally adapted) plus a captioner learned from scratch."""

    def __init__(self, config: ModelConfig) -> None:
        super().__init__()
        self.config = config
        self.vision = VisionEncoder(config)
        self.captioner = Captioner(config)

    def forward(
        self, before: torch.Tensor, after: torch.Tensor, target_ids: torch.Tensor
    ) -> torch.Tensor:
        return self.captioner(self.vision(before, after), target_ids)

    @torch.no_grad()
    def generate(
        self, before: torch.Tensor, after: torch.Tensor, max_steps: int
    ) -> list[TokenSequence]:
        return self.captioner.generate(self.vision(before, after), max_steps)


def images_to_tensor(
    images: Sequence[np.ndarray],
    *,
    device: torch.device | str = "cpu",
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Stack ``H x W x 3`` arrays into a ``(B, 3, H, W)`` tensor."""

    stacked = np.stack([np.asarray(image) for image in images]).transpose(0, 3, 1, 2)
    return torch.as_tensor(np.ascontiguousarray(stacked), dtype=dtype, device=device)


@dataclass(frozen=True, slots=True)
class PairAttentionMaps:
    """Attention of one pair, per stage and layer, heads kept.

    ``intra_before[i]`` / ``intra_after[i]``: ``(heads, n+1, n+1)``.
    ``inter[i]``: ``(heads, 2(n+1), 2(n+1))``.
    """

    intra_before: tuple[np.ndarray, ...]
    intra_after: tuple[np.ndarray, ...]
    inter: tuple[np.ndarray, ...]
    grid_size: int


@torch.no_grad()
def export_attention(
    vision: VisionEncoder, before: torch.Tensor, after: torch.Tensor
) -> PairAttentionMaps:
    """Run one pair through ``vision`` in eval mode and collect its attention."""

    if before.ndim == 3:
        before, after = before.unsqueeze(0), after.unsqueeze(0)
    if before.shape[0] != 1 or after.shape[0] != 1:
        raise ValueError("export_attention takes a single pair")

    was_training = vision.training
    vision.eval()
    try:
        _, attention = vision.encode(before, after)
    finally:
        vision.train(was_training)

    return PairAttentionMaps(
        intra_before=tuple(layer[0].cpu().double().numpy() for layer in attention.intra),
        intra_after=tuple(layer[1].cpu().double().numpy() for layer in attention.intra),
        inter=tuple(layer[0].cpu().double().numpy() for layer in attention.inter),
        grid_size=vision.config.grid_size,
    )


def intra_heatmap(weights: np.ndarray, grid_size: int) -> np.ndarray:
    """Class-token row averaged over heads, as a ``grid x grid`` map."""

    row = weights.mean(axis=0)[0, 1:]
    return row.reshape(grid_size, grid_size)


def inter_heatmaps(weights: np.ndarray, grid_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-image maps from the inter stage.

    The two class-token rows (positions ``0`` and ``n+1``) are averaged over
    heads and over each other; each image's map is that row restricted to the
    image's own patches.
    """

    n = grid_size**2
    mean = weights.mean(axis=0)
    row = (mean[0] + mean[n + 1]) / 2.0
    first = row[1 : n + 1].reshape(grid_size, grid_size)
    second = row[n + 2 : 2 * n + 2].reshape(grid_size, grid_size)
    return first, second


def attention_heatmaps(maps: PairAttentionMaps) -> dict[str, list[tuple[np.ndarray, np.ndarray]]]:
    """Reduce ``maps`` to ``{"intra": [...], "inter": [...]}`` of (before, after) heatmaps."""

    grid = maps.grid_size
    return {
        "intra": [
            (intra_heatmap(first, grid), intra_heatmap(second, grid))
            for first, second in zip(maps.intra_before, maps.intra_after, strict=True)
        ],
        "inter": [inter_heatmaps(layer, grid) for layer in maps.inter],
    }


def tokens_to_tensor(
    sequences: Sequence[TokenSequence], *, device: torch.device | str = "cpu"
) -> torch.Tensor:
    """Stack equal-length token sequences into a ``(B, L)`` long tensor."""

    lengths = {sequence.max_len for sequence in sequences}
    if len(lengths) != 1:
        raise ValueError(f"token sequences must share one length, got {sorted(lengths)}")
    return torch.tensor([sequence.ids for sequence in sequences], dtype=torch.long, device=device)


def encode_pair(vision: VisionEncoder, before: torch.Tensor, after: torch.Tensor) -> torch.Tensor:
    """``(B, 2(n+1), d_text)`` visual sequence for a batch of pairs."""

    return vision(before, after)


def encode_text(encoder: TextEncoder, sequences: Sequence[TokenSequence]) -> torch.Tensor:
    """``(B, d_text)`` caption embeddings for encoded captions."""

    device = next(encoder.parameters()).device
    lengths = torch.tensor([sequence.length for sequence in sequences], dtype=torch.long, device=device)
    return encoder(tokens_to_tensor(sequences, device=device), lengths)


def caption_forward(
    captioner: Captioner, visual_seq: torch.Tensor, targets: Sequence[TokenSequence]
) -> torch.Tensor:
    """Teacher-forced logits ``(B, L-1, V)`` for encoded target captions."""

    return captioner(visual_seq, tokens_to_tensor(targets, device=visual_seq.device))
