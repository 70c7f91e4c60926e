from __future__ import annotations

import dataclasses

import numpy as np
import pytest
import torch

from diffcap.config import ModelConfig
from diffcap.errors import ConfigError
from diffcap.model import (
    AdaptationModel,
    CaptioningModel,
    Captioner,
    TextEncoder,
    VisionEncoder,
    attention_heatmaps,
    caption_forward,
    encode_pair,
    encode_text,
    export_attention,
    greedy_decode,
    images_to_tensor,
    tokens_to_tensor,
)
from diffcap.objectives import pool_pair
from diffcap.text import BOS_ID, EOS_ID, PAD_ID, TokenSequence


def _config(tiny_model_config: ModelConfig, **changes: object) -> ModelConfig:
    return dataclasses.replace(tiny_model_config, vocab_size=10, **changes)


def _images(batch: int, size: int = 16, seed: int = 0) -> torch.Tensor:
    generator = torch.Generator().manual_seed(seed)
    return torch.rand(batch, 3, size, size, generator=generator)


def _sequence(content: list[int], max_len: int) -> TokenSequence:
    ids = [BOS_ID, *content, EOS_ID]
    length = len(ids)
    return TokenSequence(ids=tuple(ids + [PAD_ID] * (max_len - length)), length=length)


def test_vision_encoder_output_shape(tiny_model_config: ModelConfig) -> None:
    config = _config(tiny_model_config)
    vision = VisionEncoder(config).eval()

    output = vision(_images(3), _images(3, seed=1))

    assert output.shape == (3, 2 * (config.n_patches + 1), config.d_text)


def test_patchify_prepends_class_token_in_row_major_order(tiny_model_config: ModelConfig) -> None:
    vision = VisionEncoder(_config(tiny_model_config)).eval()
    images = _images(1)
    edited = images.clone()
    # Top-right patch of the 2x2 grid.
    edited[:, :, :8, 8:] = 1.0

    with torch.no_grad():
        tokens = vision.patchify(images)
        changed = vision.patchify(edited)

    assert tokens.shape == (1, 5, 8)
    torch.testing.assert_close(tokens[0, 0], vision.class_embedding + vision.pos_embedding[0])
    moved = [i for i in range(5) if not torch.allclose(tokens[0, i], changed[0, i])]
    assert moved == [2]


def test_vision_encoder_rejects_wrong_image_size(tiny_model_config: ModelConfig) -> None:
    vision = VisionEncoder(_config(tiny_model_config)).eval()

    with pytest.raises(ValueError, match="expected images"):
        vision(_images(1, size=32), _images(1, size=32))


def test_vision_encoder_new_embeddings_start_at_zero(tiny_model_config: ModelConfig) -> None:
    vision = VisionEncoder(_config(tiny_model_config))

    assert torch.count_nonzero(vision.pair_embedding) == 0
    assert torch.count_nonzero(vision.joint_pos_embedding) == 0


def test_without_inter_layers_each_half_depends_on_its_own_image(
    tiny_model_config: ModelConfig,
) -> None:
    config = _config(tiny_model_config, n_inter=0)
    vision = VisionEncoder(config).eval()
    n1 = config.n_patches + 1
    before = _images(2)

    first = vision(before, _images(2, seed=1))
    second = vision(before, _images(2, seed=2))

    torch.testing.assert_close(first[:, :n1], second[:, :n1])
    assert not torch.allclose(first[:, n1:], second[:, n1:])


def test_with_inter_layers_halves_mix(tiny_model_config: ModelConfig) -> None:
    config = _config(tiny_model_config)
    vision = VisionEncoder(config).eval()
    n1 = config.n_patches + 1
    before = _images(2)

    first = vision(before, _images(2, seed=1))
    second = vision(before, _images(2, seed=2))

    assert not torch.allclose(first[:, :n1], second[:, :n1])


def test_pooled_embedding_is_swap_symmetric_at_initialization(
    tiny_model_config: ModelConfig,
) -> None:
    config = _config(tiny_model_config)
    vision = VisionEncoder(config).eval()
    before, after = _images(2), _images(2, seed=1)

    forward = pool_pair(vision(before, after), config.n_patches)
    swapped = pool_pair(vision(after, before), config.n_patches)

    torch.testing.assert_close(forward, swapped, rtol=1e-5, atol=1e-6)


def test_swapping_images_swaps_output_halves_when_pair_is_symmetric(
    tiny_model_config: ModelConfig,
) -> None:
    config = _config(tiny_model_config)
    vision = VisionEncoder(config).eval()
    n1 = config.n_patches + 1
    with torch.no_grad():
        vision.pair_embedding.copy_(torch.randn(1, config.d_image).expand(2, -1))
        half = torch.randn(n1, config.d_image)
        vision.joint_pos_embedding.copy_(torch.cat([half, half], dim=0))
    before, after = _images(2), _images(2, seed=1)

    with torch.no_grad():
        forward = vision(before, after)
        swapped = vision(after, before)

    torch.testing.assert_close(swapped[:, :n1], forward[:, n1:], rtol=1e-5, atol=1e-6)
    torch.testing.assert_close(swapped[:, n1:], forward[:, :n1], rtol=1e-5, atol=1e-6)


def test_swapping_images_changes_output_when_pair_embeddings_differ(
    tiny_model_config: ModelConfig,
) -> None:
    config = _config(tiny_model_config)
    vision = VisionEncoder(config).eval()
    n1 = config.n_patches + 1
    with torch.no_grad():
        vision.pair_embedding.copy_(torch.randn(2, config.d_image))
    before, after = _images(2), _images(2, seed=1)

    with torch.no_grad():
        forward = vision(before, after)
        swapped = vision(after, before)

    assert not torch.allclose(swapped[:, :n1], forward[:, n1:], atol=1e-6)


def test_text_encoder_ignores_padding_content(tiny_model_config: ModelConfig) -> None:
    config = _config(tiny_model_config)
    encoder = TextEncoder(config).eval()
    ids = tokens_to_tensor([_sequence([4, 5], config.max_len)])
    junk = ids.clone()
    # Ids after eos.
    junk[:, 4:] = 6

    with torch.no_grad():
        short = encoder(ids[:, :5])
        full = encoder(ids)
        filled = encoder(junk)

    torch.testing.assert_close(short, full, rtol=1e-5, atol=1e-6)
    torch.testing.assert_close(filled, full, rtol=1e-5, atol=1e-6)
    assert full.shape == (1, config.d_text)


def test_text_encoder_rows_do_not_depend_on_batch_width(tiny_model_config: ModelConfig) -> None:
    config = _config(tiny_model_config)
    encoder = TextEncoder(config).eval()
    short = _sequence([4, 5], config.max_len)
    long = _sequence([4, 5, 6, 7, 8, 9], config.max_len)

    with torch.no_grad():
        alone = encoder(tokens_to_tensor([short])[:, : short.length])
        batched = encode_text(encoder, [short, long])

    torch.testing.assert_close(batched[0], alone[0], rtol=1e-5, atol=1e-6)


def test_text_encoder_uses_given_lengths_over_ids(tiny_model_config: ModelConfig) -> None:
    config = _config(tiny_model_config)
    encoder = TextEncoder(config).eval()
    sequence = _sequence([4, 5], config.max_len)
    ids = tokens_to_tensor([sequence])
    junk = ids.clone()
    junk[:, 4:] = EOS_ID

    with torch.no_grad():
        by_length = encoder(junk, torch.tensor([sequence.length]))
        by_eos = encoder(ids)

    torch.testing.assert_close(by_length, by_eos, rtol=1e-5, atol=1e-6)


def test_text_encoder_rejects_rows_without_eos(tiny_model_config: ModelConfig) -> None:
    config = _config(tiny_model_config)
    encoder = TextEncoder(config).eval()
    ids = torch.tensor([[BOS_ID, 4, 5, PAD_ID]])

    with pytest.raises(ValueError, match="eos"):
        encoder(ids)
    with pytest.raises(ValueError, match="bos and eos"):
        encoder(ids, torch.tensor([9]))


def test_text_encoder_requires_resolved_vocab(tiny_model_config: ModelConfig) -> None:
    with pytest.raises(ConfigError, match="vocab_size"):
        TextEncoder(tiny_model_config)


def test_captioner_is_causal(tiny_model_config: ModelConfig) -> None:
    config = _config(tiny_model_config)
    captioner = Captioner(config).eval()
    visual = torch.randn(1, 2 * (config.n_patches + 1), config.d_text)
    ids = torch.tensor([[BOS_ID, 4, 5, 6, 7, EOS_ID]])
    changed = ids.clone()
    changed[0, 4] = 8

    original = captioner(visual, ids)
    perturbed = captioner(visual, changed)

    assert original.shape == (1, 5, config.vocab_size)
    torch.testing.assert_close(original[:, :4], perturbed[:, :4])
    assert not torch.allclose(original[:, 4], perturbed[:, 4])


def test_greedy_decode_picks_argmax_then_stops_at_eos() -> None:
    script = [5, 6, EOS_ID]

    def next_logits(prefix: torch.Tensor) -> torch.Tensor:
        logits = torch.zeros(prefix.shape[0], 10)
        logits[:, script[prefix.shape[1] - 1]] = 1.0
        return logits

    (sequence,) = greedy_decode(next_logits, batch_size=1, max_steps=6)

    assert sequence.content_ids == (5, 6)
    assert sequence.max_len == 8


def test_greedy_decode_ties_go_to_lowest_allowed_id() -> None:
    def flat_logits(prefix: torch.Tensor) -> torch.Tensor:
        return torch.zeros(prefix.shape[0], 10)

    (sequence,) = greedy_decode(flat_logits, batch_size=1, max_steps=3)

    # pad and bos are masked, so the first maximum is eos.
    assert sequence.content_ids == ()
    assert sequence.length == 2


def test_greedy_decode_appends_eos_when_truncated() -> None:
    def always_seven(prefix: torch.Tensor) -> torch.Tensor:
        logits = torch.zeros(prefix.shape[0], 10)
        logits[:, 7] = 1.0
        return logits

    (sequence,) = greedy_decode(always_seven, batch_size=1, max_steps=3)

    assert sequence.ids == (BOS_ID, 7, 7, 7, EOS_ID)


def test_captioner_generate_rejects_steps_beyond_max_len(tiny_model_config: ModelConfig) -> None:
    config = _config(tiny_model_config)
    captioner = Captioner(config).eval()

    with pytest.raises(ValueError, match="max_len"):
        captioner.generate(torch.randn(1, 10, config.d_text), config.max_len + 1)


def test_caption_model_generate_returns_one_sequence_per_pair(
    tiny_model_config: ModelConfig,
) -> None:
    model = CaptioningModel(_config(tiny_model_config)).eval()

    sequences = model.generate(_images(3), _images(3, seed=1), max_steps=4)

    assert len(sequences) == 3
    assert all(sequence.max_len == 6 for sequence in sequences)


def test_adaptation_model_temperature_init_and_clamp(tiny_model_config: ModelConfig) -> None:
    model = AdaptationModel(_config(tiny_model_config))

    assert float(model.log_tau.exp()) == pytest.approx(0.07, rel=1e-6)
    with torch.no_grad():
        model.log_tau.fill_(10.0)
    model.clamp_temperature()
    assert float(model.log_tau.exp()) == pytest.approx(100.0, rel=1e-5)


def test_export_attention_rows_sum_to_one(tiny_model_config: ModelConfig) -> None:
    config = _config(tiny_model_config)
    vision = VisionEncoder(config)

    maps = export_attention(vision, _images(1), _images(1, seed=1))
    heatmaps = attention_heatmaps(maps)

    assert vision.training
    assert len(maps.intra_before) == config.n_intra
    assert maps.inter[0].shape == (config.heads, 2 * (config.n_patches + 1), 2 * (config.n_patches + 1))
    for weights in (*maps.intra_before, *maps.intra_after, *maps.inter):
        np.testing.assert_allclose(weights.sum(axis=-1), 1.0, atol=1e-6)
    first, second = heatmaps["inter"][0]
    assert first.shape == second.shape == (config.grid_size, config.grid_size)


def test_images_to_tensor_channels_first() -> None:
    images = [np.zeros((4, 4, 3), dtype=np.float32), np.ones((4, 4, 3), dtype=np.float32)]

    tensor = images_to_tensor(images)

    assert tensor.shape == (2, 3, 4, 4)
    assert float(tensor[1].min()) == 1.0


def test_networks_pass_gradcheck(tiny_model_config: ModelConfig) -> None:
    config = _config(tiny_model_config, d_image=4, d_text=4, heads=1, max_len=5)
    torch.manual_seed(0)
    vision = VisionEncoder(config).double().eval()
    encoder = TextEncoder(config).double().eval()
    captioner = Captioner(config).double().eval()
    n_tokens = 2 * (config.n_patches + 1)
    weights = torch.randn(n_tokens, config.d_text, dtype=torch.float64)
    before = torch.rand(1, 3, 16, 16, dtype=torch.float64, requires_grad=True)
    after = torch.rand(1, 3, 16, 16, dtype=torch.float64)
    sequences = [_sequence([4, 5], config.max_len)]
    ids = tokens_to_tensor(sequences)

    def vision_loss(images: torch.Tensor) -> torch.Tensor:
        return (encode_pair(vision, images, after) * weights).sum()

    def text_loss(pos_embedding: torch.Tensor) -> torch.Tensor:
        output = torch.func.functional_call(encoder, {"pos_embedding": pos_embedding}, (ids,))
        return (output * weights[0]).sum()

    visual = torch.randn(1, n_tokens, config.d_text, dtype=torch.float64, requires_grad=True)

    def caption_loss(visual_seq: torch.Tensor) -> torch.Tensor:
        return caption_forward(captioner, visual_seq, sequences).logsumexp(dim=-1).sum()

    pos_embedding = encoder.pos_embedding.detach().clone().requires_grad_(True)
    assert torch.autograd.gradcheck(vision_loss, (before,), eps=1e-6, atol=1e-4, rtol=1e-4)
    assert torch.autograd.gradcheck(text_loss, (pos_embedding,), eps=1e-6, atol=1e-4, rtol=1e-4)
    assert torch.autograd.gradcheck(caption_loss, (visual,), eps=1e-6, atol=1e-4, rtol=1e-4)
    assert encode_text(encoder, sequences).shape == (1, config.d_text)
