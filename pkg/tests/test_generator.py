import pytest
import torch

from conftest import tiny_config
from storyviz.data import make_batch
from storyviz.discriminators import ImageDiscriminator, StoryDiscriminator
from storyviz.generator import StoryGenerator, generate_for_dataset, save_story_grid, word_region_attention


def _model(cfg, vocab_size):
    torch.manual_seed(0)
    return StoryGenerator(cfg, vocab_size).eval()


def test_word_region_attention_normalizes_over_words():
    regions = torch.randn(2, 4, 6)
    words = torch.randn(2, 5, 4)
    mask = torch.tensor([[True] * 5, [True, True, False, False, False]])
    context, beta = word_region_attention(regions, words, mask)
    assert context.shape == (2, 4, 6)
    assert beta.shape == (2, 6, 5)
    assert torch.allclose(beta.sum(dim=-1), torch.ones(2, 6), atol=1e-6)
    assert bool((beta[1, :, 2:] == 0).all())
    expected = torch.softmax(regions[0].t() @ words[0].t(), dim=-1) @ words[0]
    assert torch.allclose(context[0], expected.t(), atol=1e-5)


def test_story_shapes_and_range(session_cfg, train_ds):
    model = _model(session_cfg, len(train_ds.vocab))
    batch = make_batch(train_ds, [0, 1])
    out = model(batch.tokens, batch.mask, generator=torch.Generator().manual_seed(0))
    assert out.frames.shape == (2, 3, 3, 16, 16)
    assert out.low_res.shape == (2, 3, 3, 8, 8)
    assert out.frames.min() >= -1.0 and out.frames.max() <= 1.0
    assert out.state.h0.shape == (2, 10)
    assert len(out.details) == 3
    detail = out.details[1]
    assert detail.copy_attention.shape == (2, 4, 24)
    assert detail.word_attention.shape == (2, 64, 24)
    assert torch.allclose(detail.word_attention.sum(dim=-1), torch.ones(2, 64), atol=1e-5)
    padded = ~batch.mask[:, 1]
    assert bool((detail.copy_attention.masked_select(padded.unsqueeze(1).expand_as(detail.copy_attention)) == 0).all())


def test_generation_is_seeded(session_cfg, train_ds):
    model = _model(session_cfg, len(train_ds.vocab))
    batch = make_batch(train_ds, [0, 1])
    a = model(batch.tokens, batch.mask, generator=torch.Generator().manual_seed(3)).frames
    b = model(batch.tokens, batch.mask, generator=torch.Generator().manual_seed(3)).frames
    c = model(batch.tokens, batch.mask, generator=torch.Generator().manual_seed(4)).frames
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_frames_do_not_depend_on_later_captions(session_cfg, train_ds):
    model = _model(session_cfg, len(train_ds.vocab))
    batch = make_batch(train_ds, [0, 1])
    first = model(batch.tokens, batch.mask, generator=torch.Generator().manual_seed(0))
    other = make_batch(train_ds, [2, 3])
    tokens, mask = batch.tokens.clone(), batch.mask.clone()
    tokens[:, 2], mask[:, 2] = other.tokens[:, 2], other.mask[:, 2]
    second = model(tokens, mask, state=first.state, noise=torch.stack([c.noise for c in first.contexts], dim=1))
    assert torch.allclose(first.frames[:, :2], second.frames[:, :2], atol=1e-6)
    assert not torch.allclose(first.frames[:, 2], second.frames[:, 2])


def test_copy_transform_carries_previous_frame(session_cfg, train_ds):
    model = _model(session_cfg, len(train_ds.vocab))
    batch = make_batch(train_ds, [0])
    out = model(batch.tokens, batch.mask, generator=torch.Generator().manual_seed(0))
    ctx = out.contexts[1]
    with_prev = model.generate_frame(ctx, out.details[0].stage2_features).image
    without_prev = model.generate_frame(ctx, model.zero_features(1)).image
    assert torch.allclose(with_prev, out.details[1].image, atol=1e-6)
    assert not torch.allclose(with_prev, without_prev)


def test_generate_for_dataset_restores_mode(session_cfg, val_ds):
    torch.manual_seed(0)
    model = StoryGenerator(session_cfg, len(val_ds.vocab))
    frames = generate_for_dataset(model, val_ds, seed=0, batch_size=4)
    assert frames.shape == (len(val_ds), 3, 3, 16, 16)
    assert model.training
    again = generate_for_dataset(model, val_ds, seed=0, batch_size=4)
    assert torch.equal(frames, again)


def test_save_story_grid(tmp_path):
    fake = torch.rand(2, 3, 3, 16, 16) * 2 - 1
    path = save_story_grid(tmp_path / "grid.png", fake, real=fake)
    assert path.exists()


@pytest.mark.parametrize("size", [16, 32, 64])
def test_frames_match_configured_image_size(tmp_path, train_ds, size):
    cfg = tiny_config(tmp_path, f"data.image_size={size}")
    model = _model(cfg, len(train_ds.vocab))
    batch = make_batch(train_ds, [0, 1])
    with torch.no_grad():
        out = model(batch.tokens, batch.mask, generator=torch.Generator().manual_seed(0))
    assert out.frames.shape == (2, 3, 3, size, size)
    assert out.low_res.shape[-1] == size // 2
    image_disc = ImageDiscriminator(size, 8, cfg.text.sentence_dim, cfg.text.cond_dim, 9).eval()
    story_disc = StoryDiscriminator(size, 8, 3, cfg.text.sentence_dim).eval()
    with torch.no_grad():
        assert image_disc(out.frames[:, 0], out.sentences[:, 0], out.state.h0).prob.shape == (2,)
        assert story_disc(out.frames, out.sentences).shape == (2,)


def test_disabled_copy_transform_ignores_previous_frame(tmp_path, train_ds):
    cfg = tiny_config(tmp_path, "generator.use_copy_transform=false")
    model = _model(cfg, len(train_ds.vocab))
    assert model.copy_transform is None
    assert not any(name.startswith("copy_transform") for name, _ in model.named_parameters())
    batch = make_batch(train_ds, [0])
    with torch.no_grad():
        out = model(batch.tokens, batch.mask, generator=torch.Generator().manual_seed(0))
        ctx = out.contexts[1]
        with_prev = model.generate_frame(ctx, out.details[0].stage2_features)
        with_zero = model.generate_frame(ctx, model.zero_features(1))
        with_noise = model.generate_frame(ctx, torch.randn_like(out.details[0].stage2_features))
    assert torch.equal(with_prev.image, with_zero.image)
    assert torch.equal(with_prev.image, with_noise.image)
    assert torch.allclose(with_prev.image, out.details[1].image, atol=1e-6)
    assert bool((with_prev.copy_attention == 0).all())
