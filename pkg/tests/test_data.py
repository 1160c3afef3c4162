import numpy as np
import pytest
import torch

from storyviz.data import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    Story,
    Vocabulary,
    build_discriminative_sets,
    export_pororo_sv,
    generate_shape_stories,
    labels_from_caption,
    load_pororo_sv,
    make_batch,
    parse_caption,
    render_frame,
)
from storyviz.errors import ConfigError, DataIntegrityError, VocabularyError


def test_generation_is_deterministic(session_cfg, corpus):
    again = generate_shape_stories(session_cfg.data, seed=0)
    assert again.checksum() == corpus.checksum()
    assert generate_shape_stories(session_cfg.data, seed=1).checksum() != corpus.checksum()


def test_story_shape_and_ids(corpus, session_cfg):
    assert len(corpus) == 24
    assert corpus.story_ids[0] == "shape-00000"
    for story in corpus:
        assert story.frames.shape == (3, 16, 16, 3)
        assert story.char_labels.shape == (3, 9)
        assert story.frames.dtype == np.float32
        assert -1.0 <= story.frames.min() and story.frames.max() <= 1.0


def test_captions_match_pixels_and_labels(corpus):
    for story in corpus:
        settings = set()
        cast = set()
        for k, caption in enumerate(story.captions):
            setting, placements = parse_caption(caption)
            settings.add(setting)
            cast.update(name for name, _, _ in placements)
            assert 1 <= len(placements) <= 2
            assert len({side for _, _, side in placements}) == len(placements)
            np.testing.assert_array_equal(story.frames[k], render_frame(caption, 16))
            np.testing.assert_array_equal(story.char_labels[k], labels_from_caption(caption))
        assert len(settings) == 1
        assert 1 <= len(cast) <= 3


def test_parse_caption_rejects_other_text():
    assert parse_caption("ruby jumps on the left in the park") == ("park", [("ruby", "jumps", "left")])
    with pytest.raises(DataIntegrityError):
        parse_caption("pororo is eating a cake")


def test_splits_are_disjoint_and_cover(corpus, splits):
    ids = [set(splits[name].story_ids) for name in ("train", "val", "test")]
    assert [len(s) for s in ids] == [12, 6, 6]
    assert ids[0].isdisjoint(ids[1]) and ids[0].isdisjoint(ids[2]) and ids[1].isdisjoint(ids[2])
    assert set().union(*ids) == set(corpus.story_ids)
    assert all(splits[name].vocab is corpus.vocab for name in splits)


def test_vocabulary_round_trip_and_specials():
    vocab = Vocabulary.build(["Ruby jumps in the park", "moss sits in the sea"])
    assert vocab.itos[:3] == ["<pad>", "<bos>", "<eos>"]
    assert (PAD_ID, BOS_ID, EOS_ID) == (0, 1, 2)
    ids, mask = vocab.encode("ruby jumps in the park", 8)
    assert mask.tolist() == [True] * 5 + [False] * 3
    assert ids[5:].tolist() == [PAD_ID] * 3
    assert vocab.decode(ids) == "ruby jumps in the park"
    assert vocab.decode([BOS_ID] + ids.tolist()) == "ruby jumps in the park"
    with pytest.raises(VocabularyError):
        vocab.encode("ruby flies", 8)
    with pytest.raises(VocabularyError):
        vocab.decode([len(vocab) + 5])


def test_encode_truncates_to_max_len():
    vocab = Vocabulary.build(["a b c d e f"])
    ids, mask = vocab.encode("a b c d e f", 4)
    assert mask.all()
    assert vocab.decode(ids) == "a b c d"


def test_story_invariants():
    frame = np.zeros((1, 16, 16, 3), dtype=np.float32)
    labels = np.zeros((1, 9), dtype=np.uint8)
    with pytest.raises(DataIntegrityError):
        Story("s", frame, ["one", "two"], labels)
    with pytest.raises(DataIntegrityError):
        Story("s", frame, ["   "], labels)
    with pytest.raises(DataIntegrityError):
        Story("s", frame + 2.0, ["fine"], labels)


def test_make_batch_shapes(train_ds):
    batch = make_batch(train_ds, [0, 1, 2])
    assert batch.images.shape == (3, 3, 3, 16, 16)
    assert batch.tokens.shape == (3, 3, 24)
    assert batch.mask.dtype == torch.bool
    assert batch.labels.shape == (3, 3, 9)
    assert batch.story_ids == train_ds.story_ids[:3]
    assert bool(batch.mask.any(dim=-1).all())


def test_export_then_load_is_lossless(tmp_path, splits):
    root = export_pororo_sv(splits, tmp_path / "data")
    loaded = load_pororo_sv(root, "train", image_size=16, max_caption_len=24)
    assert loaded.checksum() == splits["train"].checksum()
    assert loaded.char_names == splits["train"].char_names


def test_load_errors(tmp_path, splits):
    with pytest.raises(DataIntegrityError):
        load_pororo_sv(tmp_path / "nothing", "train")
    root = export_pororo_sv(splits, tmp_path / "data")
    with pytest.raises(ConfigError):
        load_pororo_sv(root, "holdout")
    (root / "splits.json").unlink()
    with pytest.raises(ConfigError):
        load_pororo_sv(root, "train")


def test_load_detects_missing_frames(tmp_path, splits):
    root = export_pororo_sv(splits, tmp_path / "data")
    sid = splits["val"].story_ids[0]
    (root / "frames" / sid / "2.png").unlink()
    with pytest.raises(DataIntegrityError) as e:
        load_pororo_sv(root, "val")
    assert sid in str(e.value)


def test_load_rejects_stray_frame_files(tmp_path, splits):
    root = export_pororo_sv(splits, tmp_path / "data")
    sid = splits["val"].story_ids[0]
    frame_dir = root / "frames" / sid
    (frame_dir / "thumb.png").write_bytes((frame_dir / "0.png").read_bytes())
    with pytest.raises(DataIntegrityError) as e:
        load_pororo_sv(root, "val")
    assert "unexpected frame file thumb.png" in str(e.value)


def test_load_rejects_gaps_in_frame_numbering(tmp_path, splits):
    root = export_pororo_sv(splits, tmp_path / "data")
    sid = splits["val"].story_ids[0]
    frame_dir = root / "frames" / sid
    (frame_dir / "1.png").rename(frame_dir / "5.png")
    with pytest.raises(DataIntegrityError) as e:
        load_pororo_sv(root, "val")
    assert "numbered 0..2" in str(e.value)
    assert sid in str(e.value)


def test_discriminative_sets_match_target_labels(corpus):
    sets, report = build_discriminative_sets(corpus, num_negatives=2, seed=0)
    assert report.total == len(corpus)
    assert report.emitted == len(sets)
    for s in sets:
        target_labels = corpus.get(s.story_id).char_labels[-1]
        assert s.num_candidates == 3
        np.testing.assert_array_equal(s.candidates[s.answer_index], s.target_frame)
        for sid, k in s.negative_refs:
            assert sid != s.story_id
            np.testing.assert_array_equal(corpus.get(sid).char_labels[k], target_labels)


def test_discriminative_sets_skip_when_pool_too_small(corpus):
    sets, report = build_discriminative_sets(corpus, num_negatives=10_000, seed=0)
    assert sets == []
    assert report.skip_rate == 1.0


def test_discriminative_sets_are_seeded(corpus):
    a, _ = build_discriminative_sets(corpus, 2, seed=4)
    b, _ = build_discriminative_sets(corpus, 2, seed=4)
    assert [s.negative_refs for s in a] == [s.negative_refs for s in b]
    assert [s.answer_index for s in a] == [s.answer_index for s in b]
