import json
import math

import pytest
import torch

from conftest import tiny_config
from storyviz.config import ClassifierConfig, DamsmConfig
from storyviz.database import RunDatabase
from storyviz.discriminators import char_loss, generator_adv_loss, image_disc_loss, story_disc_loss
from storyviz.errors import CheckpointError, NonFiniteLossError
from storyviz.evaluation import MetricSuite, snapshot_path
from storyviz.evaluation.characters import CharacterClassifier
from storyviz.evaluation.damsm import HDamsm
from storyviz.text_encoder import kl_loss
from storyviz.training import LOSS_LOG, Trainer, load_checkpoint, load_generator


def _trainer(cfg, train_ds, captioner, **kwargs):
    return Trainer(cfg, train_ds, captioner, **kwargs)


def test_one_step_runs_each_update_once_and_generator_twice(cfg, train_ds, frozen_captioner):
    before = frozen_captioner.checksum()
    trainer = _trainer(cfg, train_ds, frozen_captioner)
    record = trainer.training_step()
    assert trainer.counters == {"steps": 1, "g_updates": 2, "d_img_updates": 1, "d_story_updates": 1}
    assert record.step == 1
    for name in ("kl", "g_adv", "dual", "d_img", "d_story", "char"):
        assert math.isfinite(getattr(record, name))
    assert record.dual > 0
    assert frozen_captioner.checksum() == before
    frozen_captioner.verify_frozen()


def test_step_batches_follow_config(cfg, train_ds, frozen_captioner):
    trainer = _trainer(cfg, train_ds, frozen_captioner)
    batches = trainer.sample_batches()
    assert len(batches.image) == 4
    assert batches.frame_index.shape == (4,)
    assert int(batches.frame_index.max()) < 3
    assert len(batches.story) == 2
    assert len(batches.generator) == 2
    assert len(set(batches.story.story_ids)) == 2


def test_logged_losses_can_be_recomputed_from_activations(cfg, train_ds, frozen_captioner):
    trainer = _trainer(cfg, train_ds, frozen_captioner)
    record = trainer.training_step()
    act = trainer.last_activations
    assert float(image_disc_loss(act["real_img"], act["fake_img"])) == pytest.approx(record.d_img, rel=1e-6)
    assert float(story_disc_loss(act["real_story"], act["fake_story"])) == pytest.approx(record.d_story, rel=1e-6)
    assert float(char_loss(act["char_logits"], act["char_labels"])) == pytest.approx(record.char, rel=1e-6)
    assert float(generator_adv_loss(act["img_fake_g"], act["story_fake_g"])) == pytest.approx(record.g_adv, rel=1e-6)
    assert float(kl_loss(act["state"])) == pytest.approx(record.kl, rel=1e-6)


def _generator_grads_match(trainer, batch, include_dual):
    trainer.generator.train()
    trainer.image_disc.train()
    trainer.story_disc.train()
    noise_state = trainer.noise.get_state()
    losses, _ = trainer.generator_losses(batch)
    objective = losses["kl"] + losses["g_adv"] + (losses["dual"] if include_dual else 0.0)
    params = list(trainer.generator.parameters())
    expected = torch.autograd.grad(objective, params, allow_unused=True)
    trainer.noise.set_state(noise_state)
    trainer.update_generator(batch)
    for p, e in zip(params, expected):
        if e is None:
            assert p.grad is None or not bool(p.grad.any())
        elif not torch.allclose(p.grad, e, atol=1e-6, rtol=1e-4):
            return False
    return True


def test_lambda_dual_zero_removes_the_dual_gradient(tmp_path, train_ds, frozen_captioner):
    cfg = tiny_config(tmp_path, "train.lambda_dual=0")
    trainer = _trainer(cfg, train_ds, frozen_captioner)
    batch = trainer.sample_batches().generator[0]
    assert _generator_grads_match(trainer, batch, include_dual=False)


def test_dual_term_reaches_the_generator(cfg, train_ds, frozen_captioner):
    trainer = _trainer(cfg, train_ds, frozen_captioner)
    batch = trainer.sample_batches().generator[0]
    out = trainer.generator(batch.tokens, batch.mask, generator=trainer.noise)
    dual = trainer.dual(out.frames, batch.tokens, batch.mask)
    grads = torch.autograd.grad(dual, list(trainer.generator.stage2.parameters()))
    assert any(bool(g.abs().sum() > 0) for g in grads)


def test_generator_update_leaves_discriminators_alone(cfg, train_ds, frozen_captioner):
    trainer = _trainer(cfg, train_ds, frozen_captioner)
    before = {k: v.clone() for k, v in trainer.image_disc.named_parameters()}
    trainer.generator.train()
    trainer.update_generator(trainer.sample_batches().generator[0])
    for name, param in trainer.image_disc.named_parameters():
        assert torch.equal(param, before[name])
        assert param.requires_grad


def test_learning_rates_decay_on_schedule(tmp_path, train_ds, frozen_captioner):
    cfg = tiny_config(tmp_path, "train.lr_decay_every=1", "train.lr_decay_factor=0.5")
    trainer = _trainer(cfg, train_ds, frozen_captioner)
    assert trainer.lr == pytest.approx(2e-4)
    trainer.end_epoch()
    assert trainer.lr == pytest.approx(1e-4)
    assert trainer.opt_s.param_groups[0]["lr"] == pytest.approx(5e-5)
    trainer.end_epoch()
    assert trainer.lr == pytest.approx(5e-5)


def test_resume_reproduces_the_next_step(tmp_path, train_ds, frozen_captioner):
    cfg = tiny_config(tmp_path)
    first = _trainer(cfg, train_ds, frozen_captioner, run_dir=tmp_path)
    first.training_step()
    path = first.save_checkpoint(tmp_path / "checkpoints" / "mid.pt")
    expected = first.training_step()

    second = _trainer(cfg, train_ds, frozen_captioner)
    second.load_checkpoint(path)
    assert second.counters == {"steps": 1, "g_updates": 2, "d_img_updates": 1, "d_story_updates": 1}
    got = second.training_step()
    for name in ("kl", "g_adv", "dual", "d_img", "d_story", "char"):
        assert getattr(got, name) == pytest.approx(getattr(expected, name), rel=1e-5, abs=1e-7)
    for (name, a), b in zip(first.generator.state_dict().items(), second.generator.state_dict().values()):
        assert torch.allclose(a.double(), b.double(), atol=1e-6), name


def test_checkpoint_errors(tmp_path, train_ds, frozen_captioner):
    cfg = tiny_config(tmp_path)
    trainer = _trainer(cfg, train_ds, frozen_captioner)
    path = trainer.save_checkpoint(tmp_path / "ckpt.pt")

    with pytest.raises(CheckpointError, match="config hash"):
        load_checkpoint(path, "0" * 16)
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "absent.pt")

    broken = tmp_path / "broken.pt"
    broken.write_bytes(b"definitely not a checkpoint")
    with pytest.raises(CheckpointError):
        trainer.load_checkpoint(broken)

    wider = tiny_config(tmp_path, "mart.hidden_size=32")
    with pytest.raises(CheckpointError):
        load_generator(path, wider, len(train_ds.vocab))


def test_failed_restore_leaves_trainer_untouched(tmp_path, train_ds, frozen_captioner):
    cfg = tiny_config(tmp_path)
    trainer = _trainer(cfg, train_ds, frozen_captioner)
    payload = trainer.state()
    payload["generator"] = {k: torch.zeros_like(v) for k, v in payload["generator"].items()}
    payload["counters"] = {"steps": 99, "g_updates": 198, "d_img_updates": 99, "d_story_updates": 99}
    payload["story_disc"] = {}
    torch.save(payload, tmp_path / "partial.pt")
    before = {k: v.clone() for k, v in trainer.generator.state_dict().items()}

    with pytest.raises(CheckpointError, match="could not be restored"):
        trainer.load_checkpoint(tmp_path / "partial.pt")
    assert trainer.counters["steps"] == 0
    for name, value in trainer.generator.state_dict().items():
        assert torch.equal(value, before[name])


def test_non_finite_loss_aborts_with_diagnostic_snapshot(tmp_path, train_ds, frozen_captioner):
    cfg = tiny_config(tmp_path)
    trainer = _trainer(cfg, train_ds, frozen_captioner, run_dir=tmp_path)
    with torch.no_grad():
        trainer.generator.stage1.fc[0].weight.fill_(float("nan"))
    with pytest.raises(NonFiniteLossError) as e:
        trainer.training_step()
    assert e.value.snapshot_path is not None
    assert (tmp_path / "diagnostics").exists()
    assert e.value.step == 0


def test_full_run_writes_logs_checkpoints_and_database(tmp_path, train_ds, val_ds, frozen_captioner):
    cfg = tiny_config(tmp_path)
    torch.manual_seed(0)
    classifier = CharacterClassifier(16, 9, ClassifierConfig(feature_dim=16), train_ds.char_names).freeze()
    db = RunDatabase(tmp_path / "runs.db")
    run_id = db.create_run("tiny", cfg)
    trainer = _trainer(cfg, train_ds, frozen_captioner, val_ds=val_ds, classifier=classifier,
                       run_dir=tmp_path, db=db, run_id=run_id)
    history = trainer.train()

    assert len(history) == 4
    assert trainer.epoch == 2
    lines = (tmp_path / "logs" / LOSS_LOG).read_text().splitlines()
    assert [json.loads(line)["step"] for line in lines] == [1, 2, 3, 4]
    ckpts = tmp_path / "checkpoints"
    for name in ("epoch_001.pt", "epoch_002.pt", "last.pt", "best.pt"):
        assert (ckpts / name).exists()
    assert trainer.best_f1 is not None and 0.0 <= trainer.best_f1 <= 100.0

    assert len(db.get_loss_progress(run_id)) == 4
    best = db.get_best_checkpoint(run_id)
    assert best is not None and best["path"].endswith(".pt")

    model = load_generator(ckpts / "last.pt", cfg, len(train_ds.vocab))
    assert not model.training


def test_max_steps_stops_early(tmp_path, train_ds, frozen_captioner):
    cfg = tiny_config(tmp_path)
    trainer = _trainer(cfg, train_ds, frozen_captioner, run_dir=tmp_path)
    history = trainer.train(max_steps=3)
    assert len(history) == 3
    assert trainer.counters["steps"] == 3
    assert (tmp_path / "checkpoints" / "last.pt").exists()


def test_same_seed_gives_identical_loss_logs(tmp_path, train_ds, frozen_captioner):
    logs = []
    for name in ("a", "b"):
        cfg = tiny_config(tmp_path / name)
        trainer = _trainer(cfg, train_ds, frozen_captioner, run_dir=tmp_path / name)
        for _ in range(3):
            trainer.training_step()
        logs.append((tmp_path / name / "logs" / LOSS_LOG).read_text())
    assert len(logs[0].splitlines()) == 3
    assert logs[0] == logs[1]


def test_gan_training_leaves_metric_models_untouched(tmp_path, train_ds, val_ds, frozen_captioner, corpus):
    torch.manual_seed(0)
    snapshots = tmp_path / "snapshots"
    frozen_captioner.save_snapshot(snapshot_path(snapshots, "captioner"))
    CharacterClassifier(16, 9, ClassifierConfig(feature_dim=16), train_ds.char_names).freeze().save_snapshot(
        snapshot_path(snapshots, "classifier")
    )
    HDamsm(len(corpus.vocab), 16, DamsmConfig(embed_dim=16), corpus.vocab.checksum()).freeze().save_snapshot(
        snapshot_path(snapshots, "damsm")
    )
    suite = MetricSuite(snapshots)
    before = suite.checksums()
    cfg = tiny_config(tmp_path)
    trainer = _trainer(cfg, train_ds, suite.captioner, val_ds=val_ds, classifier=suite.classifier)
    trainer.train()
    assert trainer.counters["steps"] == 4
    assert suite.checksums() == before
    suite.verify()
