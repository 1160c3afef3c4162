"""Adversarial training loop: image disc, story disc, then two generator updates per step."""

import copy
import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch.optim.lr_scheduler import StepLR
from tqdm import tqdm

from .captioner import DualLoss
from .data.story import make_batch
from .discriminators import (
    ImageDiscriminator,
    StoryDiscriminator,
    char_loss,
    generator_adv_loss,
    image_disc_loss,
    story_disc_loss,
)
from .errors import CheckpointError, NonFiniteLossError
from .evaluation.characters import character_scores
from .generator import StoryGenerator, generate_for_dataset
from .text_encoder import kl_loss, load_pretrained_vectors

logger = logging.getLogger(__name__)

LOSS_LOG = "train_losses.jsonl"


@dataclass
class LossRecord:
    step: int
    epoch: int
    kl: float
    g_adv: float
    dual: float
    d_img: float
    d_story: float
    char: float
    lr: float
    lr_d: float

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict())


@dataclass
class StepBatches:
    image: object  # StoryBatch, one sampled frame per story
    frame_index: torch.Tensor  # (B_img,)
    story: object  # StoryBatch
    generator: list  # fresh StoryBatches, one per generator update


def _finite(values):
    return all(math.isfinite(v) for v in values.values())


def load_checkpoint(path, expected_hash=None):
    """Read a training checkpoint; refuses corrupted files and config-hash mismatches."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}")
    required = ("config_hash", "generator", "image_disc", "story_disc", "optimizers", "schedulers", "counters", "rng")
    if not isinstance(payload, dict) or any(k not in payload for k in required):
        raise CheckpointError(f"checkpoint {path} is incomplete or not a storyviz checkpoint")
    if expected_hash is not None and payload["config_hash"] != expected_hash:
        raise CheckpointError(
            f"checkpoint {path} was trained with config hash {payload['config_hash']}, "
            f"current config hash is {expected_hash}"
        )
    return payload


def load_generator(path, cfg, vocab_size):
    """Generator weights from a checkpoint, validated against ``cfg``, in eval mode."""
    payload = load_checkpoint(path, cfg.model_hash())
    model = StoryGenerator(cfg, vocab_size)
    try:
        model.load_state_dict(payload["generator"])
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint {path} does not fit the generator: {e}")
    return model.eval()


class Trainer:
    def __init__(self, cfg, train_ds, captioner, val_ds=None, classifier=None, run_dir=None, db=None, run_id=None):
        self.cfg = cfg
        self.train_ds = train_ds
        self.val_ds = val_ds
        self.classifier = classifier
        self.run_dir = Path(run_dir) if run_dir else None
        self.db = db
        self.run_id = run_id
        tc = cfg.train

        torch.manual_seed(cfg.seed)
        self.generator = StoryGenerator(cfg, len(train_ds.vocab))
        if cfg.text.pretrained_embeddings:
            matrix, _ = load_pretrained_vectors(cfg.text.pretrained_embeddings, train_ds.vocab, cfg.text.word_dim)
            self.generator.text_encoder.set_pretrained(matrix)
        ndf = cfg.discriminator.base_channels
        self.image_disc = ImageDiscriminator(
            cfg.data.image_size, ndf, cfg.text.sentence_dim, cfg.text.cond_dim, len(train_ds.char_names)
        )
        self.story_disc = StoryDiscriminator(cfg.data.image_size, ndf, cfg.data.story_length, cfg.text.sentence_dim)
        self.captioner = captioner
        self.dual = DualLoss(captioner)

        betas = (tc.beta1, tc.beta2)
        self.opt_g = torch.optim.Adam(self.generator.parameters(), lr=tc.lr_g, betas=betas)
        self.opt_i = torch.optim.Adam(self.image_disc.parameters(), lr=tc.lr_d, betas=betas)
        self.opt_s = torch.optim.Adam(self.story_disc.parameters(), lr=tc.lr_d, betas=betas)
        self.schedulers = {
            name: StepLR(opt, step_size=tc.lr_decay_every, gamma=tc.lr_decay_factor)
            for name, opt in (("g", self.opt_g), ("i", self.opt_i), ("s", self.opt_s))
        }

        self.rng = np.random.default_rng(cfg.seed)
        self.noise = torch.Generator().manual_seed(cfg.seed + 1)
        self.counters = {"steps": 0, "g_updates": 0, "d_img_updates": 0, "d_story_updates": 0}
        self.epoch = 0
        self.step_in_epoch = 0
        self.best_f1 = None
        self.history = []
        self.last_activations = {}

    @property
    def steps_per_epoch(self):
        return self.cfg.train.steps_per_epoch or max(1, math.ceil(len(self.train_ds) / self.cfg.train.story_batch_size))

    @property
    def lr(self):
        return self.opt_g.param_groups[0]["lr"]

    # sampling

    def _choose(self, size):
        n = len(self.train_ds)
        return self.rng.choice(n, size=min(size, n), replace=False)

    def sample_batches(self):
        tc = self.cfg.train
        image_idx = self._choose(tc.image_batch_size)
        frame_index = self.rng.integers(0, self.cfg.data.story_length, size=len(image_idx))
        return StepBatches(
            image=make_batch(self.train_ds, image_idx),
            frame_index=torch.from_numpy(frame_index),
            story=make_batch(self.train_ds, self._choose(tc.story_batch_size)),
            generator=[make_batch(self.train_ds, self._choose(tc.story_batch_size)) for _ in range(tc.generator_updates)],
        )

    # one step

    def _abort(self, losses):
        path = None
        if self.run_dir is not None:
            path = self.save_checkpoint(self.run_dir / "diagnostics" / f"step_{self.counters['steps']:06d}.pt")
        logger.error("❌ non-finite loss at step %d: %s", self.counters["steps"], losses)
        raise NonFiniteLossError(self.counters["steps"], losses, str(path) if path else None)

    def _set_disc_grad(self, flag):
        for p in list(self.image_disc.parameters()) + list(self.story_disc.parameters()):
            p.requires_grad_(flag)

    def update_image_disc(self, batch, frame_index):
        tc = self.cfg.train
        rows = torch.arange(len(batch))
        with torch.no_grad():
            out = self.generator(batch.tokens, batch.mask, generator=self.noise)
        fake = out.frames[rows, frame_index]
        real = batch.images[rows, frame_index]
        sentences = out.sentences[rows, frame_index]
        h0 = out.state.h0
        real_out = self.image_disc(real, sentences, h0)
        fake_out = self.image_disc(fake, sentences, h0)
        labels = batch.labels[rows, frame_index]
        d_img = image_disc_loss(real_out.prob, fake_out.prob)
        ch = char_loss(real_out.char_logits, labels)
        values = {"d_img": float(d_img), "char": float(ch)}
        if not _finite(values):
            self._abort(values)
        self.opt_i.zero_grad()
        (d_img + tc.lambda_char * ch).backward()
        self.opt_i.step()
        self.counters["d_img_updates"] += 1
        self.last_activations.update(
            real_img=real_out.prob.detach(), fake_img=fake_out.prob.detach(),
            char_logits=real_out.char_logits.detach(), char_labels=labels,
        )
        return values

    def update_story_disc(self, batch):
        with torch.no_grad():
            out = self.generator(batch.tokens, batch.mask, generator=self.noise)
        real = self.story_disc(batch.images, out.sentences)
        fake = self.story_disc(out.frames, out.sentences)
        d_story = story_disc_loss(real, fake)
        values = {"d_story": float(d_story)}
        if not _finite(values):
            self._abort(values)
        self.opt_s.zero_grad()
        d_story.backward()
        self.opt_s.step()
        self.counters["d_story_updates"] += 1
        self.last_activations.update(real_story=real.detach(), fake_story=fake.detach())
        return values

    def generator_losses(self, batch):
        out = self.generator(batch.tokens, batch.mask, generator=self.noise)
        b, t = out.frames.shape[:2]
        h0 = out.state.h0.unsqueeze(1).expand(b, t, -1).flatten(0, 1)
        img_fake = self.image_disc(out.frames.flatten(0, 1), out.sentences.flatten(0, 1), h0).prob
        story_fake = self.story_disc(out.frames, out.sentences)
        return {
            "kl": kl_loss(out.state),
            "g_adv": generator_adv_loss(img_fake, story_fake),
            "dual": self.dual(out.frames, batch.tokens, batch.mask),
        }, (out, img_fake, story_fake)

    def update_generator(self, batch):
        tc = self.cfg.train
        self._set_disc_grad(False)
        try:
            losses, (out, img_fake, story_fake) = self.generator_losses(batch)
            values = {k: float(v) for k, v in losses.items()}
            if not _finite(values):
                self._abort(values)
            total = losses["kl"] + losses["g_adv"] + tc.lambda_dual * losses["dual"]
            self.opt_g.zero_grad()
            total.backward()
            self.opt_g.step()
        finally:
            self._set_disc_grad(True)
        self.counters["g_updates"] += 1
        self.last_activations.update(
            state=out.state.detach(), img_fake_g=img_fake.detach(), story_fake_g=story_fake.detach()
        )
        return values

    def training_step(self, batches=None):
        batches = batches or self.sample_batches()
        self.generator.train()
        self.image_disc.train()
        self.story_disc.train()
        d_img = self.update_image_disc(batches.image, batches.frame_index)
        d_story = self.update_story_disc(batches.story)
        for batch in batches.generator:
            g = self.update_generator(batch)
        self.counters["steps"] += 1
        record = LossRecord(
            step=self.counters["steps"], epoch=self.epoch, kl=g["kl"], g_adv=g["g_adv"], dual=g["dual"],
            d_img=d_img["d_img"], d_story=d_story["d_story"], char=d_img["char"],
            lr=self.lr, lr_d=self.opt_i.param_groups[0]["lr"],
        )
        self._log_record(record)
        return record

    def _log_record(self, record):
        self.history.append(record)
        if self.run_dir is not None:
            log_dir = self.run_dir / "logs"
            log_dir.mkdir(parents=True, exist_ok=True)
            with open(log_dir / LOSS_LOG, "a", encoding="utf-8") as fh:
                fh.write(record.to_json() + "\n")
        if self.db is not None and self.run_id is not None:
            self.db.add_loss_record(self.run_id, record.to_dict())

    # epochs

    def end_epoch(self):
        for sched in self.schedulers.values():
            sched.step()
        self.epoch += 1
        self.step_in_epoch = 0
        f1 = self.validate()
        path = None
        if self.run_dir is not None:
            ckpt_dir = self.run_dir / "checkpoints"
            if self.epoch % self.cfg.train.checkpoint_every == 0:
                path = self.save_checkpoint(ckpt_dir / f"epoch_{self.epoch:03d}.pt")
            if f1 is not None and (self.best_f1 is None or f1 > self.best_f1):
                self.best_f1 = f1
                self.save_checkpoint(ckpt_dir / "best.pt")
                logger.info("✅ new best validation char-F1 %.2f at epoch %d", f1, self.epoch)
        if self.db is not None and self.run_id is not None and path is not None:
            self.db.add_checkpoint(self.run_id, str(path), self.epoch, self.counters["steps"], f1)
        return f1

    def validate(self):
        if self.classifier is None or not self.val_ds:
            return None
        frames = generate_for_dataset(self.generator, self.val_ds, seed=self.cfg.seed)
        labels = np.concatenate([s.char_labels for s in self.val_ds])
        preds = self.classifier.predict(frames.flatten(0, 1))
        f1 = character_scores(preds, labels, self.val_ds.char_names).micro_f1
        logger.info("📊 epoch %d: validation char-F1 %.2f", self.epoch, f1)
        return f1

    def train(self, epochs=None, max_steps=None):
        epochs = epochs or self.cfg.train.epochs
        max_steps = max_steps if max_steps is not None else self.cfg.train.max_steps
        logger.info("🔄 training from epoch %d, step %d", self.epoch, self.counters["steps"])
        done = False
        with tqdm(total=max_steps or epochs * self.steps_per_epoch, initial=self.counters["steps"], desc="train") as bar:
            while self.epoch < epochs and not done:
                while self.step_in_epoch < self.steps_per_epoch:
                    record = self.training_step()
                    self.step_in_epoch += 1
                    bar.update(1)
                    bar.set_postfix(g=f"{record.g_adv:.3f}", dual=f"{record.dual:.3f}", d=f"{record.d_img:.3f}")
                    if max_steps is not None and self.counters["steps"] >= max_steps:
                        done = True
                        break
                if self.step_in_epoch >= self.steps_per_epoch:
                    self.end_epoch()
        if self.run_dir is not None:
            self.save_checkpoint(self.run_dir / "checkpoints" / "last.pt")
        return self.history

    # checkpoints

    def state(self):
        return {
            "config_hash": self.cfg.model_hash(),
            "config": self.cfg.to_dict(),
            "vocab_hash": self.train_ds.vocab.checksum(),
            "generator": self.generator.state_dict(),
            "image_disc": self.image_disc.state_dict(),
            "story_disc": self.story_disc.state_dict(),
            "optimizers": {"g": self.opt_g.state_dict(), "i": self.opt_i.state_dict(), "s": self.opt_s.state_dict()},
            "schedulers": {k: s.state_dict() for k, s in self.schedulers.items()},
            "counters": dict(self.counters),
            "epoch": self.epoch,
            "step_in_epoch": self.step_in_epoch,
            "best_f1": self.best_f1,
            "rng": {
                "numpy": self.rng.bit_generator.state,
                "torch": torch.get_rng_state(),
                "noise": self.noise.get_state(),
            },
        }

    def save_checkpoint(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(self.state(), tmp)
        os.replace(tmp, path)
        logger.info("✅ checkpoint saved to %s", path)
        return path

    def _apply(self, payload):
        self.generator.load_state_dict(payload["generator"])
        self.image_disc.load_state_dict(payload["image_disc"])
        self.story_disc.load_state_dict(payload["story_disc"])
        self.opt_g.load_state_dict(payload["optimizers"]["g"])
        self.opt_i.load_state_dict(payload["optimizers"]["i"])
        self.opt_s.load_state_dict(payload["optimizers"]["s"])
        for k, sched in self.schedulers.items():
            sched.load_state_dict(payload["schedulers"][k])
        self.counters = dict(payload["counters"])
        self.epoch = payload["epoch"]
        self.step_in_epoch = payload["step_in_epoch"]
        self.best_f1 = payload["best_f1"]
        self.rng.bit_generator.state = payload["rng"]["numpy"]
        torch.set_rng_state(payload["rng"]["torch"])
        self.noise.set_state(payload["rng"]["noise"])

    def load_checkpoint(self, path):
        """Restore everything or nothing."""
        payload = load_checkpoint(path, self.cfg.model_hash())
        backup = copy.deepcopy(self.state())
        try:
            self._apply(payload)
        except Exception as e:
            self._apply(backup)
            raise CheckpointError(f"checkpoint {path} could not be restored: {e}")
        logger.info("🔄 resumed from %s (epoch %d, step %d)", path, self.epoch, self.counters["steps"])
        return self
