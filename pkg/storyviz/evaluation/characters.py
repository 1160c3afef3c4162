"""Character classification metric: a small multi-label conv net and its scores."""

import copy
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from sklearn.metrics import accuracy_score, f1_score, precision_score, recall_score
from tqdm import tqdm

from ..config import ClassifierConfig
from ..discriminators import encode_image_tower
from ..errors import DataIntegrityError, EvaluationError
from ..frozen import FrozenModule

logger = logging.getLogger(__name__)


class CharacterClassifier(FrozenModule):
    """Frame -> per-character logits; the penultimate layer doubles as the feature extractor."""

    snapshot_kind = "classifier"

    def __init__(self, image_size, num_characters, cfg, char_names=None):
        super().__init__()
        self.image_size = image_size
        self.num_characters = num_characters
        self.cfg = cfg
        self.char_names = list(char_names or [f"char{i}" for i in range(num_characters)])
        tower, ch = encode_image_tower(image_size, 32)
        self.backbone = nn.Sequential(
            tower, nn.Flatten(), nn.Linear(ch * 16, cfg.feature_dim), nn.ReLU(inplace=True)
        )
        self.head = nn.Linear(cfg.feature_dim, num_characters)

    def snapshot_header(self):
        return {
            "image_size": self.image_size,
            "num_characters": self.num_characters,
            "classifier": asdict(self.cfg),
            "char_names": self.char_names,
        }

    @classmethod
    def from_header(cls, header):
        return cls(
            header["image_size"], header["num_characters"], ClassifierConfig(**header["classifier"]), header["char_names"]
        )

    def features(self, images):
        return self.backbone(images)

    def forward(self, images):
        return self.head(self.features(images))

    @torch.no_grad()
    def predict(self, images, threshold=None, batch_size=256):
        """(N, 3, H, W) -> (N, C) bool decisions at ``threshold`` on the sigmoid."""
        threshold = self.cfg.threshold if threshold is None else threshold
        out = []
        for start in range(0, len(images), batch_size):
            out.append(torch.sigmoid(self(images[start : start + batch_size])) >= threshold)
        return torch.cat(out).cpu().numpy()

    @torch.no_grad()
    def extract_features(self, images, batch_size=256):
        return torch.cat([self.features(images[s : s + batch_size]) for s in range(0, len(images), batch_size)])


@dataclass
class CharacterScores:
    micro_f1: float
    exact_match: float
    micro_precision: float
    micro_recall: float
    per_character_f1: Dict[str, float]
    per_character_accuracy: Dict[str, float]
    supports: Dict[str, int]
    num_frames: int

    def to_dict(self):
        return asdict(self)


def character_scores(predictions, labels, char_names=None):
    """Micro F1 / exact match over all (frame, character) decisions, as percentages."""
    pred = np.asarray(predictions).astype(int)
    gold = np.asarray(labels).astype(int)
    if pred.shape != gold.shape:
        raise EvaluationError(f"{pred.shape[0]} predicted frames vs {gold.shape[0]} labeled frames")
    if pred.ndim != 2 or len(pred) == 0:
        raise EvaluationError("character scores need a non-empty (frames, characters) matrix")
    names = list(char_names or [f"char{i}" for i in range(gold.shape[1])])
    per_f1 = f1_score(gold, pred, average=None, zero_division=0)
    return CharacterScores(
        micro_f1=100.0 * f1_score(gold, pred, average="micro", zero_division=0),
        exact_match=100.0 * accuracy_score(gold, pred),
        micro_precision=100.0 * precision_score(gold, pred, average="micro", zero_division=0),
        micro_recall=100.0 * recall_score(gold, pred, average="micro", zero_division=0),
        per_character_f1={n: 100.0 * float(v) for n, v in zip(names, per_f1)},
        per_character_accuracy={n: 100.0 * float((pred[:, i] == gold[:, i]).mean()) for i, n in enumerate(names)},
        supports={n: int(gold[:, i].sum()) for i, n in enumerate(names)},
        num_frames=len(gold),
    )


def evaluate_characters(classifier, frames, labels):
    """frames (N, 3, H, W) generated images; labels (N, C). Returns (scores, predictions)."""
    if len(frames) != len(labels):
        raise EvaluationError(f"{len(frames)} frames but {len(labels)} label vectors")
    classifier.verify_frozen()
    predictions = classifier.predict(frames)
    return character_scores(predictions, labels, classifier.char_names), predictions


def stack_frames(dataset):
    """All frames of a dataset as (N, 3, H, W) float tensor plus (N, C) labels."""
    frames = np.concatenate([s.frames for s in dataset]).transpose(0, 3, 1, 2)
    labels = np.concatenate([s.char_labels for s in dataset]).astype(np.float32)
    return torch.from_numpy(np.ascontiguousarray(frames)), torch.from_numpy(labels)


def train_char_classifier(train_ds, val_ds, cfg, seed=0):
    """Per-character BCE from scratch; returns the frozen classifier with its held-out report."""
    if len(train_ds) == 0:
        raise DataIntegrityError("cannot train the character classifier on an empty dataset")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    frames, labels = stack_frames(train_ds)
    classifier = CharacterClassifier(train_ds.image_size, labels.shape[1], cfg, train_ds.char_names)
    optimizer = torch.optim.Adam(classifier.parameters(), lr=cfg.lr)
    held_out = val_ds if len(val_ds) else train_ds
    val_frames, val_labels = stack_frames(held_out)
    best_f1, best_state = -1.0, None
    for epoch in range(cfg.epochs):
        classifier.train()
        order = rng.permutation(len(frames))
        for start in tqdm(range(0, len(order), cfg.batch_size), desc=f"classifier epoch {epoch + 1}", leave=False):
            idx = torch.from_numpy(order[start : start + cfg.batch_size])
            optimizer.zero_grad()
            loss = F.binary_cross_entropy_with_logits(classifier(frames[idx]), labels[idx])
            loss.backward()
            optimizer.step()
        classifier.eval()
        scores = character_scores(classifier.predict(val_frames), val_labels.numpy(), classifier.char_names)
        logger.info("📊 classifier epoch %d: held-out micro-F1 %.2f, frame acc %.2f", epoch + 1, scores.micro_f1, scores.exact_match)
        if scores.micro_f1 > best_f1:
            best_f1, best_state = scores.micro_f1, copy.deepcopy(classifier.state_dict())
    classifier.load_state_dict(best_state)
    classifier.freeze()
    classifier.quality = character_scores(classifier.predict(val_frames), val_labels.numpy(), classifier.char_names)
    return classifier


def quality_rows(scores: CharacterScores) -> List[dict]:
    """Upper-bound table layout: one summary row, then one row per character."""
    rows = [{
        "label": "all",
        "precision": scores.micro_precision,
        "recall": scores.micro_recall,
        "f_score": scores.micro_f1,
        "accuracy": scores.exact_match,
    }]
    for name, f1 in scores.per_character_f1.items():
        rows.append({
            "label": name,
            "f_score": f1,
            "accuracy": scores.per_character_accuracy[name],
            "support": scores.supports[name],
        })
    return rows
