import logging
from pathlib import Path

from ..captioner import VideoCaptioner
from ..data.discriminative import build_discriminative_sets
from ..data.story import make_batch
from ..errors import MissingSnapshotError
from ..generator import generate_for_dataset
from .bleu import evaluate_bleu
from .characters import CharacterClassifier, evaluate_characters
from .damsm import HDamsm, evaluate_r_precision
from .discriminative import evaluate_discriminative
from .report import MetricReport, write_predictions, write_report

logger = logging.getLogger(__name__)

SNAPSHOTS = {
    "captioner": ("captioner.pt", VideoCaptioner),
    "classifier": ("classifier.pt", CharacterClassifier),
    "damsm": ("damsm.pt", HDamsm),
}


def snapshot_path(snapshot_dir, which):
    return Path(snapshot_dir) / SNAPSHOTS[which][0]


def load_snapshot(snapshot_dir, which, expected=None):
    path = snapshot_path(snapshot_dir, which)
    if not path.exists():
        raise MissingSnapshotError(which, path)
    return SNAPSHOTS[which][1].load_snapshot(path, expected)


# Aggregates the three frozen metric models
class MetricSuite:
    def __init__(self, snapshot_dir, vocab_hash=None, image_size=None):
        self.snapshot_dir = Path(snapshot_dir)
        text_check = {"vocab_hash": vocab_hash} if vocab_hash else {}
        image_check = {"image_size": image_size} if image_size else {}
        self.captioner = load_snapshot(snapshot_dir, "captioner", {**text_check, **image_check})
        self.classifier = load_snapshot(snapshot_dir, "classifier", image_check)
        self.damsm = load_snapshot(snapshot_dir, "damsm", {**text_check, **image_check})
        logger.info("✅ metric models loaded from %s", self.snapshot_dir)

    def checksums(self):
        return {
            "captioner": self.captioner.checksum(),
            "classifier": self.classifier.checksum(),
            "damsm": self.damsm.checksum(),
        }

    def verify(self):
        for model in (self.captioner, self.classifier, self.damsm):
            model.verify_frozen()

    def full_report(self, generator, dataset, seed=0, eval_cfg=None, checkpoint_id=None, report_dir=None):
        """Generate the split, run every metric and assemble one ``MetricReport``."""
        num_negatives = eval_cfg.num_negatives if eval_cfg else 4
        runs = eval_cfg.r_precision_runs if eval_cfg else 10
        mismatches = eval_cfg.r_precision_mismatches if eval_cfg else 99
        self.verify()
        frames = generate_for_dataset(generator, dataset, seed)
        gt = make_batch(dataset, range(len(dataset)))
        t = frames.shape[1]

        scores, predictions = evaluate_characters(
            self.classifier, frames.flatten(0, 1), gt.labels.flatten(0, 1).numpy()
        )
        bleu2, bleu3, hypotheses = evaluate_bleu(self.captioner, frames, [s.captions for s in dataset], dataset.vocab)
        disc_sets, _ = build_discriminative_sets(dataset, num_negatives, seed)
        final = {sid: frames[i, -1] for i, sid in enumerate(dataset.story_ids)}
        top1, top2 = evaluate_discriminative(self.classifier, disc_sets, final) if disc_sets else (0.0, 0.0)
        r_mean, r_std = evaluate_r_precision(self.damsm, frames, gt.tokens, gt.mask, seed, runs, mismatches)

        metadata = {
            "checkpoint": checkpoint_id,
            "split": dataset.split,
            "seed": seed,
            "num_stories": len(dataset),
            "num_disc_sets": len(disc_sets),
        }
        stem = None
        if report_dir is not None:
            stem = Path(report_dir) / f"{Path(str(checkpoint_id or 'report')).stem}_{dataset.split}"
            metadata["report_file"] = str(stem) + ".json"
            metadata["predictions_file"] = str(stem) + "_frames.jsonl"
        report = MetricReport(
            char_f1=scores.micro_f1,
            char_exact_match=scores.exact_match,
            per_character_f1=scores.per_character_f1,
            bleu2=bleu2,
            bleu3=bleu3,
            disc_top1=top1,
            disc_top2=top2,
            r_precision_mean=r_mean,
            r_precision_std=r_std,
            metadata=metadata,
        ).validate()
        if stem is not None:
            write_report(report, metadata["report_file"])
            write_predictions(
                metadata["predictions_file"], dataset.story_ids, t, predictions,
                gt.labels.flatten(0, 1).numpy(), hypotheses,
            )
        return report


__all__ = [
    "MetricSuite",
    "MetricReport",
    "SNAPSHOTS",
    "load_snapshot",
    "snapshot_path",
]
