"""MetricReport: one results row, serialized as JSON with a stable field order."""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict

from ..errors import EvaluationError

logger = logging.getLogger(__name__)

RATE_FIELDS = (
    "char_f1",
    "char_exact_match",
    "bleu2",
    "bleu3",
    "disc_top1",
    "disc_top2",
    "r_precision_mean",
)


@dataclass
class MetricReport:
    char_f1: float
    char_exact_match: float
    per_character_f1: Dict[str, float]
    bleu2: float
    bleu3: float
    disc_top1: float
    disc_top2: float
    r_precision_mean: float
    r_precision_std: float
    metadata: Dict[str, object] = field(default_factory=dict)

    def validate(self):
        for name in RATE_FIELDS:
            value = getattr(self, name)
            if not 0.0 <= value <= 100.0:
                raise EvaluationError(f"{name}={value} is outside [0, 100]")
        for name, value in self.per_character_f1.items():
            if not 0.0 <= value <= 100.0:
                raise EvaluationError(f"per_character_f1[{name}]={value} is outside [0, 100]")
        if self.r_precision_std < 0:
            raise EvaluationError("r_precision_std must be non-negative")
        return self

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise EvaluationError(f"unknown report field: {sorted(unknown)[0]}")
        return cls(**data).validate()


def write_report(report, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.validate().to_json() + "\n", encoding="utf-8")
    logger.info("✅ metric report written to %s", path)
    return path


def load_report(path):
    return MetricReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def write_predictions(path, story_ids, story_length, predictions, labels, captions=None):
    """One JSON line per generated frame: predicted and true character bits, plus its caption."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for n, (pred, gold) in enumerate(zip(predictions, labels)):
            row = {
                "story_id": story_ids[n // story_length],
                "frame": n % story_length,
                "predicted": [int(v) for v in pred],
                "label": [int(v) for v in gold],
            }
            if captions is not None:
                row["caption"] = " ".join(captions[n])
            fh.write(json.dumps(row) + "\n")
    return path


def read_predictions(path):
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def summary(report):
    """Compact dict in results-table column order."""
    d = asdict(report)
    return {
        "char_f1": d["char_f1"],
        "bleu2": d["bleu2"],
        "bleu3": d["bleu3"],
        "r_precision": f'{d["r_precision_mean"]:.2f} ± {d["r_precision_std"]:.2f}',
        "frame_acc": d["char_exact_match"],
        "top1": d["disc_top1"],
        "top2": d["disc_top2"],
    }
