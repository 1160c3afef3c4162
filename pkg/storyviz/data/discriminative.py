"""Candidate sets for discriminative evaluation: final frame vs character-matched negatives."""

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class DiscriminativeSet:
    story_id: str
    target_frame: np.ndarray
    negatives: List[np.ndarray]
    negative_refs: List[Tuple[str, int]]
    candidates: List[np.ndarray]
    answer_index: int

    @property
    def num_candidates(self):
        return len(self.candidates)


@dataclass
class SkipReport:
    total: int = 0
    skipped_story_ids: List[str] = field(default_factory=list)

    @property
    def emitted(self):
        return self.total - len(self.skipped_story_ids)

    @property
    def skip_rate(self):
        return len(self.skipped_story_ids) / self.total if self.total else 0.0


def _label_index(pool):
    index = defaultdict(list)
    for story in pool:
        for k, labels in enumerate(story.char_labels):
            index[tuple(int(v) for v in labels)].append((story.story_id, k))
    return index


def build_discriminative_sets(dataset, num_negatives=4, seed=0, pool=None):
    """One set per story with enough eligible negatives.

    A negative is any frame from a *different* story of ``pool`` (default: the
    dataset itself) whose label vector equals the target's final-frame labels.
    Negatives are drawn uniformly without replacement. Returns ``(sets, report)``.
    """
    pool = dataset if pool is None else pool
    index = _label_index(pool)
    rng = np.random.default_rng(seed)
    sets, report = [], SkipReport()
    for story in dataset:
        report.total += 1
        key = tuple(int(v) for v in story.char_labels[-1])
        eligible = [ref for ref in index.get(key, []) if ref[0] != story.story_id]
        if len(eligible) < num_negatives:
            report.skipped_story_ids.append(story.story_id)
            continue
        picks = rng.choice(len(eligible), size=num_negatives, replace=False)
        refs = [eligible[int(i)] for i in picks]
        negatives = [pool.get(sid).frames[k] for sid, k in refs]
        target = story.frames[-1]
        ordered = [target] + negatives
        perm = rng.permutation(num_negatives + 1)
        sets.append(
            DiscriminativeSet(
                story_id=story.story_id,
                target_frame=target,
                negatives=negatives,
                negative_refs=refs,
                candidates=[ordered[int(p)] for p in perm],
                answer_index=int(np.flatnonzero(perm == 0)[0]),
            )
        )
    logger.info(
        "📊 discriminative sets: %d emitted, %d skipped (%.1f%%)",
        report.emitted, len(report.skipped_story_ids), 100 * report.skip_rate,
    )
    return sets, report
