"""Discriminative evaluation: rank candidate final frames by feature cosine similarity."""

import logging

import numpy as np
import torch

from ..errors import EvaluationError

logger = logging.getLogger(__name__)


def rank_candidates(query, candidates):
    """query (D,), candidates (K, D) -> candidate indices by descending cosine similarity.

    Ties keep candidate order, so the lowest index ranks first.
    """
    q = query / np.linalg.norm(query).clip(min=1e-12)
    c = candidates / np.linalg.norm(candidates, axis=1, keepdims=True).clip(min=1e-12)
    return np.argsort(-(c @ q), kind="stable")


def discriminative_accuracy(queries, candidates, answers):
    """queries (S, D), candidates (S, K, D), answers (S,) -> (top1, top2) in percent."""
    if len(queries) == 0:
        raise EvaluationError("no discriminative sets to score")
    top1 = top2 = 0
    for q, cands, answer in zip(queries, candidates, answers):
        order = rank_candidates(np.asarray(q, dtype=np.float64), np.asarray(cands, dtype=np.float64))
        top1 += int(order[0] == answer)
        top2 += int(answer in order[:2])
    n = len(queries)
    return 100.0 * top1 / n, 100.0 * top2 / n


def _to_chw(frame):
    return torch.from_numpy(np.ascontiguousarray(np.asarray(frame, dtype=np.float32).transpose(2, 0, 1)))


@torch.no_grad()
def evaluate_discriminative(classifier, disc_sets, generated_final):
    """generated_final: story_id -> generated final frame (3, H, W) tensor."""
    classifier.verify_frozen()
    sets = [s for s in disc_sets if s.story_id in generated_final]
    if not sets:
        raise EvaluationError("none of the discriminative sets has a generated frame")
    queries = classifier.extract_features(torch.stack([generated_final[s.story_id] for s in sets]))
    k = sets[0].num_candidates
    flat = torch.stack([_to_chw(c) for s in sets for c in s.candidates])
    cand_feats = classifier.extract_features(flat).view(len(sets), k, -1)
    top1, top2 = discriminative_accuracy(
        queries.cpu().numpy(), cand_feats.cpu().numpy(), [s.answer_index for s in sets]
    )
    logger.info("📊 discriminative top-1 %.2f, top-2 %.2f over %d sets", top1, top2, len(sets))
    return top1, top2
