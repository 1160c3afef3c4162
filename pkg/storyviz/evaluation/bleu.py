"""Video-captioning BLEU: greedy-caption generated stories and score against ground truth."""

import logging

import torch
from nltk.translate.bleu_score import SmoothingFunction, corpus_bleu

from ..errors import EvaluationError

logger = logging.getLogger(__name__)

BLEU2_WEIGHTS = (0.5, 0.5)
BLEU3_WEIGHTS = (1 / 3, 1 / 3, 1 / 3)


def bleu_scores(hypotheses, references):
    """Corpus BLEU-2 and BLEU-3 (x100), one reference per hypothesis, method1 smoothing."""
    if len(hypotheses) != len(references):
        raise EvaluationError(f"{len(hypotheses)} hypotheses vs {len(references)} references")
    if not hypotheses:
        raise EvaluationError("BLEU needs at least one caption")
    refs = [[r] for r in references]
    smooth = SmoothingFunction().method1
    bleu2 = 100 * corpus_bleu(refs, hypotheses, weights=BLEU2_WEIGHTS, smoothing_function=smooth)
    bleu3 = 100 * corpus_bleu(refs, hypotheses, weights=BLEU3_WEIGHTS, smoothing_function=smooth)
    return bleu2, bleu3


@torch.no_grad()
def caption_frames(captioner, frames, vocab, batch_size=16):
    """frames (S, T, 3, H, W) -> per-frame greedy captions as token lists."""
    captions = []
    for start in range(0, len(frames), batch_size):
        features = captioner.extract_region_features(frames[start : start + batch_size])
        tokens, _ = captioner.greedy_decode(features)
        for story in tokens:
            captions.extend(vocab.decode_tokens(frame) for frame in story)
    return captions


def evaluate_bleu(captioner, frames, gt_captions, vocab, batch_size=16):
    """gt_captions: per-story lists of caption strings aligned with ``frames``."""
    captioner.verify_frozen()
    hypotheses = caption_frames(captioner, frames, vocab, batch_size)
    references = [caption.lower().split() for story in gt_captions for caption in story]
    bleu2, bleu3 = bleu_scores(hypotheses, references)
    logger.info("📊 BLEU-2 %.2f, BLEU-3 %.2f over %d frames", bleu2, bleu3, len(hypotheses))
    return bleu2, bleu3, hypotheses
