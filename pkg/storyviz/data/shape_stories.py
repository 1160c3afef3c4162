"""ShapeStories: a deterministic, desk-scale stand-in for Pororo-SV.

Nine named characters, each a colored shape. A caption names which characters
appear, what they do (row) and where (column), plus the story's setting
(background color). Frames are drawn from the caption alone, so every caption is
recoverable from pixels and ``render_frame`` doubles as a test oracle.
"""

import logging
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from ..errors import ConfigError, DataIntegrityError
from .story import SPLITS, Story, StoryDataset, Vocabulary

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Character:
    name: str
    shape: str
    color: tuple


ROSTER = (
    Character("ruby", "circle", (220, 40, 40)),
    Character("moss", "square", (40, 160, 60)),
    Character("sky", "triangle", (40, 80, 220)),
    Character("sunny", "diamond", (240, 200, 30)),
    Character("plum", "cross", (150, 60, 190)),
    Character("amber", "ring", (245, 130, 20)),
    Character("teal", "bar", (30, 190, 200)),
    Character("cocoa", "hexagon", (120, 70, 30)),
    Character("rosa", "column", (240, 110, 180)),
)

SETTINGS = {
    "park": (190, 230, 170),
    "sea": (160, 200, 245),
    "snow": (250, 250, 250),
    "night": (25, 25, 55),
    "sand": (235, 215, 165),
}

# action -> row, side -> column
ACTIONS = {"jumps": 0, "walks": 1, "sits": 2}
SIDES = {"left": 0, "middle": 1, "right": 2}
SIDE_PHRASES = {"left": "on the left", "middle": "in the middle", "right": "on the right"}

# Long-tailed appearance weights, most frequent first.
_FREQ_EXPONENT = 0.8


def character_weights(num_characters):
    w = 1.0 / np.arange(1, num_characters + 1) ** _FREQ_EXPONENT
    return w / w.sum()


def compose_caption(setting, placements):
    """placements: list of (character name, action, side)."""
    parts = [f"{name} {action} {SIDE_PHRASES[side]}" for name, action, side in placements]
    return " and ".join(parts) + f" in the {setting}"


def parse_caption(caption):
    """Inverse of ``compose_caption``: returns (setting, placements)."""
    tokens = caption.lower().split()
    if len(tokens) < 3 or tokens[-3:-1] != ["in", "the"]:
        raise DataIntegrityError(f"not a ShapeStories caption: {caption!r}")
    setting = tokens[-1]
    body = " ".join(tokens[:-3])
    placements = []
    for clause in body.split(" and "):
        words = clause.split()
        name, action = words[0], words[1]
        side = next((s for s, phrase in SIDE_PHRASES.items() if " ".join(words[2:]) == phrase), None)
        if side is None or action not in ACTIONS or setting not in SETTINGS:
            raise DataIntegrityError(f"not a ShapeStories caption: {caption!r}")
        placements.append((name, action, side))
    return setting, placements


def _draw_shape(draw, shape, color, cx, cy, r):
    if shape == "circle":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], fill=color)
    elif shape == "square":
        draw.rectangle([cx - r, cy - r, cx + r, cy + r], fill=color)
    elif shape == "triangle":
        draw.polygon([(cx, cy - r), (cx - r, cy + r), (cx + r, cy + r)], fill=color)
    elif shape == "diamond":
        draw.polygon([(cx, cy - r), (cx + r, cy), (cx, cy + r), (cx - r, cy)], fill=color)
    elif shape == "cross":
        t = r * 0.35
        draw.rectangle([cx - r, cy - t, cx + r, cy + t], fill=color)
        draw.rectangle([cx - t, cy - r, cx + t, cy + r], fill=color)
    elif shape == "ring":
        draw.ellipse([cx - r, cy - r, cx + r, cy + r], outline=color, width=max(1, int(round(r * 0.4))))
    elif shape == "bar":
        draw.rectangle([cx - r, cy - r * 0.35, cx + r, cy + r * 0.35], fill=color)
    elif shape == "column":
        draw.rectangle([cx - r * 0.35, cy - r, cx + r * 0.35, cy + r], fill=color)
    elif shape == "hexagon":
        angles = np.deg2rad(np.arange(0, 360, 60))
        draw.polygon([(cx + r * np.cos(a), cy + r * np.sin(a)) for a in angles], fill=color)
    else:
        raise ValueError(f"unknown shape {shape!r}")


def render_frame(caption, image_size, roster=ROSTER):
    """Draw one frame from its caption; returns (H, W, 3) float32 in [-1, 1]."""
    setting, placements = parse_caption(caption)
    by_name = {c.name: c for c in roster}
    img = Image.new("RGB", (image_size, image_size), SETTINGS[setting])
    draw = ImageDraw.Draw(img)
    cell = image_size / 3.0
    radius = cell * 0.4
    for name, action, side in placements:
        if name not in by_name:
            raise DataIntegrityError(f"unknown character {name!r} in caption {caption!r}")
        ch = by_name[name]
        cx = (SIDES[side] + 0.5) * cell
        cy = (ACTIONS[action] + 0.5) * cell
        _draw_shape(draw, ch.shape, ch.color, cx, cy, radius)
    pixels = np.asarray(img, dtype=np.uint8)
    return pixels.astype(np.float32) / 127.5 - 1.0


def labels_from_caption(caption, roster=ROSTER):
    _, placements = parse_caption(caption)
    present = {name for name, _, _ in placements}
    return np.array([1 if c.name in present else 0 for c in roster], dtype=np.uint8)


def _sample_story(rng, roster, weights, story_length):
    setting = str(rng.choice(sorted(SETTINGS)))
    cast_size = int(rng.choice([1, 2, 3], p=[0.3, 0.5, 0.2]))
    cast = rng.choice(len(roster), size=cast_size, replace=False, p=weights)
    captions = []
    for _ in range(story_length):
        n_present = int(rng.integers(1, min(2, cast_size) + 1))
        present = sorted(rng.choice(cast, size=n_present, replace=False).tolist())
        sides = rng.choice(sorted(SIDES, key=SIDES.get), size=n_present, replace=False)
        actions = rng.choice(sorted(ACTIONS, key=ACTIONS.get), size=n_present)
        placements = [(roster[c].name, str(a), str(s)) for c, a, s in zip(present, actions, sides)]
        captions.append(compose_caption(setting, placements))
    return captions


def generate_shape_stories(cfg, seed):
    """Generate ``cfg.num_stories`` stories; identical (cfg, seed) gives identical bytes."""
    if cfg.num_stories < 1:
        raise ConfigError(f"num_stories must be >= 1, got {cfg.num_stories}")
    if cfg.story_length < 1:
        raise ConfigError(f"story_length must be >= 1, got {cfg.story_length}")
    cfg.validate()
    roster = ROSTER[: cfg.num_characters]
    weights = character_weights(len(roster))
    stories = []
    for i in range(cfg.num_stories):
        rng = np.random.default_rng([seed, i])
        captions = _sample_story(rng, roster, weights, cfg.story_length)
        frames = np.stack([render_frame(c, cfg.image_size, roster) for c in captions])
        labels = np.stack([labels_from_caption(c, roster) for c in captions])
        stories.append(Story(f"shape-{i:05d}", frames, captions, labels))
    vocab = Vocabulary.build(c for s in stories for c in s.captions)
    logger.info("✅ generated %d ShapeStories (seed=%d, vocab=%d)", len(stories), seed, len(vocab))
    return StoryDataset(stories, "all", vocab, [c.name for c in roster], cfg.max_caption_len)


def split_dataset(dataset, val_fraction, test_fraction, seed):
    """Partition by a seeded shuffle of story ids; the three splits are disjoint."""
    ids = np.array(dataset.story_ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    n_val = int(round(len(ids) * val_fraction))
    n_test = int(round(len(ids) * test_fraction))
    chunks = {
        "val": ids[order[:n_val]],
        "test": ids[order[n_val : n_val + n_test]],
        "train": ids[order[n_val + n_test :]],
    }
    return {split: dataset.subset(chunks[split].tolist(), split) for split in SPLITS}
