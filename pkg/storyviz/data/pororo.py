"""Reader/writer for the Pororo-SV on-disk layout.

    <root>/frames/<story_id>/<k>.png
    <root>/captions.jsonl      {"story_id": ..., "captions": [T strings]}
    <root>/labels.jsonl        {"story_id": ..., "labels": [T binary vectors]}
    <root>/splits.json         {"train": [...], "val": [...], "test": [...]}
    <root>/characters.json     optional ordered character names
"""

import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from ..errors import ConfigError, DataIntegrityError
from .story import SPLITS, Story, StoryDataset, Vocabulary

logger = logging.getLogger(__name__)

PORORO_CHARACTERS = ["pororo", "loopy", "crong", "eddy", "poby", "petty", "tongtong", "rody", "harry"]


def _read_jsonl(path):
    records = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataIntegrityError(f"{path}:{line_no}: invalid JSON ({e})")
            records[record["story_id"]] = record
    return records


def _load_frame(path, image_size):
    img = Image.open(path).convert("RGB")
    if image_size is not None and img.size != (image_size, image_size):
        img = img.resize((image_size, image_size), Image.BILINEAR)
    return np.asarray(img, dtype=np.uint8).astype(np.float32) / 127.5 - 1.0


def _frame_paths(frame_dir, story_id):
    """Frame PNGs named 0.png .. (T-1).png, in frame order."""
    if not frame_dir.exists():
        return []
    paths = list(frame_dir.glob("*.png"))
    stray = sorted(p.name for p in paths if not p.stem.isdigit())
    if stray:
        raise DataIntegrityError(f"story {story_id}: unexpected frame file {stray[0]} in {frame_dir}")
    paths.sort(key=lambda p: int(p.stem))
    indices = [int(p.stem) for p in paths]
    if indices != list(range(len(paths))):
        raise DataIntegrityError(f"story {story_id}: frame files must be numbered 0..{len(paths) - 1}, got {indices}")
    return paths


def load_pororo_sv(root, split, image_size=None, max_caption_len=24):
    """Load one split; the vocabulary covers the captions of every split."""
    root = Path(root)
    captions_path = root / "captions.jsonl"
    labels_path = root / "labels.jsonl"
    splits_path = root / "splits.json"
    if not captions_path.exists() and not (root / "frames").exists():
        raise DataIntegrityError(f"no Pororo-SV data under {root}: nothing to load")
    if not splits_path.exists():
        raise ConfigError(f"split file missing: {splits_path}")
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}, got {split!r}")
    if not captions_path.exists() or not labels_path.exists():
        raise DataIntegrityError(f"{root} is missing captions.jsonl or labels.jsonl")

    with open(splits_path, "r", encoding="utf-8") as fh:
        splits = json.load(fh)
    if split not in splits:
        raise ConfigError(f"{splits_path} has no {split!r} split")
    captions = _read_jsonl(captions_path)
    labels = _read_jsonl(labels_path)
    vocab = Vocabulary.build(c for rec in captions.values() for c in rec["captions"])

    char_names = PORORO_CHARACTERS
    names_path = root / "characters.json"
    if names_path.exists():
        with open(names_path, "r", encoding="utf-8") as fh:
            char_names = json.load(fh)

    stories = []
    for story_id in sorted(splits[split]):
        if story_id not in captions or story_id not in labels:
            raise DataIntegrityError(f"story {story_id}: missing captions or labels record")
        story_captions = captions[story_id]["captions"]
        story_labels = np.asarray(labels[story_id]["labels"], dtype=np.uint8)
        frame_dir = root / "frames" / story_id
        frame_paths = _frame_paths(frame_dir, story_id)
        if len(frame_paths) != len(story_captions) or len(story_labels) != len(story_captions):
            raise DataIntegrityError(
                f"story {story_id}: {len(frame_paths)} frames, {len(story_captions)} captions, "
                f"{len(story_labels)} label vectors"
            )
        frames = np.stack([_load_frame(p, image_size) for p in frame_paths])
        stories.append(Story(story_id, frames, list(story_captions), story_labels))
    if not stories:
        raise DataIntegrityError(f"split {split!r} under {root} contains no stories")
    logger.info("✅ loaded %d stories from %s [%s]", len(stories), root, split)
    return StoryDataset(stories, split, vocab, list(char_names), max_caption_len)


def export_pororo_sv(splits, root):
    """Write ``{split: StoryDataset}`` to ``root`` in the layout above (lossless PNG)."""
    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    all_stories = sorted((s for ds in splits.values() for s in ds), key=lambda s: s.story_id)
    with open(root / "captions.jsonl", "w", encoding="utf-8") as cap_fh, open(
        root / "labels.jsonl", "w", encoding="utf-8"
    ) as lab_fh:
        for story in all_stories:
            frame_dir = root / "frames" / story.story_id
            frame_dir.mkdir(parents=True, exist_ok=True)
            for k, frame in enumerate(story.frames):
                pixels = np.clip(np.rint((frame + 1.0) * 127.5), 0, 255).astype(np.uint8)
                Image.fromarray(pixels, "RGB").save(frame_dir / f"{k}.png")
            cap_fh.write(json.dumps({"story_id": story.story_id, "captions": story.captions}) + "\n")
            lab_fh.write(json.dumps({"story_id": story.story_id, "labels": story.char_labels.tolist()}) + "\n")
    with open(root / "splits.json", "w", encoding="utf-8") as fh:
        json.dump({name: ds.story_ids for name, ds in splits.items()}, fh, indent=1)
    first = next(iter(splits.values()))
    with open(root / "characters.json", "w", encoding="utf-8") as fh:
        json.dump(first.char_names, fh)
    logger.info("✅ exported %d stories to %s", len(all_stories), root)
    return root
