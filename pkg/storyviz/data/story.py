"""Story, dataset and batch types shared by every other module."""

import hashlib
import json
from dataclasses import dataclass
from typing import List

import numpy as np
import torch
from torch.utils.data import Dataset

from ..errors import DataIntegrityError, VocabularyError

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = (PAD, BOS, EOS)
PAD_ID, BOS_ID, EOS_ID = 0, 1, 2
SPLITS = ("train", "val", "test")


def tokenize(caption, max_len=None):
    """Lowercase + whitespace split, truncated to ``max_len`` tokens."""
    tokens = caption.lower().split()
    return tokens[:max_len] if max_len is not None else tokens


class Vocabulary:
    """Closed token <-> id bijection; ids 0..2 are the special tokens."""

    def __init__(self, tokens):
        words = sorted(set(tokens) - set(SPECIALS))
        self.itos = list(SPECIALS) + words
        self.stoi = {tok: i for i, tok in enumerate(self.itos)}

    @classmethod
    def build(cls, captions):
        return cls(tok for caption in captions for tok in tokenize(caption))

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, caption, max_len):
        tokens = tokenize(caption, max_len)
        ids = np.full(max_len, PAD_ID, dtype=np.int64)
        mask = np.zeros(max_len, dtype=bool)
        for i, tok in enumerate(tokens):
            if tok not in self.stoi:
                raise VocabularyError(f"token {tok!r} is not in the vocabulary")
            ids[i] = self.stoi[tok]
            mask[i] = True
        return ids, mask

    def decode_tokens(self, ids):
        words = []
        for i in ids:
            i = int(i)
            if i in (PAD_ID, EOS_ID):
                break
            if i == BOS_ID:
                continue
            if not 0 <= i < len(self.itos):
                raise VocabularyError(f"id {i} is outside the vocabulary (size {len(self.itos)})")
            words.append(self.itos[i])
        return words

    def decode(self, ids):
        return " ".join(self.decode_tokens(ids))

    def checksum(self):
        return hashlib.sha256("\n".join(self.itos).encode("utf-8")).hexdigest()[:16]


@dataclass
class Story:
    story_id: str
    frames: np.ndarray  # (T, H, W, 3) float32 in [-1, 1]
    captions: List[str]
    char_labels: np.ndarray  # (T, C) uint8

    def __post_init__(self):
        n = len(self.frames)
        if not (n == len(self.captions) == len(self.char_labels)):
            raise DataIntegrityError(
                f"story {self.story_id}: {n} frames, {len(self.captions)} captions, "
                f"{len(self.char_labels)} label vectors"
            )
        if n == 0:
            raise DataIntegrityError(f"story {self.story_id} has no frames")
        for k, caption in enumerate(self.captions):
            if not tokenize(caption):
                raise DataIntegrityError(f"story {self.story_id}: caption {k} is empty")
        if self.frames.min() < -1.0 or self.frames.max() > 1.0:
            raise DataIntegrityError(f"story {self.story_id}: pixel values outside [-1, 1]")

    @property
    def length(self):
        return len(self.frames)


@dataclass
class StoryDataset:
    stories: List[Story]
    split: str
    vocab: Vocabulary
    char_names: List[str]
    max_caption_len: int = 24

    def __post_init__(self):
        self.stories = sorted(self.stories, key=lambda s: s.story_id)
        self._index = {s.story_id: i for i, s in enumerate(self.stories)}

    def __len__(self):
        return len(self.stories)

    def __getitem__(self, idx):
        return self.stories[idx]

    def __iter__(self):
        return iter(self.stories)

    @property
    def story_ids(self):
        return [s.story_id for s in self.stories]

    @property
    def story_length(self):
        return self.stories[0].length

    @property
    def image_size(self):
        return self.stories[0].frames.shape[1]

    def get(self, story_id):
        return self.stories[self._index[story_id]]

    def encode_captions(self, story):
        pairs = [self.vocab.encode(c, self.max_caption_len) for c in story.captions]
        return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])

    def subset(self, story_ids, split):
        wanted = set(story_ids)
        return StoryDataset(
            [s for s in self.stories if s.story_id in wanted], split, self.vocab, self.char_names, self.max_caption_len
        )

    def checksum(self):
        """sha256 over ids, captions, labels and raw frame bytes."""
        h = hashlib.sha256()
        h.update(json.dumps(self.vocab.itos).encode("utf-8"))
        for s in self.stories:
            h.update(s.story_id.encode("utf-8"))
            h.update(json.dumps(s.captions).encode("utf-8"))
            h.update(np.ascontiguousarray(s.char_labels, dtype=np.uint8).tobytes())
            h.update(np.ascontiguousarray(s.frames, dtype=np.float32).tobytes())
        return h.hexdigest()


@dataclass
class StoryBatch:
    images: torch.Tensor  # (B, T, 3, H, W)
    tokens: torch.Tensor  # (B, T, L) long
    mask: torch.Tensor  # (B, T, L) bool
    labels: torch.Tensor  # (B, T, C) float
    story_ids: List[str]

    def __len__(self):
        return self.images.shape[0]

    def to(self, device):
        return StoryBatch(
            self.images.to(device), self.tokens.to(device), self.mask.to(device), self.labels.to(device), self.story_ids
        )


class StoryTensorDataset(Dataset):
    """torch view of a ``StoryDataset``: channel-first frames, encoded captions."""

    def __init__(self, dataset):
        self.dataset = dataset

    def __len__(self):
        return len(self.dataset)

    def __getitem__(self, idx):
        story = self.dataset[idx]
        tokens, mask = self.dataset.encode_captions(story)
        return {
            "images": torch.from_numpy(np.ascontiguousarray(story.frames.transpose(0, 3, 1, 2))),
            "tokens": torch.from_numpy(tokens),
            "mask": torch.from_numpy(mask),
            "labels": torch.from_numpy(story.char_labels.astype(np.float32)),
            "story_id": story.story_id,
        }


def collate_stories(items):
    return StoryBatch(
        images=torch.stack([it["images"] for it in items]),
        tokens=torch.stack([it["tokens"] for it in items]),
        mask=torch.stack([it["mask"] for it in items]),
        labels=torch.stack([it["labels"] for it in items]),
        story_ids=[it["story_id"] for it in items],
    )


def make_batch(dataset, indices):
    view = StoryTensorDataset(dataset)
    return collate_stories([view[int(i)] for i in indices])
