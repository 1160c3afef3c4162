"""Base class for pretrained models that must stay frozen once trained.

The captioner, the character classifier and H-DAMSM all share this contract:
train, ``freeze()``, then any later mutation is detected by checksum and
reported as ``FrozenModelError``.
"""

import hashlib
import logging
from pathlib import Path

import torch
import torch.nn as nn

from .errors import CheckpointError, FrozenModelError

logger = logging.getLogger(__name__)


def state_checksum(module):
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode("utf-8"))
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class FrozenModule(nn.Module):
    snapshot_kind = "model"

    def __init__(self):
        super().__init__()
        self._frozen_checksum = None

    @property
    def frozen(self):
        return self._frozen_checksum is not None

    def checksum(self):
        return state_checksum(self)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)
        self._frozen_checksum = self.checksum()
        logger.info("✅ %s frozen (checksum %s)", self.__class__.__name__, self._frozen_checksum[:12])
        return self

    def train(self, mode=True):
        if mode and self.frozen:
            raise FrozenModelError(f"{self.__class__.__name__} is frozen and cannot enter training mode")
        return super().train(mode)

    def load_state_dict(self, state_dict, strict=True):
        if self.frozen:
            raise FrozenModelError(f"{self.__class__.__name__} is frozen; refusing to load new parameters")
        return super().load_state_dict(state_dict, strict=strict)

    def verify_frozen(self):
        if not self.frozen:
            raise FrozenModelError(f"{self.__class__.__name__} must be pretrained and frozen first")
        if self.checksum() != self._frozen_checksum:
            raise FrozenModelError(f"{self.__class__.__name__} parameters changed after freezing")
        return True

    # snapshots

    def snapshot_header(self):
        raise NotImplementedError

    @classmethod
    def from_header(cls, header):
        raise NotImplementedError

    def save_snapshot(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(
            {"kind": self.snapshot_kind, "header": self.snapshot_header(), "state_dict": self.state_dict()},
            path,
        )
        logger.info("✅ %s snapshot saved to %s", self.snapshot_kind, path)
        return path

    @classmethod
    def load_snapshot(cls, path, expected=None):
        """Rebuild, load and freeze. ``expected`` header entries must match exactly."""
        try:
            payload = torch.load(path, map_location="cpu")
            header = payload["header"]
            kind = payload["kind"]
            state = payload["state_dict"]
        except FileNotFoundError:
            raise
        except Exception as e:
            raise CheckpointError(f"cannot read snapshot {path}: {e}")
        if kind != cls.snapshot_kind:
            raise CheckpointError(f"{path} holds a {kind!r} snapshot, expected {cls.snapshot_kind!r}")
        for key, value in (expected or {}).items():
            if header.get(key) != value:
                raise CheckpointError(
                    f"{path}: header {key}={header.get(key)!r} does not match the current run ({value!r})"
                )
        model = cls.from_header(header)
        model.load_state_dict(state)
        return model.freeze()
