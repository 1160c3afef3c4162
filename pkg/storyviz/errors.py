"""Exception hierarchy shared by every storyviz module."""


class StoryVizError(Exception):
    """Root of all errors raised on purpose by storyviz."""


class ConfigError(StoryVizError):
    """Invalid or incomplete configuration (bad key, bad value, missing file)."""


class DataIntegrityError(StoryVizError):
    """On-disk or in-memory data violates a dataset invariant."""


class VocabularyError(StoryVizError, KeyError):
    """Token or id outside the closed vocabulary."""

    def __str__(self):
        return str(self.args[0]) if self.args else "out-of-vocabulary"


class DomainError(StoryVizError, ValueError):
    """Numerical input outside the domain of a formula."""


class FrozenModelError(StoryVizError):
    """A frozen model was mutated, or a model that must be frozen is not."""


class CheckpointError(StoryVizError):
    """A checkpoint or snapshot cannot be loaded."""


class MissingSnapshotError(StoryVizError):
    """A pretrained metric/dual model is required but has not been produced."""

    def __init__(self, which, path=None):
        self.which = which
        self.path = path
        where = f" (expected {path})" if path else ""
        super().__init__(
            f"missing {which} snapshot{where}: pretrain {which} first "
            f"with `python -m storyviz pretrain {which}`"
        )


class NonFiniteLossError(StoryVizError):
    """A training loss became NaN or infinite."""

    def __init__(self, step, losses, snapshot_path=None):
        self.step = step
        self.losses = losses
        self.snapshot_path = snapshot_path
        bad = ", ".join(k for k, v in losses.items() if v != v or v in (float("inf"), float("-inf")))
        msg = f"non-finite loss at step {step}: {bad}"
        if snapshot_path:
            msg += f" (diagnostic snapshot: {snapshot_path})"
        super().__init__(msg)


class EvaluationError(StoryVizError):
    """A metric cannot be computed on the given inputs."""
