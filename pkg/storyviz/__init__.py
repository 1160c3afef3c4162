"""Story visualization with a memory-augmented context encoder, copy-transform and dual captioning."""

from .config import RunConfig, load_config
from .errors import StoryVizError

__version__ = "0.1.0"

__all__ = ["RunConfig", "StoryVizError", "__version__", "load_config"]
