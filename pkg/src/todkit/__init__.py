"""todkit: desk-scale task-oriented dialogue encoder pretraining toolkit."""

__version__ = "0.1.0"

from .corpus import Dialogue, Turn  # noqa: F401
from .encoder import EncoderConfig  # noqa: F401
from .tokenizer import TokenSequence, Vocab  # noqa: F401
from .trainer import TrainConfig  # noqa: F401
