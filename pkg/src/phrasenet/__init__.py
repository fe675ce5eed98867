"""phraseNet: attention-based translation with a symbolic phrase memory."""

__version__ = "0.1.0"

from .estimator import PhraseAnnotator, PhraseNetTranslator  # noqa: E402
from .model import PhraseNet  # noqa: E402
from .params import ModelConfig  # noqa: E402
from .phrase_memory import PhraseTable, load_table  # noqa: E402

__all__ = ["PhraseAnnotator", "PhraseNetTranslator", "PhraseNet", "ModelConfig", "PhraseTable", "load_table"]
