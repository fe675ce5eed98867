"""scikit-learn style wrappers around the translator and the annotator."""

from __future__ import annotations

from typing import Sequence

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .corpus import Vocabulary, build_vocab, make_example
from .evaluation import corpus_bleu
from .model import PhraseNet
from .params import ModelConfig
from .phrase_memory import PhraseTable, SentenceAnnotation, annotate
from .search import decode_beam, decode_greedy
from .trainer import Trainer, TrainerConfig, load_checkpoint, save_checkpoint


def check_sentences(X, name: str = "X") -> list[list[str]]:
    """Accept whitespace-separated strings or token sequences; reject empty sentences."""
    if isinstance(X, (str, bytes)):
        raise TypeError(f"{name} must be a sequence of sentences, not a single string")
    out = []
    for i, s in enumerate(X):
        toks = s.split() if isinstance(s, str) else list(s)
        if not toks:
            raise ValueError(f"{name}[{i}] is empty")
        if not all(isinstance(t, str) for t in toks):
            raise TypeError(f"{name}[{i}] contains non-string tokens")
        out.append(toks)
    if not out:
        raise ValueError(f"{name} is empty")
    return out


def check_parallel(X, y) -> tuple[list[list[str]], list[list[str]]]:
    src, tgt = check_sentences(X, "X"), check_sentences(y, "y")
    if len(src) != len(tgt):
        raise ValueError(f"X and y differ in length ({len(src)} vs {len(tgt)})")
    return src, tgt


class PhraseAnnotator(TransformerMixin, BaseEstimator):
    """Maps source sentences to phrase-candidate annotations."""

    def __init__(self, table: PhraseTable | None = None, n_p: int = 10):
        self.table = table
        self.n_p = n_p

    def fit(self, X=None, y=None):
        if self.n_p < 1:
            raise ValueError("n_p must be >= 1")
        self.table_ = self.table if self.table is not None else PhraseTable()
        return self

    def transform(self, X, y=None) -> list[SentenceAnnotation]:
        check_is_fitted(self, "table_")
        src = check_sentences(X)
        refs = [None] * len(src) if y is None else check_sentences(y, "y")
        return [annotate(self.table_, s, r, self.n_p) for s, r in zip(src, refs)]


class PhraseNetTranslator(BaseEstimator):
    """Attention translator with an optional phrase memory.

    ``target_vocab`` pins the target vocabulary (tokens outside it become
    UNK); otherwise the ``tgt_vocab_size`` most frequent target tokens are
    kept. The baseline variant never consults ``table``.
    """

    def __init__(
        self,
        variant: str = "gate",
        table: PhraseTable | None = None,
        d_e: int = 16,
        d_h: int = 32,
        n_p: int = 10,
        src_vocab_size: int = 16000,
        tgt_vocab_size: int = 16000,
        target_vocab: Sequence[str] | None = None,
        epochs: int = 10,
        batch_size: int = 32,
        lr: float = 1e-3,
        clip_norm: float = 5.0,
        max_len: int = 50,
        beam: int = 1,
        decode_max_len: int = 100,
        seed: int = 0,
        workers: int = 1,
    ):
        self.variant = variant
        self.table = table
        self.d_e = d_e
        self.d_h = d_h
        self.n_p = n_p
        self.src_vocab_size = src_vocab_size
        self.tgt_vocab_size = tgt_vocab_size
        self.target_vocab = target_vocab
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.clip_norm = clip_norm
        self.max_len = max_len
        self.beam = beam
        self.decode_max_len = decode_max_len
        self.seed = seed
        self.workers = workers

    def _table(self) -> PhraseTable | None:
        return None if self.variant == "baseline" else self.table

    def _examples(self, src, tgt=None):
        table = self._table()
        tgt = tgt if tgt is not None else [None] * len(src)
        return [make_example(s, t, self.src_vocab_, self.tgt_vocab_, table, self.n_p) for s, t in zip(src, tgt)]

    def fit(self, X, y):
        src, tgt = check_parallel(X, y)
        self.src_vocab_ = build_vocab(src, self.src_vocab_size)
        if self.target_vocab is not None:
            self.tgt_vocab_ = Vocabulary(self.target_vocab)
        else:
            self.tgt_vocab_ = build_vocab(tgt, self.tgt_vocab_size)
        cfg = ModelConfig(len(self.src_vocab_), len(self.tgt_vocab_), self.variant, self.d_e, self.d_h, self.n_p)
        self.model_ = PhraseNet(cfg, rng=self.seed)
        trainer = Trainer(
            self.model_,
            TrainerConfig(self.batch_size, self.max_len, self.lr, self.clip_norm, self.seed, self.workers, log_every=0),
        )
        trainer.vocabs = (self.src_vocab_, self.tgt_vocab_)
        self.history_ = trainer.fit(self._examples(src, tgt), epochs=self.epochs)
        return self

    def translate(self, X):
        """Best hypotheses (with scores, choices and attention) per sentence."""
        check_is_fitted(self, "model_")
        out = []
        for ex in self._examples(check_sentences(X)):
            if self.beam == 1:
                out.append(decode_greedy(self.model_, ex, self.tgt_vocab_, self.decode_max_len))
            else:
                out.append(decode_beam(self.model_, ex, self.tgt_vocab_, self.beam, self.decode_max_len))
        return out

    def predict(self, X) -> list[list[str]]:
        return [h.tokens for h in self.translate(X)]

    def score(self, X, y) -> float:
        """Corpus BLEU of the predictions against ``y``."""
        return corpus_bleu(self.predict(X), check_sentences(y, "y")).bleu

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(self.model_, path, vocabs=(self.src_vocab_, self.tgt_vocab_))

    def load(self, path) -> "PhraseNetTranslator":
        ckpt = load_checkpoint(path, variant=self.variant)
        if ckpt.vocabs is None:
            raise ValueError(f"{path} stores no vocabularies")
        self.model_ = ckpt.model
        self.src_vocab_, self.tgt_vocab_ = ckpt.vocabs
        self.n_p = ckpt.model.config.n_p
        return self
