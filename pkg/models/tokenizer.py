# models/tokenizer.py
"""Whitespace / character toy tokenizer with BERT-style special tokens."""

import json
import logging
from collections import Counter
from pathlib import Path
from typing import Dict, Iterable, List, Optional

from config.errors import InputError

logger = logging.getLogger(__name__)

PAD, MASK, CLS, UNK = "[PAD]", "[MASK]", "[CLS]", "[UNK]"
SPECIAL_TOKENS = (PAD, MASK, CLS, UNK)
PAD_ID, MASK_ID, CLS_ID, UNK_ID = range(len(SPECIAL_TOKENS))
NUM_SPECIAL = len(SPECIAL_TOKENS)


class ToyTokenizer:
    """Maps words (or characters) to ids; unknown pieces map to ``[UNK]``."""

    MODES = ("word", "char")

    def __init__(self, vocab: List[str], mode: str = "word"):
        if mode not in self.MODES:
            raise InputError(f"tokenizer mode must be one of {self.MODES}, got '{mode}'")
        if tuple(vocab[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise InputError(f"vocabulary must start with {SPECIAL_TOKENS}")
        self.mode = mode
        self.vocab = list(vocab)
        self.index: Dict[str, int] = {piece: i for i, piece in enumerate(self.vocab)}

    @classmethod
    def fit(cls, texts: Iterable[str], mode: str = "word", max_vocab: Optional[int] = None) -> "ToyTokenizer":
        """Build a vocabulary from raw texts, most frequent pieces first."""
        counts: Counter = Counter()
        for text in texts:
            counts.update(cls._split(text, mode))
        budget = None if max_vocab is None else max(max_vocab - NUM_SPECIAL, 0)
        # ties broken alphabetically so the vocabulary is reproducible
        ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))[:budget]
        tokenizer = cls(list(SPECIAL_TOKENS) + [piece for piece, _ in ranked], mode=mode)
        logger.info(f"Fitted {mode} tokenizer: {tokenizer.vocab_size} entries")
        return tokenizer

    @staticmethod
    def _split(text: str, mode: str) -> List[str]:
        if mode == "char":
            return [c for c in text if not c.isspace()]
        return text.split()

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def encode(self, text: str) -> List[int]:
        return [self.index.get(piece, UNK_ID) for piece in self._split(text, self.mode)]

    def decode(self, ids: Iterable[int]) -> str:
        joiner = "" if self.mode == "char" else " "
        return joiner.join(self.vocab[i] for i in ids)

    def save(self, path: str) -> None:
        Path(path).write_text(json.dumps({"mode": self.mode, "vocab": self.vocab}, indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: str) -> "ToyTokenizer":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data["vocab"], mode=data.get("mode", "word"))
