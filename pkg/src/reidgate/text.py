"""Tokenization, vocabulary construction, and the linear word embedding."""

from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass, field

from . import autodiff as ad

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

_STRIP_CHARS = string.punctuation


def tokenize(text: str) -> list:
    """Lowercase, split on whitespace, strip surrounding punctuation."""
    tokens = []
    for raw in text.lower().split():
        tok = raw.strip(_STRIP_CHARS)
        if tok:
            tokens.append(tok)
    return tokens


@dataclass
class Vocabulary:
    token_to_id: dict = field(default_factory=dict)
    id_to_token: list = field(default_factory=list)

    def __len__(self):
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)


def build_vocab(corpus, min_freq: int = 1) -> Vocabulary:
    """Frequency-ordered vocabulary; ties broken lexicographically.

    Tokens below ``min_freq`` map to UNK.
    """
    if not corpus:
        raise ValueError("build_vocab: empty corpus")
    counts = Counter()
    for caption in corpus:
        counts.update(tokenize(caption))
    kept = sorted(
        (tok for tok, c in counts.items() if c >= min_freq),
        key=lambda tok: (-counts[tok], tok),
    )
    id_to_token = [PAD_TOKEN, UNK_TOKEN] + kept
    token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
    return Vocabulary(token_to_id=token_to_id, id_to_token=id_to_token)


def encode(caption: str, vocab: Vocabulary) -> list:
    """Token ids for a caption; OOV maps to UNK; empty captions become [UNK]."""
    ids = [vocab.lookup(tok) for tok in tokenize(caption)]
    return ids if ids else [UNK_ID]


def decode(ids, vocab: Vocabulary) -> str:
    return " ".join(vocab.id_to_token[i] for i in ids)


def embed(ids, W_emb: ad.Tensor) -> list:
    """Embedded sequence: one tensor (row of W_emb) per token id."""
    rows = W_emb.data.shape[0]
    for i in ids:
        if not 0 <= i < rows:
            raise ValueError(f"embed: token id {i} out of range for embedding table with {rows} rows")
    return [ad.embedding_row(W_emb, i) for i in ids]
