"""Toy text encoding: closed vocabulary, whitespace tokenizer, learned
embedding lookup. The embedding table lives on the denoiser so it trains
with the rest of the base model; this module owns the vocabulary and the
prompt -> embedding plumbing.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"


class Vocabulary:
    """Closed token set; index 0 is the pad embedding, index 1 is UNK."""

    def __init__(self, words: list[str]):
        self.tokens: list[str] = [PAD_TOKEN, UNK_TOKEN] + list(words)
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def encode(self, text: str) -> list[int]:
        """Lowercased whitespace tokenization; unknown words map to UNK."""
        return [self.index.get(w, self.unk_id) for w in text.lower().split()]

    def to_list(self) -> list[str]:
        return list(self.tokens)

    @classmethod
    def from_list(cls, tokens: list[str]) -> "Vocabulary":
        if tokens[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("vocabulary list must start with pad and unk tokens")
        return cls(tokens[2:])


@dataclass
class PromptEmbedding:
    """Embedded prompt: [T, D] (or [B, T, D]) rows; mask marks real tokens.

    Padded positions hold the learned pad embedding; a prompt of all pads is
    the null prompt used for the unconditional guidance branch.
    """

    tokens: Tensor
    mask: Tensor

    @property
    def is_null(self) -> bool:
        return not bool(self.mask.any())


def token_ids(prompt: str, vocab: Vocabulary, max_tokens: int) -> Tensor:
    ids = vocab.encode(prompt)[:max_tokens]
    ids = ids + [vocab.pad_id] * (max_tokens - len(ids))
    return torch.tensor(ids, dtype=torch.long)


def encode_prompt(
    prompt: str,
    vocab: Vocabulary,
    embedding: torch.nn.Embedding,
    max_tokens: int,
) -> PromptEmbedding:
    """Tokenize, pad/truncate to max_tokens and look up learned embeddings."""
    ids = token_ids(prompt, vocab, max_tokens)
    mask = ids != vocab.pad_id
    # UNK is a real (non-pad) token but an empty prompt yields no tokens at all
    return PromptEmbedding(tokens=embedding(ids), mask=mask)


def encode_prompt_batch(
    prompts: list[str],
    vocab: Vocabulary,
    embedding: torch.nn.Embedding,
    max_tokens: int,
) -> PromptEmbedding:
    ids = torch.stack([token_ids(p, vocab, max_tokens) for p in prompts])
    mask = ids != vocab.pad_id
    return PromptEmbedding(tokens=embedding(ids), mask=mask)
