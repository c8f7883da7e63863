"""Toy text stack: hash-bucket tokenizer, token embedding with learnable
keypoint rows, and a small frozen transformer encoder.

Ordinary words hash into a fixed bucket vocabulary whose embedding table is
frozen. Keypoint tokens live outside that vocabulary entirely (ids start at
VOCAB_SIZE), so they can never collide with ordinary words; their embedding
rows are the only trainable text parameters.
"""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass

import torch
from torch import nn

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
VOCAB_SIZE = 4096
DEFAULT_CONTEXT = 77

_KPT_PATTERN = re.compile(r"<kpt_[a-z0-9_]+>")
_WORD_PATTERN = re.compile(r"[a-z0-9']+")


class TextOverflowError(ValueError):
    """Keypoint tokens alone exceed the context length."""


def hash_token_id(word: str) -> int:
    """Stable bucket id for an ordinary word, clear of the reserved ids."""
    digest = hashlib.blake2s(word.encode("utf-8")).digest()
    return 3 + int.from_bytes(digest[:8], "big") % (VOCAB_SIZE - 3)


def tokenize(prompt: str, registry=None) -> list[str]:
    """Split a prompt into word tokens and registry keypoint tokens.

    Keypoint-token substrings are matched whole; remaining text lowercases
    and splits into alphanumeric words (punctuation dropped).
    """
    known = set(registry.tokens) if registry is not None else set()
    out: list[str] = []
    pos = 0
    lowered = prompt.lower()
    for m in _KPT_PATTERN.finditer(lowered):
        if m.group(0) not in known:
            continue
        out.extend(_WORD_PATTERN.findall(lowered[pos : m.start()]))
        out.append(m.group(0))
        pos = m.end()
    out.extend(_WORD_PATTERN.findall(lowered[pos:]))
    return out


@dataclass(eq=False)
class TextEncoding:
    """Fixed-length token sequence with substituted keypoint embeddings.

    embeddings are the pre-transformer input rows (L x D); updating a
    keypoint's embedding row changes exactly that position.
    """

    token_ids: list
    embeddings: torch.Tensor
    kpt_positions: dict  # keypoint index -> sequence position


def encode_text(prompt: str, registry, base_table: torch.Tensor,
                v_kpt: torch.Tensor | None = None,
                context_len: int = DEFAULT_CONTEXT) -> TextEncoding:
    """Build the fixed-length input encoding for one prompt.

    Layout: BOS, ordinary words, keypoint tokens, EOS, PAD...; ordinary words
    are truncated from the end to fit, keypoint tokens never are.
    """
    tokens = tokenize(prompt, registry)
    kpt_tokens = [t for t in tokens if registry is not None and t in registry.index]
    words = [t for t in tokens if registry is None or t not in registry.index]
    budget = context_len - 2 - len(kpt_tokens)
    if budget < 0:
        raise TextOverflowError(
            f"{len(kpt_tokens)} keypoint tokens exceed context {context_len}"
        )
    words = words[:budget]

    ids = [BOS_ID]
    kpt_positions: dict[int, int] = {}
    for w in words:
        ids.append(hash_token_id(w))
    for t in kpt_tokens:
        k = registry.index[t]
        kpt_positions[k] = len(ids)
        ids.append(VOCAB_SIZE + k)
    ids.append(EOS_ID)
    ids.extend([PAD_ID] * (context_len - len(ids)))

    rows = []
    for tid in ids:
        if tid >= VOCAB_SIZE:
            if v_kpt is None:
                raise ValueError("prompt has keypoint tokens but no embeddings")
            rows.append(v_kpt[tid - VOCAB_SIZE])
        else:
            rows.append(base_table[tid])
    return TextEncoding(
        token_ids=ids,
        embeddings=torch.stack(rows),
        kpt_positions=kpt_positions,
    )


class TextEncoder(nn.Module):
    """Frozen embedding table + positional rows + 2-layer transformer.

    Only produces key/value features for cross-attention; the learnable
    keypoint rows are substituted before this module runs.
    """

    def __init__(self, dim: int = 128, context_len: int = DEFAULT_CONTEXT,
                 heads: int = 4):
        super().__init__()
        self.dim = dim
        self.context_len = context_len
        self.table = nn.Parameter(torch.randn(VOCAB_SIZE, dim) * 0.02)
        self.positional = nn.Parameter(torch.randn(context_len, dim) * 0.02)
        layer = nn.TransformerEncoderLayer(
            d_model=dim, nhead=heads, dim_feedforward=dim * 4,
            dropout=0.0, batch_first=True, norm_first=True,
        )
        self.transformer = nn.TransformerEncoder(
            layer, num_layers=2, enable_nested_tensor=False
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, embeddings: torch.Tensor) -> torch.Tensor:
        """embeddings: B x L x D input rows -> B x L x D context features."""
        x = embeddings + self.positional[: embeddings.shape[1]]
        return self.norm(self.transformer(x))
