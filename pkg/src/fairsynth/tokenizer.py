"""Feature-wise tokenizer and detokenizer heads."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .schema_io import TabularSchema


@dataclass
class FeatureLogits:
    """Per-feature reconstructions, listed in schema order within each kind.

    ``cat`` includes the protected feature; use :attr:`protected` to get its logits.
    ``num_hidden`` is the pre-aggregation activation of each numerical head.
    """

    cat: list[torch.Tensor]  # (batch, |categories|) each
    num: torch.Tensor  # (batch, n_num)
    num_hidden: torch.Tensor  # (batch, n_num, h)
    protected_pos: int  # position of the protected feature inside ``cat``

    @property
    def protected(self) -> torch.Tensor:
        return self.cat[self.protected_pos]

    @property
    def unprotected_cat(self) -> list[torch.Tensor]:
        return [c for i, c in enumerate(self.cat) if i != self.protected_pos]


class Tokenizer(nn.Module):
    """Maps (numerical block, categorical block) to ``(batch, k, d_token)`` tokens in schema order."""

    def __init__(self, schema: TabularSchema, d_token: int = 16):
        super().__init__()
        self.d_token = d_token
        self.cardinalities = [schema.features[j].cardinality for j in schema.categorical_indices]
        n_num = len(schema.numerical_indices)
        self.n_num = n_num
        bound = 1 / d_token**0.5
        self.num_weight = nn.Parameter(torch.empty(n_num, d_token).uniform_(-bound, bound))
        self.num_bias = nn.Parameter(torch.empty(n_num, d_token).uniform_(-bound, bound))
        self.embeddings = nn.ModuleList(nn.Embedding(c, d_token) for c in self.cardinalities)
        for emb in self.embeddings:
            nn.init.uniform_(emb.weight, -bound, bound)
        # tokens are built as [numericals..., categoricals...]; this restores schema order
        order = schema.numerical_indices + schema.categorical_indices
        self.register_buffer("schema_order", torch.argsort(torch.tensor(order)), persistent=False)

    def validate(self, x_cat: torch.Tensor) -> None:
        for j, c in enumerate(self.cardinalities):
            col = x_cat[:, j]
            if (col < 0).any() or (col >= c).any():
                raise IndexError(f"category index out of range for categorical feature {j}")

    def forward(self, x_num: torch.Tensor, x_cat: torch.Tensor) -> torch.Tensor:
        parts = []
        if self.n_num:
            parts.append(x_num[..., None] * self.num_weight + self.num_bias)
        if self.cardinalities:
            parts.append(torch.stack([emb(x_cat[:, j]) for j, emb in enumerate(self.embeddings)], dim=1))
        tokens = torch.cat(parts, dim=1)
        return tokens[:, self.schema_order]


class Detokenizer(nn.Module):
    """Per-feature heads from decoded tokens back to logits / scalars."""

    def __init__(self, schema: TabularSchema, d_token: int = 16, hidden: int = 8):
        super().__init__()
        self.d_token = d_token
        self.hidden = hidden
        self.num_pos = schema.numerical_indices
        self.cat_pos = schema.categorical_indices
        self.protected_pos = self.cat_pos.index(schema.protected_index)
        self.k = schema.k
        self.cat_heads = nn.ModuleList(
            nn.Linear(d_token, schema.features[j].cardinality) for j in self.cat_pos
        )
        self.num_hidden = nn.ModuleList(nn.Linear(d_token, hidden) for _ in self.num_pos)
        self.num_out = nn.ModuleList(nn.Linear(hidden, 1) for _ in self.num_pos)

    def forward(self, tokens: torch.Tensor) -> FeatureLogits:
        if tokens.shape[-2:] != (self.k, self.d_token):
            raise ValueError(
                f"expected tokens of shape (batch, {self.k}, {self.d_token}), got {tuple(tokens.shape)}"
            )
        cat = [head(tokens[:, j]) for head, j in zip(self.cat_heads, self.cat_pos)]
        hid, out = [], []
        for h_layer, o_layer, j in zip(self.num_hidden, self.num_out, self.num_pos):
            h = torch.tanh(h_layer(tokens[:, j]))
            hid.append(h)
            out.append(o_layer(h).squeeze(-1))
        B = tokens.shape[0]
        num = torch.stack(out, dim=1) if out else tokens.new_zeros(B, 0)
        num_hidden = torch.stack(hid, dim=1) if hid else tokens.new_zeros(B, 0, self.hidden)
        return FeatureLogits(cat, num, num_hidden, self.protected_pos)


def tokenize(x_num, x_cat, tokenizer: Tokenizer) -> torch.Tensor:
    x_cat = torch.as_tensor(x_cat, dtype=torch.long)
    tokenizer.validate(x_cat)
    x_num = torch.as_tensor(x_num, dtype=tokenizer.num_weight.dtype)
    return tokenizer(x_num, x_cat)


def detokenize(tokens: torch.Tensor, detokenizer: Detokenizer) -> FeatureLogits:
    return detokenizer(tokens)
