"""Joint multimodal transformer over the packed [CLS|words|objects|ocr|decoder] sequence."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F

from tdr.featurize import LN_EPS


@dataclass
class FusedRepresentations:
    z_cls: torch.Tensor  # (B, d)
    z_word: torch.Tensor  # (B, V, d), [CLS] excluded
    z_obj: torch.Tensor  # (B, E, d)
    z_ocr: torch.Tensor  # (B, M, d)
    z_dec: torch.Tensor  # (B, T, d)


def build_mask(word_mask: torch.Tensor, obj_mask: torch.Tensor, ocr_mask: torch.Tensor,
               T: int) -> torch.Tensor:
    """Boolean (B, S, S) attention mask, True where query row may attend to key column.

    Encoder slots attend to every real encoder slot. Decoder step t attends to
    every real encoder slot and decoder steps 1..t. Padded encoder rows attend
    only to themselves so their softmax stays defined; nothing attends to them.
    """
    enc = torch.cat([word_mask, obj_mask, ocr_mask], dim=1)
    B, S_enc = enc.shape
    S = S_enc + T
    dev = enc.device
    keys = torch.cat([enc, torch.ones(B, T, dtype=torch.bool, device=dev)], dim=1)
    mask = torch.zeros(B, S, S, dtype=torch.bool, device=dev)
    mask[:, :S_enc, :S_enc] = enc.unsqueeze(1) & enc.unsqueeze(2)
    mask[:, S_enc:, :S_enc] = enc.unsqueeze(1)
    mask[:, S_enc:, S_enc:] = torch.tril(torch.ones(T, T, dtype=torch.bool, device=dev))
    eye = torch.eye(S, dtype=torch.bool, device=dev)
    mask |= eye & ~keys.unsqueeze(2)
    return mask


class SelfAttention(nn.Module):
    def __init__(self, d: int, num_heads: int, dropout: float):
        super().__init__()
        self.h = num_heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        B, S, d = x.shape
        q, k, v = self.qkv(x).view(B, S, 3, self.h, d // self.h).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // self.h)
        scores = scores.masked_fill(~mask.unsqueeze(1), float("-inf"))
        attn = self.drop(torch.softmax(scores, dim=-1))
        return self.out((attn @ v).transpose(1, 2).reshape(B, S, d))


class Block(nn.Module):
    """Post-norm transformer layer with a GELU feed-forward of width 4d."""

    def __init__(self, d: int, num_heads: int, dropout: float):
        super().__init__()
        self.attn = SelfAttention(d, num_heads, dropout)
        self.norm1 = nn.LayerNorm(d, eps=LN_EPS)
        self.ff = nn.Sequential(nn.Linear(d, 4 * d), nn.GELU(), nn.Linear(4 * d, d), nn.Dropout(dropout))
        self.norm2 = nn.LayerNorm(d, eps=LN_EPS)

    def forward(self, x, mask):
        x = self.norm1(x + self.attn(x, mask))
        return self.norm2(x + self.ff(x))


class FusionTransformer(nn.Module):
    def __init__(self, d: int, num_layers: int, num_heads: int, dropout: float):
        super().__init__()
        self.layers = nn.ModuleList(Block(d, num_heads, dropout) for _ in range(num_layers))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x, mask)
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"non-finite activation after fusion layer {i}")
        return x


def split(z: torch.Tensor, V1: int, E: int, M: int, T: int) -> FusedRepresentations:
    z_word, z_obj, z_ocr, z_dec = torch.split(z, [V1, E, M, T], dim=1)
    return FusedRepresentations(z_cls=z_word[:, 0], z_word=z_word[:, 1:], z_obj=z_obj,
                                z_ocr=z_ocr, z_dec=z_dec)
