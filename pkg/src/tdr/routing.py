"""Dual routing heads: candidate classifier, OCR pointer, gate, and their losses."""

from __future__ import annotations

import collections
import logging
from dataclasses import dataclass
from typing import Callable

import torch
from torch import nn

from tdr.featurize import BEGIN

logger = logging.getLogger(__name__)

PROB_EPS = 1e-7
# how often each loss had to clamp a probability into [PROB_EPS, 1 - PROB_EPS]
clamp_events: collections.Counter = collections.Counter()


@dataclass
class PredictionOutputs:
    s_hat: torch.Tensor  # (N, C) probabilities
    y: torch.Tensor  # (N, T, M+1) pointer scores, -inf at padded OCR slots, END last
    g_hat: torch.Tensor  # (N,)


@dataclass
class LossBreakdown:
    l_cls: torch.Tensor
    l_ptr: torch.Tensor
    l_gate: torch.Tensor
    omega_cls: float
    omega_ptr: float
    total: torch.Tensor

    def as_dict(self) -> dict[str, float]:
        return {
            "l_cls": self.l_cls.item(), "l_ptr": self.l_ptr.item(), "l_gate": self.l_gate.item(),
            "omega_cls": self.omega_cls, "omega_ptr": self.omega_ptr, "total": self.total.item(),
        }


class Classifier(nn.Module):
    def __init__(self, d: int, C: int):
        super().__init__()
        self.linear = nn.Linear(d, C)

    def forward(self, z_cls: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.linear(z_cls))


class PointerHead(nn.Module):
    """Bilinear score between projected OCR and decoder states, plus a learned END row."""

    def __init__(self, d: int):
        super().__init__()
        self.ocr_proj = nn.Linear(d, d)
        self.dec_proj = nn.Linear(d, d)
        self.end = nn.Parameter(torch.randn(d))

    def forward(self, z_ocr: torch.Tensor, z_dec: torch.Tensor, ocr_mask: torch.Tensor) -> torch.Tensor:
        B = z_ocr.shape[0]
        cands = torch.cat([z_ocr, self.end.expand(B, 1, -1)], dim=1)
        y = self.dec_proj(z_dec) @ self.ocr_proj(cands).transpose(1, 2)
        keep = torch.cat([ocr_mask, ocr_mask.new_ones(B, 1)], dim=1)
        return y.masked_fill(~keep.unsqueeze(1), float("-inf"))


class GatingNetwork(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, z_cls: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(z_cls)))).squeeze(-1)


def _clamp(p: torch.Tensor, name: str) -> torch.Tensor:
    clipped = (p < PROB_EPS) | (p > 1 - PROB_EPS)
    if bool(clipped.any()):
        clamp_events[name] += int(clipped.sum())
    return p.clamp(PROB_EPS, 1 - PROB_EPS)


def _bce(p: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return -(target * torch.log(p) + (1 - target) * torch.log1p(-p))


def classifier_loss(s_hat: torch.Tensor, s: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Gated BCE over candidates, normalized by the full batch size N."""
    g = g.to(s_hat.dtype)
    if not bool(g.any()):
        return s_hat.new_zeros(())
    per_inst = _bce(_clamp(s_hat, "cls"), s).sum(-1)
    return (g * per_inst).sum() / s_hat.shape[0]


def pointer_loss(y: torch.Tensor, targets: torch.Tensor, step_mask: torch.Tensor,
                 g: torch.Tensor) -> torch.Tensor:
    """BCE summed over candidate slots, averaged over valid (instance, step) pairs
    of pointer-branch instances. Slots scored -inf (padding) are skipped."""
    weight = step_mask.to(y.dtype) * (1 - g.to(y.dtype)).unsqueeze(-1)
    n_valid = weight.sum()
    if float(n_valid) == 0.0:
        logger.debug("pointer_loss: no valid decoding steps in batch")
        return y.new_zeros(())
    real = torch.isfinite(y)
    p = _clamp(torch.sigmoid(y.masked_fill(~real, 0.0)), "ptr")
    per_slot = torch.where(real, _bce(p, targets), torch.zeros_like(p))
    return (per_slot.sum(-1) * weight).sum() / n_valid


def gating_loss(g_hat: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    return _bce(_clamp(g_hat, "gate"), g.to(g_hat.dtype)).mean()


def loss_weights(g: torch.Tensor) -> tuple[float, float]:
    n = g.numel()
    omega_cls = float(g.sum()) / n
    return omega_cls, float((1 - g).sum()) / n


def total_loss(l_cls: torch.Tensor, l_ptr: torch.Tensor, l_gate: torch.Tensor,
               g: torch.Tensor) -> LossBreakdown:
    omega_cls, omega_ptr = loss_weights(g)
    total = omega_cls * l_cls + omega_ptr * l_ptr + l_gate
    return LossBreakdown(l_cls, l_ptr, l_gate, omega_cls, omega_ptr, total)


def route(g_hat, threshold: float = 0.5):
    """1 (classifier branch) when g_hat >= threshold, else 0 (pointer branch)."""
    if isinstance(g_hat, torch.Tensor):
        return (g_hat >= threshold).long()
    return int(g_hat >= threshold)


def decode(step_scores: Callable[[torch.Tensor], torch.Tensor], batch_size: int, T: int,
           M: int) -> list[list[int]]:
    """Greedy pointer decoding.

    ``step_scores(prev_slots)`` runs the network on a (B, T) tensor of previous
    tokens and returns (B, T, M+1) scores. Each step re-runs it with the choices
    so far, takes the argmax at the current step, and an instance stops once it
    picks END (slot M). Returned sequences hold the non-END slots in order.
    """
    prev = torch.full((batch_size, T), M, dtype=torch.long)
    prev[:, 0] = BEGIN
    done = torch.zeros(batch_size, dtype=torch.bool)
    out: list[list[int]] = [[] for _ in range(batch_size)]
    for t in range(T):
        choice = step_scores(prev)[:, t].argmax(-1)
        for b in range(batch_size):
            if done[b]:
                continue
            c = int(choice[b])
            if c == M:
                done[b] = True
            else:
                out[b].append(c)
        if bool(done.all()):
            break
        if t + 1 < T:
            prev[:, t + 1] = torch.where(done, torch.full_like(choice, M), choice)
    return out
