"""The full network: embeddings -> joint transformer -> dual routing heads."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from tdr import routing
from tdr.featurize import BEGIN, InputEmbeddings, Vocab, encode_batch
from tdr.fusion import FusedRepresentations, FusionTransformer, build_mask, split
from tdr.schema import ModelConfig, VQAInstance
from tdr.targets import TargetBundle

CHECKPOINT_FORMAT = "tdr-checkpoint"
CHECKPOINT_VERSION = 1

# parameter-name prefix -> group, used by gradcheck and the branch-exclusivity tests
PARAM_GROUPS = {
    "embed.": "embedding",
    "fusion.": "fusion",
    "classifier.": "classifier",
    "pointer.": "pointer",
    "gate.": "gating",
}


def param_group(name: str) -> str:
    for prefix, group in PARAM_GROUPS.items():
        if name.startswith(prefix):
            return group
    raise KeyError(name)


class ConfigMismatchError(ValueError):
    pass


class TDRModel(nn.Module):
    def __init__(self, config: ModelConfig, vocab: Vocab, candidates: Sequence[str]):
        super().__init__()
        if len(candidates) != config.C:
            raise ConfigMismatchError(f"{len(candidates)} candidates but C={config.C}")
        self.config = config
        self.vocab = vocab
        self.candidates = list(candidates)
        self.embed = InputEmbeddings(config, len(vocab))
        self.fusion = FusionTransformer(config.d, config.num_layers, config.num_heads, config.dropout)
        self.classifier = routing.Classifier(config.d, config.C)
        self.pointer = routing.PointerHead(config.d)
        self.gate = routing.GatingNetwork(config.d, config.gate_hidden)

    @property
    def dtype(self) -> torch.dtype:
        return self.gate.fc1.weight.dtype

    def encode(self, instances: Sequence[VQAInstance]) -> dict[str, torch.Tensor]:
        return encode_batch(instances, self.vocab, self.config, dtype=self.dtype)

    def fuse(self, batch: dict[str, torch.Tensor], prev_slots: torch.Tensor) -> FusedRepresentations:
        c = self.config
        bundle = self.embed.bundle(batch, prev_slots)
        mask = build_mask(*bundle.encoder_masks, prev_slots.shape[1])
        z = self.fusion(self.embed.pack(bundle), mask)
        return split(z, c.V + 1, c.E, c.M, prev_slots.shape[1])

    def forward(self, batch: dict[str, torch.Tensor], prev_slots: torch.Tensor) -> routing.PredictionOutputs:
        fused = self.fuse(batch, prev_slots)
        return routing.PredictionOutputs(
            s_hat=self.classifier(fused.z_cls),
            y=self.pointer(fused.z_ocr, fused.z_dec, batch["ocr_mask"]),
            g_hat=self.gate(fused.z_cls),
        )

    def losses(self, out: routing.PredictionOutputs, targets: dict[str, torch.Tensor]) -> routing.LossBreakdown:
        g = targets["g"]
        return routing.total_loss(
            routing.classifier_loss(out.s_hat, targets["cls"], g),
            routing.pointer_loss(out.y, targets["ptr"], targets["step_mask"], g),
            routing.gating_loss(out.g_hat, g),
            g,
        )

    @torch.no_grad()
    def decode(self, batch: dict[str, torch.Tensor]) -> list[list[int]]:
        B = batch["word_ids"].shape[0]
        T, M = self.config.T, self.config.M
        return routing.decode(lambda prev: self(batch, prev).y, B, T, M)

    @torch.no_grad()
    def infer(self, instances: Sequence[VQAInstance], force_branch: int | None = None) -> list[dict]:
        """Route each instance and produce its answer string."""
        batch = self.encode(instances)
        T, M = self.config.T, self.config.M
        prev = torch.full((len(instances), T), M, dtype=torch.long)
        prev[:, 0] = BEGIN
        out = self(batch, prev)
        branches = routing.route(out.g_hat)
        if force_branch is not None:
            branches = torch.full_like(branches, force_branch)
        sequences = self.decode(batch)
        results = []
        for i, inst in enumerate(instances):
            branch = int(branches[i])
            if branch == 1:
                answer = self.candidates[int(out.s_hat[i].argmax())]
                slots: list[int] = []
            else:
                slots = sequences[i]
                answer = " ".join(inst.ocr_tokens[s].text for s in slots)
            results.append({
                "instance_id": inst.instance_id,
                "g_hat": float(out.g_hat[i]),
                "branch": branch,
                "answer": answer,
                "ocr_slots": slots,
            })
        return results


def teacher_inputs(bundles: Sequence[TargetBundle], T: int, M: int,
                   dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
    """Stack targets and the teacher-forced previous-token codes for a batch."""
    N = len(bundles)
    prev = torch.full((N, T), M, dtype=torch.long)
    prev[:, 0] = BEGIN
    step_mask = torch.zeros(N, T, dtype=torch.bool)
    for i, b in enumerate(bundles):
        for t, slot in enumerate(b.ocr_indices[: T - 1]):
            prev[i, t + 1] = slot
        step_mask[i, : b.valid_steps] = True
    return {
        "g": torch.tensor([b.g for b in bundles], dtype=dtype),
        "cls": torch.from_numpy(np.stack([b.cls_targets for b in bundles])).to(dtype),
        "ptr": torch.from_numpy(np.stack([b.ptr_targets for b in bundles])).to(dtype),
        "step_mask": step_mask,
        "prev_slots": prev,
    }


def save_checkpoint(model: TDRModel, path: str | Path, **extra) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "vocab": model.vocab.itos,
        "candidates": model.candidates,
        "state_dict": model.state_dict(),
        **extra,
    }, path)


def load_checkpoint(path: str | Path, expected: ModelConfig | None = None) -> TDRModel:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT or blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
    config = ModelConfig(**blob["config"])
    if expected is not None and expected != config:
        diff = {k: (v, getattr(expected, k)) for k, v in config.to_dict().items()
                if getattr(expected, k) != v}
        raise ConfigMismatchError(f"checkpoint config differs (stored, expected): {diff}")
    vocab = Vocab()
    for w in blob["vocab"]:
        vocab.add(w)
    model = TDRModel(config, vocab, blob["candidates"])
    model.load_state_dict(blob["state_dict"])
    model.eval()
    return model
