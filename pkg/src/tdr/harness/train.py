from __future__ import annotations

import dataclasses
import json
import logging
import math
import random
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from tdr.featurize import Vocab
from tdr.model import TDRModel, save_checkpoint, teacher_inputs
from tdr.schema import ModelConfig, VQAInstance, load_candidates, load_dataset
from tdr.targets import TargetBundle, build_targets

logger = logging.getLogger(__name__)


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def prepare(instances: Sequence[VQAInstance], candidates: Sequence[str], config: ModelConfig
            ) -> tuple[list[VQAInstance], list[TargetBundle]]:
    """Build targets and drop eliminated instances."""
    kept, bundles = [], []
    for inst in instances:
        b = build_targets(inst, candidates, config.T, config.M)
        if b.eliminated:
            continue
        kept.append(inst)
        bundles.append(b)
    if len(kept) < len(instances):
        logger.info("eliminated %d of %d instances", len(instances) - len(kept), len(instances))
    return kept, bundles


def _slice(tensors: dict[str, torch.Tensor], idx: torch.Tensor) -> dict[str, torch.Tensor]:
    return {k: v[idx] for k, v in tensors.items()}


def fit(model: TDRModel, instances: Sequence[VQAInstance], bundles: Sequence[TargetBundle],
        epochs: int, out_dir: Path | None = None, log_path: Path | None = None) -> list[dict]:
    """Mini-batch AdamW on the composite loss with teacher forcing.

    Returns the per-epoch mean loss breakdowns. Every batch's breakdown is
    appended to ``log_path`` as one JSON line.
    """
    config = model.config
    data = model.encode(instances)
    tgt = teacher_inputs(bundles, config.T, config.M, dtype=model.dtype)
    opt = torch.optim.AdamW(model.parameters(), lr=config.learning_rate,
                            weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)
    log = open(log_path, "a") if log_path else None
    history = []
    try:
        for epoch in range(1, epochs + 1):
            model.train()
            perm = torch.randperm(len(instances), generator=gen)
            sums: dict[str, float] = {}
            n_batches = 0
            for start in range(0, len(perm), config.batch_size):
                idx = perm[start:start + config.batch_size]
                t = _slice(tgt, idx)
                out = model(_slice(data, idx), t["prev_slots"])
                lb = model.losses(out, t)
                for name in ("l_cls", "l_ptr", "l_gate"):
                    if not math.isfinite(getattr(lb, name).item()):
                        raise FloatingPointError(
                            f"non-finite {name} at epoch {epoch}, batch {n_batches}")
                opt.zero_grad()
                lb.total.backward()
                opt.step()
                row = lb.as_dict()
                if log:
                    log.write(json.dumps({"epoch": epoch, "batch": n_batches, **row}) + "\n")
                for k, v in row.items():
                    sums[k] = sums.get(k, 0.0) + v
                n_batches += 1
            means = {k: v / max(n_batches, 1) for k, v in sums.items()}
            history.append({"epoch": epoch, **means})
            logger.info("epoch %d: %s", epoch, " ".join(f"{k}={v:.4f}" for k, v in means.items()))
            if out_dir is not None:
                save_checkpoint(model, out_dir / f"epoch_{epoch:03d}.pt", epoch=epoch)
    finally:
        if log:
            log.close()
    model.eval()
    return history


def train(data_path: str | Path, candidates_path: str | Path, config: ModelConfig,
          out_dir: str | Path) -> Path:
    """Train from files; writes per-epoch checkpoints, ``model.pt``, and ``train_log.jsonl``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    candidates = load_candidates(candidates_path)
    if config.C != len(candidates):
        logger.info("setting C=%d from the candidate file (config had %d)", len(candidates), config.C)
        config = dataclasses.replace(config, C=len(candidates))
    instances = load_dataset(data_path, config)
    seed_everything(config.seed)
    kept, bundles = prepare(instances, candidates, config)
    model = TDRModel(config, Vocab.build(kept), candidates)
    log_path = out_dir / "train_log.jsonl"
    log_path.write_text("")
    history = fit(model, kept, bundles, config.epochs, out_dir, log_path)
    (out_dir / "history.json").write_text(json.dumps(history, indent=1))
    ckpt = out_dir / "model.pt"
    save_checkpoint(model, ckpt, epoch=config.epochs)
    return ckpt
