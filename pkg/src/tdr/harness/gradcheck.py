"""Central finite-difference check of the composite-loss gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch

from tdr.featurize import Vocab
from tdr.harness.train import prepare, seed_everything
from tdr.model import PARAM_GROUPS, TDRModel, param_group, teacher_inputs
from tdr.schema import ModelConfig
from tdr.synthgen import GenConfig, emit_candidate_set, generate

TOLERANCE = 1e-4


def gradcheck_config(**overrides) -> ModelConfig:
    base = dict(d=8, num_layers=1, num_heads=2, V=12, E=4, M=6, T=4, D_ft=4, D_p=4, D_fr=4,
                D_obj=6, gate_hidden=8, dropout=0.0, batch_size=8)
    base.update(overrides)
    return ModelConfig.toy(**base)


@dataclass
class GradcheckReport:
    max_rel_error: float
    per_group: dict[str, float]
    per_tensor: dict[str, float] = field(repr=False)
    n_coordinates: int
    tolerance: float = TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance and set(self.per_group) == set(PARAM_GROUPS.values())


def build_problem(config: ModelConfig, seed: int, n: int = 8):
    """A tiny float64 model plus one batch containing both routing branches."""
    gen = GenConfig(n_instances=n, p_text_question=0.5, max_answer_tokens=min(2, config.T - 1),
                    max_count=2, max_objects=config.E, max_ocr_distractors=1,
                    p_sign_in_object_question=0.3,
                    D_ft=config.D_ft, D_p=config.D_p, D_fr=config.D_fr, D_obj=config.D_obj, seed=seed)
    candidates = emit_candidate_set(gen)
    config = ModelConfig(**{**config.to_dict(), "C": len(candidates)})
    kept, bundles = prepare(generate(gen, n=8 * n), candidates, config)
    picked = ([i for i, b in enumerate(bundles) if b.g == 1][: n // 2]
              + [i for i, b in enumerate(bundles) if b.g == 0][: n - n // 2])
    kept, bundles = [kept[i] for i in picked], [bundles[i] for i in picked]
    seed_everything(seed)
    model = TDRModel(config, Vocab.build(kept), candidates).double().eval()
    batch = model.encode(kept)
    targets = teacher_inputs(bundles, config.T, config.M, dtype=torch.float64)
    return model, batch, targets


def _loss(model, batch, targets) -> torch.Tensor:
    return model.losses(model(batch, targets["prev_slots"]), targets).total


def gradcheck(config: ModelConfig | None = None, seed: int = 0, eps: float = 1e-6) -> GradcheckReport:
    """Compare autograd against central differences on every parameter coordinate.

    Error per tensor is ||analytic - numeric|| / (||analytic|| + ||numeric||);
    tensors whose gradient is zero on both sides count as exact.
    """
    model, batch, targets = build_problem(config or gradcheck_config(), seed)
    model.zero_grad()
    _loss(model, batch, targets).backward()
    per_tensor, per_group = {}, {}
    n_coords = 0
    with torch.no_grad():
        for name, p in model.named_parameters():
            analytic = p.grad.clone() if p.grad is not None else torch.zeros_like(p)
            numeric = torch.zeros_like(p)
            flat, nflat = p.view(-1), numeric.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = _loss(model, batch, targets).item()
                flat[i] = orig - eps
                down = _loss(model, batch, targets).item()
                flat[i] = orig
                nflat[i] = (up - down) / (2 * eps)
            n_coords += flat.numel()
            scale = float(analytic.norm() + numeric.norm())
            err = float((analytic - numeric).norm()) / scale if scale > 1e-10 else 0.0
            per_tensor[name] = err
            group = param_group(name)
            per_group[group] = max(per_group.get(group, 0.0), err)
    return GradcheckReport(max(per_tensor.values()), per_group, per_tensor, n_coords)
