from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from tdr.model import TDRModel, load_checkpoint
from tdr.schema import VQAInstance, load_candidates, load_dataset
from tdr.targets import derive_routing, vqa_accuracy

PREDICTIONS_FORMAT = "tdr-predictions"
TYPE_KEYS = {"yes/no": "yes_no", "number": "number", "other": "other"}


class MissingPredictionError(KeyError):
    def __init__(self, ids: Sequence[str]):
        super().__init__(f"no prediction for {len(ids)} instance(s): {', '.join(ids)}")
        self.ids = list(ids)

    def __str__(self) -> str:
        return self.args[0]


def predict(model: TDRModel, instances: Sequence[VQAInstance], batch_size: int = 256,
            force_branch: int | None = None) -> list[dict]:
    model.eval()
    preds = []
    for start in range(0, len(instances), batch_size):
        preds.extend(model.infer(instances[start:start + batch_size], force_branch=force_branch))
    return preds


def predict_files(ckpt_path: str | Path, data_path: str | Path, out_path: str | Path,
                  force_branch: int | None = None) -> list[dict]:
    model = load_checkpoint(ckpt_path)
    instances = load_dataset(data_path, model.config)
    preds = predict(model, instances, force_branch=force_branch)
    save_predictions(preds, model, out_path)
    return preds


def save_predictions(preds: Sequence[dict], model: TDRModel, path: str | Path) -> None:
    """JSONL; the header line records what evaluation needs to rebuild routing flags."""
    header = {"format": PREDICTIONS_FORMAT, "candidates": model.candidates,
              "T": model.config.T, "M": model.config.M}
    with open(path, "w") as f:
        f.write(json.dumps(header) + "\n")
        for p in preds:
            f.write(json.dumps(p) + "\n")


def load_predictions(path: str | Path) -> tuple[list[dict], dict]:
    preds, header = [], {}
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("format") == PREDICTIONS_FORMAT:
                header = rec
            else:
                preds.append(rec)
    return preds, header


@dataclass
class EvalReport:
    overall_accuracy: float
    by_answer_type: dict[str, float]
    by_answer_source: dict[str, float]
    gating_accuracy: float
    gating_f1: float
    n_instances: int
    counts: dict[str, dict[str, int]] = field(default_factory=dict)
    n_eliminated: int = 0

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "by_answer_type": self.by_answer_type,
            "by_answer_source": self.by_answer_source,
            "gating_accuracy": self.gating_accuracy,
            "gating_f1": self.gating_f1,
            "n_instances": self.n_instances,
            "n_eliminated": self.n_eliminated,
            "counts": self.counts,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def _mean(xs: Sequence[float]) -> float:
    return sum(xs) / len(xs) if xs else 0.0


def f1_score(pred: Sequence[int], truth: Sequence[int], positive: int = 1) -> float:
    tp = sum(p == positive and t == positive for p, t in zip(pred, truth))
    fp = sum(p == positive and t != positive for p, t in zip(pred, truth))
    fn = sum(p != positive and t == positive for p, t in zip(pred, truth))
    return 2 * tp / (2 * tp + fp + fn) if tp else 0.0


def evaluate(predictions: Sequence[dict], instances: Sequence[VQAInstance],
             candidates: Sequence[str], T: int, M: int) -> EvalReport:
    """Consensus accuracy with answer-type / answer-source breakdowns and gate metrics.

    Instances whose answer is neither a candidate nor OCR-composable are left
    out of every number. The classifier branch (g=1) is the positive class for F1.
    """
    by_id = {p["instance_id"]: p for p in predictions}
    missing = [inst.instance_id for inst in instances if inst.instance_id not in by_id]
    if missing:
        raise MissingPredictionError(missing)
    scores, types, sources, routed, flags = [], [], [], [], []
    n_elim = 0
    for inst in instances:
        routing = derive_routing(inst, candidates, T, M)
        if routing.eliminated:
            n_elim += 1
            continue
        p = by_id[inst.instance_id]
        scores.append(vqa_accuracy(p["answer"], inst.human_answers))
        types.append(TYPE_KEYS[inst.answer_type])
        sources.append("candidate_set" if routing.g == 1 else "ocr_token")
        routed.append(int(p["branch"]))
        flags.append(routing.g)

    def group(keys, names):
        return {n: _mean([s for s, k in zip(scores, keys) if k == n]) for n in names}

    def count(keys, names):
        return {n: sum(k == n for k in keys) for n in names}

    type_names = list(TYPE_KEYS.values())
    source_names = ["ocr_token", "candidate_set"]
    return EvalReport(
        overall_accuracy=_mean(scores),
        by_answer_type=group(types, type_names),
        by_answer_source=group(sources, source_names),
        gating_accuracy=_mean([float(r == g) for r, g in zip(routed, flags)]),
        gating_f1=f1_score(routed, flags),
        n_instances=len(scores),
        counts={"by_answer_type": count(types, type_names),
                "by_answer_source": count(sources, source_names)},
        n_eliminated=n_elim,
    )


def evaluate_files(pred_path: str | Path, data_path: str | Path, out_path: str | Path,
                   candidates_path: str | Path | None = None) -> EvalReport:
    preds, header = load_predictions(pred_path)
    if "T" not in header:
        raise ValueError(f"{pred_path}: missing predictions header")
    candidates = header["candidates"]
    if candidates_path is not None:
        candidates = load_candidates(candidates_path)
    report = evaluate(preds, load_dataset(data_path), candidates, header["T"], header["M"])
    Path(out_path).write_text(report.dumps())
    return report
