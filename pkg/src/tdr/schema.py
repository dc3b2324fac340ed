"""Data model for VQA instances, model configuration, and the JSONL dataset format."""

from __future__ import annotations

import collections
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

import yaml

logger = logging.getLogger(__name__)

ANSWER_TYPES = ("yes/no", "number", "other")
NUM_HUMAN_ANSWERS = 10
DATASET_FORMAT = "tdr-vqa"
DATASET_VERSION = 1


class SchemaError(ValueError):
    """A record is missing a field or holds a value of the wrong shape."""


class DatasetParseError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


def _finite_vector(name: str, values: Iterable[float]) -> tuple[float, ...]:
    vec = tuple(float(v) for v in values)
    if not all(math.isfinite(v) for v in vec):
        raise SchemaError(f"{name} contains non-finite values")
    return vec


@dataclass(frozen=True)
class OCRTokenRecord:
    text: str
    x_ft: tuple[float, ...]
    x_p: tuple[float, ...]
    x_fr: tuple[float, ...]
    x_spt: tuple[float, ...]

    def __post_init__(self):
        if not isinstance(self.text, str) or not self.text.strip():
            raise SchemaError("OCR token text must be non-empty")
        for name in ("x_ft", "x_p", "x_fr", "x_spt"):
            object.__setattr__(self, name, _finite_vector(name, getattr(self, name)))
        if len(self.x_spt) != 4:
            raise SchemaError("x_spt must have 4 components")
        x0, y0, x1, y1 = self.x_spt
        if not all(0.0 <= v <= 1.0 for v in self.x_spt):
            raise SchemaError(f"x_spt outside [0, 1]: {self.x_spt}")
        if x0 > x1 or y0 > y1:
            raise SchemaError(f"degenerate box {self.x_spt}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "text": self.text,
            "x_ft": list(self.x_ft),
            "x_p": list(self.x_p),
            "x_fr": list(self.x_fr),
            "x_spt": list(self.x_spt),
        }


@dataclass(frozen=True)
class VQAInstance:
    instance_id: str
    question_words: tuple[str, ...]
    object_features: tuple[tuple[float, ...], ...]
    object_tags: tuple[str, ...]
    ocr_tokens: tuple[OCRTokenRecord, ...]
    human_answers: tuple[str, ...]
    answer_type: str

    def __post_init__(self):
        object.__setattr__(self, "question_words", tuple(self.question_words))
        object.__setattr__(self, "object_tags", tuple(self.object_tags))
        object.__setattr__(self, "ocr_tokens", tuple(self.ocr_tokens))
        object.__setattr__(self, "human_answers", tuple(self.human_answers))
        object.__setattr__(
            self,
            "object_features",
            tuple(_finite_vector("object_features", f) for f in self.object_features),
        )
        if len(self.human_answers) != NUM_HUMAN_ANSWERS:
            raise SchemaError(
                f"{self.instance_id}: expected {NUM_HUMAN_ANSWERS} human answers, "
                f"got {len(self.human_answers)}"
            )
        if self.answer_type not in ANSWER_TYPES:
            raise SchemaError(f"{self.instance_id}: unknown answer_type {self.answer_type!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "question_words": list(self.question_words),
            "object_features": [list(f) for f in self.object_features],
            "object_tags": list(self.object_tags),
            "ocr_tokens": [t.to_dict() for t in self.ocr_tokens],
            "human_answers": list(self.human_answers),
            "answer_type": self.answer_type,
        }


@dataclass(frozen=True)
class ModelConfig:
    """Network shape and training scalars. Defaults are the full-scale profile."""

    d: int = 768
    V: int = 128
    E: int = 50
    M: int = 50
    T: int = 12
    C: int = 3129
    num_layers: int = 12
    num_heads: int = 12
    D_ft: int = 300
    D_p: int = 604
    D_fr: int = 2048
    D_obj: int = 2048
    gate_hidden: int = 768
    dropout: float = 0.3
    weight_decay: float = 0.05
    learning_rate: float = 5e-5
    batch_size: int = 48
    epochs: int = 35
    seed: int = 0

    def __post_init__(self):
        for name in ("d", "V", "E", "M", "T", "C", "D_ft", "D_p", "D_fr", "D_obj",
                     "gate_hidden", "num_heads", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.num_layers < 0 or self.epochs < 0:
            raise ValueError("num_layers and epochs must be >= 0")
        if self.d % self.num_heads:
            raise ValueError(f"d={self.d} not divisible by num_heads={self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        base = dict(
            d=64, V=16, E=8, M=12, T=4, C=16, num_layers=4, num_heads=4,
            D_ft=32, D_p=32, D_fr=64, D_obj=64, gate_hidden=64, dropout=0.1,
            weight_decay=0.05, learning_rate=1e-3, batch_size=32, epochs=20,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def d_smt(self) -> int:
        return self.D_ft + self.D_p + self.D_fr

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def read_flat_config(path: str | Path) -> dict[str, Any]:
    """Read a flat ``key: value`` YAML file."""
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise SchemaError(f"{path}: config must be a flat mapping")
    for key, value in raw.items():
        if isinstance(value, dict):
            raise SchemaError(f"{path}: nested value under {key!r}; config must be flat")
    return raw


def model_config_from_mapping(raw: dict[str, Any]) -> ModelConfig:
    """``profile`` (toy|paper) picks the base; the remaining ModelConfig keys override it."""
    known = {f.name for f in dataclasses.fields(ModelConfig)}
    overrides = {k: v for k, v in raw.items() if k in known}
    profile = raw.get("profile", "toy")
    if profile == "toy":
        return ModelConfig.toy(**overrides)
    if profile == "paper":
        return ModelConfig(**overrides)
    raise SchemaError(f"unknown profile {profile!r}")


def _pad_answers(answers: list[str], instance_id: str) -> list[str]:
    if len(answers) > NUM_HUMAN_ANSWERS:
        logger.warning("%s: %d human answers, keeping the first %d",
                       instance_id, len(answers), NUM_HUMAN_ANSWERS)
        return answers[:NUM_HUMAN_ANSWERS]
    if len(answers) < NUM_HUMAN_ANSWERS:
        if not answers:
            raise SchemaError(f"{instance_id}: no human answers")
        counts = collections.Counter(answers)
        top = min(counts, key=lambda a: (-counts[a], a))
        logger.warning("%s: %d human answers, padding with %r",
                       instance_id, len(answers), top)
        return answers + [top] * (NUM_HUMAN_ANSWERS - len(answers))
    return answers


def _truncate(items: list, limit: int, what: str, instance_id: str) -> list:
    if len(items) > limit:
        logger.warning("%s: %d %s truncated to %d", instance_id, len(items), what, limit)
        return items[:limit]
    return items


def instance_from_dict(rec: dict[str, Any], config: ModelConfig | None = None) -> VQAInstance:
    required = ("instance_id", "question_words", "object_features", "object_tags",
                "ocr_tokens", "human_answers", "answer_type")
    missing = [k for k in required if k not in rec]
    if missing:
        raise SchemaError(f"missing required field(s): {', '.join(missing)}")
    iid = str(rec["instance_id"])
    words = list(rec["question_words"])
    feats = list(rec["object_features"])
    tags = list(rec["object_tags"])
    ocr = list(rec["ocr_tokens"])
    if config is not None:
        words = _truncate(words, config.V, "question words", iid)
        feats = _truncate(feats, config.E, "objects", iid)
        tags = _truncate(tags, config.E, "object tags", iid)
        ocr = _truncate(ocr, config.M, "OCR tokens", iid)
    tokens = []
    for tok in ocr:
        try:
            tokens.append(OCRTokenRecord(**{k: tok[k] for k in ("text", "x_ft", "x_p", "x_fr", "x_spt")}))
        except KeyError as e:
            raise SchemaError(f"OCR token missing field {e.args[0]!r}") from None
    return VQAInstance(
        instance_id=iid,
        question_words=tuple(str(w) for w in words),
        object_features=tuple(tuple(f) for f in feats),
        object_tags=tuple(str(t) for t in tags),
        ocr_tokens=tuple(tokens),
        human_answers=tuple(_pad_answers([str(a) for a in rec["human_answers"]], iid)),
        answer_type=str(rec["answer_type"]),
    )


def load_dataset(path: str | Path, config: ModelConfig | None = None) -> list[VQAInstance]:
    """Load instances in file order.

    The first line is a header object; each following non-blank line is one
    instance. With ``config`` given, over-long lists are cut to V/E/M.
    """
    instances = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetParseError(lineno, f"malformed record: {e.msg}") from None
            if lineno == 1 and isinstance(rec, dict) and rec.get("format") == DATASET_FORMAT:
                if rec.get("version") != DATASET_VERSION:
                    raise DatasetParseError(lineno, f"unsupported version {rec.get('version')}")
                continue
            if not isinstance(rec, dict):
                raise DatasetParseError(lineno, "record is not an object")
            try:
                instances.append(instance_from_dict(rec, config))
            except SchemaError as e:
                raise SchemaError(f"line {lineno}: {e}") from None
    return instances


def save_dataset(instances: Iterable[VQAInstance], path: str | Path) -> None:
    # repr-based float encoding keeps 17 significant digits
    with open(path, "w") as f:
        f.write(json.dumps({"format": DATASET_FORMAT, "version": DATASET_VERSION}) + "\n")
        for inst in instances:
            f.write(json.dumps(inst.to_dict(), separators=(",", ":")) + "\n")


def load_candidates(path: str | Path) -> list[str]:
    with open(path) as f:
        cands = [line.rstrip("\n") for line in f if line.strip()]
    if len(set(cands)) != len(cands):
        raise SchemaError(f"{path}: duplicate candidate answers")
    return cands


def save_candidates(candidates: Iterable[str], path: str | Path) -> None:
    with open(path, "w") as f:
        for c in candidates:
            f.write(c + "\n")
