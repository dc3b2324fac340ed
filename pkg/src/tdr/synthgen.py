"""Synthetic VQA data with a known routing structure.

Two question families:

* attribute / count / existence questions about objects, answered from the
  candidate set (object features encode category and color);
* "what does the sign say" questions, answered by copying 1..max_answer_tokens
  OCR tokens of a sign, left to right.

Only sign questions contain the word "sign", so the ideal router is a rule on
the question words.
"""

from __future__ import annotations

import dataclasses
import functools
import hashlib
import itertools
import zlib
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from tdr.schema import NUM_HUMAN_ANSWERS, OCRTokenRecord, VQAInstance
from tdr.targets import normalize_answer

MAX_DEVIATIONS = 4

DEFAULT_CATEGORIES = ("dog", "cat", "car", "bus", "cup", "ball", "tree", "bird")
DEFAULT_COLORS = ("red", "blue", "green", "yellow", "white", "black")
SIGN_QUESTIONS = (
    ("what", "does", "the", "sign", "say"),
    ("what", "is", "written", "on", "the", "sign"),
)
_SYLLABLES = ("ba", "ko", "ri", "ma", "xi", "glo", "de", "tu", "ran", "vel",
              "sto", "pi", "lu", "zen", "qua", "fo", "mer", "dri", "ka", "nor")


def _default_lexicon() -> tuple[str, ...]:
    words = ["maxiglide", "flaming", "lips", "alley"]
    for a, b in itertools.product(_SYLLABLES, repeat=2):
        words.append(a + b)
    return tuple(words)


@dataclass(frozen=True)
class GenConfig:
    n_instances: int = 1000
    n_eval: int = 200
    categories: tuple[str, ...] = DEFAULT_CATEGORIES
    colors: tuple[str, ...] = DEFAULT_COLORS
    ocr_lexicon: tuple[str, ...] = field(default_factory=_default_lexicon)
    p_text_question: float = 0.5
    annotator_noise: float = 0.1
    max_answer_tokens: int = 3
    max_count: int = 4
    max_objects: int = 6
    max_ocr_distractors: int = 3
    p_sign_in_object_question: float = 0.5
    object_noise: float = 0.3
    D_ft: int = 32
    D_p: int = 32
    D_fr: int = 64
    D_obj: int = 64
    seed: int = 0

    def __post_init__(self):
        for name in ("p_text_question", "annotator_noise", "p_sign_in_object_question"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.max_answer_tokens < 1:
            raise ValueError("max_answer_tokens must be >= 1")
        if self.max_count < 1 or self.max_objects < self.max_count:
            raise ValueError("need 1 <= max_count <= max_objects")
        for name in ("categories", "colors", "ocr_lexicon"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if "sign" in self.categories:
            raise ValueError("'sign' is reserved for OCR questions")
        if len(self.ocr_lexicon) < self.max_answer_tokens + self.max_ocr_distractors + 2:
            raise ValueError("ocr_lexicon too small")

    @classmethod
    def from_mapping(cls, raw: dict[str, Any]) -> "GenConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in raw.items() if k in known})

    @functools.cached_property
    def lexicon(self) -> tuple[str, ...]:
        """Normalized lexicon words that cannot collide with candidate answers."""
        banned = set(self.candidate_pool())
        out = []
        for w in self.ocr_lexicon:
            n = normalize_answer(w)
            if n and n == w.lower() and " " not in n and n not in banned and n not in out:
                out.append(n)
        return tuple(out)

    def candidate_pool(self) -> tuple[str, ...]:
        return (*self.colors, *(str(k) for k in range(self.max_count + 1)), "yes", "no")


def emit_candidate_set(config: GenConfig) -> list[str]:
    lexicon = {normalize_answer(w) for w in config.ocr_lexicon}
    answers = {normalize_answer(a) for a in config.candidate_pool()}
    return sorted(a for a in answers - lexicon if a)


def _seeded_rng(*key: Any) -> np.random.Generator:
    digest = hashlib.blake2b(repr(key).encode(), digest_size=8).digest()
    return np.random.default_rng(int.from_bytes(digest, "little"))


def attribute_vector(name: str, dim: int) -> np.ndarray:
    return _seeded_rng("attribute", name).standard_normal(dim)


def text_embedding(text: str, dim: int) -> np.ndarray:
    """FastText stand-in: a unit-variance vector keyed by the normalized text."""
    return _seeded_rng("fasttext", normalize_answer(text)).standard_normal(dim)


def char_ngram_counts(text: str, dim: int) -> np.ndarray:
    """PHOC stand-in: hashed character unigram and bigram counts."""
    t = f"<{text.lower()}>"
    vec = np.zeros(dim)
    for n in (1, 2):
        for i in range(len(t) - n + 1):
            vec[zlib.crc32(t[i:i + n].encode()) % dim] += 1.0
    return vec


def appearance_vector(style: str, box: Sequence[float], dim: int) -> np.ndarray:
    """Appearance stand-in: a style prototype plus noise keyed by the box."""
    noise = _seeded_rng("appearance", tuple(round(b, 12) for b in box)).standard_normal(dim)
    return attribute_vector("style:" + style, dim) + 0.3 * noise


def make_ocr_token(text: str, box: Sequence[float], style: str, config: GenConfig) -> OCRTokenRecord:
    box = tuple(float(b) for b in box)
    return OCRTokenRecord(
        text=text,
        x_ft=tuple(text_embedding(text, config.D_ft)),
        x_p=tuple(char_ngram_counts(text, config.D_p)),
        x_fr=tuple(appearance_vector(style, box, config.D_fr)),
        x_spt=box,
    )


def _sign_tokens(words, rng, config) -> list[OCRTokenRecord]:
    x = rng.uniform(0.0, 0.3)
    y = rng.uniform(0.05, 0.45)
    h = rng.uniform(0.08, 0.12)
    toks = []
    for w in words:
        width = rng.uniform(0.12, 0.2)
        toks.append(make_ocr_token(w.upper(), (x, y, x + width, y + h), "sign", config))
        x += width + 0.02
    return toks


def _label_tokens(words, rng, config) -> list[OCRTokenRecord]:
    toks = []
    for w in words:
        x, y = rng.uniform(0.0, 0.9), rng.uniform(0.6, 0.95)
        box = (x, y, x + rng.uniform(0.03, 0.1), y + rng.uniform(0.02, 0.05))
        toks.append(make_ocr_token(w.upper(), box, "label", config))
    return toks


def _annotate(truth: str, distractors: Sequence[str], rng, config) -> tuple[str, ...]:
    # at most MAX_DEVIATIONS annotators deviate, so the truth always stays the
    # strict majority and the instance is never eliminated
    answers = []
    deviations = 0
    for _ in range(NUM_HUMAN_ANSWERS):
        if distractors and deviations < MAX_DEVIATIONS and rng.random() < config.annotator_noise:
            answers.append(distractors[rng.integers(len(distractors))])
            deviations += 1
        else:
            answers.append(truth)
    return tuple(answers)


def _object_question(rng, config):
    cats, colors = config.categories, config.colors
    kind = rng.choice(["color", "count", "exists"])
    target = cats[rng.integers(len(cats))]
    others = [c for c in cats if c != target]
    n_obj = int(rng.integers(1, config.max_objects + 1))
    if kind == "color":
        scene = [target] + [others[i] for i in rng.integers(len(others), size=n_obj - 1)]
        color = colors[rng.integers(len(colors))]
        truth, distractors = color, [c for c in colors if c != color]
        question = ("what", "color", "is", "the", target)
        answer_type = "other"
    elif kind == "count":
        k = int(rng.integers(0, config.max_count + 1))
        n_obj = max(n_obj, k, 1)
        scene = [target] * k + [others[i] for i in rng.integers(len(others), size=n_obj - k)]
        truth = str(k)
        distractors = [str(j) for j in range(config.max_count + 1) if j != k]
        question = ("how", "many", target, "are", "there")
        answer_type = "number"
    else:
        present = bool(rng.random() < 0.5)
        n_other = n_obj - 1 if present else n_obj
        scene = ([target] if present else []) + [others[i] for i in rng.integers(len(others), size=n_other)]
        truth = "yes" if present else "no"
        distractors = ["no" if present else "yes"]
        question = ("is", "there", "a", target)
        answer_type = "yes/no"
    order = rng.permutation(len(scene))
    scene = [scene[i] for i in order]
    obj_colors = [colors[rng.integers(len(colors))] for _ in scene]
    if kind == "color":
        obj_colors[scene.index(target)] = truth
    feats = []
    for cat, col in zip(scene, obj_colors):
        v = (attribute_vector("category:" + cat, config.D_obj)
             + attribute_vector("color:" + col, config.D_obj)
             + config.object_noise * rng.standard_normal(config.D_obj))
        feats.append(tuple(v))
    return question, tuple(feats), tuple(scene), truth, distractors, answer_type


def generate_instance(config: GenConfig, split: str, index: int) -> VQAInstance:
    rng = np.random.default_rng([config.seed, zlib.crc32(split.encode()), index])
    lexicon = config.lexicon
    n_dis = int(rng.integers(0, config.max_ocr_distractors + 1))
    text_q = bool(rng.random() < config.p_text_question)
    _, obj_feats, tags, _, _, _ = _object_question(rng, config)
    if text_q:
        L = int(rng.integers(1, config.max_answer_tokens + 1))
        picks = rng.choice(len(lexicon), size=L + n_dis, replace=False)
        sign_words = [lexicon[i] for i in picks[:L]]
        ocr = _sign_tokens(sign_words, rng, config) + _label_tokens([lexicon[i] for i in picks[L:]], rng, config)
        truth = " ".join(sign_words)
        alt = [lexicon[i] for i in rng.choice(len(lexicon), size=4, replace=False) if lexicon[i] not in sign_words]
        question = SIGN_QUESTIONS[rng.integers(len(SIGN_QUESTIONS))]
        answer_type = "other"
        distractors = alt
    else:
        question, obj_feats, tags, truth, distractors, answer_type = _object_question(rng, config)
        L = int(rng.integers(1, config.max_answer_tokens + 1)) if rng.random() < config.p_sign_in_object_question else 0
        picks = rng.choice(len(lexicon), size=L + n_dis, replace=False)
        ocr = _sign_tokens([lexicon[i] for i in picks[:L]], rng, config) + _label_tokens(
            [lexicon[i] for i in picks[L:]], rng, config)
    ocr = [ocr[i] for i in rng.permutation(len(ocr))]
    return VQAInstance(
        instance_id=f"{split}-{index:06d}",
        question_words=question,
        object_features=obj_feats,
        object_tags=tags,
        ocr_tokens=tuple(ocr),
        human_answers=_annotate(truth, distractors, rng, config),
        answer_type=answer_type,
    )


def generate(config: GenConfig, split: str = "train", n: int | None = None) -> list[VQAInstance]:
    """Instances are independent given (seed, split, index), so any slice can be
    regenerated on its own."""
    count = config.n_instances if n is None else n
    return [generate_instance(config, split, i) for i in range(count)]
