"""Answer normalization, the consensus accuracy metric, and supervision targets."""

from __future__ import annotations

import collections
import logging
import string
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from tdr.schema import VQAInstance

logger = logging.getLogger(__name__)

_PUNCT = set(string.punctuation)
_NUMBER_WORDS = {
    "zero": "0", "one": "1", "two": "2", "three": "3", "four": "4", "five": "5",
    "six": "6", "seven": "7", "eight": "8", "nine": "9", "ten": "10",
}
_ARTICLES = {"a", "an", "the"}


def _strip_punctuation(text: str) -> str:
    out = []
    for i, ch in enumerate(text):
        if ch not in _PUNCT:
            out.append(ch)
        elif ch == "-" and 0 < i < len(text) - 1 and text[i - 1].isalnum() and text[i + 1].isalnum():
            out.append(ch)
    return "".join(out)


def normalize_answer(raw: str) -> str:
    """Lowercase, drop ASCII punctuation (keeping hyphens between alphanumerics),
    map number words zero..ten to digits, drop articles, collapse whitespace."""
    words = _strip_punctuation(raw.lower()).split()
    words = [_NUMBER_WORDS.get(w, w) for w in words]
    return " ".join(w for w in words if w not in _ARTICLES)


def vqa_accuracy(candidate: str, human_answers: Sequence[str]) -> float:
    """min(#humans that gave ``candidate`` / 3, 1), compared after normalization."""
    cand = normalize_answer(candidate)
    matches = sum(normalize_answer(a) == cand for a in human_answers)
    return min(matches / 3.0, 1.0)


@dataclass
class TargetBundle:
    g: int
    cls_targets: np.ndarray  # (C,)
    ptr_targets: np.ndarray  # (T, M+1); column M is END
    valid_steps: int
    eliminated: bool
    answer: str = ""
    ocr_indices: tuple[int, ...] = ()


def target_answer(human_answers: Sequence[str]) -> str:
    """Most frequent normalized human answer; ties go to the lexicographically smallest."""
    counts = collections.Counter(normalize_answer(a) for a in human_answers)
    return min(counts, key=lambda a: (-counts[a], a))


def match_ocr(answer: str, ocr_texts: Sequence[str]) -> tuple[int, ...] | None:
    """Slot indices spelling ``answer`` word by word, or None if not composable."""
    norm = [normalize_answer(t) for t in ocr_texts]
    words = answer.split()
    if not words:
        return None
    indices = []
    for w in words:
        try:
            indices.append(norm.index(w))
        except ValueError:
            return None
    return tuple(indices)


def derive_routing(
    instance: VQAInstance, candidate_set: Sequence[str], T: int, M: int
) -> TargetBundle:
    """Assign the routing flag; the skeleton carries zero target arrays."""
    C = len(candidate_set)
    answer = target_answer(instance.human_answers)
    bundle = TargetBundle(
        g=1,
        cls_targets=np.zeros(C),
        ptr_targets=np.zeros((T, M + 1)),
        valid_steps=0,
        eliminated=False,
        answer=answer,
    )
    if answer and answer in candidate_set:
        return bundle
    indices = match_ocr(answer, [t.text for t in instance.ocr_tokens[:M]])
    if indices is None:
        bundle.eliminated = True
        return bundle
    if len(indices) >= T:
        logger.warning("%s: answer needs %d decoding steps, T=%d; eliminated",
                       instance.instance_id, len(indices) + 1, T)
        bundle.eliminated = True
        return bundle
    bundle.g = 0
    bundle.ocr_indices = indices
    return bundle


def build_cls_targets(instance: VQAInstance, candidate_set: Sequence[str]) -> np.ndarray:
    return np.array([vqa_accuracy(c, instance.human_answers) for c in candidate_set], dtype=float)


def build_ptr_targets(
    instance: VQAInstance, index_sequence: Sequence[int], T: int, M: int
) -> tuple[np.ndarray, int]:
    L = len(index_sequence)
    if L >= T:
        raise ValueError(f"answer of {L} tokens does not fit T={T} steps")
    targets = np.zeros((T, M + 1))
    answer = " ".join(instance.ocr_tokens[i].text for i in index_sequence)
    targets[0, index_sequence[0]] = vqa_accuracy(answer, instance.human_answers)
    for t in range(1, L):
        targets[t, index_sequence[t]] = 1.0
    targets[L, M] = 1.0
    return targets, L + 1


def build_targets(
    instance: VQAInstance, candidate_set: Sequence[str], T: int, M: int
) -> TargetBundle:
    bundle = derive_routing(instance, candidate_set, T, M)
    if bundle.eliminated:
        return bundle
    if bundle.g == 1:
        bundle.cls_targets = build_cls_targets(instance, candidate_set)
    else:
        bundle.ptr_targets, bundle.valid_steps = build_ptr_targets(
            instance, bundle.ocr_indices, T, M
        )
    return bundle
