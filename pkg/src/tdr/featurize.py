"""Input embeddings for words+tags, objects, OCR tokens, and decoder steps."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
import torch
from torch import nn

from tdr.schema import ModelConfig, OCRTokenRecord

PAD, CLS, UNK = "[PAD]", "[CLS]", "[UNK]"
LN_EPS = 1e-5

# modality type ids
WORD, OBJECT, OCR, DECODER = range(4)
# decoder previous-token codes besides OCR slot indices 0..M-1 (M itself means END)
BEGIN = -1


class Vocab:
    def __init__(self, words: Iterable[str] = ()):
        self.itos = [PAD, CLS, UNK]
        self.stoi = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    def __len__(self) -> int:
        return len(self.itos)

    def __getitem__(self, word: str) -> int:
        return self.stoi.get(word, self.stoi[UNK])

    @classmethod
    def build(cls, instances) -> "Vocab":
        words = sorted({w for inst in instances for w in (*inst.question_words, *inst.object_tags)})
        return cls(words)


def word_sequence(question_words: Sequence[str], object_tags: Sequence[str], V: int) -> list[str]:
    """[CLS] + question + tags, with question+tags cut to V tokens."""
    return [CLS, *list(question_words) + list(object_tags)][: V + 1]


def assemble_ocr_semantic(token: OCRTokenRecord) -> np.ndarray:
    return np.concatenate([token.x_ft, token.x_p, token.x_fr])


@dataclass
class EmbeddingBundle:
    h_word: torch.Tensor  # (B, V+1, d), slot 0 is [CLS]
    h_obj: torch.Tensor  # (B, E, d)
    h_ocr: torch.Tensor  # (B, M, d)
    h_dec: torch.Tensor  # (B, T, d)
    word_mask: torch.Tensor  # (B, V+1) bool, True = real slot
    obj_mask: torch.Tensor
    ocr_mask: torch.Tensor
    cls_slot: int = 0

    @property
    def encoder_masks(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.word_mask, self.obj_mask, self.ocr_mask


def _masked(x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return x * mask.unsqueeze(-1).to(x.dtype)


class InputEmbeddings(nn.Module):
    def __init__(self, config: ModelConfig, vocab_size: int):
        super().__init__()
        d = config.d
        self.config = config
        self.word = nn.Embedding(vocab_size, d, padding_idx=0)
        self.word_pos = nn.Embedding(config.V + 1, d)
        self.obj_proj = nn.Linear(config.D_obj, d)
        self.smt_proj = nn.Linear(config.d_smt, d, bias=False)
        self.spt_proj = nn.Linear(4, d, bias=False)
        self.smt_norm = nn.LayerNorm(d, eps=LN_EPS)
        self.spt_norm = nn.LayerNorm(d, eps=LN_EPS)
        self.type_emb = nn.Embedding(4, d)
        self.dec_pos = nn.Embedding(config.T, d)
        self.begin = nn.Parameter(torch.randn(d))
        self.end = nn.Parameter(torch.randn(d))
        for table in (self.word_pos, self.type_emb, self.dec_pos):
            nn.init.normal_(table.weight, std=0.1)

    def embed_words(self, word_ids: torch.Tensor, word_mask: torch.Tensor) -> torch.Tensor:
        return _masked(self.word(word_ids), word_mask)

    def embed_objects(self, obj_feats: torch.Tensor, obj_mask: torch.Tensor) -> torch.Tensor:
        if obj_feats.shape[-1] != self.config.D_obj:
            raise ValueError(f"object feature dim {obj_feats.shape[-1]} != D_obj={self.config.D_obj}")
        return _masked(self.obj_proj(obj_feats), obj_mask)

    def embed_ocr(self, smt: torch.Tensor, spt: torch.Tensor, ocr_mask: torch.Tensor) -> torch.Tensor:
        h = self.smt_norm(self.smt_proj(smt)) + self.spt_norm(self.spt_proj(spt))
        return _masked(h, ocr_mask)

    def decoder_tokens(self, prev_slots: torch.Tensor, h_ocr: torch.Tensor) -> torch.Tensor:
        """Token embedding per step: BEGIN, an OCR row of ``h_ocr``, or END."""
        B, T = prev_slots.shape
        M = h_ocr.shape[1]
        gathered = torch.gather(
            h_ocr, 1, prev_slots.clamp(0, M - 1).unsqueeze(-1).expand(B, T, h_ocr.shape[-1])
        )
        is_begin = (prev_slots == BEGIN).unsqueeze(-1)
        is_end = (prev_slots == M).unsqueeze(-1)
        tok = torch.where(is_begin, self.begin.expand_as(gathered), gathered)
        return torch.where(is_end, self.end.expand_as(gathered), tok)

    def embed_decoder(self, prev_slots: torch.Tensor, h_ocr: torch.Tensor) -> torch.Tensor:
        T = prev_slots.shape[1]
        if T > self.config.T:
            raise IndexError(f"{T} decoder steps exceed T={self.config.T}")
        steps = torch.arange(T, device=prev_slots.device)
        return (self.decoder_tokens(prev_slots, h_ocr) + self.dec_pos(steps)
                + self.type_emb.weight[DECODER])

    def embed_decoder_step(self, prev_slot: int, t: int, h_ocr: torch.Tensor) -> torch.Tensor:
        """Single-instance, single-step form; ``t`` is 1-based and ``h_ocr`` is (M, d)."""
        if not 1 <= t <= self.config.T:
            raise IndexError(f"decoding step {t} outside 1..{self.config.T}")
        prev = torch.tensor([[prev_slot]], device=h_ocr.device)
        tok = self.decoder_tokens(prev, h_ocr.unsqueeze(0))[0, 0]
        return tok + self.dec_pos.weight[t - 1] + self.type_emb.weight[DECODER]

    def bundle(self, batch: dict[str, torch.Tensor], prev_slots: torch.Tensor) -> EmbeddingBundle:
        h_ocr = self.embed_ocr(batch["ocr_smt"], batch["ocr_spt"], batch["ocr_mask"])
        return EmbeddingBundle(
            h_word=self.embed_words(batch["word_ids"], batch["word_mask"]),
            h_obj=self.embed_objects(batch["obj_feats"], batch["obj_mask"]),
            h_ocr=h_ocr,
            h_dec=self.embed_decoder(prev_slots, h_ocr),
            word_mask=batch["word_mask"],
            obj_mask=batch["obj_mask"],
            ocr_mask=batch["ocr_mask"],
        )

    def pack(self, bundle: EmbeddingBundle) -> torch.Tensor:
        """Packed transformer input [CLS+words | objects | ocr | decoder].

        Word slots get positions; every encoder slot gets its modality type.
        Padded slots stay zero.
        """
        pos = self.word_pos.weight[: bundle.h_word.shape[1]]
        types = self.type_emb.weight
        word = _masked(bundle.h_word + pos + types[WORD], bundle.word_mask)
        obj = _masked(bundle.h_obj + types[OBJECT], bundle.obj_mask)
        ocr = _masked(bundle.h_ocr + types[OCR], bundle.ocr_mask)
        return torch.cat([word, obj, ocr, bundle.h_dec], dim=1)


def encode_batch(instances, vocab: Vocab, config: ModelConfig,
                 dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
    """Pad a list of instances into fixed-size tensors."""
    B = len(instances)
    V1, E, M = config.V + 1, config.E, config.M
    word_ids = torch.zeros(B, V1, dtype=torch.long)
    word_mask = torch.zeros(B, V1, dtype=torch.bool)
    obj_feats = torch.zeros(B, E, config.D_obj, dtype=dtype)
    obj_mask = torch.zeros(B, E, dtype=torch.bool)
    ocr_smt = torch.zeros(B, M, config.d_smt, dtype=dtype)
    ocr_spt = torch.zeros(B, M, 4, dtype=dtype)
    ocr_mask = torch.zeros(B, M, dtype=torch.bool)
    for b, inst in enumerate(instances):
        seq = word_sequence(inst.question_words, inst.object_tags, config.V)
        word_ids[b, : len(seq)] = torch.tensor([vocab[w] for w in seq])
        word_mask[b, : len(seq)] = True
        objs = inst.object_features[:E]
        if objs:
            obj_feats[b, : len(objs)] = torch.tensor(objs, dtype=dtype)
            obj_mask[b, : len(objs)] = True
        toks = inst.ocr_tokens[:M]
        if toks:
            ocr_smt[b, : len(toks)] = torch.tensor(np.stack([assemble_ocr_semantic(t) for t in toks]), dtype=dtype)
            ocr_spt[b, : len(toks)] = torch.tensor([t.x_spt for t in toks], dtype=dtype)
            ocr_mask[b, : len(toks)] = True
    return dict(word_ids=word_ids, word_mask=word_mask, obj_feats=obj_feats, obj_mask=obj_mask,
                ocr_smt=ocr_smt, ocr_spt=ocr_spt, ocr_mask=ocr_mask)
