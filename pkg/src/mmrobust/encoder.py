"""Token embedding for two-modality samples.

Sequence order is fixed: ``[cls_joint, cls_m1, cls_m2, modality-1 tokens,
modality-2 tokens]``. Each modality token is the sum of its token, position
and modality-type embeddings; class tokens are bare learned vectors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

CLS_JOINT, CLS_M1, CLS_M2 = 0, 1, 2
N_CLS = 3
TYPE_M1, TYPE_M2 = 0, 1


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int
    vocab1: int
    vocab2: int
    max_len1: int
    max_len2: int

    def __post_init__(self):
        for name in ("d_model", "vocab1", "vocab2", "max_len1", "max_len2"):
            if getattr(self, name) <= 0:
                raise ValueError(f"EncoderConfig.{name} must be positive")

    @property
    def padded_length(self):
        return N_CLS + self.max_len1 + self.max_len2


@dataclass(frozen=True)
class SequenceLayout:
    """Index map of one (possibly padded) sequence.

    ``m1_range``/``m2_range`` hold the live token positions. In an exact
    layout they tile ``[3, length)``; a padded layout reserves ``max_len``
    slots per modality and the unused slots are dead padding.
    """

    length: int
    m1_range: range
    m2_range: range
    present1: bool
    present2: bool
    cls_joint_idx: int = CLS_JOINT
    cls_m1_idx: int = CLS_M1
    cls_m2_idx: int = CLS_M2

    @classmethod
    def exact(cls, n1, n2, present1=True, present2=True):
        n1 = n1 if present1 else 0
        n2 = n2 if present2 else 0
        return cls(N_CLS + n1 + n2, range(N_CLS, N_CLS + n1),
                   range(N_CLS + n1, N_CLS + n1 + n2), present1, present2)

    @classmethod
    def padded(cls, n1, n2, present1, present2, max_len1, max_len2):
        n1 = n1 if present1 else 0
        n2 = n2 if present2 else 0
        start2 = N_CLS + max_len1
        return cls(N_CLS + max_len1 + max_len2, range(N_CLS, N_CLS + n1),
                   range(start2, start2 + n2), present1, present2)

    def classify(self, idx):
        if idx == self.cls_joint_idx:
            return "cls_joint"
        if idx == self.cls_m1_idx:
            return "cls_m1"
        if idx == self.cls_m2_idx:
            return "cls_m2"
        if idx in self.m1_range:
            return "m1"
        if idx in self.m2_range:
            return "m2"
        if 0 <= idx < self.length:
            return "pad"
        raise IndexError(idx)

    def live(self):
        out = np.zeros(self.length, dtype=bool)
        out[:N_CLS] = True
        out[self.m1_range.start:self.m1_range.stop] = True
        out[self.m2_range.start:self.m2_range.stop] = True
        return out


def init_embeddings(cfg: EncoderConfig, rng: np.random.Generator, std=0.5):
    d = cfg.d_model
    shapes = {
        "emb.tok1": (cfg.vocab1, d),
        "emb.tok2": (cfg.vocab2, d),
        "emb.pos1": (cfg.max_len1, d),
        "emb.pos2": (cfg.max_len2, d),
        "emb.type": (2, d),
        "emb.cls": (N_CLS, d),
    }
    return {name: Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)
            for name, shape in shapes.items()}


def _check_ids(ids, vocab, which):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"modality-{which} token id out of range [0, {vocab})")
    return ids


def _check_sample(sample, cfg):
    if not (sample.present1 or sample.present2):
        raise ValueError("sample has both modalities absent")
    ids1 = _check_ids(sample.tokens1, cfg.vocab1, 1) if sample.present1 else np.zeros(0, np.int64)
    ids2 = _check_ids(sample.tokens2, cfg.vocab2, 2) if sample.present2 else np.zeros(0, np.int64)
    if len(ids1) > cfg.max_len1 or len(ids2) > cfg.max_len2:
        raise ValueError(f"sequence longer than max_len ({len(ids1)}, {len(ids2)})")
    return ids1, ids2


def _modality(params, ids, which):
    tok, pos = params[f"emb.tok{which}"], params[f"emb.pos{which}"]
    type_row = params["emb.type"][TYPE_M1 if which == 1 else TYPE_M2]
    e = T.embedding(tok, ids)
    e = e + T.index(pos, slice(0, ids.shape[-1]))
    return e + type_row


def embed_sample(sample, cfg: EncoderConfig, params):
    """Embed one sample with an exact (unpadded) layout.

    An absent modality contributes no tokens; its class token is still there.
    Returns ``(sequence [S, d_model], layout)``.
    """
    ids1, ids2 = _check_sample(sample, cfg)
    layout = SequenceLayout.exact(len(ids1), len(ids2), sample.present1, sample.present2)
    parts = [params["emb.cls"]]
    if len(ids1):
        parts.append(_modality(params, ids1, 1))
    if len(ids2):
        parts.append(_modality(params, ids2, 2))
    return T.concat(parts, axis=0), layout


@dataclass
class Batch:
    """Padded, collated samples. Presence flags are per stream (see ``collate``)."""

    ids1: np.ndarray
    ids2: np.ndarray
    len1: np.ndarray
    len2: np.ndarray
    present1: np.ndarray
    present2: np.ndarray
    joint_present1: np.ndarray
    joint_present2: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.ids1)

    @property
    def complete(self):
        return self.present1 & self.present2


def collate(samples, cfg: EncoderConfig, hide_joint=None):
    """Pack samples into padded id arrays.

    ``hide_joint`` (optional int array, 0 = keep, 1/2 = hide that modality)
    removes a modality from the joint stream only, for modality-dropout
    training; the single-modality streams always see the original sample.
    """
    B = len(samples)
    if B == 0:
        raise ValueError("empty batch")
    ids1 = np.zeros((B, cfg.max_len1), dtype=np.int64)
    ids2 = np.zeros((B, cfg.max_len2), dtype=np.int64)
    len1 = np.zeros(B, dtype=np.int64)
    len2 = np.zeros(B, dtype=np.int64)
    p1 = np.zeros(B, dtype=bool)
    p2 = np.zeros(B, dtype=bool)
    labels = []
    for i, s in enumerate(samples):
        a, b = _check_sample(s, cfg)
        ids1[i, :len(a)] = a
        ids2[i, :len(b)] = b
        len1[i], len2[i] = len(a), len(b)
        p1[i], p2[i] = s.present1, s.present2
        labels.append(s.label)
    jp1, jp2 = p1.copy(), p2.copy()
    if hide_joint is not None:
        hide_joint = np.asarray(hide_joint)
        jp1 &= ~((hide_joint == 1) & p2)
        jp2 &= ~((hide_joint == 2) & p1)
    return Batch(ids1, ids2, len1, len2, p1, p2, jp1, jp2, np.asarray(labels))


def embed_batch(batch: Batch, cfg: EncoderConfig, params):
    """Embed a padded batch: ``[B, 3 + max_len1 + max_len2, d_model]``.

    Padding slots hold token id 0; they are dead positions under every mask.
    """
    B = len(batch)
    m1 = _modality(params, batch.ids1, 1)
    m2 = _modality(params, batch.ids2, 2)
    cls = params["emb.cls"] + np.zeros((B, N_CLS, cfg.d_model))
    return T.concat([cls, m1, m2], axis=1)
