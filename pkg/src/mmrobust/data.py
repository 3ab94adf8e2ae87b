"""Seeded synthetic two-modality datasets and test-time missingness.

Each class owns a small signature of tokens in each modality's vocabulary.
A modality is *informative* for a sample when the label's signature is
planted among its tokens; otherwise it holds filler tokens only.

* dominant mode: modality 1 is informative with probability ``dominance``,
  modality 2 with probability ``1 - dominance``, independently.
* xor mode: each modality carries an independent uniform code ``z1``/``z2``
  and the label is ``(z1 + z2) mod C`` (bitwise XOR for multilabel), so
  neither modality alone says anything about the label.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

TASK_TYPES = ("multilabel", "multiclass", "binary")
SIG_LEN = 2


@dataclass(frozen=True)
class Sample:
    tokens1: np.ndarray
    tokens2: np.ndarray
    label: object
    present1: bool = True
    present2: bool = True

    def __post_init__(self):
        if not (self.present1 or self.present2):
            raise ValueError("a sample needs at least one present modality")

    def key(self):
        lab = tuple(np.atleast_1d(self.label).tolist())
        return (tuple(self.tokens1.tolist()), tuple(self.tokens2.tolist()), lab,
                self.present1, self.present2)


@dataclass(frozen=True)
class SyntheticSpec:
    n_classes: int = 4
    task_type: str = "multiclass"
    n_samples: int = 5000
    len1: int = 6
    len2: int = 6
    vocab1: int = 32
    vocab2: int = 32
    dominance: float = 0.9
    xor_mode: bool = False
    label_noise: float = 0.0
    seed: int = 0
    splits: tuple = (0.7, 0.15, 0.15)

    def validate(self):
        if self.task_type not in TASK_TYPES:
            raise ValueError(f"task_type must be one of {TASK_TYPES}")
        if self.task_type == "binary" and self.n_classes != 2:
            raise ValueError("binary data has n_classes=2")
        if self.n_classes < 2 and self.task_type != "multilabel":
            raise ValueError("need at least 2 classes")
        if self.n_samples < 3:
            raise ValueError("n_samples too small to split")
        if not 0.0 <= self.dominance <= 1.0:
            raise ValueError("dominance must lie in [0, 1]")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError("label_noise must lie in [0, 1)")
        if len(self.splits) != 3 or abs(sum(self.splits) - 1.0) > 1e-9 or min(self.splits) <= 0:
            raise ValueError("splits must be three positive fractions summing to 1")
        codes = self.n_classes
        need = SIG_LEN * (codes if self.task_type == "multilabel" else 1)
        for which, (n, vocab) in enumerate(((self.len1, self.vocab1), (self.len2, self.vocab2)), 1):
            if n < need:
                raise ValueError(f"len{which}={n} cannot hold a {need}-token signature")
            if vocab < SIG_LEN * codes + 1:
                raise ValueError(f"vocab{which}={vocab} too small for {codes} signatures")

    @property
    def n_logits(self):
        return 1 if self.task_type == "binary" else self.n_classes


PRESETS = {
    "dominant": SyntheticSpec(dominance=0.9),
    "balanced-xor": SyntheticSpec(n_classes=2, task_type="binary", xor_mode=True),
}


@dataclass
class Dataset:
    spec: SyntheticSpec
    train: list
    val: list
    test: list

    def __iter__(self):
        return iter((self.train, self.val, self.test))


def _signatures(rng, n_codes, vocab):
    perm = rng.permutation(vocab)[:n_codes * SIG_LEN]
    sigs = perm.reshape(n_codes, SIG_LEN)
    filler = np.setdiff1d(np.arange(vocab), perm)
    return sigs, filler


def _fill(rng, n, filler, planted):
    toks = filler[rng.integers(0, len(filler), size=n)]
    if len(planted):
        pos = rng.choice(n, size=len(planted), replace=False)
        toks[pos] = planted
    return toks


def _draw(rng, spec):
    """Label and per-modality planted codes for one sample."""
    C = spec.n_classes
    if spec.task_type == "multilabel":
        if spec.xor_mode:
            z1 = rng.random(C) < 0.5
            z2 = rng.random(C) < 0.5
            return (z1 ^ z2).astype(np.int64), np.flatnonzero(z1), np.flatnonzero(z2)
        y = (rng.random(C) < 0.35).astype(np.int64)
        active = np.flatnonzero(y)
        inf1 = rng.random() < spec.dominance
        inf2 = rng.random() < 1.0 - spec.dominance
        return y, active if inf1 else active[:0], active if inf2 else active[:0]
    if spec.xor_mode:
        z1, z2 = int(rng.integers(C)), int(rng.integers(C))
        return (z1 + z2) % C, np.array([z1]), np.array([z2])
    y = int(rng.integers(C))
    inf1 = rng.random() < spec.dominance
    inf2 = rng.random() < 1.0 - spec.dominance
    return y, np.array([y] if inf1 else [], np.int64), np.array([y] if inf2 else [], np.int64)


def _noisy(rng, y, spec):
    if spec.label_noise <= 0:
        return y
    if spec.task_type == "multilabel":
        flip = rng.random(spec.n_classes) < spec.label_noise
        return np.where(flip, 1 - y, y)
    if rng.random() < spec.label_noise:
        return int(rng.integers(spec.n_classes))
    return y


def _split_indices(rng, n, labels, fractions, stratify):
    """Exact global sizes ``round(f * n)``; stratified by interleaving classes.

    Each class is shuffled and its members get keys ``(rank + 0.5) / size``;
    sorting all samples by key and slicing keeps every prefix class-balanced.
    """
    if stratify:
        key = np.empty(n)
        for c in np.unique(labels):
            g = rng.permutation(np.flatnonzero(labels == c))
            key[g] = (np.arange(len(g)) + 0.5) / len(g)
        order = np.lexsort((rng.random(n), key))
    else:
        order = rng.permutation(n)
    n_tr = round_half_away(fractions[0] * n)
    n_va = round_half_away(fractions[1] * n)
    parts = (order[:n_tr], order[n_tr:n_tr + n_va], order[n_tr + n_va:])
    return [np.sort(p).astype(np.int64) for p in parts]


def generate(spec: SyntheticSpec) -> Dataset:
    """Deterministic in ``spec.seed``; train/val/test are disjoint index sets."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    sig1, fill1 = _signatures(rng, spec.n_classes, spec.vocab1)
    sig2, fill2 = _signatures(rng, spec.n_classes, spec.vocab2)
    samples = []
    for _ in range(spec.n_samples):
        y, c1, c2 = _draw(rng, spec)
        t1 = _fill(rng, spec.len1, fill1, sig1[c1].reshape(-1))
        t2 = _fill(rng, spec.len2, fill2, sig2[c2].reshape(-1))
        y = _noisy(rng, y, spec)
        samples.append(Sample(t1, t2, y))
    labels = np.array([s.label for s in samples]) if spec.task_type != "multilabel" else None
    tr, va, te = _split_indices(rng, len(samples), labels, spec.splits,
                                 stratify=labels is not None)
    return Dataset(spec, [samples[i] for i in tr], [samples[i] for i in va],
                   [samples[i] for i in te])


def planted_signatures(spec: SyntheticSpec):
    """Re-derive the class signatures of ``spec`` (same RNG stream as ``generate``)."""
    rng = np.random.default_rng(spec.seed)
    sig1, _ = _signatures(rng, spec.n_classes, spec.vocab1)
    sig2, _ = _signatures(rng, spec.n_classes, spec.vocab2)
    return sig1, sig2


# ---------------------------------------------------------------- missingness

@dataclass(frozen=True)
class MissingnessSpec:
    eta: float
    target_modality: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.eta <= 1.0:
            raise ValueError("eta must lie in [0, 1]")
        if self.target_modality not in (1, 2):
            raise ValueError("target_modality must be 1 or 2")


def round_half_away(x):
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


def apply_missingness(samples, m: MissingnessSpec):
    """Keep the target modality on exactly ``round(eta * N)`` samples.

    The kept subset is a seeded uniform draw without replacement that depends
    only on ``N`` and the seed, so the operation is idempotent. The input
    list is not modified.
    """
    n = len(samples)
    keep_n = round_half_away(m.eta * n)
    keep = np.zeros(n, dtype=bool)
    keep[np.random.default_rng(m.seed).choice(n, size=keep_n, replace=False)] = True
    out = []
    for s, k in zip(samples, keep):
        if k:
            out.append(s)
        elif m.target_modality == 2:
            out.append(replace(s, tokens2=s.tokens2[:0], present2=False))
        else:
            out.append(replace(s, tokens1=s.tokens1[:0], present1=False))
    return out


def drop_modality(samples, which):
    return apply_missingness(samples, MissingnessSpec(0.0, which))


# ---------------------------------------------------------------- text format

def _fmt_label(label, task_type):
    if task_type == "multilabel":
        return "".join(str(int(b)) for b in label)
    return str(int(label))


def dump_samples(samples, path, spec: SyntheticSpec):
    """Line format: ``label<TAB>tokens1<TAB>tokens2<TAB>flags``.

    Tokens are space-separated ids (empty when absent); multilabel labels are
    bit strings; flags are two 0/1 characters for (present1, present2). A
    leading ``#`` line records task type and class count.
    """
    with open(path, "w") as fh:
        fh.write(f"# mmrobust-dataset v1 task_type={spec.task_type} n_classes={spec.n_classes}\n")
        for s in samples:
            fh.write("\t".join([
                _fmt_label(s.label, spec.task_type),
                " ".join(map(str, s.tokens1.tolist())),
                " ".join(map(str, s.tokens2.tolist())),
                f"{int(s.present1)}{int(s.present2)}",
            ]) + "\n")


def load_samples(path):
    out = []
    task_type = "multiclass"
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                for tok in line.split():
                    if tok.startswith("task_type="):
                        task_type = tok.split("=", 1)[1]
                continue
            lab, t1, t2, flags = line.rstrip("\n").split("\t")
            label = (np.array([int(c) for c in lab], dtype=np.int64)
                     if task_type == "multilabel" else int(lab))
            out.append(Sample(np.array(t1.split(), dtype=np.int64),
                              np.array(t2.split(), dtype=np.int64), label,
                              flags[0] == "1", flags[1] == "1"))
    return out
