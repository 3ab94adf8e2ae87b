"""Pre-LN transformer encoder with three class-token heads.

Two passes share the embedded sequence:

* the *joint* stream applies ``compose(layer, s)`` at every layer, so
  cross-modal attention switches on from the first fusing layer;
* the *single-modality* stream applies the never-fused mask at every layer.
  ``cls_m1`` / ``cls_m2`` are read from it, which keeps each of them
  unreachable from the other modality regardless of the fusion policy.

Both streams are stacked along the batch axis and run as one computation.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .encoder import (CLS_JOINT, CLS_M1, CLS_M2, Batch, EncoderConfig, SequenceLayout,
                      collate, embed_batch, embed_sample, init_embeddings)
from .masking import layer_mask
from .tensor import Tensor

TASK_TYPES = ("multilabel", "multiclass", "binary")
HEADS = ("joint", "m1", "m2")


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 4
    heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    n_classes: int = 4
    task_type: str = "multiclass"

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("ModelConfig.layers must be >= 1")
        if self.heads < 1 or self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} not divisible by heads={self.heads}")
        if self.task_type not in TASK_TYPES:
            raise ValueError(f"task_type must be one of {TASK_TYPES}")
        if self.task_type == "binary" and self.n_classes != 1:
            raise ValueError("binary task uses a single logit (n_classes=1)")

    @property
    def head_dim(self):
        return self.d_model // self.heads


def _linear(rng, fan_in, fan_out):
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, fan_out))


def init_params(cfg: ModelConfig, enc: EncoderConfig, seed: int):
    """Fresh parameters. The encoder's tables are included so everything trains jointly."""
    if enc.d_model != cfg.d_model:
        raise ValueError("encoder and model d_model differ")
    rng = np.random.default_rng(seed)
    d, f = cfg.d_model, cfg.d_ff
    raw = {}
    for l in range(cfg.layers):
        p = f"layer{l}."
        raw[p + "ln1.g"] = np.ones(d)
        raw[p + "ln1.b"] = np.zeros(d)
        for w in "qkvo":
            raw[p + f"attn.w{w}"] = _linear(rng, d, d)
            raw[p + f"attn.b{w}"] = np.zeros(d)
        raw[p + "ln2.g"] = np.ones(d)
        raw[p + "ln2.b"] = np.zeros(d)
        raw[p + "mlp.w1"] = _linear(rng, d, f)
        raw[p + "mlp.b1"] = np.zeros(f)
        raw[p + "mlp.w2"] = _linear(rng, f, d)
        raw[p + "mlp.b2"] = np.zeros(d)
    raw["final.ln.g"] = np.ones(d)
    raw["final.ln.b"] = np.zeros(d)
    for h in HEADS:
        raw[f"head.{h}.w"] = _linear(rng, d, cfg.n_classes)
        raw[f"head.{h}.b"] = np.zeros(cfg.n_classes)
    params = init_embeddings(enc, rng)
    params.update({k: Tensor(v, requires_grad=True, name=k) for k, v in raw.items()})
    return params


def mha_forward(x, mask, params, prefix, heads):
    """Scaled dot-product attention over ``x [B, S, d]`` with ``mask [B, S, S]``."""
    B, S, d = x.shape
    dh = d // heads

    def proj(w):
        y = x @ params[f"{prefix}attn.w{w}"] + params[f"{prefix}attn.b{w}"]
        return y.reshape(B, S, heads, dh).transpose(0, 2, 1, 3)

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    attn = T.masked_softmax(scores, np.asarray(mask)[:, None, :, :])
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(B, S, d)
    return out @ params[f"{prefix}attn.wo"] + params[f"{prefix}attn.bo"]


def encode(x, layer_masks, params, cfg: ModelConfig, fusion=None, eps=1e-5):
    """Run all layers plus the final LayerNorm.

    ``layer_masks[l]`` is either one ``[B, S, S]`` mask, or a pair
    ``(fused, unfused)`` that is blended by ``fusion[l]`` (a Tensor), which is
    how policy gradients reach the fusion vector.
    """
    for l in range(cfg.layers):
        p = f"layer{l}."
        h = T.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"], eps)
        m = layer_masks[l]
        if isinstance(m, tuple):
            gate = fusion[l]
            a = gate * mha_forward(h, m[0], params, p, cfg.heads) \
                + (1.0 - gate) * mha_forward(h, m[1], params, p, cfg.heads)
        else:
            a = mha_forward(h, m, params, p, cfg.heads)
        x = x + a
        h = T.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"], eps)
        h = T.gelu(h @ params[p + "mlp.w1"] + params[p + "mlp.b1"])
        x = x + (h @ params[p + "mlp.w2"] + params[p + "mlp.b2"])
    return T.layer_norm(x, params["final.ln.g"], params["final.ln.b"], eps)


def head(z, params, name):
    return z @ params[f"head.{name}.w"] + params[f"head.{name}.b"]


def _layouts(batch: Batch, enc: EncoderConfig, joint):
    p1 = batch.joint_present1 if joint else batch.present1
    p2 = batch.joint_present2 if joint else batch.present2
    return [SequenceLayout.padded(int(a), int(b), bool(c), bool(d), enc.max_len1, enc.max_len2)
            for a, b, c, d in zip(batch.len1, batch.len2, p1, p2)]


def _stack(layouts, fused):
    return np.stack([layer_mask(lay, fused) for lay in layouts])


def fusion_values(fusion):
    return np.asarray(fusion.data if isinstance(fusion, Tensor) else fusion, dtype=np.float64)


def forward_batch(params, cfg: ModelConfig, enc: EncoderConfig, batch: Batch, fusion,
                  streams=("joint", "single")):
    """Logits for a padded batch.

    ``fusion`` is a 0/1 vector of length ``layers`` (array or Tensor). When it
    is a grad-enabled Tensor both masks are evaluated at every layer and
    blended, so the loss is differentiable in the fusion vector.
    Returns ``{"joint"|"m1"|"m2": Tensor [B, n_classes]}`` for the requested
    streams.
    """
    s = fusion_values(fusion)
    if s.shape != (cfg.layers,):
        raise ValueError(f"fusion vector must have length {cfg.layers}, got {s.shape}")
    B = len(batch)
    x = embed_batch(batch, enc, params)
    differentiable = isinstance(fusion, Tensor) and fusion.requires_grad
    masks, gates = [], []
    use_joint = "joint" in streams
    use_single = "single" in streams
    joint_lay = _layouts(batch, enc, True) if use_joint else []
    single_lay = _layouts(batch, enc, False) if use_single else []
    single_masks = _stack(single_lay, False) if use_single else None
    for l in range(cfg.layers):
        if use_joint and differentiable:
            pair = [_stack(joint_lay, True), _stack(joint_lay, False)]
            if use_single:
                pair = [np.concatenate([m, single_masks]) for m in pair]
            masks.append(tuple(pair))
        else:
            parts = []
            if use_joint:
                parts.append(_stack(joint_lay, s[l] >= 0.5))
            if use_single:
                parts.append(single_masks)
            masks.append(parts[0] if len(parts) == 1 else np.concatenate(parts))
    if use_joint and use_single:
        x = T.concat([x, x], axis=0)
    z = encode(x, masks, params, cfg, fusion if differentiable else None)
    out = {}
    offset = 0
    if use_joint:
        out["joint"] = head(z[0:B, CLS_JOINT, :], params, "joint")
        offset = B
    if use_single:
        out["m1"] = head(z[offset:offset + B, CLS_M1, :], params, "m1")
        out["m2"] = head(z[offset:offset + B, CLS_M2, :], params, "m2")
    return out


def model_forward(sample, fusion, params, cfg: ModelConfig, enc: EncoderConfig):
    """Unpadded single-sample forward: ``(logits_joint, logits_m1, logits_m2)``.

    An absent modality is removed from the sequence entirely.
    """
    s = fusion_values(fusion)
    if s.shape != (cfg.layers,):
        raise ValueError(f"fusion vector must have length {cfg.layers}, got {s.shape}")
    seq, layout = embed_sample(sample, enc, params)
    x = seq.reshape(1, *seq.shape)
    joint = encode(x, [layer_mask(layout, v >= 0.5)[None] for v in s], params, cfg)
    single = encode(x, [layer_mask(layout, False)[None]] * cfg.layers, params, cfg)
    return (head(joint[0, CLS_JOINT], params, "joint"),
            head(single[0, CLS_M1], params, "m1"),
            head(single[0, CLS_M2], params, "m2"))


def fusion_from_layer(first_layer: int, layers: int):
    """Suffix-ones vector fusing from ``first_layer`` (1-based) to the last layer."""
    if not 1 <= first_layer <= layers:
        raise ValueError(f"fusion layer must be in [1, {layers}]")
    s = np.zeros(layers)
    s[first_layer - 1:] = 1.0
    return s


def policy_string(s):
    return "".join(str(int(round(v))) for v in fusion_values(s))


@dataclass
class Model:
    """Trained network plus the fusion policy and head-selection rule it predicts with.

    ``head_rule="availability"`` picks the joint head when both modalities
    are present and the matching single-modality head otherwise;
    ``head_rule="joint"`` always uses the joint head (baseline behaviour).
    """

    cfg: ModelConfig
    enc: EncoderConfig
    params: dict
    fusion: np.ndarray
    head_rule: str = "availability"
    meta: dict = field(default_factory=dict)

    def logits(self, samples, batch_size=256):
        """Chosen-head logits ``[N, n_classes]`` and chosen task names."""
        outs, chosen = [], []
        for lo in range(0, len(samples), batch_size):
            chunk = samples[lo:lo + batch_size]
            batch = collate(chunk, self.enc)
            need_single = self.head_rule == "availability" and not batch.complete.all()
            res = forward_batch(self.params, self.cfg, self.enc, batch, self.fusion,
                                streams=("joint", "single") if need_single else ("joint",))
            for i in range(len(chunk)):
                task = choose_head(bool(batch.present1[i]), bool(batch.present2[i]), self.head_rule)
                chosen.append(task)
                outs.append(res[task].data[i])
        return np.array(outs).reshape(len(samples), self.cfg.n_classes), chosen

    def predict(self, sample):
        logits, chosen = self.logits([sample])
        return logits[0], chosen[0]


def choose_head(present1, present2, rule="availability"):
    if not (present1 or present2):
        raise ValueError("sample has both modalities absent")
    if rule == "joint" or (present1 and present2):
        return "joint"
    if rule != "availability":
        raise ValueError(f"unknown head rule {rule!r}")
    return "m1" if present1 else "m2"


# ---------------------------------------------------------------- checkpoint

MAGIC = b"MMRCKPT1"


def save_checkpoint(path, model: Model, extra=None):
    """Write ``MAGIC | u64 header length | JSON header | raw float64 LE``.

    The header carries both configs, the fusion vector, the head rule, any
    ``extra`` metadata and, per tensor, ``name``, ``shape`` and byte offset
    into the payload (row-major order).
    """
    index, offset = [], 0
    names = list(model.params)
    for name in names:
        arr = model.params[name].data
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "model": asdict(model.cfg),
        "encoder": asdict(model.enc),
        "fusion": [float(v) for v in model.fusion],
        "head_rule": model.head_rule,
        "meta": {**model.meta, **(extra or {})},
        "tensors": index,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(model.params[name].data, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> Model:
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        payload = fh.read()
    params = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=entry["offset"])
        params[entry["name"]] = Tensor(arr.reshape(entry["shape"]).astype(np.float64),
                                       requires_grad=True, name=entry["name"])
    return Model(ModelConfig(**header["model"]), EncoderConfig(**header["encoder"]), params,
                 np.asarray(header["fusion"], dtype=np.float64), header["head_rule"],
                 header.get("meta", {}))
