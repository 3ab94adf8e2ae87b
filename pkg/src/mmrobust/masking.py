"""Boolean attention masks over a :class:`SequenceLayout`.

``mask[i, j]`` is True when query ``i`` may attend key ``j``. Masks depend on
the layout only. Dead positions (padding, or nothing at all) keep a lone
self-attention entry so no row is ever empty; no live row can see them.

Groups used below: ``G1 = {cls_m1} + modality-1 tokens`` and
``G2 = {cls_m2} + modality-2 tokens``.
"""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .encoder import SequenceLayout
from .errors import FullyMaskedRowError

TASKS = ("m1_only", "m2_only")


def _groups(layout):
    n = layout.length
    g1 = np.zeros(n, dtype=bool)
    g2 = np.zeros(n, dtype=bool)
    g1[layout.cls_m1_idx] = True
    g1[layout.m1_range.start:layout.m1_range.stop] = True
    g2[layout.cls_m2_idx] = True
    g2[layout.m2_range.start:layout.m2_range.stop] = True
    return g1, g2


def _with_dead_diag(allowed, live):
    dead = np.flatnonzero(~live)
    allowed[dead, dead] = True
    return allowed


def full_mask(layout: SequenceLayout):
    live = layout.live()
    return _with_dead_diag(np.outer(live, live), live)


def cross_modal_block_mask(layout: SequenceLayout):
    """Within-modality attention only.

    Modality-k tokens and ``cls_mk`` see each other; the joint class token
    sees only itself, so no cross-modal information exists anywhere in the
    sequence before fusion starts.
    """
    live = layout.live()
    g1, g2 = _groups(layout)
    allowed = np.outer(g1, g1) | np.outer(g2, g2)
    allowed[layout.cls_joint_idx, layout.cls_joint_idx] = True
    return _with_dead_diag(allowed, live)


def task_cls_mask(layout: SequenceLayout, task: str):
    """Restriction for a single-modality class token.

    The class token's row is limited to its own group; rows of the other
    group may not read the class token's column. Everything else stays
    open, so the result is meant to be intersected with a base mask.
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}, got {task!r}")
    live = layout.live()
    g1, g2 = _groups(layout)
    own, other = (g1, g2) if task == "m1_only" else (g2, g1)
    idx = layout.cls_m1_idx if task == "m1_only" else layout.cls_m2_idx
    allowed = np.outer(live, live)
    allowed[idx, :] = own
    allowed[other, idx] = False
    return _with_dead_diag(allowed, live)


def _check_rows(allowed, where):
    empty = ~allowed.any(axis=1)
    if empty.any():
        raise FullyMaskedRowError(int(np.flatnonzero(empty)[0]), where)
    return allowed


def compose(layer_index: int, policy_s, layout: SequenceLayout):
    """Mask of one layer: full attention if ``policy_s[layer_index]`` is 1,
    else the cross-modal block mask, intersected with both class-token
    restrictions and the liveness of positions."""
    s = np.asarray(policy_s)
    if not 0 <= layer_index < len(s):
        raise IndexError(f"layer {layer_index} outside policy of length {len(s)}")
    base = full_mask(layout) if s[layer_index] >= 0.5 else cross_modal_block_mask(layout)
    allowed = base & task_cls_mask(layout, "m1_only") & task_cls_mask(layout, "m2_only")
    return _check_rows(allowed, f"compose(layer={layer_index})")


@lru_cache(maxsize=4096)
def _cached(layout: SequenceLayout, fused: bool):
    m = compose(0, [1.0 if fused else 0.0], layout)
    m.setflags(write=False)
    return m


def layer_mask(layout: SequenceLayout, fused: bool):
    """Cached, read-only ``compose`` for a single fusion flag."""
    return _cached(layout, bool(fused))


def reachable_from(masks, start):
    """Positions whose layer-0 input can influence ``start`` after all layers.

    ``masks`` is the per-layer sequence, first layer first. Residual
    connections keep each position's own history, hence the diagonal.
    """
    masks = [np.asarray(m, dtype=bool) for m in masks]
    n = masks[0].shape[0]
    cur = np.zeros(n, dtype=bool)
    cur[start] = True
    for m in reversed(masks):
        cur = cur | m[cur].any(axis=0)
    return cur


def mask_to_text(mask):
    """0/1 grid, one row per line."""
    return "\n".join("".join("1" if v else "0" for v in row) for row in np.asarray(mask))
