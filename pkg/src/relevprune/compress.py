"""Pruning plans over the visual span, and applying them to a prompt."""

from __future__ import annotations

import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .explain import RelevanceScores
from .toylm import AttentionTrace, PromptLayout


@dataclass(frozen=True)
class CompressionPlan:
    kept: tuple[int, ...]
    retention_ratio: float

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.kept, self.kept[1:])):
            raise ValueError("kept indices must be strictly ascending")

    def __len__(self) -> int:
        return len(self.kept)

    def __contains__(self, idx: int) -> bool:
        return idx in self.kept


def keep_count(ratio: float, n_v: int) -> int:
    """max(1, round-half-up(ratio * n_v)), computed on the decimal value of ``ratio``."""
    if not 0 < ratio <= 1:
        raise ValueError(f"retention ratio {ratio} outside (0, 1]")
    if n_v < 1:
        raise ValueError("need at least one visual token")
    k = (Decimal(repr(float(ratio))) * n_v).quantize(Decimal(1), rounding=ROUND_HALF_UP)
    return max(1, int(k))


def _top(scores: np.ndarray, ratio: float) -> CompressionPlan:
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("no scores to rank")
    k = keep_count(ratio, scores.size)
    # stable sort on the negated scores keeps the lower index on ties
    order = np.argsort(-scores, kind="stable")[:k]
    return CompressionPlan(tuple(int(i) for i in np.sort(order)), float(ratio))


def topk_plan(r_v: RelevanceScores | np.ndarray, ratio: float) -> CompressionPlan:
    scores = r_v.r_v if isinstance(r_v, RelevanceScores) else r_v
    return _top(scores, ratio)


def random_plan(seed: int, n_v: int, ratio: float) -> CompressionPlan:
    k = keep_count(ratio, n_v)
    rng = np.random.default_rng(seed)
    return CompressionPlan(tuple(int(i) for i in np.sort(rng.choice(n_v, size=k, replace=False))), float(ratio))


def fastv_layer(n_layers: int) -> int:
    """Default scoring layer: the 4th for deep models, half depth for shallow ones."""
    return min(4, n_layers // 2)


def fastv_scores(trace: AttentionTrace, layout: PromptLayout, layer: int | None = None) -> np.ndarray:
    n_layers = trace.attn.shape[0]
    layer = fastv_layer(n_layers) if layer is None else layer
    if not 0 <= layer < n_layers:
        raise ValueError(f"layer {layer} outside [0, {n_layers})")
    return trace.attn[layer, :, -1, layout.visual].astype(np.float64).mean(axis=0)


def fastv_plan(trace: AttentionTrace, layout: PromptLayout, ratio: float,
               layer: int | None = None) -> CompressionPlan:
    """Keep the visual tokens that receive the most attention from the last prompt position."""
    return _top(fastv_scores(trace, layout, layer), ratio)


@dataclass(frozen=True)
class PrunedPrompt:
    tokens: np.ndarray
    positions: np.ndarray
    layout: PromptLayout


def apply_plan(tokens: np.ndarray, layout: PromptLayout, plan: CompressionPlan,
               positions: np.ndarray | None = None, axis: int = 0) -> PrunedPrompt:
    """Drop visual tokens not in ``plan`` along the sequence ``axis``.

    ``tokens`` may be ids or an embedding span; pass ``axis=1`` for a batch.
    Surviving tokens keep their original position ids.
    """
    tokens = np.asarray(tokens)
    kept = np.asarray(plan.kept, dtype=np.int64)
    if kept.size and (kept.min() < 0 or kept.max() >= layout.n_vis):
        raise IndexError(f"plan index out of range for {layout.n_vis} visual tokens")
    if tokens.shape[axis] != layout.total:
        raise ValueError(f"prompt length {tokens.shape[axis]} does not match layout total {layout.total}")
    select = np.concatenate([np.arange(layout.n_sys), layout.n_sys + kept,
                             np.arange(layout.n_sys + layout.n_vis, layout.total)])
    if positions is None:
        positions = np.arange(layout.total)
    positions = np.asarray(positions)
    return PrunedPrompt(np.take(tokens, select, axis=axis), np.take(positions, select, axis=-1),
                        PromptLayout(layout.n_sys, len(kept), layout.n_instr))


def preservation(compressed: Sequence[float], vanilla: Sequence[float]) -> float:
    """Mean over benchmarks of compressed / vanilla, in percent."""
    if len(compressed) != len(vanilla) or not vanilla:
        raise ValueError("score lists must be non-empty and of equal length")
    if any(v == 0 for v in vanilla):
        raise ZeroDivisionError("vanilla score of zero")
    return 100.0 * sum(c / v for c, v in zip(compressed, vanilla)) / len(vanilla)


def plan_record(sample_id, plan: CompressionPlan, method: str) -> dict:
    return {"sample_id": sample_id, "ratio": plan.retention_ratio, "kept": list(plan.kept), "method": method}


def write_plans(path: str | Path, rows: Iterable[tuple[object, CompressionPlan]], method: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid, plan in rows:
            fh.write(json.dumps(plan_record(sid, plan, method), separators=(",", ":")) + "\n")


def read_plans(path: str | Path) -> list[tuple[object, CompressionPlan, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                out.append((rec["sample_id"], CompressionPlan(tuple(rec["kept"]), rec["ratio"]), rec["method"]))
    return out
