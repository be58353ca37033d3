"""Relevance of visual tokens for a generated response.

For every generation step the relevance map starts as the identity and is
pushed through the layers in ascending order::

    R <- R + M_l @ R,   M_l = mean_h(A_l * dA_l)   (gradient-weighted)
                        M_l = mean_h(A_l)          (plain mean)

The visual part of the last row of R is that step's relevance; steps are
averaged into one score per visual token.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .toylm import AttentionTrace, PromptLayout, ToyLM, capture_batch, capture_step


class Strategy(str, enum.Enum):
    GRAD = "grad"
    MEAN = "mean"


class Source(str, enum.Enum):
    EXPLAINED = "explained"
    PREDICTED = "predicted"
    LABEL = "label"


@dataclass
class RelevanceScores:
    r_v: np.ndarray
    source: Source = Source.EXPLAINED
    degenerate: bool = False

    def __post_init__(self):
        self.r_v = np.asarray(self.r_v, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.r_v)):
            raise ValueError("relevance scores must be finite")
        self.source = Source(self.source)

    def __len__(self) -> int:
        return len(self.r_v)


def layer_maps(trace: AttentionTrace, strategy: Strategy | str = Strategy.GRAD,
               clamp: bool = False) -> np.ndarray:
    """Head-averaged per-layer update matrices, shape (n_layers, s, s)."""
    strategy = Strategy(strategy)
    attn, grad = trace.attn.astype(np.float64), trace.grad.astype(np.float64)
    if attn.ndim != 4 or attn.shape != grad.shape or attn.shape[-1] != attn.shape[-2]:
        raise ValueError(f"inconsistent trace shapes {attn.shape} / {grad.shape}")
    cam = attn * grad if strategy is Strategy.GRAD else attn
    if clamp:
        cam = np.maximum(cam, 0)
    return cam.mean(axis=1)


def propagate_step(trace: AttentionTrace, strategy: Strategy | str = Strategy.GRAD,
                   clamp: bool = False) -> np.ndarray:
    maps = layer_maps(trace, strategy, clamp)
    s = maps.shape[-1]
    R = np.eye(s)
    for M in maps:
        R = R + M @ R
        if not np.all(np.isfinite(R)):
            raise FloatingPointError("relevance map became non-finite")
    return R


def extract_visual_slice(R: np.ndarray, layout: PromptLayout) -> np.ndarray:
    if R.shape[0] < layout.n_sys + layout.n_vis:
        raise ValueError(f"layout {layout} does not fit a {R.shape[0]}x{R.shape[1]} relevance map")
    return R[-1, layout.visual].copy()


def relevance_from_traces(traces: Sequence[AttentionTrace], layout: PromptLayout,
                          strategy: Strategy | str = Strategy.GRAD, clamp: bool = False) -> RelevanceScores:
    if not traces:
        raise ValueError("empty response: nothing to explain")
    slices = [extract_visual_slice(propagate_step(t, strategy, clamp), layout) for t in traces]
    return RelevanceScores(np.mean(slices, axis=0), Source.EXPLAINED)


def relevance(lm: ToyLM, prompt: Sequence[int], response: Sequence[int], layout: PromptLayout,
              strategy: Strategy | str = Strategy.GRAD, clamp: bool = False, positions=None,
              score: str = "logprob") -> RelevanceScores:
    if len(response) == 0:
        raise ValueError("empty response: nothing to explain")
    seq = np.concatenate([np.asarray(prompt, np.int64), np.asarray(response, np.int64)])
    traces = [capture_step(lm, seq, len(prompt), t, positions, score) for t in range(len(response))]
    return relevance_from_traces(traces, layout, strategy, clamp)


def relevance_batch(lm: ToyLM, prompts: np.ndarray, answers: np.ndarray, layout: PromptLayout,
                    strategy: Strategy | str = Strategy.GRAD, clamp: bool = False, score: str = "logprob",
                    ) -> tuple[list[RelevanceScores], list[AttentionTrace]]:
    """Single-token responses for a batch of equal-length prompts.

    Returns the scores together with the step-0 traces so callers can reuse them.
    """
    traces = capture_batch(lm, prompts, answers, score=score)
    return [relevance_from_traces([t], layout, strategy, clamp) for t in traces], traces


# -- output formats ---------------------------------------------------------------

def relevance_record(sample_id, scores: RelevanceScores, strategy: Strategy | str) -> dict:
    return {
        "sample_id": sample_id,
        "n_v": len(scores),
        "r_v": [float(np.float32(v)) for v in scores.r_v],
        "strategy": Strategy(strategy).value,
        "source": scores.source.value,
    }


def write_relevance(path: str | Path, rows: Iterable[tuple[object, RelevanceScores]],
                    strategy: Strategy | str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid, sc in rows:
            fh.write(json.dumps(relevance_record(sid, sc, strategy), separators=(",", ":")) + "\n")


def read_relevance(path: str | Path) -> list[tuple[object, RelevanceScores]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                if len(rec["r_v"]) != rec["n_v"]:
                    raise ValueError(f"sample {rec['sample_id']}: n_v does not match r_v")
                out.append((rec["sample_id"], RelevanceScores(rec["r_v"], rec["source"])))
    return out


def write_heatmap(path: str | Path, scores: RelevanceScores, grid_size: int) -> None:
    if len(scores) != grid_size * grid_size:
        raise ValueError(f"{len(scores)} scores cannot fill a {grid_size}x{grid_size} grid")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in scores.r_v.reshape(grid_size, grid_size):
            w.writerow([f"{v:.6g}" for v in row])
