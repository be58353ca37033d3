"""Lightweight relevance predictor run before the LM.

Input is the first-layer attention that the instruction tokens pay to each
visual token (averaged over heads and instruction rows). A stack of
depthwise-separable 1D convolutions maps it to one logit per visual token,
and a softmax over positions turns those into a predicted relevance
distribution. Being fully convolutional, one parameter set serves any
number of visual tokens.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .compress import keep_count, topk_plan
from .explain import RelevanceScores, Source, Strategy, relevance_from_traces
from .numerics import Graph, Tensor
from .toylm import (AttentionTrace, GridQASample, GridVocab, PromptLayout, ToyLM, capture_batch,
                    encode_batch, generate_batch)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CompressorConfig:
    channels: tuple[int, ...] = (32, 64, 128, 256, 512)
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.kernel % 2 == 0 or self.kernel < 1:
            raise ValueError("kernel must be a positive odd number")
        if not self.channels or min(self.channels) < 1:
            raise ValueError("channels must be a non-empty list of positive widths")

    @property
    def n_layers(self) -> int:
        return len(self.channels)

    def to_dict(self) -> dict:
        return {"layers": self.n_layers, "kernel": self.kernel, "channels": list(self.channels)}

    @classmethod
    def from_dict(cls, d: dict) -> "CompressorConfig":
        cfg = cls(tuple(d["channels"]), int(d.get("kernel", 3)))
        if int(d.get("layers", cfg.n_layers)) != cfg.n_layers:
            raise ValueError("'layers' disagrees with the length of 'channels'")
        return cfg


def param_shapes(config: CompressorConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter names and shapes in their serialised order."""
    shapes = []
    c_in = 1
    for i, c_out in enumerate(config.channels):
        shapes += [(f"c{i}.dw_w", (c_in, config.kernel)), (f"c{i}.dw_b", (c_in,)),
                   (f"c{i}.pw_w", (c_in, c_out)), (f"c{i}.pw_b", (c_out,))]
        c_in = c_out
    shapes += [("head.w", (c_in, 1)), ("head.b", (1,))]
    return shapes


def init_params(config: CompressorConfig, seed: int = 0, zeros: bool = False) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config):
        if zeros or name.endswith("_b") or name == "head.b":
            params[name] = np.zeros(shape, np.float32)
        elif name.endswith("dw_w"):
            params[name] = (rng.normal(size=shape) * math.sqrt(2.0 / shape[1])).astype(np.float32)
        else:
            params[name] = (rng.normal(size=shape) * math.sqrt(2.0 / shape[0])).astype(np.float32)
    return params


def _logits(config: CompressorConfig, P: dict[str, Tensor], x: np.ndarray) -> Tensor:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim == 1:
        x = x[None]
    B, n = x.shape
    if n < config.kernel:
        raise ValueError(f"input of length {n} is shorter than the kernel ({config.kernel})")
    h = Tensor(x[:, None, :])
    for i in range(config.n_layers):
        h = nx.depthwise_conv1d(h, P[f"c{i}.dw_w"], P[f"c{i}.dw_b"])
        h = nx.relu(nx.pointwise_conv1d(h, P[f"c{i}.pw_w"], P[f"c{i}.pw_b"]))
    h = nx.pointwise_conv1d(h, P["head.w"], P["head.b"])
    return nx.reshape(h, (B, n))


def predict_batch(config: CompressorConfig, params: dict[str, np.ndarray], a0v: np.ndarray) -> np.ndarray:
    P = {k: Tensor(v) for k, v in params.items()}
    return nx.softmax(_logits(config, P, a0v)).data


def predict(config: CompressorConfig, params: dict[str, np.ndarray], a0v: Sequence[float]) -> RelevanceScores:
    return RelevanceScores(predict_batch(config, params, np.asarray(a0v)[None])[0], Source.PREDICTED)


# -- inputs and labels ------------------------------------------------------------

def extract_a0v(trace: AttentionTrace, layout: PromptLayout) -> np.ndarray:
    """Layer-0 attention from instruction rows to visual columns, averaged over heads then rows."""
    if trace.seq_len < layout.total:
        raise ValueError(f"layout {layout} does not fit a trace of length {trace.seq_len}")
    a0 = trace.attn[0].astype(np.float64).mean(axis=0)
    return a0[layout.instruction, layout.visual].mean(axis=0)


def prepare_label(r_v: RelevanceScores) -> RelevanceScores:
    """Clamp negatives, zero the bottom half, divide by the sum.

    A label with no mass left becomes uniform and is flagged degenerate.
    """
    v = np.maximum(np.asarray(r_v.r_v, dtype=np.float64), 0.0)
    if v.size == 0:
        raise ValueError("empty relevance vector")
    n_zero = v.size - keep_count(0.5, v.size)
    v[np.argsort(v, kind="stable")[:n_zero]] = 0.0
    s = v.sum()
    if s <= 0:
        return RelevanceScores(np.full(v.size, 1.0 / v.size), Source.LABEL, degenerate=True)
    return RelevanceScores(v / s, Source.LABEL)


def kl_loss(label: RelevanceScores | np.ndarray, predicted: RelevanceScores | np.ndarray) -> float:
    p = np.asarray(getattr(label, "r_v", label), dtype=np.float64)
    q = np.asarray(getattr(predicted, "r_v", predicted), dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {q.shape}")
    pos = p > 0
    return float(np.sum(p[pos] * np.log(p[pos] / q[pos])))


def uniform_kl(label: RelevanceScores | np.ndarray) -> float:
    p = np.asarray(getattr(label, "r_v", label), dtype=np.float64)
    return kl_loss(p, np.full(p.size, 1.0 / p.size))


def top_half_jaccard(a: np.ndarray, b: np.ndarray) -> float:
    x = set(topk_plan(np.asarray(a), 0.5).kept)
    y = set(topk_plan(np.asarray(b), 0.5).kept)
    return len(x & y) / len(x | y)


# -- dataset ------------------------------------------------------------------------

@dataclass
class TrainingExample:
    sample_id: object
    a0v: np.ndarray
    label: RelevanceScores
    degenerate: bool = False

    def __post_init__(self):
        self.a0v = np.asarray(self.a0v, dtype=np.float64)
        if len(self.a0v) != len(self.label):
            raise ValueError("a0v and label lengths differ")

    def record(self) -> dict:
        return {"sample_id": self.sample_id,
                "a0v": [float(np.float32(v)) for v in self.a0v],
                "label": [float(np.float32(v)) for v in self.label.r_v],
                "degenerate": bool(self.degenerate)}

    @classmethod
    def from_record(cls, rec: dict) -> "TrainingExample":
        return cls(rec["sample_id"], rec["a0v"], RelevanceScores(rec["label"], Source.LABEL),
                   bool(rec["degenerate"]))


@dataclass
class PairBuild:
    examples: list[TrainingExample]
    n_input: int
    n_correct: int

    @property
    def retained_fraction(self) -> float:
        return self.n_correct / self.n_input if self.n_input else 0.0


def build_dataset(lm: ToyLM, samples: Sequence[GridQASample], vocab: GridVocab,
                  strategy: Strategy | str = Strategy.GRAD, clamp: bool = False, n_sys: int = 2,
                  sample_ids: Sequence | None = None, batch_size: int = 128, score: str = "logprob") -> PairBuild:
    """Training pairs from the samples the LM answers correctly; the rest are dropped."""
    ids = list(range(len(samples))) if sample_ids is None else list(sample_ids)
    examples = []
    n_correct = 0
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        toks, layout = encode_batch(chunk, vocab, n_sys)
        pred = generate_batch(lm, toks, 1, allowed=vocab.symbols)[:, 0]
        answers = np.array([s.answer for s in chunk])
        ok = np.flatnonzero(pred == answers)
        n_correct += len(ok)
        if not len(ok):
            continue
        for j, tr in zip(ok, capture_batch(lm, toks[ok], answers[ok], score=score)):
            label = prepare_label(relevance_from_traces([tr], layout, strategy, clamp))
            examples.append(TrainingExample(ids[start + j], extract_a0v(tr, layout), label, label.degenerate))
    if not examples:
        log.warning("no sample was answered correctly; the pair set is empty")
    return PairBuild(examples, len(samples), n_correct)


def write_pairs(path: str | Path, examples: Iterable[TrainingExample]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.record(), separators=(",", ":")) + "\n")


def read_pairs(path: str | Path) -> list[TrainingExample]:
    with open(path, encoding="utf-8") as fh:
        return [TrainingExample.from_record(json.loads(line)) for line in fh if line.strip()]


# -- training -------------------------------------------------------------------------

@dataclass
class CompressorResult:
    config: CompressorConfig
    params: dict[str, np.ndarray]
    curve: list[dict] = field(default_factory=list)
    heldout_kl: float = float("nan")


def _buckets(examples: Sequence[TrainingExample]) -> dict[int, list[TrainingExample]]:
    groups = defaultdict(list)
    for ex in examples:
        groups[len(ex.a0v)].append(ex)
    return dict(sorted(groups.items()))


def mean_kl(config: CompressorConfig, params: dict[str, np.ndarray],
            examples: Sequence[TrainingExample]) -> float:
    if not examples:
        return float("nan")
    total = 0.0
    for bucket in _buckets(examples).values():
        pred = predict_batch(config, params, np.stack([ex.a0v for ex in bucket]))
        total += sum(kl_loss(ex.label, q) for ex, q in zip(bucket, pred))
    return total / len(examples)


def train_compressor(config: CompressorConfig, examples: Sequence[TrainingExample],
                     heldout: Sequence[TrainingExample] = (), *, epochs: int = 100, batch_size: int = 128,
                     lr: float = 1e-3, seed: int = 0, zero_init: bool = False,
                     include_degenerate: bool = False) -> CompressorResult:
    """Minimise mean KL(label || predicted) with Adam, one length bucket per batch."""
    train = [ex for ex in examples if include_degenerate or not ex.degenerate]
    if not train:
        raise ValueError("no usable training examples")
    params = init_params(config, seed, zeros=zero_init)
    state = nx.AdamState.for_params(params)
    rng = np.random.default_rng(seed + 1)
    buckets = [(np.stack([ex.a0v for ex in b]), np.stack([ex.label.r_v for ex in b]))
               for b in _buckets(train).values()]
    result = CompressorResult(config, params)
    for epoch in range(epochs):
        batches = []
        for bi, (x, _) in enumerate(buckets):
            order = rng.permutation(len(x))
            batches += [(bi, order[s:s + batch_size]) for s in range(0, len(order), batch_size)]
        losses, weights = [], []
        for k in rng.permutation(len(batches)):
            bi, idx = batches[k]
            x, y = buckets[bi]
            P = {name: Tensor(v) for name, v in params.items()}
            try:
                with Graph() as g:
                    loss = nx.kl_div_log(y[idx], nx.log_softmax(_logits(config, P, x[idx])))
                grads = nx.backward(g, loss)
            except FloatingPointError as e:
                raise RuntimeError(f"compressor training diverged (seed={seed}, step={state.step}): {e}") from e
            params, state = nx.adam_step(params, {name: grads[t.id] for name, t in P.items()}, state, lr)
            losses.append(loss.item())
            weights.append(len(idx))
        row = {"epoch": epoch + 1, "loss": float(np.average(losses, weights=weights))}
        if heldout:
            row["heldout_kl"] = mean_kl(config, params, heldout)
        result.curve.append(row)
        log.info("compressor epoch %d %s", epoch + 1, row)
    result.params = params
    if heldout:
        result.heldout_kl = mean_kl(config, params, heldout)
    return result


# -- persistence ----------------------------------------------------------------------

PARAMS_MAGIC = b"FTH0"
PARAMS_VERSION = 1


def save_params(path: str | Path, config: CompressorConfig, params: dict[str, np.ndarray]) -> None:
    header = json.dumps(config.to_dict(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC + struct.pack("<II", PARAMS_VERSION, len(header)) + header)
        for name, shape in param_shapes(config):
            arr = params[name]
            if arr.shape != shape:
                raise ValueError(f"{name}: shape {arr.shape}, expected {shape}")
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_params(path: str | Path) -> tuple[CompressorConfig, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != PARAMS_MAGIC:
            raise ValueError(f"{path}: not a compressor params file")
        version, n = struct.unpack("<II", fh.read(8))
        if version != PARAMS_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        config = CompressorConfig.from_dict(json.loads(fh.read(n)))
        params = {}
        for name, shape in param_shapes(config):
            count = math.prod(shape)
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise ValueError(f"{path}: truncated at {name}")
            params[name] = np.frombuffer(buf, "<f4").reshape(shape).astype(np.float32)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes")
    return config, params
