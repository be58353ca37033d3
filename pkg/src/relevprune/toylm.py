"""Tiny decoder-only LM over a synthetic grid question-answering task.

The "image" is a g x g grid of symbols, flattened row-major into g*g visual
tokens. A prompt is::

    [SYS] * n_sys | grid symbols (g*g) | [Q] ROW_r COL_c [A]

and the single-token answer is the symbol stored at (r, c). Attention is
computed eagerly so every layer's attention map, and its gradient with
respect to the log-probability of a generated token, can be captured.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from . import numerics as nx
from .numerics import Graph, Tensor

log = logging.getLogger(__name__)

N_INSTR = 4


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int
    max_seq: int
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_ffn: int = 256

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.n_layers, self.n_heads, self.vocab_size, self.max_seq) < 1:
            raise ValueError(f"invalid LMConfig {self}")


@dataclass(frozen=True)
class PromptLayout:
    n_sys: int
    n_vis: int
    n_instr: int

    def __post_init__(self):
        if min(self.n_sys, self.n_vis, self.n_instr) < 1:
            raise ValueError(f"every prompt span needs at least one token: {self}")

    @property
    def total(self) -> int:
        return self.n_sys + self.n_vis + self.n_instr

    @property
    def visual(self) -> slice:
        return slice(self.n_sys, self.n_sys + self.n_vis)

    @property
    def instruction(self) -> slice:
        return slice(self.n_sys + self.n_vis, self.total)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PromptLayout":
        return cls(int(d["n_sys"]), int(d["n_vis"]), int(d["n_instr"]))


@dataclass(frozen=True)
class GridVocab:
    """Token ids: symbols first, then markers, then row and column coordinates."""

    n_symbols: int
    grid_size: int

    @property
    def sys(self) -> int:
        return self.n_symbols

    @property
    def q(self) -> int:
        return self.n_symbols + 1

    @property
    def a(self) -> int:
        return self.n_symbols + 2

    def row(self, r: int) -> int:
        return self.n_symbols + 3 + r

    def col(self, c: int) -> int:
        return self.n_symbols + 3 + self.grid_size + c

    @property
    def size(self) -> int:
        return self.n_symbols + 3 + 2 * self.grid_size

    @property
    def symbols(self) -> np.ndarray:
        return np.arange(self.n_symbols)


@dataclass(frozen=True)
class GridQASample:
    grid: tuple[tuple[int, ...], ...]
    query_row: int
    query_col: int
    answer: int

    def __post_init__(self):
        if self.answer != self.grid[self.query_row][self.query_col]:
            raise ValueError("answer does not match the queried cell")

    @property
    def grid_size(self) -> int:
        return len(self.grid)

    @property
    def oracle_index(self) -> int:
        return self.query_row * self.grid_size + self.query_col

    def key(self) -> tuple:
        return (self.grid, self.query_row, self.query_col)


def gen_gridqa(seed: int, grid_size: int, n_symbols: int, count: int,
               vocab_size: int | None = None) -> list[GridQASample]:
    if grid_size < 2 or n_symbols < 2:
        raise ValueError("grid_size and n_symbols must both be >= 2")
    need = GridVocab(n_symbols, grid_size).size
    if vocab_size is not None and vocab_size < need:
        raise ValueError(f"vocab_size {vocab_size} cannot encode {n_symbols} symbols, "
                         f"{2 * grid_size} coordinates and 3 markers ({need} needed)")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        grid = rng.integers(0, n_symbols, size=(grid_size, grid_size))
        r, c = (int(v) for v in rng.integers(0, grid_size, size=2))
        out.append(GridQASample(tuple(tuple(int(v) for v in row) for row in grid), r, c, int(grid[r, c])))
    return out


def encode(sample: GridQASample, vocab: GridVocab, n_sys: int = 2) -> tuple[np.ndarray, PromptLayout]:
    g = sample.grid_size
    if g != vocab.grid_size:
        raise ValueError(f"sample grid {g} does not match vocab grid {vocab.grid_size}")
    toks = ([vocab.sys] * n_sys + [v for row in sample.grid for v in row]
            + [vocab.q, vocab.row(sample.query_row), vocab.col(sample.query_col), vocab.a])
    return np.array(toks, dtype=np.int64), PromptLayout(n_sys, g * g, N_INSTR)


def encode_batch(samples: Sequence[GridQASample], vocab: GridVocab,
                 n_sys: int = 2) -> tuple[np.ndarray, PromptLayout]:
    rows = [encode(s, vocab, n_sys)[0] for s in samples]
    return np.stack(rows), encode(samples[0], vocab, n_sys)[1]


def sample_record(sample: GridQASample, vocab: GridVocab, n_sys: int = 2) -> dict:
    toks, layout = encode(sample, vocab, n_sys)
    return {
        "system": toks[:n_sys].tolist(),
        "visual": toks[layout.visual].tolist(),
        "instruction": toks[layout.instruction].tolist(),
        "answer": [sample.answer],
        "oracle_index": sample.oracle_index,
        "grid_size": sample.grid_size,
    }


def sample_from_record(rec: dict) -> GridQASample:
    g = int(rec["grid_size"])
    vis = rec["visual"]
    if len(vis) != g * g:
        raise ValueError("visual span length does not match grid_size")
    n_symbols = rec["instruction"][0] - 1
    r = rec["instruction"][1] - (n_symbols + 3)
    c = rec["instruction"][2] - (n_symbols + 3 + g)
    s = GridQASample(tuple(tuple(vis[i * g:(i + 1) * g]) for i in range(g)), r, c, rec["answer"][0])
    if s.oracle_index != rec["oracle_index"]:
        raise ValueError("oracle_index inconsistent with instruction")
    return s


def write_dataset(path: str | Path, samples: Iterable[GridQASample], vocab: GridVocab, n_sys: int = 2) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(sample_record(s, vocab, n_sys), separators=(",", ":")) + "\n")


def read_dataset(path: str | Path) -> list[GridQASample]:
    with open(path, encoding="utf-8") as fh:
        return [sample_from_record(json.loads(line)) for line in fh if line.strip()]


# -- model -----------------------------------------------------------------------

@dataclass
class ToyLM:
    config: LMConfig
    params: dict[str, np.ndarray]


# Embeddings start well above the 0.02 used for weights: with tiny position
# vectors the model first learns a row/column set-intersection shortcut and
# plateaus near 80-90% before it finds per-cell addressing.
EMB_STD = 0.5


def init_params(config: LMConfig, seed: int, emb_std: float = EMB_STD) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    d, f, v = config.d_model, config.d_ffn, config.vocab_size
    std = 0.02
    resid_std = std / math.sqrt(2 * config.n_layers)

    def normal(shape, s=std):
        return (rng.normal(size=shape) * s).astype(np.float32)

    p = {"tok_emb": normal((v, d), emb_std), "pos_emb": normal((config.max_seq, d), emb_std)}
    for i in range(config.n_layers):
        p[f"l{i}.ln1_g"] = np.ones(d, np.float32)
        p[f"l{i}.ln1_b"] = np.zeros(d, np.float32)
        for name in ("q", "k", "v"):
            p[f"l{i}.w{name}"] = normal((d, d))
            p[f"l{i}.b{name}"] = np.zeros(d, np.float32)
        p[f"l{i}.wo"] = normal((d, d), resid_std)
        p[f"l{i}.bo"] = np.zeros(d, np.float32)
        p[f"l{i}.ln2_g"] = np.ones(d, np.float32)
        p[f"l{i}.ln2_b"] = np.zeros(d, np.float32)
        p[f"l{i}.w1"] = normal((d, f))
        p[f"l{i}.b1"] = np.zeros(f, np.float32)
        p[f"l{i}.w2"] = normal((f, d), resid_std)
        p[f"l{i}.b2"] = np.zeros(d, np.float32)
    p["lnf_g"] = np.ones(d, np.float32)
    p["lnf_b"] = np.zeros(d, np.float32)
    p["w_out"] = normal((d, v))
    p["b_out"] = np.zeros(v, np.float32)
    return p


def _positions(tokens: np.ndarray, positions) -> np.ndarray:
    if positions is None:
        return np.broadcast_to(np.arange(tokens.shape[1]), tokens.shape)
    positions = np.asarray(positions, dtype=np.int64)
    return np.broadcast_to(positions, tokens.shape)


def forward(config: LMConfig, P: dict[str, Tensor], tokens: np.ndarray, positions=None, *,
            last_only: bool = False, attn_delta: dict[int, np.ndarray] | None = None
            ) -> tuple[Tensor, list[Tensor]]:
    """Logits and per-layer post-softmax attention maps, each (B, H, T, T).

    ``attn_delta`` adds a constant to a layer's attention map before it is
    used; it exists for finite-difference checks of attention gradients.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be (batch, seq), got {tokens.shape}")
    B, T = tokens.shape
    pos = _positions(tokens, positions)
    if T > config.max_seq or pos.max() >= config.max_seq:
        raise ValueError(f"sequence of length {T} exceeds max_seq {config.max_seq}")
    H = config.n_heads
    dh = config.d_model // H
    causal = np.tril(np.ones((T, T), dtype=bool))
    keep = np.broadcast_to(causal, (B, H, T, T))

    x = nx.add(nx.embedding(P["tok_emb"], tokens), nx.embedding(P["pos_emb"], pos))
    attns = []
    for i in range(config.n_layers):
        h = nx.layer_norm(x, P[f"l{i}.ln1_g"], P[f"l{i}.ln1_b"])

        def heads(name, order):
            y = nx.add_bias(nx.matmul(h, P[f"l{i}.w{name}"]), P[f"l{i}.b{name}"])
            return nx.transpose(nx.reshape(y, (B, T, H, dh)), order)

        q = heads("q", (0, 2, 1, 3))
        kt = heads("k", (0, 2, 3, 1))
        v = heads("v", (0, 2, 1, 3))
        a = nx.softmax(nx.scale(nx.matmul(q, kt), 1.0 / math.sqrt(dh)), causal)
        attns.append(a)
        if attn_delta is not None and i in attn_delta:
            a = nx.add(a, Tensor(attn_delta[i], a.data.dtype))
        # entries above the diagonal carry no gradient
        o = nx.matmul(nx.mask(a, keep), v)
        o = nx.reshape(nx.transpose(o, (0, 2, 1, 3)), (B, T, config.d_model))
        x = nx.add(x, nx.add_bias(nx.matmul(o, P[f"l{i}.wo"]), P[f"l{i}.bo"]))

        h = nx.layer_norm(x, P[f"l{i}.ln2_g"], P[f"l{i}.ln2_b"])
        h = nx.gelu(nx.add_bias(nx.matmul(h, P[f"l{i}.w1"]), P[f"l{i}.b1"]))
        x = nx.add(x, nx.add_bias(nx.matmul(h, P[f"l{i}.w2"]), P[f"l{i}.b2"]))

    if last_only:
        x = nx.index(x, (slice(None), -1))
    x = nx.layer_norm(x, P["lnf_g"], P["lnf_b"])
    return nx.add_bias(nx.matmul(x, P["w_out"]), P["b_out"]), attns


def leaves(params: dict[str, np.ndarray], dtype=nx.DTYPE) -> dict[str, Tensor]:
    return {k: Tensor(v, dtype) for k, v in params.items()}


def logits(lm: ToyLM, tokens: np.ndarray, positions=None, last_only: bool = True) -> np.ndarray:
    out, _ = forward(lm.config, leaves(lm.params), np.atleast_2d(tokens), positions, last_only=last_only)
    return out.data


# -- training --------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    lm: ToyLM
    curve: list[dict] = field(default_factory=list)
    accuracy: float = 0.0


def accuracy(lm: ToyLM, samples: Sequence[GridQASample], vocab: GridVocab, n_sys: int = 2,
             batch_size: int = 256) -> float:
    if not samples:
        return 0.0
    hits = 0
    for i in range(0, len(samples), batch_size):
        chunk = samples[i:i + batch_size]
        toks, _ = encode_batch(chunk, vocab, n_sys)
        pred = generate_batch(lm, toks, 1, allowed=vocab.symbols)[:, 0]
        hits += int((pred == np.array([s.answer for s in chunk])).sum())
    return hits / len(samples)


def train_lm(config: LMConfig, train: Sequence[GridQASample], heldout: Sequence[GridQASample],
             epochs: int, seed: int, *, batch_size: int = 64, lr: float = 1e-3,
             n_sys: int = 2, log_every: int = 1, warmup_steps: int = 0, cosine: bool = False) -> TrainResult:
    """Teacher-forced cross-entropy on the answer position only.

    The learning rate ramps up linearly over ``warmup_steps`` and, with
    ``cosine``, decays to zero by the last step.
    """
    if not train:
        raise ValueError("empty training set")
    overlap = {s.key() for s in train} & {s.key() for s in heldout}
    if overlap:
        raise ValueError(f"held-out split shares {len(overlap)} samples with the training split")
    vocab = GridVocab(_n_symbols(config, train[0].grid_size), train[0].grid_size)
    toks, _ = encode_batch(train, vocab, n_sys)
    answers = np.array([s.answer for s in train], dtype=np.int64)

    params = init_params(config, seed)
    state = nx.AdamState.for_params(params)
    rng = np.random.default_rng(seed + 1)
    lm = ToyLM(config, params)
    result = TrainResult(lm)
    total_steps = epochs * -(-len(train) // batch_size)
    for epoch in range(epochs):
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            P = leaves(params)
            try:
                with Graph() as g:
                    out, _ = forward(config, P, toks[idx], last_only=True)
                    loss = nx.cross_entropy(out, answers[idx])
                grads = nx.backward(g, loss)
                params, state = adam_update(params, P, grads, state,
                                            lr_at(state.step, lr, total_steps, warmup_steps, cosine))
            except FloatingPointError as e:
                raise TrainingDiverged(f"seed={seed} step={state.step}: {e}") from e
            losses.append(loss.item())
        lm = ToyLM(config, params)
        result.lm = lm
        row = {"epoch": epoch + 1, "loss": float(np.mean(losses))}
        if heldout and ((epoch + 1) % log_every == 0 or epoch + 1 == epochs):
            row["heldout_acc"] = accuracy(lm, heldout, vocab, n_sys)
            log.info("epoch %d loss %.4f acc %.4f", epoch + 1, row["loss"], row["heldout_acc"])
        result.curve.append(row)
    result.accuracy = accuracy(lm, heldout, vocab, n_sys) if heldout else 0.0
    return result


def lr_at(step: int, lr: float, total: int, warmup: int = 0, cosine: bool = False) -> float:
    """Learning rate for the update that follows ``step`` completed updates."""
    if warmup and step < warmup:
        return lr * (step + 1) / warmup
    if cosine and total > warmup:
        frac = (step - warmup) / (total - warmup)
        return lr * 0.5 * (1 + math.cos(math.pi * min(1.0, frac)))
    return lr


def adam_update(params, leaf_tensors, grads, state, lr):
    g = {k: grads[t.id] for k, t in leaf_tensors.items()}
    return nx.adam_step(params, g, state, lr)


def _n_symbols(config: LMConfig, grid_size: int) -> int:
    return config.vocab_size - 3 - 2 * grid_size


def config_for(grid_size: int, n_symbols: int, n_sys: int = 2, **kw) -> LMConfig:
    vocab = GridVocab(n_symbols, grid_size)
    return LMConfig(vocab_size=vocab.size, max_seq=n_sys + grid_size**2 + N_INSTR + 1, **kw)


# -- decoding ------------------------------------------------------------------------

def generate_batch(lm: ToyLM, tokens: np.ndarray, max_new: int, positions=None,
                   allowed: np.ndarray | None = None) -> np.ndarray:
    """Greedy decoding without a KV cache; returns (B, max_new) token ids.

    ``allowed`` restricts the argmax to a set of token ids. Generated tokens
    take positions after the largest prompt position.
    """
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    B, T = tokens.shape
    pos = np.array(_positions(tokens, positions))
    if T + max_new > lm.config.max_seq or (T and pos.max() + max_new >= lm.config.max_seq):
        raise ValueError(f"prompt of length {T} plus {max_new} new tokens exceeds max_seq {lm.config.max_seq}")
    P = leaves(lm.params)
    out = np.zeros((B, max_new), dtype=np.int64)
    for step in range(max_new):
        lg, _ = forward(lm.config, P, tokens, pos, last_only=True)
        scores = lg.data
        if allowed is not None:
            masked = np.full_like(scores, -np.inf)
            masked[:, allowed] = scores[:, allowed]
            scores = masked
        nxt = scores.argmax(axis=-1)
        out[:, step] = nxt
        tokens = np.concatenate([tokens, nxt[:, None]], axis=1)
        pos = np.concatenate([pos, pos.max(axis=1, keepdims=True) + 1], axis=1)
    return out


def generate(lm: ToyLM, prompt: Sequence[int], max_new: int, positions=None,
             allowed: np.ndarray | None = None) -> list[int]:
    prompt = np.asarray(prompt, dtype=np.int64)
    if len(prompt) + max_new > lm.config.max_seq:
        raise ValueError(f"prompt of length {len(prompt)} exceeds max_seq {lm.config.max_seq}")
    if max_new == 0:
        return []
    return generate_batch(lm, prompt[None], max_new, positions, allowed)[0].tolist()


# -- attention capture -------------------------------------------------------------------

SCORES = ("logprob", "logit")


@dataclass
class AttentionTrace:
    """Attention maps and their gradients for one generation step.

    ``attn`` and ``grad`` are (n_layers, n_heads, s, s); ``logits`` are the
    next-token logits at the last position of the prefix.
    """

    step: int
    attn: np.ndarray
    grad: np.ndarray
    logits: np.ndarray | None = None

    @property
    def seq_len(self) -> int:
        return self.attn.shape[-1]


def capture_batch(lm: ToyLM, prefixes: np.ndarray, targets: np.ndarray, positions=None,
                  step: int = 0, score: str = "logprob") -> list[AttentionTrace]:
    """Traces for a batch of equal-length prefixes.

    The differentiated scalar is the sum over the batch of log p(target | prefix),
    or of the raw target logit with ``score="logit"``. Samples do not interact,
    so each sample's attention gradient is its own.
    """
    if score not in SCORES:
        raise ValueError(f"unknown score {score!r}; expected one of {SCORES}")
    prefixes = np.atleast_2d(np.asarray(prefixes, dtype=np.int64))
    targets = np.asarray(targets, dtype=np.int64)
    B = prefixes.shape[0]
    P = leaves(lm.params)
    with Graph() as g:
        out, attns = forward(lm.config, P, prefixes, positions, last_only=True)
        logp = nx.log_softmax(out) if score == "logprob" else out
        picked = nx.mask(logp, np.eye(lm.config.vocab_size, dtype=np.float32)[targets])
        objective = nx.total(picked)
    grads = nx.backward(g, objective)
    attn = np.stack([a.data for a in attns], axis=1)
    grad = np.stack([grads[a.id] for a in attns], axis=1)
    return [AttentionTrace(step, attn[b], grad[b], out.data[b]) for b in range(B)]


def capture_step(lm: ToyLM, sequence: Sequence[int], prompt_len: int, t: int,
                 positions=None, score: str = "logprob") -> AttentionTrace:
    """Trace for generating ``sequence[prompt_len + t]`` from its prefix."""
    sequence = np.asarray(sequence, dtype=np.int64)
    n_resp = len(sequence) - prompt_len
    if not 0 <= t < n_resp:
        raise IndexError(f"step {t} outside response of length {n_resp}")
    end = prompt_len + t
    pos = None if positions is None else np.asarray(positions)[:end][None]
    return capture_batch(lm, sequence[:end][None], sequence[end:end + 1], pos, step=t, score=score)[0]


# -- persistence ----------------------------------------------------------------------

LM_MAGIC = b"TLM0"
TRACE_MAGIC = b"ATRC"
FORMAT_VERSION = 1


def save_lm(path: str | Path, lm: ToyLM) -> None:
    names = sorted(lm.params)
    header = json.dumps({"config": asdict(lm.config), "params": names}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(LM_MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header)
        for name in names:
            nx.write_tensor(fh, lm.params[name])


def load_lm(path: str | Path) -> ToyLM:
    with open(path, "rb") as fh:
        if fh.read(4) != LM_MAGIC:
            raise ValueError(f"{path}: not a model file")
        version, n = struct.unpack("<II", fh.read(8))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        header = json.loads(fh.read(n))
        params = {name: nx.read_tensor(fh) for name in header["params"]}
    return ToyLM(LMConfig(**header["config"]), params)


def write_traces(fh: BinaryIO, traces: Iterable[AttentionTrace]) -> None:
    fh.write(TRACE_MAGIC + struct.pack("<I", FORMAT_VERSION))
    for tr in traces:
        n_layers, n_heads, s, _ = tr.attn.shape
        fh.write(struct.pack("<IIII", tr.step, n_layers, n_heads, s))
        fh.write(np.ascontiguousarray(tr.attn, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(tr.grad, dtype="<f4").tobytes())


def read_traces(fh: BinaryIO) -> list[AttentionTrace]:
    if fh.read(4) != TRACE_MAGIC:
        raise ValueError("not an attention dump")
    (version,) = struct.unpack("<I", fh.read(4))
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported attention dump version {version}")
    out = []
    while True:
        head = fh.read(16)
        if not head:
            return out
        step, n_layers, n_heads, s = struct.unpack("<IIII", head)
        count = n_layers * n_heads * s * s
        arrs = []
        for _ in range(2):
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise ValueError("truncated attention dump")
            arrs.append(np.frombuffer(buf, "<f4").reshape(n_layers, n_heads, s, s).astype(np.float32))
        out.append(AttentionTrace(step, arrs[0], arrs[1]))
