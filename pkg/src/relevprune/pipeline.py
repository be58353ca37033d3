"""End-to-end experiment: data, LM, relevance, compressor, pruning evaluation.

Every stage writes its artifacts into one output directory. ``run_pipeline``
finishes with ``results.csv`` / ``results.md``, a ``metrics.json`` summary
and a ``manifest.json`` holding the sha256 of every artifact.
"""

from __future__ import annotations

import contextlib
import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from . import compress as K
from . import compressor as C
from . import explain as E
from . import toylm as T

log = logging.getLogger(__name__)

METHODS = ("explain", "predicted", "random", "fastv")
RESULT_COLUMNS = ("method", "ratio", "accuracy", "preservation_pct", "oracle_hit_rate", "mean_kl",
                  "n_samples", "seed")
MANIFEST_VERSION = 1


class ConfigError(ValueError):
    """Invalid experiment configuration."""


class StageError(RuntimeError):
    def __init__(self, stage: str, seed: int, cause: BaseException):
        super().__init__(f"stage '{stage}' failed (seed={seed}): {cause}")
        self.stage = stage
        self.seed = seed


@dataclass(frozen=True)
class LMArch:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_ffn: int = 256
    epochs: int = 8
    lr: float = 1e-3
    batch_size: int = 64


@dataclass(frozen=True)
class CompressorTraining:
    channels: tuple[int, ...] = C.CompressorConfig().channels
    kernel: int = 3
    epochs: int = 100
    lr: float = 1e-3
    batch_size: int = 128

    @property
    def config(self) -> C.CompressorConfig:
        return C.CompressorConfig(self.channels, self.kernel)


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    grid_size: int = 3
    n_symbols: int = 8
    n_sys: int = 2
    n_train: int = 20_000
    n_heldout: int = 1_000
    n_pairs: int = 4_000
    lm: LMArch = LMArch()
    compressor: CompressorTraining = CompressorTraining()
    ratios: tuple[float, ...] = (0.5, 0.25, 0.1)
    strategy: str = "grad"
    clamp: bool = False
    grad_score: str = "logprob"
    baselines: tuple[str, ...] = ("random", "fastv")
    fastv_layer: int | None = None
    jobs: int = 1

    def __post_init__(self):
        try:
            object.__setattr__(self, "ratios", tuple(float(r) for r in self.ratios))
            object.__setattr__(self, "baselines", tuple(self.baselines))
            object.__setattr__(self, "strategy", E.Strategy(self.strategy).value)
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.grad_score not in T.SCORES:
            raise ConfigError(f"grad_score must be one of {T.SCORES}")
        if not self.ratios or any(not 0 < r <= 1 for r in self.ratios):
            raise ConfigError(f"ratios must lie in (0, 1], got {self.ratios}")
        unknown = set(self.baselines) - {"random", "fastv"}
        if unknown:
            raise ConfigError(f"unknown baselines {sorted(unknown)}")
        if self.grid_size < 2 or self.n_symbols < 2:
            raise ConfigError("grid_size and n_symbols must be at least 2")
        if min(self.n_train, self.n_heldout, self.n_pairs, self.n_sys, self.jobs) < 1:
            raise ConfigError("dataset sizes, n_sys and jobs must be positive")
        if self.lm.d_model % self.lm.n_heads:
            raise ConfigError("lm.d_model must be divisible by lm.n_heads")

    @property
    def vocab(self) -> T.GridVocab:
        return T.GridVocab(self.n_symbols, self.grid_size)

    @property
    def lm_config(self) -> T.LMConfig:
        a = self.lm
        return T.config_for(self.grid_size, self.n_symbols, self.n_sys, n_layers=a.n_layers,
                            n_heads=a.n_heads, d_model=a.d_model, d_ffn=a.d_ffn)

    @property
    def methods(self) -> tuple[str, ...]:
        return ("explain", "predicted") + self.baselines

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ratios"] = list(self.ratios)
        d["baselines"] = list(self.baselines)
        d["compressor"]["channels"] = list(self.compressor.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys {sorted(extra)}")
        try:
            if "lm" in d:
                d["lm"] = LMArch(**d["lm"])
            if "compressor" in d:
                comp = dict(d["compressor"])
                if "channels" in comp:
                    comp["channels"] = tuple(comp["channels"])
                d["compressor"] = CompressorTraining(**comp)
        except TypeError as e:
            raise ConfigError(str(e)) from e
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


@dataclass(frozen=True)
class ResultRow:
    method: str
    ratio: float
    accuracy: float
    preservation_pct: float
    oracle_hit_rate: float
    mean_kl: float | None
    n_samples: int
    seed: int

    def cells(self) -> list[str]:
        kl = "" if self.mean_kl is None else f"{self.mean_kl:.6f}"
        return [self.method, f"{self.ratio:g}", f"{self.accuracy:.6f}", f"{self.preservation_pct:.4f}",
                f"{self.oracle_hit_rate:.6f}", kl, str(self.n_samples), str(self.seed)]


def rows_to_csv(rows: Sequence[ResultRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def rows_from_csv(text: str) -> list[ResultRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != RESULT_COLUMNS:
        raise ValueError(f"unexpected results columns {reader.fieldnames}")
    return [ResultRow(r["method"], float(r["ratio"]), float(r["accuracy"]), float(r["preservation_pct"]),
                      float(r["oracle_hit_rate"]), float(r["mean_kl"]) if r["mean_kl"] else None,
                      int(r["n_samples"]), int(r["seed"])) for r in reader]


def rows_to_markdown(rows: Sequence[ResultRow]) -> str:
    lines = ["| method | ratio | accuracy | preservation % | oracle hit | mean KL |",
             "|---|---:|---:|---:|---:|---:|"]
    for r in rows:
        c = r.cells()
        lines.append(f"| {c[0]} | {c[1]} | {c[2]} | {c[3]} | {c[4]} | {c[5] or '-'} |")
    return "\n".join(lines) + "\n"


def ablation_table(a: Sequence[ResultRow], b: Sequence[ResultRow], labels: tuple[str, str] = ("grad", "mean")) -> str:
    """Preservation of two runs side by side, matched on (method, ratio)."""
    other = {(r.method, r.ratio): r for r in b}
    lines = [f"| method | ratio | {labels[0]} preservation % | {labels[1]} preservation % |",
             "|---|---:|---:|---:|"]
    for r in a:
        m = other.get((r.method, r.ratio))
        right = f"{m.preservation_pct:.4f}" if m else "-"
        lines.append(f"| {r.method} | {r.ratio:g} | {r.preservation_pct:.4f} | {right} |")
    return "\n".join(lines) + "\n"


# -- artifact helpers ----------------------------------------------------------------

def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_text(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="")


def write_json(path: Path, obj) -> None:
    write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


@contextlib.contextmanager
def stage(name: str, seed: int) -> Iterator[None]:
    log.info("stage %s", name)
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, seed, e) from e


def chunked_map(fn: Callable, n: int, chunk: int, jobs: int) -> list:
    """Apply ``fn(start, stop)`` over [0, n) in chunks; results come back in order."""
    bounds = [(s, min(n, s + chunk)) for s in range(0, n, chunk)]
    if jobs <= 1 or len(bounds) <= 1:
        return [fn(s, e) for s, e in bounds]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda b: fn(*b), bounds))


# -- stages ----------------------------------------------------------------------------

def make_data(cfg: ExperimentConfig) -> tuple[list[T.GridQASample], list[T.GridQASample]]:
    train = T.gen_gridqa(cfg.seed, cfg.grid_size, cfg.n_symbols, cfg.n_train)
    seen = {s.key() for s in train}
    heldout: list[T.GridQASample] = []
    batch = 0
    while len(heldout) < cfg.n_heldout:
        batch += 1
        extra = T.gen_gridqa(cfg.seed + 7919 * batch, cfg.grid_size, cfg.n_symbols, 2 * cfg.n_heldout)
        for s in extra:
            if s.key() not in seen:
                seen.add(s.key())
                heldout.append(s)
        if batch > 50:
            raise RuntimeError("could not draw enough held-out samples disjoint from the training split")
    return train, heldout[:cfg.n_heldout]


def gen_data(cfg: ExperimentConfig, out: Path) -> tuple[list[T.GridQASample], list[T.GridQASample]]:
    train, heldout = make_data(cfg)
    T.write_dataset(out / "train.jsonl", train, cfg.vocab, cfg.n_sys)
    T.write_dataset(out / "heldout.jsonl", heldout, cfg.vocab, cfg.n_sys)
    return train, heldout


def train_lm(cfg: ExperimentConfig, out: Path, train, heldout, lm_path: str | Path | None = None) -> T.ToyLM:
    """Train the LM, or load ``lm_path`` if given (its config must match)."""
    if lm_path is not None:
        lm = T.load_lm(lm_path)
        if lm.config != cfg.lm_config:
            raise ValueError(f"{lm_path}: LM config {lm.config} does not match experiment {cfg.lm_config}")
        curve = [{"loaded_from": Path(lm_path).name}]
    else:
        res = T.train_lm(cfg.lm_config, train, heldout, cfg.lm.epochs, cfg.seed, batch_size=cfg.lm.batch_size,
                         lr=cfg.lm.lr, n_sys=cfg.n_sys)
        lm, curve = res.lm, res.curve
    T.save_lm(out / "lm.bin", lm)
    write_json(out / "lm_curve.json", curve)
    return lm


@dataclass
class HeldoutAnalysis:
    """Everything derived from one capture pass over the held-out prompts."""

    tokens: np.ndarray
    layout: T.PromptLayout
    answers: np.ndarray
    vanilla: np.ndarray
    relevance: list[E.RelevanceScores]
    a0v: np.ndarray
    fastv: np.ndarray

    @property
    def correct(self) -> np.ndarray:
        return self.vanilla == self.answers


def analyse(cfg: ExperimentConfig, lm: T.ToyLM, samples: Sequence[T.GridQASample],
            strategy: str | None = None, chunk: int = 128) -> HeldoutAnalysis:
    strategy = strategy or cfg.strategy
    vocab = cfg.vocab
    toks, layout = T.encode_batch(samples, vocab, cfg.n_sys)
    answers = np.array([s.answer for s in samples], dtype=np.int64)

    def work(s, e):
        pred = T.generate_batch(lm, toks[s:e], 1, allowed=vocab.symbols)[:, 0]
        traces = T.capture_batch(lm, toks[s:e], pred, score=cfg.grad_score)
        rel = [E.relevance_from_traces([t], layout, strategy, cfg.clamp) for t in traces]
        a0v = [C.extract_a0v(t, layout) for t in traces]
        fv = [K.fastv_scores(t, layout, cfg.fastv_layer) for t in traces]
        return pred, rel, a0v, fv

    parts = chunked_map(work, len(samples), chunk, cfg.jobs)
    return HeldoutAnalysis(toks, layout, answers, np.concatenate([p[0] for p in parts]),
                           [r for p in parts for r in p[1]], np.array([a for p in parts for a in p[2]]),
                           np.array([f for p in parts for f in p[3]]))


def explain(cfg: ExperimentConfig, out: Path, analysis: HeldoutAnalysis, strategy: str | None = None) -> Path:
    strategy = E.Strategy(strategy or cfg.strategy).value
    path = out / f"relevance_{strategy}.jsonl"
    E.write_relevance(path, enumerate(analysis.relevance), strategy)
    return path


def heldout_pairs(analysis: HeldoutAnalysis) -> list[C.TrainingExample]:
    out = []
    for i in np.flatnonzero(analysis.correct):
        label = C.prepare_label(analysis.relevance[i])
        out.append(C.TrainingExample(int(i), analysis.a0v[i], label, label.degenerate))
    return out


def build_pairs(cfg: ExperimentConfig, out: Path, lm: T.ToyLM, train) -> C.PairBuild:
    subset = train[:cfg.n_pairs]
    build = C.build_dataset(lm, subset, cfg.vocab, cfg.strategy, cfg.clamp, cfg.n_sys, score=cfg.grad_score)
    C.write_pairs(out / f"pairs_{cfg.strategy}.jsonl", build.examples)
    return build


def train_compressor(cfg: ExperimentConfig, out: Path, pairs: Sequence[C.TrainingExample],
                     heldout: Sequence[C.TrainingExample]) -> C.CompressorResult:
    ct = cfg.compressor
    res = C.train_compressor(ct.config, pairs, heldout, epochs=ct.epochs, batch_size=ct.batch_size, lr=ct.lr,
                             seed=cfg.seed)
    C.save_params(out / "f_theta.bin", ct.config, res.params)
    write_json(out / "compressor_curve.json", res.curve)
    return res


def random_seed_for(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def plans_for(cfg: ExperimentConfig, analysis: HeldoutAnalysis, method: str, ratio: float,
              predicted: np.ndarray | None = None) -> list[K.CompressionPlan]:
    n_v = analysis.layout.n_vis
    if method == "explain":
        return [K.topk_plan(r, ratio) for r in analysis.relevance]
    if method == "predicted":
        if predicted is None:
            raise ValueError("predicted pruning needs compressor outputs")
        return [K.topk_plan(p, ratio) for p in predicted]
    if method == "random":
        return [K.random_plan(random_seed_for(cfg.seed, i), n_v, ratio) for i in range(len(analysis.answers))]
    if method == "fastv":
        return [K.topk_plan(f, ratio) for f in analysis.fastv]
    raise ValueError(f"unknown method {method!r}")


def pruned_predictions(cfg: ExperimentConfig, lm: T.ToyLM, analysis: HeldoutAnalysis,
                       plans: Sequence[K.CompressionPlan], chunk: int = 256) -> np.ndarray:
    pruned = [K.apply_plan(t, analysis.layout, p) for t, p in zip(analysis.tokens, plans)]
    toks = np.stack([p.tokens for p in pruned])
    pos = np.stack([p.positions for p in pruned])

    def work(s, e):
        return T.generate_batch(lm, toks[s:e], 1, pos[s:e], allowed=cfg.vocab.symbols)[:, 0]

    return np.concatenate(chunked_map(work, len(toks), chunk, cfg.jobs))


def oracle_indices(samples: Sequence[T.GridQASample]) -> np.ndarray:
    return np.array([s.oracle_index for s in samples])


def evaluate(cfg: ExperimentConfig, lm: T.ToyLM, analysis: HeldoutAnalysis, samples, method: str, ratio: float,
             predicted: np.ndarray | None = None, mean_kl: float | None = None) -> ResultRow:
    n = len(analysis.answers)
    vanilla_acc = float(np.mean(analysis.correct))
    plans = plans_for(cfg, analysis, method, ratio, predicted)
    preds = pruned_predictions(cfg, lm, analysis, plans)
    acc = float(np.mean(preds == analysis.answers))
    hits = float(np.mean([o in p for o, p in zip(oracle_indices(samples), plans)]))
    pres = 100.0 * acc / vanilla_acc if vanilla_acc > 0 else math.nan
    return ResultRow(method, ratio, acc, pres, hits, mean_kl, n, cfg.seed)


def vanilla_row(cfg: ExperimentConfig, analysis: HeldoutAnalysis) -> ResultRow:
    acc = float(np.mean(analysis.correct))
    return ResultRow("vanilla", 1.0, acc, 100.0 if acc > 0 else math.nan, 1.0, None, len(analysis.answers), cfg.seed)


@dataclass
class PipelineResult:
    rows: list[ResultRow]
    metrics: dict = field(default_factory=dict)
    out_dir: Path | None = None


def run_pipeline(cfg: ExperimentConfig, out_dir: str | Path, lm_path: str | Path | None = None) -> PipelineResult:
    """Run every stage and write results plus a content-hash manifest into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_text(out / "config.json", cfg.dumps())
    with stage("gen-data", cfg.seed):
        train, heldout = gen_data(cfg, out)
    with stage("train-lm", cfg.seed):
        lm = train_lm(cfg, out, train, heldout, lm_path)
    with stage("explain", cfg.seed):
        analysis = analyse(cfg, lm, heldout)
        explain(cfg, out, analysis)
    with stage("build-pairs", cfg.seed):
        build = build_pairs(cfg, out, lm, train)
        held_pairs = heldout_pairs(analysis)
        C.write_pairs(out / f"heldout_pairs_{cfg.strategy}.jsonl", held_pairs)
    with stage("train-compressor", cfg.seed):
        comp = train_compressor(cfg, out, build.examples, held_pairs)
        predicted = C.predict_batch(cfg.compressor.config, comp.params, analysis.a0v)
    with stage("eval", cfg.seed):
        usable = [ex for ex in held_pairs if not ex.degenerate]
        kl = C.mean_kl(cfg.compressor.config, comp.params, usable) if usable else None
        rows = [vanilla_row(cfg, analysis)]
        for method in cfg.methods:
            for ratio in (1.0, *cfg.ratios):
                rows.append(evaluate(cfg, lm, analysis, heldout, method, ratio, predicted,
                                     kl if method == "predicted" else None))
        write_text(out / "results.csv", rows_to_csv(rows))
        write_text(out / "results.md", rows_to_markdown(rows))
        metrics = compressor_metrics(analysis, held_pairs, predicted, comp)
        metrics.update({"lm_heldout_accuracy": float(np.mean(analysis.correct)),
                        "pairs_retained_fraction": build.retained_fraction,
                        "n_train_pairs": len(build.examples),
                        "explain_argmax_oracle_rate": float(np.mean(
                            [int(np.argmax(r.r_v)) == s.oracle_index for r, s in zip(analysis.relevance, heldout)]))})
        write_json(out / "metrics.json", metrics)
    write_manifest(out)
    return PipelineResult(rows, metrics, out)


def compressor_metrics(analysis: HeldoutAnalysis, held_pairs: Sequence[C.TrainingExample], predicted: np.ndarray,
                       comp: C.CompressorResult) -> dict:
    usable = [ex for ex in held_pairs if not ex.degenerate]
    if not usable:
        return {"heldout_kl": None, "uniform_kl": None, "top_half_jaccard": None, "n_heldout_pairs": 0}
    kl = float(np.mean([C.kl_loss(ex.label, predicted[ex.sample_id]) for ex in usable]))
    return {
        "heldout_kl": kl,
        "uniform_kl": float(np.mean([C.uniform_kl(ex.label) for ex in usable])),
        "top_half_jaccard": float(np.mean([C.top_half_jaccard(ex.label.r_v, predicted[ex.sample_id])
                                           for ex in usable])),
        "n_heldout_pairs": len(usable),
    }


# -- manifest and validation ------------------------------------------------------------------

BINARY_MAGICS = {b"TLM0", b"FTH0", b"ATRC", b"TNSR"}


def write_manifest(out: Path) -> None:
    files = {p.name: {"sha256": sha256_file(p), "bytes": p.stat().st_size}
             for p in sorted(out.iterdir()) if p.is_file() and p.name != "manifest.json"}
    write_json(out / "manifest.json", {"version": MANIFEST_VERSION, "files": files})


def validate_dir(out_dir: str | Path) -> list[str]:
    """Check every artifact is well formed; returns a list of problems (empty when valid)."""
    out = Path(out_dir)
    if not out.is_dir():
        return [f"{out}: not a directory"]
    problems = []
    manifest = None
    for p in sorted(out.iterdir()):
        if not p.is_file():
            continue
        try:
            if p.suffix == ".jsonl":
                with open(p, encoding="utf-8") as fh:
                    for i, line in enumerate(fh, 1):
                        if line.strip():
                            json.loads(line)
            elif p.suffix == ".json":
                obj = json.loads(p.read_text(encoding="utf-8"))
                if p.name == "manifest.json":
                    manifest = obj
                elif p.name == "config.json" and "grid_size" in obj:
                    ExperimentConfig.from_dict(obj)
            elif p.suffix == ".csv":
                rows = list(csv.reader(io.StringIO(p.read_text(encoding="utf-8"))))
                if rows and len({len(r) for r in rows}) > 1:
                    raise ValueError("ragged CSV")
                if p.name == "results.csv":
                    rows_from_csv(p.read_text(encoding="utf-8"))
            elif p.suffix == ".bin":
                with open(p, "rb") as fh:
                    magic = fh.read(4)
                if magic not in BINARY_MAGICS:
                    raise ValueError(f"unknown magic {magic!r}")
                if magic == b"TLM0":
                    T.load_lm(p)
                elif magic == b"FTH0":
                    C.load_params(p)
                elif magic == b"ATRC":
                    with open(p, "rb") as fh:
                        T.read_traces(fh)
        except Exception as e:  # noqa: BLE001 - collected as a report
            problems.append(f"{p.name}: {e}")
    if manifest is not None:
        for name, entry in manifest.get("files", {}).items():
            f = out / name
            if not f.is_file():
                problems.append(f"manifest lists missing file {name}")
            elif sha256_file(f) != entry["sha256"]:
                problems.append(f"{name}: sha256 does not match manifest")
    return problems


def with_strategy(cfg: ExperimentConfig, strategy: str) -> ExperimentConfig:
    return replace(cfg, strategy=E.Strategy(strategy).value)
