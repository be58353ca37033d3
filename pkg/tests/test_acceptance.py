"""Acceptance criteria, one test each. Every test prints a single
``CRITERION n: PASS|FAIL`` line with the measured numbers.

The trained toy LM is cached in pytest's cache directory, keyed by the
LM-relevant part of the experiment config; delete ``.pytest_cache`` to
retrain from scratch.
"""

import hashlib
import json
import shutil
from fractions import Fraction

import numpy as np
import pytest

from relevprune import compressor as C
from relevprune import explain as E
from relevprune import flops as F
from relevprune import numerics as nx
from relevprune import pipeline as PL
from relevprune import toylm as T
from relevprune.numerics import Graph, Tensor

from conftest import numeric_grad, rel_err
from test_explain import product_oracle, random_trace
from test_numerics import PRIMITIVES, _check_primitive
from test_toylm import tiny_lm

FULL = PL.ExperimentConfig()


@pytest.fixture
def report(capsys):
    def emit(n: int, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    return emit


def _lm_key(cfg: PL.ExperimentConfig) -> str:
    d = cfg.to_dict()
    keep = {k: d[k] for k in ("seed", "grid_size", "n_symbols", "n_sys", "n_train", "n_heldout", "lm")}
    keep["emb_std"] = T.EMB_STD
    return hashlib.sha256(json.dumps(keep, sort_keys=True).encode()).hexdigest()[:16]


@pytest.fixture(scope="session")
def full_runs(request, tmp_path_factory):
    """Pipeline runs under both strategies, sharing one trained LM."""
    cache = request.config.cache.mkdir("relevprune")
    cached_lm = cache / f"lm-{_lm_key(FULL)}.bin"
    runs = {}
    for strategy in ("grad", "mean"):
        cfg = PL.with_strategy(FULL, strategy)
        out = tmp_path_factory.mktemp(f"run_{strategy}")
        runs[strategy] = PL.run_pipeline(cfg, out, cached_lm if cached_lm.is_file() else None)
        if not cached_lm.is_file():
            shutil.copyfile(out / "lm.bin", cached_lm)
    return runs


def _row(rows, method, ratio):
    return next(r for r in rows if r.method == method and r.ratio == ratio)


# -- 1 ----------------------------------------------------------------------------------

def test_criterion_1_flops_arithmetic(report):
    attn = F.flops_attn(1568, 3584)
    conv = F.flops_conv(F.ConvFlopsConfig.from_channels(1568, include_final_pointwise=False))
    conv_head = F.flops_conv(F.ConvFlopsConfig.from_channels(1568))
    share = 100 * Fraction(attn, F.STATED_LLM_TOTAL)
    ok = (attn == 20_146_667_520 and conv == 275_270_240 and conv_head == 276_073_056
          and abs(share - Fraction(17, 100)) <= Fraction(1, 100))
    report(1, ok, f"flops_attn={attn:,} flops_conv={conv:,} (+head {conv_head:,}) "
                  f"attn share of 11.69T={float(share):.4f}%")
    assert ok


# -- 2 ----------------------------------------------------------------------------------

def test_criterion_2_relevance_matches_product_form(report):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        tr = random_trace(rng, int(rng.integers(1, 6)), int(rng.integers(1, 5)), int(rng.integers(2, 9)))
        for strategy in E.Strategy:
            err = np.abs(E.propagate_step(tr, strategy) - product_oracle(tr, strategy)).max()
            worst = max(worst, float(err))
    ok = worst < 1e-5
    report(2, ok, f"100 random traces (s<=8), both strategies, max abs error {worst:.2e}")
    assert ok


# -- 3 ----------------------------------------------------------------------------------

def _primitive_errors():
    rng = np.random.default_rng(3)
    failures = []
    for name, (build, make) in sorted(PRIMITIVES.items()):
        try:
            _check_primitive(build, make(rng), rng, tol=1e-3)
        except AssertionError as e:
            failures.append(f"{name}: {e}")
    return failures


def _lm_attention_error():
    worst, h = 0.0, 1e-4
    for score in T.SCORES:
        lm = tiny_lm(seed=3, n_layers=2, n_heads=1, boost=15)
        seq = np.random.default_rng(1).integers(0, lm.config.vocab_size, size=9)
        tr = T.capture_step(lm, seq, 8, 0, score=score)
        P64 = T.leaves(lm.params, np.float64)

        def objective(delta):
            out, _ = T.forward(lm.config, P64, seq[None, :8], last_only=True, attn_delta=delta)
            v = out.data[0].astype(np.float64)
            lse = v.max() + np.log(np.exp(v - v.max()).sum())
            return v[seq[-1]] - (lse if score == "logprob" else 0.0)

        for layer in range(2):
            fd = np.zeros((8, 8))
            for i in range(8):
                for j in range(i + 1):
                    d = np.zeros((1, 1, 8, 8))
                    d[0, 0, i, j] = h
                    fd[i, j] = (objective({layer: d}) - objective({layer: -d})) / (2 * h)
            worst = max(worst, rel_err(tr.grad[layer, 0], fd))
    return worst


def _compressor_composite_error():
    cfg = C.CompressorConfig(channels=(4, 8))
    rng = np.random.default_rng(5)
    x = rng.dirichlet(np.ones(8))[None]
    y = C.prepare_label(E.RelevanceScores(rng.random(8))).r_v[None]
    base = {k: v.astype(np.float64) * 1.5 for k, v in C.init_params(cfg, seed=3).items()}
    base["c0.pw_b"] = rng.normal(size=4) * 0.1
    base["c1.pw_b"] = rng.normal(size=8) * 0.1

    def build(params):
        P = {k: Tensor(v, np.float64) for k, v in params.items()}
        with Graph() as g:
            loss = nx.kl_div_log(y, nx.log_softmax(C._logits(cfg, P, x)))
        return loss, P, g

    loss, P, g = build(base)
    grads = nx.backward(g, loss)
    # head.b: softmax is shift invariant, so its exact gradient is zero
    worst = float(np.abs(grads[P["head.b"].id]).max())
    for name in ("c0.dw_w", "c0.dw_b", "c0.pw_w", "c1.dw_w", "c1.pw_w", "head.w"):
        fd = numeric_grad(lambda v, n=name: build({**base, n: v})[0].item(), base[name], h=1e-5)
        worst = max(worst, rel_err(grads[P[name].id], fd))
    return worst


def test_criterion_3_gradient_fidelity(report):
    prim = _primitive_errors()
    lm_err = _lm_attention_error()
    comp_err = _compressor_composite_error()
    ok = not prim and lm_err < 1e-2 and comp_err < 1e-3
    report(3, ok, f"{len(PRIMITIVES) - len(prim)}/{len(PRIMITIVES)} primitives < 1e-3; "
                  f"LM attention grads {lm_err:.2e} (< 1e-2); compressor+KL {comp_err:.2e} (< 1e-3)"
                  + (f"; failing: {prim}" if prim else ""))
    assert ok


# -- 4 ----------------------------------------------------------------------------------

def test_criterion_4_distribution_invariants(report):
    rng = np.random.default_rng(4)
    small = C.CompressorConfig(channels=(8, 16))
    big = C.CompressorConfig()
    param_sets = [(small, C.init_params(small, s)) for s in range(4)] + [(big, C.init_params(big, 0))]
    # one set with large weights to push the softmax towards saturation
    param_sets.append((small, {k: v * 8 for k, v in C.init_params(small, 9).items()}))
    worst_pred = worst_label = 0.0
    negatives = 0
    for case in range(1000):
        n = int(rng.integers(3, 300))
        kind = case % 4
        if kind == 0:
            a = rng.dirichlet(np.ones(n))
        elif kind == 1:
            a = rng.normal(size=n)
        elif kind == 2:
            a = np.zeros(n)
        else:
            a = rng.exponential(size=n) * rng.integers(0, 2, size=n)
        cfg, params = param_sets[case % len(param_sets)]
        q = C.predict(cfg, params, a).r_v
        lab = C.prepare_label(E.RelevanceScores(rng.normal(size=n) if kind != 2 else -np.abs(rng.random(n)))).r_v
        negatives += int((q < 0).any() or (lab < 0).any())
        worst_pred = max(worst_pred, abs(float(q.sum()) - 1))
        worst_label = max(worst_label, abs(float(lab.sum()) - 1))
    ok = negatives == 0 and worst_pred <= 1e-6 and worst_label <= 1e-6
    report(4, ok, f"1000 cases: negatives={negatives}, max |sum-1| predict {worst_pred:.1e}, "
                  f"prepare_label {worst_label:.1e}")
    assert ok


# -- 5 ----------------------------------------------------------------------------------

def _a0v_examples(grid: int, count: int, seed: int):
    cfg = PL.ExperimentConfig(grid_size=grid, n_heldout=count, lm=PL.LMArch(n_layers=2, n_heads=2, d_model=32))
    lm = T.ToyLM(cfg.lm_config, T.init_params(cfg.lm_config, seed))
    samples = T.gen_gridqa(seed, grid, cfg.n_symbols, count)
    an = PL.analyse(cfg, lm, samples)
    return [C.TrainingExample(i, an.a0v[i], C.prepare_label(r)) for i, r in enumerate(an.relevance)]


def test_criterion_5_length_generalization(report):
    train = [ex for ex in _a0v_examples(8, 256, 0) if not ex.degenerate]
    res = C.train_compressor(C.CompressorConfig(), train, epochs=3, batch_size=128, seed=0)
    long = _a0v_examples(16, 16, 1)
    outs = C.predict_batch(res.config, res.params, np.stack([ex.a0v for ex in long]))
    sums = np.abs(outs.astype(np.float64).sum(axis=1) - 1)
    ok = (outs.shape == (16, 256) and bool((outs >= 0).all()) and float(sums.max()) <= 1e-6
          and bool(np.isfinite(outs).all()))
    report(5, ok, f"trained on {len(train)} A0v at N_v=64, predicted {outs.shape[0]} at N_v={outs.shape[1]}, "
                  f"max |sum-1| {sums.max():.1e}")
    assert ok


# -- 6 ----------------------------------------------------------------------------------

def _variant_preservation(run, cfg, **over):
    """Explained pruning under another relevance setting on the same LM and samples."""
    out = run.out_dir
    lm = T.load_lm(out / "lm.bin")
    held = T.read_dataset(out / "heldout.jsonl")
    vcfg = PL.ExperimentConfig(**{**{f: getattr(cfg, f) for f in cfg.__dataclass_fields__}, **over})
    an = PL.analyse(vcfg, lm, held)
    return [PL.evaluate(vcfg, lm, an, held, "explain", r).preservation_pct for r in (0.5, 0.25)]


def test_criterion_6_end_to_end_compression(report, full_runs):
    run = full_runs["grad"]
    rows, m = run.rows, run.metrics
    acc = m["lm_heldout_accuracy"]
    e50 = _row(rows, "explain", 0.5)
    e25, r25 = _row(rows, "explain", 0.25), _row(rows, "random", 0.25)
    gap = e25.preservation_pct - r25.preservation_pct
    ok = acc >= 0.95 and e50.n_samples >= 500 and e50.preservation_pct >= 95 and gap >= 10
    mean_rows = full_runs["mean"].rows
    alt = _variant_preservation(run, FULL, grad_score="logit", clamp=True)
    report(6, ok, f"LM acc {acc:.4f} on {e50.n_samples}; grad R_v: 50% -> {e50.preservation_pct:.1f}% "
                  f"(need >=95), 25% explain-random gap {gap:.1f}pp (need >=10) | for reference: "
                  f"mean R_v 50% {_row(mean_rows, 'explain', 0.5).preservation_pct:.1f}%, "
                  f"25% {_row(mean_rows, 'explain', 0.25).preservation_pct:.1f}%; "
                  f"logit+clamp grad R_v 50% {alt[0]:.1f}%, 25% {alt[1]:.1f}%")
    assert ok


# -- 7 ----------------------------------------------------------------------------------

def test_criterion_7_compressor_learning(report, full_runs):
    run = full_runs["grad"]
    m = run.metrics
    p50 = _row(run.rows, "predicted", 0.5)
    ok = (m["heldout_kl"] < m["uniform_kl"] and m["top_half_jaccard"] >= 0.5
          and p50.preservation_pct >= 90)
    mm = full_runs["mean"].metrics
    report(7, ok, f"held-out KL {m['heldout_kl']:.4f} vs uniform {m['uniform_kl']:.4f}; "
                  f"top-50% Jaccard {m['top_half_jaccard']:.3f} (need >=0.5); predicted 50% -> "
                  f"{p50.preservation_pct:.1f}% (need >=90) | mean-label run: KL {mm['heldout_kl']:.4f} vs "
                  f"{mm['uniform_kl']:.4f}, Jaccard {mm['top_half_jaccard']:.3f}, predicted 50% "
                  f"{_row(full_runs['mean'].rows, 'predicted', 0.5).preservation_pct:.1f}%")
    assert ok


# -- 8 ----------------------------------------------------------------------------------

def test_criterion_8_ablation_harness(report, full_runs, capsys):
    g, m = full_runs["grad"], full_runs["mean"]
    table = PL.ablation_table(g.rows, m.rows)
    rel_g = (g.out_dir / "relevance_grad.jsonl").read_bytes()
    rel_m = (m.out_dir / "relevance_mean.jsonl").read_bytes()
    explain_differs = [_row(g.rows, "explain", r) != _row(m.rows, "explain", r) for r in FULL.ratios]
    ok = len(g.rows) == len(m.rows) and rel_g != rel_m and any(explain_differs) and "| explain |" in table
    with capsys.disabled():
        print("\n" + table)
    report(8, ok, f"both strategies completed ({len(g.rows)} rows each); relevance outputs differ: "
                  f"{rel_g != rel_m}; explain rows differ at ratios {[r for r, d in zip(FULL.ratios, explain_differs) if d]}")
    assert ok


# -- 9 ----------------------------------------------------------------------------------

DET = PL.ExperimentConfig.from_dict({
    "seed": 11, "n_train": 2000, "n_heldout": 200, "n_pairs": 300,
    "lm": {"n_layers": 2, "n_heads": 2, "d_model": 32, "d_ffn": 64, "epochs": 2},
    "compressor": {"channels": [8, 16, 32], "epochs": 3},
})


def test_criterion_9_determinism(report, tmp_path):
    PL.run_pipeline(DET, tmp_path / "a")
    PL.run_pipeline(DET, tmp_path / "b")
    a = (tmp_path / "a" / "results.csv").read_bytes()
    b = (tmp_path / "b" / "results.csv").read_bytes()
    same_artifacts = all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
                         for n in ("lm.bin", "f_theta.bin", "relevance_grad.jsonl", "manifest.json"))
    ok = a == b and same_artifacts
    report(9, ok, f"two full runs (train LM + compressor): results.csv identical={a == b} "
                  f"(sha256 {hashlib.sha256(a).hexdigest()[:12]}), other artifacts identical={same_artifacts}")
    assert ok
