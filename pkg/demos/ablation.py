"""Gradient-weighted versus plain-mean attention relevance on the same LM.

Runs the whole pipeline twice, once per strategy. The second run reuses the
LM trained by the first, so the only difference is how attention maps are
turned into per-layer relevance updates.

    python3 demos/ablation.py [out_dir]
"""

import sys
from pathlib import Path

from relevprune import pipeline as PL

root = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_ablation")

base = PL.ExperimentConfig.from_dict({
    "seed": 0, "n_heldout": 300, "n_pairs": 1500,
    "lm": {"epochs": 5},
    "compressor": {"channels": [16, 32, 64], "epochs": 20},
})

grad = PL.run_pipeline(PL.with_strategy(base, "grad"), root / "grad")
mean = PL.run_pipeline(PL.with_strategy(base, "mean"), root / "mean", lm_path=root / "grad" / "lm.bin")

print(PL.ablation_table(grad.rows, mean.rows))
print()
for name, run in (("grad", grad), ("mean", mean)):
    m = run.metrics
    print(f"{name}: top-1 relevance hits the queried cell in {100 * m['explain_argmax_oracle_rate']:.1f}% "
          f"of samples; compressor KL {m['heldout_kl']:.3f} vs uniform {m['uniform_kl']:.3f}, "
          f"top-half Jaccard {m['top_half_jaccard']:.3f}")
