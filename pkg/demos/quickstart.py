"""End to end on a small grid: train a toy LM, explain its answers, train the
relevance compressor and compare pruning methods.

Takes a few minutes on one core, mostly LM training. Artifacts land in ./demo_out.

    python3 demos/quickstart.py [out_dir]
"""

import sys

import numpy as np

from relevprune import compress as K
from relevprune import pipeline as PL
from relevprune import toylm as T

out = sys.argv[1] if len(sys.argv) > 1 else "demo_out"

cfg = PL.ExperimentConfig.from_dict({
    "seed": 0, "n_heldout": 300, "n_pairs": 1500,
    "lm": {"epochs": 5},
    "compressor": {"channels": [16, 32, 64], "epochs": 20},
})
result = PL.run_pipeline(cfg, out)

print(PL.rows_to_markdown(result.rows))
for key, value in sorted(result.metrics.items()):
    print(f"{key:28s} {value}")

# Look at one held-out question: the relevance map over the grid, and
# whether keeping only the top quarter of cells preserves the answer.
lm = T.load_lm(f"{out}/lm.bin")
held = T.read_dataset(f"{out}/heldout.jsonl")
analysis = PL.analyse(cfg, lm, held[:1])
sample, rel = held[0], analysis.relevance[0]
g = cfg.grid_size
print(f"\nQuestion: symbol at row {sample.query_row}, column {sample.query_col} (cell {sample.oracle_index})")
print("relevance over the grid:")
# raw scores are small on a trained LM; only their order matters for pruning
print(np.array2string(rel.r_v.reshape(g, g), formatter={"float_kind": lambda v: f"{v:+.2e}"}))
keep = K.topk_plan(rel, 0.25).kept
print(f"kept cells at 25%: {list(keep)}; answer cell kept: {sample.oracle_index in keep}")
