"""One full seeded run on the synthetic world, then a look at what came out.

Usage: python demos/03_synthetic_run.py [output_dir]   (about a minute on one CPU)
"""

import json
import sys

from discrimq.config import load_config
from discrimq.pipeline import Run, run_all

out = sys.argv[1] if len(sys.argv) > 1 else "runs/demo"
cfg = load_config(None, {"paths": {"out": out}})
status = run_all(cfg)

print(f"held-out attribute mAP: {status['train-attr']['map_heldout']:.3f}")
print((cfg.out_dir / "report.txt").read_text())
print("hard subset:")
print((cfg.out_dir / "report_hard.txt").read_text())

truth = Run(cfg).ground_truth()
print("a few test pairs (differing families, strongest first):")
rows = [json.loads(line) for line in (cfg.out_dir / "acqg_full" / "generated.jsonl").read_text().splitlines()]
for r in rows[:8]:
    fams = "/".join(truth.pair_family[r["pair_id"]])
    print(f"  {r['pair_id']}  [{fams:>15s}]  {r['att_i']} vs {r['att_j']}: {r['question']}?")
