"""
A full robustness table
=======================

Run the sparsity sweep for every defense column and write the table as
JSON, CSV and a plot-ready TSV.  This is what ``mtsattack sweep`` does.
The default config takes about a minute on one core; this demo uses fewer
windows.
"""

import sys

from mtsattack.harness import ExperimentConfig, report, run_experiment

cfg = ExperimentConfig(n_eval=5)
table = run_experiment(cfg, progress=lambda name, wid: print(f"  {name} window {wid}", file=sys.stderr))

print(table.to_csv())
for path in report(table, "demo_results"):
    print("wrote", path)
