"""End-to-end run of the command-line pipeline on a generated corpus.

Writes everything under ./demo-run: the raw TSV, a prepared corpus, a
checkpoint with its training log, an evaluation report and diversity curves.

Run: python demos/cli_pipeline.py
"""
from pathlib import Path

from behavior_search.cli import main
from behavior_search.corpus import write_tsv
from behavior_search.synthetic import PlantedSpec, planted_corpus

root = Path("demo-run")
root.mkdir(exist_ok=True)
records, _ = planted_corpus(PlantedSpec(n_users=300, n_products=150), seed=1)
write_tsv(records, root / "reviews.tsv")

small = ["--min-count", "1", "--d", "16", "--batch-size", "256"]
steps = [
    ["prepare", "--input", root / "reviews.tsv", "--run-dir", root / "prepared"],
    ["train", "--corpus", root / "prepared", "--epochs", "5", "--run-dir", root / "train"],
    ["eval", "--corpus", root / "prepared", "--checkpoint", root / "train" / "checkpoint", "--run-dir", root / "eval"],
    ["diagnose", "--corpus", root / "prepared", "--omega", "0.7", "--beta", "0.3", "--run-dir", root / "diag"],
]
for step in steps:
    print("$ behavior-search", *step[:1], "...")
    assert main([str(a) for a in step + small]) == 0

print((root / "prepared" / "stats.txt").read_text())
print((root / "eval" / "report.txt").read_text())
