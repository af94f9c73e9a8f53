"""Headline toy metrics over several root seeds.

    python3 scripts/seed_sweep.py configs/toy.toml configs/toy_augment.toml --seeds 0 1 2
"""
import argparse
import csv
import json
import subprocess
import sys
import tempfile
from pathlib import Path

STAGES = ["simulate", "embed", "train", "generate", "evaluate"]


def run(config: Path, seed: int, out: Path, augment: bool) -> dict:
    for stage in STAGES + (["augment"] if augment else []):
        subprocess.run([sys.executable, "-m", "genodiff.cli", stage, "--config", str(config), "--seed", str(seed),
                        "--out", str(out)], check=True, stdout=subprocess.DEVNULL)
    report = json.loads((out / "report.json").read_text())
    with open(out / "metrics.csv") as fh:
        rows = [r for r in csv.DictReader(line for line in fh if not line.startswith("#"))]
    ref = report["extra"]["nnaa_train_reference"]
    row = {"val_loss": float(rows[-1]["val_loss"]), "cond_acc": report["conditional_accuracy"],
           "recovery": report["recovery_rate"], "duplicates": report["duplicate_count"],
           "aa_truth_train": ref["aa_truth"], "aa_syn_train": ref["aa_syn"],
           "aa_truth_test": report["aa_truth_test"], "aa_syn_test": report["aa_syn_test"]}
    if augment:
        with open(out / "augmentation.csv") as fh:
            aug = [r for r in csv.DictReader(line for line in fh if not line.startswith("#"))]
        first = aug[0]
        row["gain_at_" + first["fraction"]] = float(first["acc_augmented"]) - float(first["acc_real_only"])
    return row


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("configs", nargs="+", type=Path)
    ap.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2])
    args = ap.parse_args()
    with tempfile.TemporaryDirectory() as tmp:
        for config in args.configs:
            augment = "[augment]" in config.read_text()
            for seed in args.seeds:
                row = run(config, seed, Path(tmp) / f"{config.stem}-{seed}", augment)
                print(config.stem, seed, " ".join(f"{k}={v:.3f}" if isinstance(v, float) else f"{k}={v}"
                                                  for k, v in row.items()), flush=True)


if __name__ == "__main__":
    main()
