"""Desk-scale leave-one-class-out experiment on generated data.

Generates 8 synthetic 256x256 tiles with 5 textured classes, trains one
all-class model plus one model per held-out class, evaluates the four
contexts, renders the maps and prints a per-rotation summary.

    python3 scripts/desk_scale.py --out results/desk
"""
import argparse
import json
import logging
from pathlib import Path

from openpixel import dataset as ds
from openpixel import experiment as ex
from openpixel import metrics as mt
from openpixel import network as nw
from openpixel.render import render_outputs


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--out", default="results/desk")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--patches-per-class", type=int, default=300)
    p.add_argument("--tau-step", type=float, default=0.05)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")

    out = Path(args.out)
    data = out / "data"
    synth = ds.SynthConfig(n_tiles=8, tile_size=256, n_classes=5, seed=args.seed)
    ds.write_dataset(ds.generate_synthetic(synth), data, ds.synthetic_palette(synth.names))

    cfg = ex.ExperimentConfig(
        data_root=str(data),
        out=str(out / "bundle"),
        unknown="all",
        test_fraction=0.2,
        tau_step=args.tau_step,
        seed=args.seed,
        train=nw.TrainConfig(epochs=args.epochs, patches_per_class=args.patches_per_class, seed=args.seed),
    )
    results = ex.run_rotation(cfg)
    render_outputs(cfg.out)

    by_unknown = {}
    for r in results:
        by_unknown.setdefault(r.unknown, {})[r.context] = r
    rows = []
    for unknown, runs in by_unknown.items():
        rows.append({
            "unknown": unknown,
            "tau": runs["open_open"].tau,
            "unknown_acc_open": runs["open_open"].unknown_acc,
            "known_na_closed_closed": runs["closed_closed"].known_na,
            "known_na_open": runs["open_open"].known_na,
            "na_open": mt.normalized_accuracy(runs["open_open"].cm),
            "na_morph": mt.normalized_accuracy(runs["open_morph"].cm),
            "kappa_morph": mt.cohen_kappa(runs["open_morph"].cm),
        })
    (out / "desk_summary.json").write_text(json.dumps(rows, indent=2) + "\n")
    timing = json.loads((Path(cfg.out) / "timing.json").read_text())
    train_s = sum(v for k, v in timing.items() if k.startswith("train/"))

    print(f"{'unknown':10s} {'tau':>5s} {'unk_acc':>8s} {'kNA_cc':>7s} {'kNA_oo':>7s} {'NA_oo':>6s} {'NA_om':>6s}")
    for r in rows:
        print(f"{r['unknown']:10s} {r['tau']:5.2f} {r['unknown_acc_open']:8.3f} {r['known_na_closed_closed']:7.3f}"
              f" {r['known_na_open']:7.3f} {r['na_open']:6.3f} {r['na_morph']:6.3f}")
    print(f"training time: {train_s:.0f} s over {len(by_unknown) + 1} models")


if __name__ == "__main__":
    main()
