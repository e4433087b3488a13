#!/usr/bin/env python3
"""Train on synthetic crops and score all four preset suites at desk scale.

Writes into --out: model.ck, loss.csv, soc.csv, soc.svg, one zfa_<preset>.csv
per preset and summary.txt (reports in the mean range / SEOM format).

    python3 scripts/run_desk_experiment.py --out runs/desk
    python3 scripts/run_desk_experiment.py --out runs/desk2 --checkpoint runs/desk/model.ck
"""

import argparse
import logging
from pathlib import Path

from bhdetect import evalsuite, experiment, segnet, trainer
from bhdetect.fileio import atomic_write_text


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, required=True)
    ap.add_argument("--epochs", type=int, default=experiment.DeskConfig.epochs)
    ap.add_argument("--train-seed", type=int, default=0)
    ap.add_argument("--eval-seed", type=int, default=7)
    ap.add_argument("--checkpoint", type=Path, help="skip training and evaluate this network")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(name)s: %(message)s")

    cfg = experiment.DeskConfig(epochs=args.epochs, train_seed=args.train_seed, eval_seed=args.eval_seed)
    net = segnet.load_checkpoint(args.checkpoint) if args.checkpoint else None
    res = experiment.run(cfg, net)

    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    if res.history:
        segnet.save_checkpoint(res.net, out / "model.ck")
        atomic_write_text(out / "loss.csv", trainer.loss_csv(res.history))
    lines = []
    for name, o in res.presets.items():
        if o.zfa.found:
            atomic_write_text(out / f"zfa_{name}.csv", evalsuite.zfa_csv(o.zfa.report))
            lines.append(evalsuite.format_report(name, o.zfa.report))
            if name == "multi":
                ranges = o.zfa.report.cases[0].target_ranges_m
                lines.append(f"  per-target first ranges: {ranges}")
        else:
            lines.append(f"{name}: no alarm-free window up to W={cfg.w_max}")
        if o.soc:
            atomic_write_text(out / "soc.csv", evalsuite.soc_csv(o.soc))
            atomic_write_text(out / "soc.svg", evalsuite.soc_svg(o.soc))
    lines.append(f"elapsed {res.seconds / 60:.1f} min")
    text = "\n".join(lines) + "\n"
    atomic_write_text(out / "summary.txt", text)
    print(text, end="")


if __name__ == "__main__":
    main()
