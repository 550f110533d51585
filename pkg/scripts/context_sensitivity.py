"""Context-sensitivity experiment on the synthetic corpus.

Trains toy models with and without cross-utterance context and reports the
free-running validation MSE relative to the context-blind floor.

    python scripts/context_sensitivity.py --seeds 0 1 2 --modes pse none --out results/ctx
"""
import argparse
import csv
import json
import logging
from pathlib import Path

from cuprosody.experiments import run_context_sensitivity, synthetic_setup


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--modes", nargs="+", default=["pse", "cse", "none"], choices=["pse", "cse", "none"])
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--stop-ratio", type=float, default=None,
                   help="stop a run once val MSE <= ratio * floor (default: run all steps)")
    p.add_argument("--val-every", type=int, default=250)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--paragraphs", type=int, default=200)
    p.add_argument("--context-width", type=int, default=2)
    p.add_argument("--out", default="results/context_sensitivity")
    p.add_argument("--plot", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    setup = synthetic_setup(n_classes=args.classes, noise_sigma=args.noise, paragraphs=args.paragraphs)
    print(f"context-blind floor: {setup.floor:.6f}")
    summary = []
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "seed", "step", "val_free_mse", "ratio"])
        for mode in args.modes:
            for seed in args.seeds:
                stop = args.stop_ratio if mode != "none" else None
                r = run_context_sensitivity(setup, mode, seed, steps=args.steps, stop_ratio=stop,
                                            val_every=args.val_every, L=args.context_width)
                for step, mse in r.val_curve:
                    w.writerow([mode, seed, step, f"{mse:.6f}", f"{mse / setup.floor:.4f}"])
                fh.flush()
                summary.append({"mode": mode, "seed": seed, "best_ratio": r.best_ratio,
                                "steps": r.val_curve[-1][0], "seconds": round(r.seconds, 1)})
                print(f"{mode:4s} seed {seed}: best val/floor {r.best_ratio:.3f} after "
                      f"{r.val_curve[-1][0]} steps ({r.seconds:.0f}s)")
    (out / "summary.json").write_text(json.dumps({"floor": setup.floor, "runs": summary}, indent=2))

    if args.plot:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        rows = list(csv.DictReader(open(out / "curves.csv")))
        fig, ax = plt.subplots(figsize=(7, 4))
        for mode in args.modes:
            for seed in args.seeds:
                pts = [(int(r["step"]), float(r["ratio"])) for r in rows if r["mode"] == mode and int(r["seed"]) == seed]
                ax.plot(*zip(*pts), label=f"{mode} s{seed}")
        ax.axhline(1.0, color="k", lw=0.8, ls="--")
        ax.axhline(0.8, color="g", lw=0.8, ls=":")
        ax.set_xlabel("step")
        ax.set_ylabel("val MSE / floor")
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out / "curves.png", dpi=120)
    print(f"results -> {out}")


if __name__ == "__main__":
    main()
