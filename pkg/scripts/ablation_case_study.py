"""Previous-sentence ablation: same words, different preceding sentence.

Trains (or loads) a toy PSE model on the synthetic corpus, then synthesizes
one sentence after a previous sentence of each class and reports the
pairwise mean-absolute mel difference, alongside the difference between the
ground-truth class shifts. Dropout is off at inference.

    python scripts/ablation_case_study.py --steps 1500 --out results/ablation
"""
import argparse
import json
from pathlib import Path

import numpy as np
import torch

from cuprosody.cli import ablation_report
from cuprosody.experiments import run_context_sensitivity, synthetic_setup
from cuprosody.features import save_heatmap
from cuprosody.taco_lite import load_checkpoint, save_checkpoint


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--checkpoint", help="reuse a model trained by this script")
    p.add_argument("--mode", default="pse", choices=["pse", "cse", "none"])
    p.add_argument("--steps", type=int, default=1500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sentence", default="kim paid tom")
    p.add_argument("--out", default="results/ablation")
    args = p.parse_args()

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    setup = synthetic_setup()
    spec = setup.spec
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint, with_optimizer=False).model
    else:
        run = run_context_sensitivity(setup, args.mode, args.seed, steps=args.steps)
        model = run.model
        save_checkpoint(out / "model.ckpt", model, step=args.steps, seed=args.seed)
        print(f"trained {args.mode} model: best val/floor {run.best_ratio:.3f}")
    model.eval()

    previous = [spec.sentences[spec.sentence_classes.index(c)] for c in range(spec.n_classes)]
    torch.manual_seed(args.seed)
    steps = -(-len(spec.clean_target(args.sentence, 0)) // model.cfg.reduction)
    mels, pairs = ablation_report(model, spec.lexicon, setup.inventory, setup.backend, args.sentence,
                                  previous, args.seed, max_steps=steps)
    truth = {(i, j): float(np.abs(spec.class_shifts[i] - spec.class_shifts[j]).mean())
             for i, j, _ in pairs}
    report = {"sentence": args.sentence, "previous": previous,
              "pairs": [{"i": i, "j": j, "mean_abs_diff": d, "true_shift_diff": truth[i, j]} for i, j, d in pairs]}
    (out / "ablation.json").write_text(json.dumps(report, indent=2))
    save_heatmap(mels, out / "ablation.png", titles=[f"prev: {s} (class {c})" for c, s in enumerate(previous)])
    for i, j, d in pairs:
        print(f"class {i} vs {j}: mean |diff| {d:.4f} (ground-truth shift difference {truth[i, j]:.4f})")
    print(f"results -> {out}")


if __name__ == "__main__":
    main()
