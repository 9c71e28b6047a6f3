"""Run the desk-scale smoke pipeline end to end and print per-epoch validation and final PSNR.

    python scripts/smoke_run.py [--pretrain-epochs 5] [--finetune-epochs 3] [--out runs/smoke]
"""

import argparse
import dataclasses
import logging
from pathlib import Path

from metadenoise.checkpoint import checkpoint_from_state, save_checkpoint
from metadenoise.smoke import SmokeRecipe, run_evaluation, run_finetune, run_pretrain, smoke_data


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pretrain-epochs", type=int, default=5)
    ap.add_argument("--finetune-epochs", type=int, default=3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("runs/smoke"))
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    recipe = SmokeRecipe(seed=args.seed)
    recipe.pretrain = dataclasses.replace(recipe.pretrain, epochs=args.pretrain_epochs)
    recipe.finetune = dataclasses.replace(recipe.finetune, epochs=args.finetune_epochs)
    data = smoke_data(recipe)

    state, t_pre = run_pretrain(recipe, data)
    for h in state.history:
        print(f"maxl epoch {h['epoch']}: L_pri={h['L_pri']:.4f} psnr={h['psnr']:.2f} collapse={h['collapse_score']:.4f}")
    save_checkpoint(checkpoint_from_state(state), args.out / "ckpt_maxl.bin")

    state, t_fine = run_finetune(recipe, data, state)
    save_checkpoint(checkpoint_from_state(state), args.out / "ckpt_mtl.bin")
    before, after = run_evaluation(recipe, data, state)
    print(f"pretrain {t_pre:.0f}s, finetune {t_fine:.0f}s")
    print(f"no-adapt: {before.summary()}")
    print(f"adapt:    {after.summary()}")


if __name__ == "__main__":
    main()
