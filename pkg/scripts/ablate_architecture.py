"""Sequential heads vs the parallel-heads baseline at smoke scale.

Both variants share the smoke recipe and seed; only ``NetworkConfig.variant``
changes. Prints parameter counts and test PSNR with and without adaptation.
"""

import argparse
import dataclasses

from metadenoise.meta_train import init_state
from metadenoise.networks import count_parameters
from metadenoise.smoke import SmokeRecipe, run_evaluation, run_finetune, run_pretrain, smoke_data


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--pretrain-epochs", type=int, default=5)
    ap.add_argument("--finetune-epochs", type=int, default=3)
    args = ap.parse_args()

    rows = []
    for variant in ("sequential", "parallel"):
        recipe = SmokeRecipe()
        recipe.network = dataclasses.replace(recipe.network, variant=variant)
        recipe.pretrain = dataclasses.replace(recipe.pretrain, epochs=args.pretrain_epochs)
        recipe.finetune = dataclasses.replace(recipe.finetune, epochs=args.finetune_epochs)
        data = smoke_data(recipe)
        n_params = count_parameters(init_state(recipe.network).theta1)
        state, _ = run_pretrain(recipe, data)
        state, _ = run_finetune(recipe, data, state)
        before, after = run_evaluation(recipe, data, state)
        rows.append((variant, n_params, before.mean_psnr, after.mean_psnr))

    print(f"{'variant':<12}{'params':>10}{'no-adapt':>12}{'adapt':>12}")
    for variant, n, b, a in rows:
        print(f"{variant:<12}{n:>10}{b:>12.3f}{a:>12.3f}")


if __name__ == "__main__":
    main()
