"""Write procedural clean images as PNGs, ready for ``metadenoise degrade``.

    python scripts/make_synthetic_corpus.py OUT_DIR [--n 16] [--size 64] [--seed 0]
"""

import argparse
from pathlib import Path

from metadenoise.imaging import save_image
from metadenoise.synthetic import clean_images


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("out", type=Path)
    ap.add_argument("--n", type=int, default=16)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    for i, img in enumerate(clean_images(args.n, args.size, seed=args.seed)):
        save_image(img, args.out / f"img{i:03d}.png")
    print(f"wrote {args.n} images to {args.out}")


if __name__ == "__main__":
    main()
