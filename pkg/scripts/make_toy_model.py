"""Write the three-layer toy model and its weight containers.

    python scripts/make_toy_model.py --out runs/toy
    bench net --model runs/toy/toy.model --engine bsgemm-intl
"""

import argparse

from bsqnn.toy import ToyConfig, write_toy_model


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/toy")
    p.add_argument("--seed", type=int, default=ToyConfig.seed)
    p.add_argument("--wordsize", type=int, choices=(32, 64), default=64)
    args = p.parse_args()
    path = write_toy_model(args.out, ToyConfig(seed=args.seed), args.wordsize)
    print(path)


if __name__ == "__main__":
    main()
