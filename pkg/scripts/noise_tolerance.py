"""Toy ray ensemble: final depth error against q and false-match share.

    python scripts/noise_tolerance.py --seeds 20 --q 1e-4,0.2,0.5,0.8,1.0 --noise 0.0,0.3
"""

import argparse

import numpy as np

from mvsdf.toy import ToyConfig, toy_trial


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=20)
    ap.add_argument("--q", default="1e-4,0.2,0.5,0.8,1.0")
    ap.add_argument("--noise", default="0.0,0.3")
    args = ap.parse_args()
    qs = [float(x) for x in args.q.split(",")]
    print("noise  " + "  ".join(f"q={q:<7g}" for q in qs))
    for noise in (float(x) for x in args.noise.split(",")):
        cfg = ToyConfig(noise=noise)
        maes = [np.mean([toy_trial(s, q, cfg) for s in range(args.seeds)]) for q in qs]
        print(f"{noise:<5g}  " + "  ".join(f"{m:<9.4f}" for m in maes), flush=True)


if __name__ == "__main__":
    main()
