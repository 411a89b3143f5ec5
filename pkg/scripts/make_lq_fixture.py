"""Regenerate the committed LQ oracle fixture (dense RK4 plus exact discrete costs)."""

import argparse
import json
from pathlib import Path

from jumpfbsde import __version__
from jumpfbsde.lq import LQParams, discrete_riccati, optimal_cost

OUT = Path(__file__).resolve().parents[1] / "src" / "jumpfbsde" / "data" / "lq_fixture.json"


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=20000)
    ap.add_argument("--out", type=Path, default=OUT)
    args = ap.parse_args()
    prm = LQParams()
    J = optimal_cost(prm, args.steps)
    J2 = optimal_cost(prm, 2 * args.steps)
    data = {
        "params": prm.as_dict(),
        "rk4_steps": args.steps,
        "optimal_cost": J,
        "rk4_refinement_gap": abs(J - J2),
        "discrete_costs": {str(N): discrete_riccati(prm, N).cost for N in (16, 32, 64, 128, 256, 512)},
        "generator_version": __version__,
    }
    args.out.parent.mkdir(parents=True, exist_ok=True)
    args.out.write_text(json.dumps(data, indent=2) + "\n")
    print(json.dumps(data, indent=2))


if __name__ == "__main__":
    main()
