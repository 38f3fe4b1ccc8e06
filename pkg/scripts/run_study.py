"""Volume-fraction scaling study: micro dynamics against the zero-order kinetic flow.

usage: python scripts/run_study.py [out_dir]

Writes winf_vs_phi.csv and a matplotlib script plot_winf_vs_phi.py next to it.
"""
import sys
from pathlib import Path

from suspension import experiments as ex


def main(argv):
    out = Path(argv[0] if argv else "out/study")
    out.mkdir(parents=True, exist_ok=True)
    r = ex.scaling_study(out_dir=out)
    print(f"fitted slope {r.study.fit.slope:.3f}")
    for n, v in zip(r.floor_N, r.floor_values):
        print(f"sampling floor N={n}: {v:.4g}")
    return 0


if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
