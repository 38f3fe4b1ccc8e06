"""Write packaged shape-parameter files from the resistance solver.

usage: python scripts/make_shape_file.py [aspect_ratio ...]
"""
import sys
from pathlib import Path

from suspension.particle import save_shape
from suspension.resistance import fit_shape

OUT = Path(__file__).resolve().parents[1] / "src" / "suspension" / "data"


def main(argv):
    ratios = [float(a) for a in argv] or [3.0]
    OUT.mkdir(exist_ok=True)
    for lam in ratios:
        shape, diag = fit_shape(lam)
        note = (
            f"spheroid, aspect ratio {lam:g}, symmetry axis e3, inscribed in the unit ball\n"
            f"fitted by the method of fundamental solutions (suspension.resistance)\n"
            f"collocation residual {diag['residual']:.2e}\n"
            f"measured Jeffery coefficient {diag['beta_measured']:.12f}\n"
            f"surface-traction vs source-moment stresslet gap {diag['surface_vs_source']:.2e}"
        )
        path = OUT / f"spheroid_ar{lam:g}.shape"
        save_shape(shape, path, comment=note)
        print(path)
        print(path.read_text())


if __name__ == "__main__":
    main(sys.argv[1:])
