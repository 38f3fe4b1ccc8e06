"""Command line driver: INI configuration in, CSV artifacts and a manifest out.

Configuration schema (one ``[run]`` section plus one section per experiment)::

    [run]
    seed = 0
    deterministic = true
    threads = 1
    experiments = energy, lattice

    [energy]
    kind = energy_identity
    N = 2, 8, 32
    n_configs = 5

Every experiment section names a ``kind`` and overrides any of the
parameters listed in ``SCHEMA``.  Experiment ``k`` (0-based, in the order of
``experiments``) draws from ``splitmix64(seed + k)``.

Exit codes: 0 ok, 2 validation, 3 runtime error, 4 acceptance failure.
"""
from __future__ import annotations

import argparse
import configparser
import io
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_ACCEPTANCE = 0, 2, 3, 4
MASK64 = (1 << 64) - 1


def splitmix64(x):
    """One splitmix64 output for the state ``x``."""
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_seed(seed, index):
    return splitmix64((int(seed) + int(index)) & MASK64)


# --- schema --------------------------------------------------------------

def _ints(s):
    return tuple(int(v) for v in str(s).replace(",", " ").split())


def _floats(s):
    return tuple(float(v) for v in str(s).replace(",", " ").split())


def _bool(s):
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_float(s):
    return None if str(s).strip().lower() in ("", "none") else float(s)


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if v is None:
        return "none"
    return repr(v) if isinstance(v, float) else str(v)


_MICRO = {
    "n_side": (int, 4), "spacing": (float, 0.25), "jitter": (float, 0.1), "phi": (float, 0.005),
    "aspect_ratio": (float, 3.0), "gamma": (float, 1.0), "flow_radius": (float, 2.0),
    "t_end": (float, 0.5), "dt": (float, 0.05), "K": (int, 3), "max_phi_s3": (float, 0.2),
}

SCHEMA = {
    "micro_run": dict(_MICRO),
    "approx_run": dict(_MICRO),
    "energy_identity": {"N": (_ints, (2, 8, 32)), "n_configs": (int, 5), "c": (float, 0.5),
                        "eta": (_opt_float, None), "halve": (_bool, False)},
    "limit_convergence": {"N": (_ints, (250, 2000, 16000)), "n_seeds": (int, 3)},
    "doi_compare": {"n_samples": (int, 100), "t_end": (float, 0.5), "dt": (float, 0.05), "phi": (float, 0.01)},
    "study": {"phi": (_floats, (0.000625, 0.00125, 0.0025, 0.005)), "floor_sides": (_ints, (3, 4, 5, 6)),
              "t_end": (float, 0.5)},
    "acceptance": {"criteria": (_ints, ())},
}
RUN_KEYS = ("seed", "deterministic", "threads", "out", "experiments")


@dataclass
class ExperimentSpec:
    name: str
    kind: str
    params: dict


@dataclass
class ExperimentConfig:
    seed: int = 0
    deterministic: bool = False
    threads: int = 1
    out: str = "out"
    experiments: list = field(default_factory=list)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["run"] = {"seed": str(self.seed), "deterministic": _fmt(self.deterministic),
                     "threads": str(self.threads), "out": self.out,
                     "experiments": ", ".join(e.name for e in self.experiments)}
        for e in self.experiments:
            cp[e.name] = {"kind": e.kind, **{k: _fmt(v) for k, v in e.params.items()}}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text):
        cfg, errors = parse_config(text)
        if errors:
            raise ValueError("; ".join(errors))
        return cfg


def parse_config(text):
    """Parse and validate; returns ``(config or None, list of every problem found)``."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    errors = []
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        return None, [f"config syntax: {exc}"]
    run = cp["run"] if cp.has_section("run") else {}
    cfg = ExperimentConfig()
    for key, conv in (("seed", int), ("deterministic", _bool), ("threads", int)):
        if key in run:
            try:
                setattr(cfg, key, conv(run[key]))
            except ValueError as exc:
                errors.append(f"[run] {key}: {exc}")
    cfg.out = run.get("out", cfg.out) if run else cfg.out
    if not 0 <= cfg.seed <= MASK64:
        errors.append("[run] seed must be an unsigned 64-bit integer")
    if cfg.threads < 1:
        errors.append("[run] threads must be >= 1")
    unknown = set(run) - set(RUN_KEYS)
    if unknown:
        errors.append(f"[run] unknown keys {sorted(unknown)}")
    names = [n.strip() for n in str(run.get("experiments", "")).split(",") if n.strip()] if run else []
    for name in names:
        if not cp.has_section(name):
            errors.append(f"experiment {name!r} has no [{name}] section")
            continue
        sec = cp[name]
        kind = sec.get("kind")
        if kind not in SCHEMA:
            errors.append(f"[{name}] kind must be one of {sorted(SCHEMA)}, got {kind!r}")
            continue
        params = {}
        for key, (conv, default) in SCHEMA[kind].items():
            if key in sec:
                try:
                    params[key] = conv(sec[key])
                except ValueError as exc:
                    errors.append(f"[{name}] {key}: {exc}")
            else:
                params[key] = default
        extra = set(sec) - set(SCHEMA[kind]) - {"kind"}
        if extra:
            errors.append(f"[{name}] unknown parameters {sorted(extra)}")
        if len(params) == len(SCHEMA[kind]):
            errors.extend(f"[{name}] {m}" for m in validate(kind, params))
        cfg.experiments.append(ExperimentSpec(name, kind, params))
    return (None if errors else cfg), errors


def validate(kind, p):
    """Static preconditions of one experiment; every violation is reported."""
    errs = []
    if kind in ("micro_run", "approx_run"):
        N = p["n_side"] ** 3
        if p["n_side"] < 2:
            errs.append("n_side must be >= 2")
        if not 0 < p["phi"]:
            errs.append("phi must be positive")
        if not 0 <= p["jitter"] < 0.5:
            errs.append("jitter must lie in [0, 0.5)")
        if p["dt"] <= 0 or p["t_end"] < 0:
            errs.append("need dt > 0 and t_end >= 0")
        if p["aspect_ratio"] <= 0:
            errs.append("aspect_ratio must be positive")
        if N >= 2 and p["phi"] > 0:
            r = (p["phi"] / N) ** (1.0 / 3.0)
            d_min = p["spacing"] * (1.0 - 2.0 * p["jitter"])
            if d_min < 4.0 * r:
                errs.append(f"worst-case spacing {d_min:.4g} below the separation gate 4 r = {4 * r:.4g}")
    elif kind == "energy_identity":
        if not p["N"] or min(p["N"]) < 2:
            errs.append("every N must be >= 2")
        if p["n_configs"] < 1:
            errs.append("n_configs must be >= 1")
        if not 0 < p["c"]:
            errs.append("c must be positive")
        if p["eta"] is not None and p["N"]:
            bound = p["c"] / 4.0 * max(p["N"]) ** (-1.0 / 3.0)
            if not 0 < p["eta"] <= bound:
                errs.append(f"eta = {p['eta']:.4g} violates the bound 0 < eta <= (c/4) N^(-1/3) = {bound:.4g} "
                            f"(N = {max(p['N'])})")
    elif kind == "limit_convergence":
        if len(p["N"]) < 2 or min(p["N"], default=0) < 8:
            errs.append("need at least two levels N >= 8")
        if p["n_seeds"] < 1:
            errs.append("n_seeds must be >= 1")
    elif kind == "doi_compare":
        if p["n_samples"] < 2 or p["dt"] <= 0 or p["t_end"] < 0 or p["phi"] < 0:
            errs.append("need n_samples >= 2, dt > 0, t_end >= 0, phi >= 0")
    elif kind == "study":
        if len(p["phi"]) < 3 or len(p["floor_sides"]) < 3:
            errs.append("a study needs at least three levels")
        if any(v <= 0 for v in p["phi"]):
            errs.append("phi levels must be positive")
    elif kind == "acceptance":
        bad = [k for k in p["criteria"] if not 1 <= k <= 12]
        if bad:
            errs.append(f"unknown criteria {bad}")
    return errs


# --- experiments ---------------------------------------------------------

def _write_csv(path, header, rows):
    rows = [list(r) for r in rows]
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in r) + "\n")


def _micro_setup(p, seed):
    from . import fields, microsim, particle
    rng = np.random.default_rng(seed)
    base = microsim.lattice_configuration(p["n_side"], p["spacing"], p["phi"])
    X = base.X + p["jitter"] * p["spacing"] * (2.0 * rng.random(base.X.shape) - 1.0)
    from .pointproc import MarkLaw
    cfg = microsim.Configuration.from_phi(X, MarkLaw().sample(base.N, rng), p["phi"])
    shape = particle.sphere() if p["aspect_ratio"] == 1.0 else particle.spheroid(p["aspect_ratio"])
    return cfg, shape, fields.ShearCutoff(p["gamma"], p["flow_radius"])


def run_micro(p, seed, out, approx=False):
    from . import microsim
    cfg, shape, u = _micro_setup(p, seed)
    n = int(np.ceil(p["t_end"] / p["dt"] - 1e-9))
    rows = [microsim.snapshot_rows(cfg)]
    for _ in range(n):
        if approx:
            cfg = microsim.step_approx(cfg, u, u, shape, p["t_end"] / n)
        else:
            cfg = microsim.step_micro(cfg, u, shape, p["t_end"] / n, p["K"], p["max_phi_s3"])
        rows.append(microsim.snapshot_rows(cfg))
    path = out / "trajectory.csv"
    microsim.save_trajectory(np.vstack(rows), path)
    return [path.name]


def run_energy(p, seed, out):
    from . import experiments as ex
    rows = ex.energy_identity(p["N"], p["n_configs"], p["c"], seed, halve=p["halve"], eta=p["eta"])
    _write_csv(out / "energy_identity.csv",
               ["N", "config", "eta", "double_sum", "energy", "rel_error", "energy_half", "rel_eta"],
               [(r.N, r.index, r.eta, r.double_sum, r.energy, r.rel_error, r.energy_half, r.rel_eta) for r in rows])
    return ["energy_identity.csv"]


def run_limit(p, seed, out):
    from . import experiments as ex
    seeds = [int(derive_seed(seed, k) % 2**32) for k in range(p["n_seeds"])]
    J0, (mf, corr), levels = ex.limit_convergence(p["N"], seeds)
    rows = []
    for lv in levels:
        for s, N, v, e in zip(seeds, lv.N, lv.values, lv.errors):
            rows.append((lv.N_target, s, N, v, J0, e))
    _write_csv(out / "limit_convergence.csv", ["N_target", "seed", "N", "I_eps", "J0", "abs_error"], rows)
    _write_csv(out / "limit_value.csv", ["meanfield", "correlation", "J0"], [(mf, corr, J0)])
    return ["limit_convergence.csv", "limit_value.csv"]


def run_doi(p, seed, out):
    from . import experiments as ex
    from . import fields, interaction, kinetic, metrics
    s = int(seed % 2**32)
    shape, u, law, corr, maps, ft, vol = ex.shear_preset(p["t_end"], p["n_samples"], s)
    f0 = kinetic.sample_initial({"domain": {"kind": "ball", "radius": 0.5},
                                 "marks": {"kind": "vmf", "mu": [0, 0, 1], "kappa": 1.5}}, p["n_samples"], s + 1)
    B = kinetic.TimeDependentB(lambda t: interaction.compute_B(
        corr, u, fields.flow_maps(u, shape, t, p["dt"]) if t else None, shape, t, law, vol))
    fc = kinetic.evolve_corrected(f0, None, u, B, shape, p["phi"], p["t_end"], p["dt"])
    ft.to_csv(out / "zero_order.csv")
    fc.to_csv(out / "corrected.csv")
    w = metrics.winf_bottleneck(ft, fc)
    _write_csv(out / "doi_compare.csv", ["t", "phi", "n", "winf_zero_vs_corrected"], [(p["t_end"], p["phi"], ft.n, w)])
    return ["zero_order.csv", "corrected.csv", "doi_compare.csv"]


def run_study(p, seed, out):
    from . import experiments as ex
    r = ex.scaling_study(p["phi"], p["floor_sides"], p["t_end"], int(seed % 2**32), out)
    _write_csv(out / "floor.csv", ["N", "winf_to_f0", "winf_times_N_1_5"],
               [(n, v, v * n**0.2) for n, v in zip(r.floor_N, r.floor_values)])
    _write_csv(out / "gate.csv", ["phi", "N", "phi_S3"], r.gate)
    return ["winf_vs_phi.csv", "plot_winf_vs_phi.py", "floor.csv", "gate.csv"]


def run_acceptance(p, seed, out):
    from . import acceptance
    lines = []
    checks = acceptance.run(set(p["criteria"]) or None, echo=lambda s: (lines.append(s), print(s, flush=True)))
    _write_csv(out / "acceptance.csv", ["criterion", "passed", "seconds"],
               [(c.number, int(c.passed), c.seconds) for c in checks])
    (out / "acceptance.txt").write_text("\n".join(lines) + "\n")
    if not all(c.passed for c in checks):
        raise AcceptanceFailure(f"{sum(not c.passed for c in checks)} criteria failed")
    return ["acceptance.csv", "acceptance.txt"]


class AcceptanceFailure(RuntimeError):
    pass


RUNNERS = {
    "micro_run": run_micro,
    "approx_run": lambda p, s, o: run_micro(p, s, o, approx=True),
    "energy_identity": run_energy,
    "limit_convergence": run_limit,
    "doi_compare": run_doi,
    "study": run_study,
    "acceptance": run_acceptance,
}


# --- orchestration -------------------------------------------------------

def _manifest(cfg, results, wall):
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["manifest"] = {"version": __version__, "python": platform.python_version(),
                      "numpy": np.__version__, "wall_clock_s": f"{wall:.3f}"}
    for name, seed, status, files in results:
        cp[f"result:{name}"] = {"seed": str(seed), "status": status, "files": ", ".join(files)}
    return cfg.to_ini() + "\n" + _ini_text(cp)


def _ini_text(cp):
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def run(cfg: ExperimentConfig, only=None, echo=print) -> int:
    t0 = time.time()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(k, e) for k, e in enumerate(cfg.experiments) if only is None or e.name == only]

    def one(job):
        k, e = job
        seed = derive_seed(cfg.seed, k)
        d = out / e.name
        d.mkdir(exist_ok=True)
        try:
            files = RUNNERS[e.kind](e.params, seed, d)
            return e.name, seed, "ok", files
        except AcceptanceFailure as exc:
            return e.name, seed, f"acceptance failure: {exc}", []
        except Exception as exc:  # noqa: BLE001 - reported in the manifest and the exit code
            return e.name, seed, f"error: {type(exc).__name__}: {exc}", []

    if cfg.threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(j) for j in jobs]
    (out / "manifest.ini").write_text(_manifest(cfg, results, time.time() - t0))
    code = EXIT_OK
    for name, _, status, _ in results:
        if status != "ok":
            echo(f"{name}: {status}")
            code = max(code, EXIT_ACCEPTANCE if status.startswith("acceptance") else EXIT_RUNTIME)
    return code


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="suspension", description=__doc__.splitlines()[0])
    ap.add_argument("--config", help="INI configuration file")
    ap.add_argument("--out", help="output directory (overrides [run] out)")
    ap.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    ap.add_argument("--deterministic", action="store_true", help="pin BLAS threads for bit-identical output")
    ap.add_argument("--threads", type=int, help="number of experiments run concurrently")
    ap.add_argument("--experiment", help="run only this experiment; 'acceptance' runs the acceptance suite")
    a = ap.parse_args(argv)

    if a.config:
        try:
            text = Path(a.config).read_text()
        except OSError as exc:
            print(f"validation error: {exc}", file=sys.stderr)
            return EXIT_VALIDATION
    else:
        text = "[run]\n"
    cfg, errors = parse_config(text)
    if errors:
        print("validation failed:", file=sys.stderr)
        for e in errors:
            print(f"  - {e}", file=sys.stderr)
        return EXIT_VALIDATION
    if a.out:
        cfg.out = a.out
    if a.seed is not None:
        if not 0 <= a.seed <= MASK64:
            print("validation failed:\n  - --seed must be an unsigned 64-bit integer", file=sys.stderr)
            return EXIT_VALIDATION
        cfg.seed = a.seed
    if a.threads is not None:
        if a.threads < 1:
            print("validation failed:\n  - --threads must be >= 1", file=sys.stderr)
            return EXIT_VALIDATION
        cfg.threads = a.threads
    cfg.deterministic = cfg.deterministic or a.deterministic
    names = [e.name for e in cfg.experiments]
    if a.experiment == "acceptance" and "acceptance" not in names:
        cfg.experiments.append(ExperimentSpec("acceptance", "acceptance", {"criteria": ()}))
    elif a.experiment and a.experiment not in names:
        print(f"validation failed:\n  - no experiment named {a.experiment!r}", file=sys.stderr)
        return EXIT_VALIDATION
    if cfg.deterministic:
        # single-threaded BLAS makes reductions independent of the machine's core count
        with threadpool_limits(1):
            return run(cfg, a.experiment)
    return run(cfg, a.experiment)


if __name__ == "__main__":
    sys.exit(main())
