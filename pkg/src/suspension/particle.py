"""Mobility, stresslet and the dual mobility map for axisymmetric particles.

Spheres and spheroids only.  Orientation dynamics follow Jeffery's equation
with Bretherton parameter ``beta``; the stresslet is the transversely
isotropic three-coefficient form.  Spheroid coefficients live in plain-text
shape files written by ``scripts/make_shape_file.py`` from the resistance
solver in :mod:`suspension.resistance`.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path

import numpy as np

# stresslet of the unit ball in a unit strain (Einstein's 2 + 5 phi_vol)
SPHERE_STRESSLET = 20.0 * np.pi / 3.0
UNIT_TOL = 1e-8


@dataclass(frozen=True)
class ParticleShape:
    kind: str
    aspect_ratio: float
    beta: float
    c_iso: float
    c_axial: float
    c_cross: float

    def __post_init__(self):
        if self.kind not in ("sphere", "spheroid"):
            raise ValueError(f"unknown particle kind {self.kind!r}")
        if self.aspect_ratio <= 0:
            raise ValueError("aspect ratio must be positive")
        if not abs(self.beta) < 1:
            raise ValueError("Bretherton parameter must satisfy |beta| < 1")
        if self.kind == "sphere" and self.beta != 0.0:
            raise ValueError("a sphere has beta = 0")
        for v in (self.c_iso, self.c_axial, self.c_cross):
            if not np.isfinite(v):
                raise ValueError("stresslet coefficients must be finite")


def bretherton(aspect_ratio):
    lam2 = aspect_ratio**2
    return (lam2 - 1.0) / (lam2 + 1.0)


def sphere():
    return ParticleShape("sphere", 1.0, 0.0, SPHERE_STRESSLET, 0.0, 0.0)


def save_shape(shape: ParticleShape, path, comment=None):
    lines = []
    if comment:
        lines += [f"# {c}" for c in comment.splitlines()]
    for f in fields(shape):
        v = getattr(shape, f.name)
        lines.append(f"{f.name} = {v!r}" if isinstance(v, float) else f"{f.name} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def parse_shape(text):
    rec = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        if not sep:
            raise ValueError(f"malformed shape record: {line!r}")
        rec[key.strip()] = val.strip()
    names = [f.name for f in fields(ParticleShape)]
    missing = [n for n in names if n not in rec]
    if missing:
        raise ValueError(f"shape file missing keys {missing}")
    return ParticleShape(rec["kind"], *(float(rec[n]) for n in names[1:]))


def load_shape(path):
    return parse_shape(Path(path).read_text())


def spheroid(aspect_ratio=3.0):
    """Packaged spheroid shape, as written by the resistance solver."""
    name = f"spheroid_ar{aspect_ratio:g}.shape"
    res = resources.files("suspension") / "data" / name
    if not res.is_file():
        raise FileNotFoundError(f"no packaged shape file {name}; run scripts/make_shape_file.py")
    return parse_shape(res.read_text())


def _unit(xi):
    xi = np.asarray(xi, dtype=float)
    if np.any(np.abs(np.linalg.norm(xi, axis=-1) - 1.0) > UNIT_TOL):
        raise ValueError("orientation is not a unit vector")
    return xi


def _sym_skew(A):
    At = np.swapaxes(A, -1, -2)
    return 0.5 * (A + At), 0.5 * (A - At)


def mobility_matrix(shape: ParticleShape, xi, A):
    """Skew matrix ``M(xi) A = W + beta ((E xi) x xi - xi x (E xi))``."""
    xi = _unit(xi)
    E, W = _sym_skew(np.asarray(A, dtype=float))
    Ex = np.einsum("...ij,...j->...i", E, xi)
    return W + shape.beta * (Ex[..., :, None] * xi[..., None, :] - xi[..., :, None] * Ex[..., None, :])


def mobility_apply(shape: ParticleShape, xi, gradu):
    """Jeffery angular velocity ``W xi + beta (I - xi xi) E xi``."""
    gradu = np.asarray(gradu, dtype=float)
    tr = np.trace(gradu, axis1=-2, axis2=-1)
    if np.any(np.abs(tr) > 1e-10 * np.maximum(1.0, np.abs(gradu).max(axis=(-2, -1)))):
        raise ValueError("velocity gradient is not tracefree")
    xi = _unit(xi)
    E, W = _sym_skew(gradu)
    Ex = np.einsum("...ij,...j->...i", E, xi)
    Wx = np.einsum("...ij,...j->...i", W, xi)
    xEx = np.einsum("...i,...i->...", xi, Ex)
    return Wx + shape.beta * (Ex - xEx[..., None] * xi)


def stresslet_apply(shape: ParticleShape, xi, E):
    E = np.asarray(E, dtype=float)
    scale = np.maximum(1.0, np.abs(E).max(axis=(-2, -1)))
    if np.any(np.abs(E - np.swapaxes(E, -1, -2)).max(axis=(-2, -1)) > 1e-10 * scale):
        raise ValueError("strain is not symmetric")
    if np.any(np.abs(np.trace(E, axis1=-2, axis2=-1)) > 1e-10 * scale):
        raise ValueError("strain is not tracefree")
    xi = _unit(xi)
    Ex = np.einsum("...ij,...j->...i", E, xi)
    xEx = np.einsum("...i,...i->...", xi, Ex)[..., None, None]
    xx = xi[..., :, None] * xi[..., None, :]
    out = shape.c_iso * E + shape.c_axial * xEx * (xx - np.eye(3) / 3.0)
    cross = xi[..., :, None] * Ex[..., None, :] + Ex[..., :, None] * xi[..., None, :] - 2.0 * xEx * xx
    return out + shape.c_cross * cross


def mbar_apply(shape: ParticleShape, xi, zeta):
    """Dual mobility: the tracefree matrix with ``(Mbar zeta) : A = zeta . (M A) xi``."""
    xi = _unit(xi)
    zeta = np.asarray(zeta, dtype=float)
    zx = zeta[..., :, None] * xi[..., None, :]
    sym, skew = _sym_skew(zx)
    zdx = np.einsum("...i,...i->...", zeta, xi)[..., None, None]
    xx = xi[..., :, None] * xi[..., None, :]
    return skew + shape.beta * (sym - zdx * xx)


def jeffery_period(aspect_ratio, shear_rate=1.0):
    """Tumbling period of a spheroid in simple shear."""
    return 2.0 * np.pi * (aspect_ratio + 1.0 / aspect_ratio) / shear_rate
