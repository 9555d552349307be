"""Rectangle geometry, solenoidal eigenbasis bookkeeping, Fourier norms,
field evaluation and the Leray (divergence-free) projection.

The basis field indexed by k = (k1, k2), k1, k2 >= 1, on [0,a]x[0,b] is

    W_k = (-(k2*pi/b) sin(k1*pi*x1/a) cos(k2*pi*x2/b),
            (k1*pi/a) cos(k1*pi*x1/a) sin(k2*pi*x2/b)).

Each W_k is divergence-free, tangent to the boundary, and an eigenfunction
of the Stokes operator with eigenvalue -kbar(k) where
kbar(k) = -pi^2 (k1^2/a^2 + k2^2/b^2).  The square of its L2 norm is
-kbar(k) * a*b/4.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

ModeIndex = tuple[int, int]


@dataclass(frozen=True)
class RectGeometry:
    """Side lengths of the rectangle [0,a] x [0,b]."""

    a: float
    b: float

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("side lengths must be positive")


def check_mode(k: ModeIndex) -> ModeIndex:
    k1, k2 = k
    if not (isinstance(k1, (int, np.integer)) and isinstance(k2, (int, np.integer))):
        raise ValueError(f"mode index must be integer pair, got {k!r}")
    if k1 < 1 or k2 < 1:
        raise ValueError(f"mode index components must be >= 1, got {k!r}")
    return (int(k1), int(k2))


def kbar(k: ModeIndex, geom: RectGeometry) -> float:
    """-pi^2 (k1^2/a^2 + k2^2/b^2); strictly negative."""
    k1, k2 = k
    return -math.pi**2 * (k1**2 / geom.a**2 + k2**2 / geom.b**2)


@dataclass
class SpectralField:
    """Finite coefficient table of a truncated divergence-free velocity field."""

    geom: RectGeometry
    coeffs: dict[ModeIndex, float] = field(default_factory=dict)

    def __post_init__(self):
        self.coeffs = {check_mode(k): float(v) for k, v in self.coeffs.items()}

    def __getitem__(self, k: ModeIndex) -> float:
        return self.coeffs.get(k, 0.0)

    def modes(self) -> list[ModeIndex]:
        return sorted(self.coeffs)

    def norm(self, kind: str = "H") -> float:
        """sqrt((ab/4) sum (-kbar)^p u_k^2), p = 1, 2, 3 for H, V, DA."""
        p = {"H": 1, "V": 2, "DA": 3}[kind]
        s = sum((-kbar(k, self.geom)) ** p * v * v for k, v in self.coeffs.items())
        return math.sqrt(self.geom.a * self.geom.b / 4 * s)

    def dual_norm(self) -> float:
        """V'-norm: sqrt((ab/4) sum f_k^2 / (-kbar))."""
        s = sum(v * v / (-kbar(k, self.geom)) for k, v in self.coeffs.items())
        return math.sqrt(self.geom.a * self.geom.b / 4 * s)

    def eval_velocity(self, x1, x2) -> tuple[np.ndarray, np.ndarray]:
        """Pointwise sum of the basis fields; accepts scalars or arrays."""
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        if np.any(x1 < -1e-12) or np.any(x1 > self.geom.a + 1e-12) \
                or np.any(x2 < -1e-12) or np.any(x2 > self.geom.b + 1e-12):
            raise ValueError("evaluation point outside the rectangle")
        v1 = np.zeros(np.broadcast(x1, x2).shape)
        v2 = np.zeros_like(v1)
        a, b = self.geom.a, self.geom.b
        for (k1, k2), c in self.coeffs.items():
            s1 = np.sin(k1 * np.pi * x1 / a)
            c1 = np.cos(k1 * np.pi * x1 / a)
            s2 = np.sin(k2 * np.pi * x2 / b)
            c2 = np.cos(k2 * np.pi * x2 / b)
            v1 += c * (-(k2 * np.pi / b)) * s1 * c2
            v2 += c * (k1 * np.pi / a) * c1 * s2
        return v1, v2

    # ---- serialization ----

    def to_json(self) -> str:
        items = [[k1, k2, self.coeffs[(k1, k2)]] for (k1, k2) in self.modes()]
        return json.dumps({"a": self.geom.a, "b": self.geom.b, "coeffs": items})

    @classmethod
    def from_json(cls, text: str) -> "SpectralField":
        d = json.loads(text)
        return cls(RectGeometry(d["a"], d["b"]),
                   {(int(k1), int(k2)): v for k1, k2, v in d["coeffs"]})

    # ---- small vector-space helpers ----

    def scaled(self, s: float) -> "SpectralField":
        return SpectralField(self.geom, {k: s * v for k, v in self.coeffs.items()})

    def plus(self, other: "SpectralField") -> "SpectralField":
        out = dict(self.coeffs)
        for k, v in other.coeffs.items():
            out[k] = out.get(k, 0.0) + v
        return SpectralField(self.geom, out)


@dataclass
class GradientPart:
    """Scalar potential q of the gradient part of a vector field, stored as
    cosine-in-both-axes coefficients: two pure-axis tables plus the interior
    table (the paper-style split of the potential)."""

    geom: RectGeometry
    axis_coeffs_x1: dict[int, float] = field(default_factory=dict)
    axis_coeffs_x2: dict[int, float] = field(default_factory=dict)
    interior_coeffs: dict[ModeIndex, float] = field(default_factory=dict)

    def eval_gradient(self, x1, x2) -> tuple[np.ndarray, np.ndarray]:
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        g1 = np.zeros(np.broadcast(x1, x2).shape)
        g2 = np.zeros_like(g1)
        a, b = self.geom.a, self.geom.b
        for k1, c in self.axis_coeffs_x1.items():
            g1 += -c * (k1 * np.pi / a) * np.sin(k1 * np.pi * x1 / a)
        for k2, c in self.axis_coeffs_x2.items():
            g2 += -c * (k2 * np.pi / b) * np.sin(k2 * np.pi * x2 / b)
        for (k1, k2), c in self.interior_coeffs.items():
            g1 += -c * (k1 * np.pi / a) * np.sin(k1 * np.pi * x1 / a) * np.cos(k2 * np.pi * x2 / b)
            g2 += -c * (k2 * np.pi / b) * np.cos(k1 * np.pi * x1 / a) * np.sin(k2 * np.pi * x2 / b)
        return g1, g2


def leray_project(v1: dict[ModeIndex, float], v2: dict[ModeIndex, float],
                  geom: RectGeometry) -> tuple[SpectralField, GradientPart]:
    """Split v = u + grad(q).

    Input tables: v1 maps (k1,k2) with k1>=1, k2>=0 to the coefficient of
    sin(k1 pi x1/a) cos(k2 pi x2/b) in the first component; v2 maps (k1,k2)
    with k1>=0, k2>=1 to the coefficient of cos(k1 pi x1/a) sin(k2 pi x2/b)
    in the second.  Indices with a zero component are pure gradients and
    route entirely to the gradient part.
    """
    a, b = geom.a, geom.b
    u: dict[ModeIndex, float] = {}
    q_int: dict[ModeIndex, float] = {}
    q_ax1: dict[int, float] = {}
    q_ax2: dict[int, float] = {}

    for (k1, k2), c in v1.items():
        if k1 < 1 or k2 < 0:
            raise ValueError(f"v1 index out of range: {(k1, k2)}")
        if k2 == 0:
            q_ax1[k1] = q_ax1.get(k1, 0.0) - a / (k1 * math.pi) * c
        else:
            kb = kbar((k1, k2), geom)
            u[(k1, k2)] = u.get((k1, k2), 0.0) + (k2 * math.pi / b) * c / kb
            q_int[(k1, k2)] = q_int.get((k1, k2), 0.0) + (k1 * math.pi / a) * c / kb
    for (k1, k2), c in v2.items():
        if k2 < 1 or k1 < 0:
            raise ValueError(f"v2 index out of range: {(k1, k2)}")
        if k1 == 0:
            q_ax2[k2] = q_ax2.get(k2, 0.0) - b / (k2 * math.pi) * c
        else:
            kb = kbar((k1, k2), geom)
            u[(k1, k2)] = u.get((k1, k2), 0.0) - (k1 * math.pi / a) * c / kb
            q_int[(k1, k2)] = q_int.get((k1, k2), 0.0) + (k2 * math.pi / b) * c / kb

    u = {k: v for k, v in u.items() if v != 0.0}
    return (SpectralField(geom, u),
            GradientPart(geom, q_ax1, q_ax2, q_int))


def field_tables(u: SpectralField) -> tuple[dict[ModeIndex, float], dict[ModeIndex, float]]:
    """Coefficient tables (v1, v2) of a solenoidal field, inverse of the
    reconstruction used by leray_project."""
    a, b = u.geom.a, u.geom.b
    v1 = {}
    v2 = {}
    for (k1, k2), c in u.coeffs.items():
        v1[(k1, k2)] = -(k2 * math.pi / b) * c
        v2[(k1, k2)] = (k1 * math.pi / a) * c
    return v1, v2


def gauss_legendre_grid(geom: RectGeometry, npts: int):
    """Tensor-product Gauss-Legendre nodes/weights on the rectangle."""
    x, w = np.polynomial.legendre.leggauss(npts)
    x1 = geom.a * (x + 1) / 2
    w1 = geom.a / 2 * w
    x2 = geom.b * (x + 1) / 2
    w2 = geom.b / 2 * w
    X1, X2 = np.meshgrid(x1, x2, indexing="ij")
    W = np.outer(w1, w2)
    return X1, X2, W
