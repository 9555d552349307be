"""Closed-form coefficients of the projected convective term, the quadratic
drift map, its bilinear polarization, and the independent quadrature oracle.

Conventions.  Pairs are enumerated in strict lexicographic order m < n; each
unordered pair contributes once.  The four coefficients C[(pm1,pm2)] multiply
u_m u_n on the target mode (n (pm1 pm2) m)^+ in the *drift* (the sign
convention of the ODE system u'_k = quadratic(u)_k + nu*kbar*u_k + ...,
i.e. quadratic(u) = -P[(u.grad)u] with P the Leray projection).  Targets
with a zero component are dropped: their basis factor vanishes identically.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np

from .spectral import (ModeIndex, RectGeometry, SpectralField, check_mode,
                       gauss_legendre_grid, kbar)


def vee(m: ModeIndex, n: ModeIndex) -> int:
    return m[0] * n[1] + n[0] * m[1]


def wedge(m: ModeIndex, n: ModeIndex) -> int:
    return m[0] * n[1] - n[0] * m[1]


def _sign(x: int) -> int:
    return (x > 0) - (x < 0)


# The four interaction labels: (s1, s2) meaning target (n1 s1 m1, n2 s2 m2)^+.
LABELS = ((-1, -1), (-1, 1), (1, -1), (1, 1))


def target_mode(m: ModeIndex, n: ModeIndex, label: tuple[int, int]) -> ModeIndex:
    s1, s2 = label
    return (abs(n[0] + s1 * m[0]), abs(n[1] + s2 * m[1]))


def interaction_coeffs_scaled(m: ModeIndex, n: ModeIndex, a2, b2):
    """The four coefficients with the common factor pi^2/(4ab) taken out.

    a2, b2 may be floats or exact Fractions (of a^2, b^2); the result is
    rational in a2, b2 so exact inputs give exact outputs.  Returns
    {label: value} for the labels whose target has no zero component.
    """
    m = check_mode(m)
    n = check_mode(n)
    if not m < n:
        raise ValueError(f"pair must be strictly lexicographic, got {m} >= {n}")
    s1 = _sign(n[0] - m[0])
    s2 = _sign(n[1] - m[1])
    # (nbar - mbar) / kbar(t) with the -pi^2/(a^2 b^2) factor cancelled.
    num = (n[0] ** 2 - m[0] ** 2) * b2 + (n[1] ** 2 - m[1] ** 2) * a2
    out = {}
    for label in LABELS:
        t = target_mode(m, n, label)
        if t[0] == 0 or t[1] == 0:
            continue
        ratio = num / (t[0] ** 2 * b2 + t[1] ** 2 * a2)
        if label == (1, 1):
            val = -wedge(m, n) * ratio
        elif label == (-1, -1):
            val = wedge(m, n) * ratio * s1 * s2
        elif label == (-1, 1):
            val = -vee(m, n) * ratio * s1
        else:  # (1, -1)
            val = vee(m, n) * ratio * s2
        out[label] = val
    return out


def interaction_coeffs(m: ModeIndex, n: ModeIndex, geom: RectGeometry) -> dict:
    """Floating coefficients {target mode: C} including the pi^2/(4ab) factor."""
    scale = math.pi**2 / (4 * geom.a * geom.b)
    scaled = interaction_coeffs_scaled(m, n, geom.a**2, geom.b**2)
    return {target_mode(m, n, lab): scale * float(v) for lab, v in scaled.items()}


def interaction_coeffs_exact(m: ModeIndex, n: ModeIndex,
                             a2: Fraction, b2: Fraction) -> dict[ModeIndex, Fraction]:
    """Exact coefficients {target: r} with C = (pi^2/4ab) * r, r in Q(a2, b2)."""
    scaled = interaction_coeffs_scaled(m, n, Fraction(a2), Fraction(b2))
    return {target_mode(m, n, lab): v for lab, v in scaled.items()}


def quadratic(u: SpectralField, mode_set=None) -> SpectralField:
    """Drift quadratic term: coefficients of -P[(u.grad)u], optionally
    truncated to mode_set.  Diagonal terms are pure gradients and drop out."""
    geom = u.geom
    modes = u.modes()
    keep = None if mode_set is None else set(mode_set)
    out: dict[ModeIndex, float] = {}
    for i, m in enumerate(modes):
        um = u.coeffs[m]
        for n in modes[i + 1:]:
            un = u.coeffs[n]
            for k, c in interaction_coeffs(m, n, geom).items():
                if keep is not None and k not in keep:
                    continue
                out[k] = out.get(k, 0.0) + um * un * c
    return SpectralField(geom, out)


def bilinear(u: SpectralField, w: SpectralField, mode_set=None) -> SpectralField:
    """Symmetric bilinear polarization: quadratic(u+w) - quadratic(u) - quadratic(w)."""
    geom = u.geom
    keep = None if mode_set is None else set(mode_set)
    out: dict[ModeIndex, float] = {}
    pairs = set()
    for m in u.modes():
        for n in w.modes():
            if m == n:
                continue
            pairs.add((m, n) if m < n else (n, m))
    for m, n in pairs:
        amp = u[m] * w[n] + w[m] * u[n]
        if amp == 0.0:
            continue
        for k, c in interaction_coeffs(m, n, geom).items():
            if keep is not None and k not in keep:
                continue
            out[k] = out.get(k, 0.0) + amp * c
    return SpectralField(geom, out)


# ---------------------------------------------------------------------------
# Quadrature oracle


def _eval_components(u: SpectralField, X1, X2):
    """Velocity components and their first derivatives on a grid."""
    a, b = u.geom.a, u.geom.b
    v1 = np.zeros_like(X1)
    v2 = np.zeros_like(X1)
    d1v1 = np.zeros_like(X1)
    d2v1 = np.zeros_like(X1)
    d1v2 = np.zeros_like(X1)
    d2v2 = np.zeros_like(X1)
    for (k1, k2), c in u.coeffs.items():
        a1 = k1 * np.pi / a
        a2 = k2 * np.pi / b
        s1, c1 = np.sin(a1 * X1), np.cos(a1 * X1)
        s2, c2 = np.sin(a2 * X2), np.cos(a2 * X2)
        v1 += c * (-a2) * s1 * c2
        v2 += c * a1 * c1 * s2
        d1v1 += c * (-a2 * a1) * c1 * c2
        d2v1 += c * (a2 * a2) * s1 * s2
        d1v2 += c * (-a1 * a1) * s1 * s2
        d2v2 += c * (a1 * a2) * c1 * c2
    return (v1, v2), ((d1v1, d2v1), (d1v2, d2v2))


def _max_index(*fields_and_modes) -> int:
    mx = 1
    for obj in fields_and_modes:
        if isinstance(obj, SpectralField):
            for k1, k2 in obj.coeffs:
                mx = max(mx, k1, k2)
        else:
            mx = max(mx, obj[0], obj[1])
    return mx


def trilinear_b(u: SpectralField, v: SpectralField, w: SpectralField,
                npts: int | None = None) -> float:
    """b(u, v, w) = sum_ij int u_i (d_i v_j) w_j dx by tensor quadrature."""
    if npts is None:
        npts = 6 * _max_index(u, v, w) + 8
    X1, X2, W = gauss_legendre_grid(u.geom, npts)
    (u1, u2), _ = _eval_components(u, X1, X2)
    _, ((d1v1, d2v1), (d1v2, d2v2)) = _eval_components(v, X1, X2)
    (w1, w2), _ = _eval_components(w, X1, X2)
    integrand = (u1 * d1v1 + u2 * d2v1) * w1 + (u1 * d1v2 + u2 * d2v2) * w2
    return float(np.sum(W * integrand))


def quadrature_B(u: SpectralField, v: SpectralField, k: ModeIndex,
                 npts: int | None = None) -> float:
    """Oracle for the k-th drift coefficient of the projected convective
    interaction of u and v: -[b(u,v,W_k) + b(v,u,W_k)] / (-kbar |W_k|^2)
    for u != v, and the plain quadratic coefficient when u is v.

    For u = e_m, v = e_n this is the full entry of delta_{m,n} on mode k
    (both orderings of the pair contribute to the same projected term).
    """
    k = check_mode(k)
    geom = u.geom
    wk = SpectralField(geom, {k: 1.0})
    nrm2 = -kbar(k, geom) * geom.a * geom.b / 4
    if u is v or u.coeffs == v.coeffs:
        return -trilinear_b(u, v, wk, npts) / nrm2
    return -(trilinear_b(u, v, wk, npts) + trilinear_b(v, u, wk, npts)) / nrm2


def oracle_sweep(max_index: int, geom: RectGeometry,
                 rel_tol: float = 1e-8, abs_floor: float = 1e-12) -> list[dict]:
    """Compare every closed-form coefficient against the quadrature oracle
    for all pairs m < n with components <= max_index.  Returns one record
    per (pair, target) with the relative error and a pass flag."""
    modes = [(i, j) for i in range(1, max_index + 1) for j in range(1, max_index + 1)]
    records = []
    for i, m in enumerate(modes):
        em = SpectralField(geom, {m: 1.0})
        for n in modes[i + 1:]:
            en = SpectralField(geom, {n: 1.0})
            closed = interaction_coeffs(m, n, geom)
            for k, c in closed.items():
                q = quadrature_B(em, en, k)
                err = abs(c - q) / max(abs(q), abs_floor / rel_tol)
                records.append({"m": m, "n": n, "target": k,
                                "closed_form": c, "quadrature": q,
                                "rel_err": err,
                                "ok": abs(c - q) <= max(rel_tol * abs(q), abs_floor)})
    return records
