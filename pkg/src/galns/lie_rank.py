"""Bracket-generation rank checks for the controlled Galerkin system.

The drift is the uncontrolled right-hand side; brackets with the constant
controlled directions produce affine fields whose constant parts are the
interaction directions gamma_{m,n}.  Iterating the saturation selections
generates constant vector fields whose span is checked against the full
state dimension kappa_N = |K^N|.
"""

import hashlib
import json
import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .dynamics import GalerkinSystem, rhs
from .nonlinearity import bilinear, interaction_coeffs, interaction_coeffs_exact
from .saturation import bareiss_rank, mode_set_K, selection_S
from .spectral import ModeIndex, SpectralField, kbar


def drift_field(sys: GalerkinSystem, u: SpectralField) -> SpectralField:
    """The uncontrolled vector field: quadratic + viscous + forcing."""
    return rhs(sys, u, None)


def first_bracket(sys: GalerkinSystem, u: SpectralField, i: ModeIndex) -> SpectralField:
    """Directional derivative of the drift along e_i: affine in u."""
    i = tuple(i)
    if i not in sys._index:
        raise ValueError("bracket direction %s not in mode_set" % (i,))
    e_i = SpectralField(sys.geom, {i: 1.0})
    lin = bilinear(e_i, u, mode_set=sys.mode_set)
    return lin.plus(SpectralField(sys.geom, {i: sys.nu * kbar(i, sys.geom)}))


def gamma_vector(sys: GalerkinSystem, m: ModeIndex, n: ModeIndex) -> SpectralField:
    """The constant second bracket direction for the pair m < n, restricted
    to the system's mode set."""
    em = SpectralField(sys.geom, {tuple(m): 1.0})
    en = SpectralField(sys.geom, {tuple(n): 1.0})
    return bilinear(em, en, mode_set=sys.mode_set)


def _exact_geometry(geom):
    """Exact squared side lengths when the geometry is a short rational,
    None otherwise (falls back to floating rank)."""
    fa, fb = Fraction(geom.a), Fraction(geom.b)
    if fa.denominator <= 1 << 16 and fb.denominator <= 1 << 16:
        return fa * fa, fb * fb
    return None


def _infer_level(sys: GalerkinSystem) -> int:
    size = len(sys.mode_set)
    n = int(round(math.sqrt(size + 1))) - 2
    if n < 1 or tuple(sorted(mode_set_K(n))) != sys.mode_set:
        raise ValueError("mode_set is not of the form K^N")
    if tuple(sorted(mode_set_K(1))) != sys.controlled_set:
        raise ValueError("controlled_set must be K^1")
    return n


def _float_rank(rows) -> int:
    m = np.array(rows, dtype=float)
    if m.size == 0:
        return 0
    s = np.linalg.svd(m, compute_uv=False)
    return int(np.sum(s > 1e-10 * np.max(np.abs(m))))


def full_rank_check(sys: GalerkinSystem, u: SpectralField,
                    max_generations: int = None,
                    use_square_repair: bool = True):
    """Generate constant bracket directions by the saturation selections and
    report the reached span dimension.

    Returns (rank, generation log).  The generated family is {e_k: k in K^1}
    plus the gamma_{m,n} of each selection level, so the rank does not depend
    on the evaluation point; u is recorded in the log for the verdict."""
    n_level = _infer_level(sys)
    exact = _exact_geometry(sys.geom)
    square = sys.geom.a == sys.geom.b
    if max_generations is None:
        max_generations = n_level - 1
    modes = sys.mode_set

    def restrict_exact(pairs):
        rows = []
        for m, n in pairs:
            ent = interaction_coeffs_exact(m, n, *exact)
            rows.append([ent.get(k, Fraction(0)) for k in modes])
        return rows

    def restrict_float(pairs):
        rows = []
        for m, n in pairs:
            ent = interaction_coeffs(m, n, sys.geom)
            rows.append([ent.get(k, 0.0) for k in modes])
        return rows

    one = Fraction(1) if exact else 1.0
    rows = []
    for k in sys.controlled_set:
        row = [one if mode == k else one * 0 for mode in modes]
        rows.append(row)
    rank_fn = bareiss_rank if exact else _float_rank
    rank = rank_fn(rows)
    generations = [{"generation": 0, "pairs": [],
                    "added": [list(k) for k in sys.controlled_set],
                    "rank": rank}]
    for j in range(1, max_generations + 1):
        pairs = selection_S(j, square_mode=square and use_square_repair)
        rows += restrict_exact(pairs) if exact else restrict_float(pairs)
        rank = rank_fn(rows)
        generations.append({"generation": j,
                            "pairs": [[list(m), list(n)] for m, n in pairs],
                            "rank": rank})
        if rank == len(modes):
            break
    return rank, generations


def point_hash(u: SpectralField) -> str:
    blob = json.dumps(sorted([list(k) + [float(c)] for k, c in u.coeffs.items()]))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def rank_verdict(sys: GalerkinSystem, u: SpectralField,
                 use_square_repair: bool = True) -> dict:
    """JSON-ready verdict for one evaluation point."""
    rank, generations = full_rank_check(sys, u, use_square_repair=use_square_repair)
    return {
        "N": _infer_level(sys),
        "point_hash": point_hash(u),
        "rank": rank,
        "kappa_N": len(sys.mode_set),
        "full_rank": rank == len(sys.mode_set),
        "generations": generations,
    }
