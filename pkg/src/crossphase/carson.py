"""Overhead line series impedance from the modified Carson equations.

Constants assume 60 Hz and an earth resistivity of 100 ohm-m. Per-mile
values stay inside this module; everything returned by :func:`build_primitive`
is already scaled by segment length (ohms).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .netmodel import NEUTRAL, ConductorSpec, LineSegment

# Earth-return resistance and reactance coefficient (ohm/mile) and the
# ln(De) term, 60 Hz / 100 ohm-m.
EARTH_R = 0.09530
REACTANCE_COEF = 0.12134
EARTH_LOG_TERM = 7.93402

EARTH_TERM_PER_MILE = complex(EARTH_R, REACTANCE_COEF * EARTH_LOG_TERM)


class ImpedanceError(ValueError):
    pass


def carson_self(c: ConductorSpec) -> complex:
    """Self impedance of one conductor with earth return, ohm/mile."""
    if not c.gmr_ft > 0:
        raise ImpedanceError(f"non-positive GMR for conductor {c.name!r}")
    return complex(
        c.r_ohm_per_mile + EARTH_R,
        REACTANCE_COEF * (math.log(1.0 / c.gmr_ft) + EARTH_LOG_TERM),
    )


def carson_mutual(d_ft: float) -> complex:
    """Mutual impedance between two conductors ``d_ft`` apart, ohm/mile."""
    if not d_ft > 0:
        raise ImpedanceError(f"non-positive conductor spacing {d_ft!r}")
    return complex(EARTH_R, REACTANCE_COEF * (math.log(1.0 / d_ft) + EARTH_LOG_TERM))


@dataclass(frozen=True)
class PrimitiveImpedance:
    z: np.ndarray
    labels: tuple[str, ...]
    length_miles: float

    @property
    def phase_index(self) -> list[int]:
        idx = [i for i, lab in enumerate(self.labels) if lab != NEUTRAL]
        return sorted(idx, key=lambda i: self.labels[i])

    @property
    def neutral_index(self) -> list[int]:
        return [i for i, lab in enumerate(self.labels) if lab == NEUTRAL]


@dataclass(frozen=True)
class ImpedanceDecomposition:
    z_earth: np.ndarray
    z_mut: np.ndarray
    labels: tuple[str, ...]


def build_primitive(seg: LineSegment) -> PrimitiveImpedance:
    pos = seg.geometry.positions_ft
    n = len(pos)
    z = np.empty((n, n), dtype=complex)
    for i in range(n):
        z[i, i] = carson_self(seg.conductors[i])
        for j in range(i + 1, n):
            d = math.dist(pos[i], pos[j])
            if d <= 0:
                raise ImpedanceError(
                    f"segment {seg.id!r}: conductors {i} and {j} coincide"
                )
            z[i, j] = z[j, i] = carson_mutual(d)
    return PrimitiveImpedance(z * seg.length_miles, seg.geometry.phases, seg.length_miles)


def decompose(prim: PrimitiveImpedance) -> ImpedanceDecomposition:
    """Split ``z`` into the uniform earth-return block and the remainder."""
    z_earth = np.full(prim.z.shape, EARTH_TERM_PER_MILE * prim.length_miles)
    return ImpedanceDecomposition(z_earth, prim.z - z_earth, prim.labels)


def kron_reduce(prim: PrimitiveImpedance) -> np.ndarray:
    """Eliminate the (solidly grounded) neutral: Zpp - Zpn Znn^-1 Znp.

    Phase rows come back in A, B, C order restricted to the phases present.
    A segment without a neutral returns its phase block unchanged.
    """
    p = prim.phase_index
    n = prim.neutral_index
    z = prim.z
    zpp = z[np.ix_(p, p)]
    if not n:
        return zpp.copy()
    znn = z[np.ix_(n, n)]
    if abs(np.linalg.det(znn)) < 1e-14 * max(1.0, np.abs(znn).max()) ** len(n):
        raise ImpedanceError("singular neutral block")
    zred = zpp - z[np.ix_(p, n)] @ np.linalg.solve(znn, z[np.ix_(n, p)])
    # symmetric by construction; remove round-off asymmetry
    return 0.5 * (zred + zred.T)


def phase_order(labels: tuple[str, ...]) -> tuple[str, ...]:
    return tuple(sorted(lab for lab in labels if lab != NEUTRAL))
