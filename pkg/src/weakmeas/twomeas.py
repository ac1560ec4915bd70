"""Fidelity of two consecutive partial measurements along tilted axes.

A partial measurement with parameters ``(R, eps)`` along ``z`` has the two
outcome operators ``diag(sqrt(R(1+eps)), sqrt(R(1-eps)))`` and
``diag(sqrt(1-R(1+eps)), sqrt(1-R(1-eps)))``.  The second measurement is
the same construction in a basis tilted by ``theta`` in the x-z plane.
Everything stays real.
"""

from dataclasses import dataclass

import numpy as np

from .csvio import write_rows
from .errors import DomainError

VALIDITY_TOL = 1e-12


@dataclass(frozen=True)
class WeakMeasSpec:
    """Two-outcome partial measurement.

    Attributes
    ----------
    R : float
        Mean probability of the first outcome, in ``(0, 1]``.
    eps : float
        Relative bias between the two basis states.
    """

    R: float
    eps: float

    def __post_init__(self):
        if not (0.0 < self.R <= 1.0):
            raise DomainError(f"R must lie in (0, 1], got {self.R}")
        if not np.isfinite(self.eps):
            raise DomainError("eps must be finite")
        for p in (self.R * (1 + self.eps), self.R * (1 - self.eps)):
            if p < -VALIDITY_TOL or p > 1 + VALIDITY_TOL:
                raise DomainError(
                    f"outcome probability {p} outside [0, 1] for R={self.R}, eps={self.eps}")

    def complement(self):
        """Parameters ``(1 - R, -eps R / (1 - R))`` of the other outcome, or
        ``None`` when that outcome never occurs."""
        rest = 1.0 - self.R
        if rest <= 0.0:
            return None
        return rest, -self.eps * self.R / rest

    def branches(self):
        """``(R, eps)`` for every outcome that can occur."""
        out = [(self.R, self.eps)]
        other = self.complement()
        if other is not None:
            out.append(other)
        return out


def _branch_fidelity(r1, e1, r2, e2, cos_theta, sin_theta):
    # (1 + e1 e2 c)^2 - (1 - e1^2)(1 - e2^2) rewritten as a sum of
    # non-negative terms, so small eps does not cancel
    disc = (e1 + e2 * cos_theta) ** 2 + (e2 * sin_theta) ** 2 * (1 - e1 ** 2)
    return r1 * r2 * np.sqrt(disc)


def two_meas_fidelity_closed(spec1: WeakMeasSpec, spec2: WeakMeasSpec, theta):
    """Overall fidelity summed over the four outcome pairs, in closed form.

    Outcomes with zero probability (``R = 1`` leaves no complement) are
    dropped.  ``theta`` may be an array.
    """
    theta = np.asarray(theta, dtype=float)
    c, s = np.cos(theta), np.sin(theta)
    total = np.zeros_like(c)
    for r1, e1 in spec1.branches():
        for r2, e2 in spec2.branches():
            total = total + _branch_fidelity(r1, e1, r2, e2, c, s)
    return float(total) if total.ndim == 0 else total


def outcome_operators(spec: WeakMeasSpec, theta=0.0):
    """The two real outcome operators for a measurement tilted by ``theta``."""
    half = 0.5 * theta
    up = np.array([np.cos(half), np.sin(half)])
    down = np.array([np.sin(half), -np.cos(half)])
    proj_up = np.outer(up, up)
    proj_down = np.outer(down, down)
    p_up = np.clip([spec.R * (1 + spec.eps), 1 - spec.R * (1 + spec.eps)], 0.0, 1.0)
    p_down = np.clip([spec.R * (1 - spec.eps), 1 - spec.R * (1 - spec.eps)], 0.0, 1.0)
    return [np.sqrt(a) * proj_up + np.sqrt(b) * proj_down for a, b in zip(p_up, p_down)]


def two_meas_fidelity_bruteforce(spec1: WeakMeasSpec, spec2: WeakMeasSpec, theta):
    """Overall fidelity by explicit enumeration of the four outcome products.

    For each product ``M = U2 U1`` the eigenvalues ``P1 >= P2`` of ``M^T M``
    give the outcome's contribution ``(P1 - P2)/2`` for a maximally mixed
    initial state.
    """
    total = 0.0
    for first in outcome_operators(spec1, 0.0):
        for second in outcome_operators(spec2, float(theta)):
            m = second @ first
            vals = np.linalg.eigvalsh(m.T @ m)
            total += 0.5 * (vals[1] - vals[0])
    return float(total)


def single_meas_fidelity(spec: WeakMeasSpec):
    """Fidelity of one partial measurement: ``sum |P_up - P_down| / 2``."""
    return float(sum(abs(r * (1 + e) - r * (1 - e)) / 2 for r, e in spec.branches()))


def weak_limit_fidelity(eps, theta):
    """Small-``eps`` form ``eps (|cos theta/2| + |sin theta/2|)`` for the
    symmetric case ``R1 = R2 = 1/2``."""
    theta = np.asarray(theta, dtype=float)
    return eps * (np.abs(np.cos(theta / 2)) + np.abs(np.sin(theta / 2)))


def sweep(spec1, spec2, thetas):
    """Rows ``(theta, F_closed, F_brute)``."""
    thetas = np.asarray(thetas, dtype=float)
    closed = two_meas_fidelity_closed(spec1, spec2, thetas)
    brute = np.array([two_meas_fidelity_bruteforce(spec1, spec2, t) for t in thetas])
    return np.column_stack([thetas, np.atleast_1d(closed), brute])


def write_sweep_csv(path, rows):
    write_rows(path, ["theta", "F_closed", "F_brute"], rows)
