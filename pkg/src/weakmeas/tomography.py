"""State tomography from stochastic-basis measurement results.

Each run contributes the oriented direction ``m_j`` of its more likely
pre-measurement state.  The estimate ``v = r n`` minimises
``T(v) = sum_j (1 - v . m_j)^2`` over the unit ball.  ``T`` is quadratic,
so the minimiser follows from ``S v = b`` with ``S = sum m_j m_j^T`` and
``b = sum m_j``, shrunk onto the sphere via a Lagrange multiplier when the
unconstrained solution lies outside it.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .csvio import write_rows
from .errors import DomainError
from .qubit import angles_from_vector, unit_vector

DEGENERATE_EIG = 1e-8   # relative to N
# above this condition number the transverse components are unreliable
ILL_CONDITIONED = 1e3
RADIUS_TOL = 1e-9


@dataclass
class TomographyEstimate:
    r: float
    theta: float
    phi: float
    objective_value: float
    degenerate: bool = False
    condition_number: float = 1.0

    @property
    def bloch(self):
        return self.r * unit_vector(self.theta, self.phi)


def _directions(samples):
    m = np.asarray(samples, dtype=float)
    if m.ndim != 2 or m.shape[1] not in (2, 3):
        raise DomainError("samples must be (theta, phi) pairs or unit 3-vectors")
    if m.shape[1] == 2:
        m = unit_vector(m[:, 0], m[:, 1])
    if not np.all(np.isfinite(m)):
        raise DomainError("samples must be finite")
    return m


def objective(estimate, samples):
    """``sum_j (1 - r cos Omega_j)^2``; ``estimate`` is a
    :class:`TomographyEstimate`, an ``(r, theta, phi)`` triple or a Bloch
    vector."""
    m = _directions(samples)
    return float(np.sum((1.0 - m @ _as_vector(estimate)) ** 2))


def _as_vector(estimate):
    if isinstance(estimate, TomographyEstimate):
        return estimate.bloch
    e = np.asarray(estimate, dtype=float)
    if e.shape == (3,) and isinstance(estimate, (tuple, list)):
        r, theta, phi = e
        return r * unit_vector(theta, phi)
    if e.shape == (3,):
        return e
    raise DomainError("estimate must be (r, theta, phi) or a Bloch vector")


def _pairwise_sum(x):
    """Sum over the first axis in a fixed pairwise tree."""
    x = np.asarray(x, dtype=float)
    while len(x) > 1:
        if len(x) % 2:
            x = np.concatenate([x, np.zeros((1,) + x.shape[1:])])
        x = x[0::2] + x[1::2]
    return x[0] if len(x) else np.zeros(x.shape[1:])


def normal_equations(samples):
    m = _directions(samples)
    scatter = _pairwise_sum(m[:, :, None] * m[:, None, :])
    return scatter, _pairwise_sum(m), len(m)


def _solve_on_ball(vals, vecs, b_proj):
    """Minimiser of the quadratic over the unit ball in the eigenbasis of S
    (``vals`` positive)."""
    v = b_proj / vals
    if np.sum(v ** 2) <= 1.0:
        return v
    # |v(lam)| decreases in lam; bracket then bisect
    lo, hi = 0.0, max(1.0, np.linalg.norm(b_proj))
    while np.sum((b_proj / (vals + hi)) ** 2) > 1.0:
        hi *= 2
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.sum((b_proj / (vals + mid)) ** 2) > 1.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-15 * max(1.0, hi):
            break
    v = b_proj / (vals + hi)
    return v / max(1.0, np.linalg.norm(v))


def reconstruct(samples, fidelities=None, min_fidelity=None):
    """Least-squares Bloch vector from measured directions.

    Parameters
    ----------
    samples : array_like
        ``(theta, phi)`` pairs or unit vectors, one per run.
    fidelities, min_fidelity : array_like, float, optional
        If both are given, runs with fidelity below ``min_fidelity`` are
        dropped.  By default every run is used.

    Returns
    -------
    TomographyEstimate
        ``degenerate`` is set when ``S`` is (numerically) rank deficient,
        in which case the fit is restricted to the spanned subspace, or
        when its condition number exceeds ``ILL_CONDITIONED``.
    """
    m = _directions(samples)
    if min_fidelity is not None and fidelities is not None:
        m = m[np.asarray(fidelities) >= min_fidelity]
    if len(m) < 3:
        raise DomainError("need at least 3 samples")
    scatter, b, n = normal_equations(m)
    vals, vecs = np.linalg.eigh(scatter)
    keep = vals >= DEGENERATE_EIG * n
    b_proj = vecs.T @ b
    v_proj = np.zeros(3)
    v_proj[keep] = _solve_on_ball(vals[keep], vecs[:, keep], b_proj[keep])
    v = vecs @ v_proj
    cond = float(vals[-1] / vals[0]) if vals[0] > 0 else np.inf
    degenerate = bool(not np.all(keep) or cond > ILL_CONDITIONED)
    r = float(np.linalg.norm(v))
    if r > 1.0:
        v = v / r
        r = 1.0
    theta, phi = angles_from_vector(v) if r > 0 else (0.0, 0.0)
    return TomographyEstimate(r, float(theta), float(phi), objective(v, m), degenerate, cond)


def read_samples_csv(path):
    """Read ``theta, phi`` rows (a header line is skipped if present)."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row:
                continue
            try:
                rows.append((float(row[0]), float(row[1])))
            except ValueError:
                if rows:
                    raise DomainError(f"bad sample row: {row}")
    return np.array(rows)


def write_samples_csv(path, samples):
    m = _directions(samples)
    theta, phi = angles_from_vector(m)
    write_rows(path, ["theta", "phi"], zip(theta, phi))


def write_estimate_csv(path, est: TomographyEstimate):
    write_rows(path, ["r", "theta", "phi", "objective", "degenerate_flag"],
               [(est.r, est.theta, est.phi, est.objective_value, bool(est.degenerate))])
