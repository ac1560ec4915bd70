"""Measurement information carried by an accumulated propagator, and the
ensemble statistics built on it."""

from dataclasses import dataclass

import numpy as np

from .csvio import write_rows
from .errors import DegenerateInputError, DomainError
from .qubit import (
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    angles_from_vector,
    as_mat2,
    dagger,
    eig_hermitian2_batch,
    ket_bloch,
    polar_decompose_batch,
    unit_vector,
)

# relative splitting below which the two weights are treated as equal
EQUAL_WEIGHT_TOL = 1e-14
EQUATOR_TOL = 1e-12
TIE_TOL = 1e-9
MAX_LEGENDRE = 10


@dataclass
class MeasurementDecomposition:
    """Basis, result and fidelity extracted from one propagator.

    Attributes
    ----------
    axis_theta, axis_phi : float
        Measurement axis folded to the upper hemisphere.
    result_direction : ndarray
        Bloch vector of the more likely pre-measurement state.
    p1, p2 : float
        Normalised weights of the two outcomes, ``p1 >= p2``, ``p1 + p2 = 1``.
    fidelity : float
        ``(p1 - p2) / (p1 + p2)``.
    rot : ndarray
        Unitary part of the polar decomposition, with ``det(rot) = 1`` and
        ``Re tr(rot) >= 0``.
    """

    axis_theta: float
    axis_phi: float
    result_direction: np.ndarray
    p1: float
    p2: float
    fidelity: float
    rot: np.ndarray

    @property
    def axis(self):
        return unit_vector(self.axis_theta, self.axis_phi)


@dataclass
class DecompositionBatch:
    """Vectorised counterpart of :class:`MeasurementDecomposition`."""

    axis_theta: np.ndarray
    axis_phi: np.ndarray
    result_direction: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    fidelity: np.ndarray
    rot: np.ndarray | None

    def __len__(self):
        return len(self.fidelity)

    def __getitem__(self, i):
        return MeasurementDecomposition(
            float(self.axis_theta[i]), float(self.axis_phi[i]), self.result_direction[i],
            float(self.p1[i]), float(self.p2[i]), float(self.fidelity[i]),
            None if self.rot is None else self.rot[i])


def fold_axis(direction):
    """Unoriented axis of ``direction``: upper hemisphere, and on the
    equator the representative with ``phi`` in ``[0, pi)``."""
    d = np.asarray(direction, dtype=float)
    z = d[..., 2]
    flip = z < -EQUATOR_TOL
    equator = np.abs(z) <= EQUATOR_TOL
    phi = np.mod(np.arctan2(d[..., 1], d[..., 0]), 2 * np.pi)
    upper = phi >= np.pi
    folded = np.where(upper, phi - np.pi, phi)
    # round-off can leave folded == pi, whose representative is phi = 0,
    # i.e. the unflipped direction
    wrap = folded >= np.pi
    folded = np.where(wrap, 0.0, folded)
    flip |= equator & (upper ^ wrap)
    out = np.where(flip[..., None], -d, d)
    theta, phi_out = angles_from_vector(out)
    theta = np.where(equator, np.pi / 2, theta)
    phi_out = np.where(equator, folded, phi_out)
    return out, theta, phi_out


def _normalize_rot(rot):
    det = rot[..., 0, 0] * rot[..., 1, 1] - rot[..., 0, 1] * rot[..., 1, 0]
    root = np.sqrt(det)
    rot = rot / root[..., None, None]
    tr = rot[..., 0, 0] + rot[..., 1, 1]
    sign = np.where(tr.real < 0, -1.0, 1.0)
    return rot * sign[..., None, None]


def decompose_batch(u, with_rot=True, det_phase=None):
    """Decompose propagators of shape ``(..., 2, 2)``; see :func:`decompose`."""
    u = np.asarray(u, dtype=complex)
    scale = np.max(np.abs(u), axis=(-2, -1))
    if np.any(~(scale >= 1e-300)) or not np.all(np.isfinite(u)):
        raise DegenerateInputError("propagator is zero or not finite")
    x = u / scale[..., None, None]
    gram = dagger(x) @ x
    val1, _, vec1, _ = eig_hermitian2_batch(gram)
    det = x[..., 0, 0] * x[..., 1, 1] - x[..., 0, 1] * x[..., 1, 0]
    tr = np.real(gram[..., 0, 0] + gram[..., 1, 1])
    # small weight from the determinant: no cancellation as p2 -> 0
    p2 = np.abs(det) ** 2 / (val1 * tr)
    p1 = 1.0 - p2
    fid = p1 - p2
    equal = (val1 - 0.5 * tr) <= EQUAL_WEIGHT_TOL * tr
    fid = np.where(equal, 0.0, np.clip(fid, 0.0, 1.0))
    p1 = np.where(equal, 0.5, p1)
    p2 = np.where(equal, 0.5, p2)
    # equal weights: U^H U is a multiple of the identity, use its eigenvector convention
    vec1 = np.where(equal[..., None], np.array([1, 0], dtype=complex), vec1)
    result = ket_bloch(vec1)
    _, theta, phi = fold_axis(result)
    rot = None
    if with_rot:
        rot, _ = polar_decompose_batch(x, det_phase)
        rot = _normalize_rot(rot)
    return DecompositionBatch(theta, phi, result, p1, p2, fid, rot)


def decompose(u_total, det_phase=None):
    """Split a propagator into measurement basis, result and fidelity.

    The weights are the eigenvalues of ``U^H U`` normalised to sum to one,
    so the decomposition is invariant under ``U -> c U``.  Propagators
    produced by the detector model have a real positive determinant;
    passing ``det_phase=1`` then keeps ``rot`` accurate even when ``U`` is
    numerically close to singular.

    Raises
    ------
    DegenerateInputError
        If ``u_total`` is zero.
    """
    u = as_mat2(u_total)
    return decompose_batch(u[None], det_phase=det_phase)[0]


def fidelity_batch(u):
    """Fidelity only, for arrays of propagators."""
    return decompose_batch(u, with_rot=False).fidelity


def fidelity_curve(u_snapshots, snapshot_steps, delta_t, tau_m, include_origin=True):
    """Mean fidelity over the ensemble at each snapshot.

    Returns an array with columns ``t / tau_m, mean F, stderr``.
    """
    rows = []
    if include_origin:
        rows.append((0.0, 0.0, 0.0))
    for step, snaps in zip(snapshot_steps, u_snapshots):
        f = fidelity_batch(snaps)
        rows.append((step * delta_t / tau_m, float(np.mean(f)),
                     float(np.std(f, ddof=1) / np.sqrt(len(f))) if len(f) > 1 else 0.0))
    return np.array(rows)


def legendre(n_max, x):
    """Values ``P_0..P_n_max`` at ``x`` by the three-term recurrence."""
    x = np.asarray(x, dtype=float)
    out = np.empty((n_max + 1,) + x.shape)
    out[0] = 1.0
    if n_max >= 1:
        out[1] = x
    for n in range(1, n_max):
        out[n + 1] = ((2 * n + 1) * x * out[n] - n * out[n - 1]) / (n + 1)
    return out


def _check_orders(orders):
    orders = np.atleast_1d(np.asarray(orders))
    if np.any(orders % 2 != 0) or np.any(orders < 0):
        raise DomainError("only non-negative even orders carry information for folded axes")
    return orders.astype(int)


def spectral_coefficients(theta, n_max=MAX_LEGENDRE, orders=None):
    """Zonal harmonic coefficients ``c_n = (2/N) sum_j Y_n0(theta_j)`` of a
    hemisphere distribution of axes.

    Returns ``(orders, c, stderr)`` for even ``n`` up to ``n_max`` (or the
    explicit ``orders``).  Odd orders raise :class:`DomainError`.
    """
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < -1e-12) or np.any(theta > np.pi / 2 + 1e-12):
        raise DomainError("axes must lie in the upper hemisphere")
    if orders is None:
        if n_max % 2:
            raise DomainError("n_max must be even")
        orders = np.arange(0, n_max + 1, 2)
    orders = _check_orders(orders)
    p = legendre(int(orders.max()), np.cos(theta))
    norm = np.sqrt((2 * orders + 1) / (4 * np.pi))
    terms = 2 * norm[:, None] * p[orders]
    n = len(theta)
    c = terms.mean(axis=1)
    err = terms.std(axis=1, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(len(orders))
    return orders, c, err


def fixed_basis_guesses(result_direction, axis):
    """Per-run score: +1 correct, -1 wrong, 0 for a tie (half/half)."""
    dots = np.asarray(result_direction) @ np.asarray(axis, dtype=float)
    return np.where(np.abs(dots) < TIE_TOL, 0.0, np.sign(dots))


def fixed_basis_average_fidelity(result_direction, axis):
    """Average fidelity ``P(correct) - P(wrong)`` of guessing along ``axis``
    for runs prepared in its +1 eigenstate.  Returns ``(F_bar, stderr)``."""
    scores = fixed_basis_guesses(result_direction, axis)
    n = len(scores)
    err = float(np.std(scores, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
    return float(np.mean(scores)), err


def charge_basis_axis(beta):
    return np.array([np.sin(beta), 0.0, np.cos(beta)])


def charge_basis_fidelity_slope(f_bar, coupling=0.06):
    """``(1 - F_bar) / x`` at coupling ``x``."""
    return (1.0 - f_bar) / coupling


def short_time_components(bins, bin_centers, i_center, beta, energy, delta_t, t_f):
    """Discrete Fourier sums of the record over ``[0, t_f)``.

    ``p_x = sin(b) sum (I - Ibar) cos(E t) dt``,
    ``p_y = sin(b) sum (I - Ibar) sin(E t) dt``,
    ``p_z = cos(b) sum (I - Ibar) dt``.
    ``bins`` may be one record or an array of records (last axis = time).
    """
    period = 2 * np.pi / energy
    cycles = t_f / period
    if not np.isclose(cycles, np.round(cycles), rtol=0, atol=1e-9) or np.round(cycles) < 1:
        raise DomainError("t_f must be a positive whole number of precession periods")
    n = int(round(t_f / delta_t))
    bins = np.asarray(bins)
    if bins.shape[-1] < n:
        raise DomainError(f"record has {bins.shape[-1]} steps, need {n}")
    current = np.asarray(bin_centers)[bins[..., :n]] - i_center
    t = np.arange(n) * delta_t
    px = np.sin(beta) * (current @ np.cos(energy * t)) * delta_t
    py = np.sin(beta) * (current @ np.sin(energy * t)) * delta_t
    pz = np.cos(beta) * current.sum(axis=-1) * delta_t
    return px, py, pz


def bloch_expectations(rho):
    rho = np.asarray(rho)
    return np.real(np.stack([np.einsum("...ij,ji->...", rho, s)
                             for s in (SIGMA_X, SIGMA_Y, SIGMA_Z)], axis=-1))


def write_axes_csv(path, decomposition: DecompositionBatch, run_index=None):
    n = len(decomposition)
    idx = np.arange(n) if run_index is None else np.asarray(run_index)
    write_rows(path, ["run_index", "theta", "phi", "fidelity"],
               zip(idx, decomposition.axis_theta, decomposition.axis_phi, decomposition.fidelity))


def write_fidelity_curve_csv(path, curve):
    write_rows(path, ["t_over_tau_m", "mean_F", "stderr"], curve)


def write_spectra_csv(path, orders, coefficients, stderr):
    write_rows(path, ["n", "c_n", "stderr"], zip(orders, coefficients, stderr))


def write_avg_fidelity_csv(path, rows):
    """``rows`` of ``(beta, theta_meas, F_bar, stderr)``."""
    write_rows(path, ["beta", "theta_meas", "F_bar", "stderr"], rows)
