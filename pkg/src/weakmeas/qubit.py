"""Qubit primitives: Pauli matrices, Bloch vectors and closed-form 2x2
decompositions.

Matrices are plain ``numpy`` arrays of shape ``(2, 2)`` (complex128).  The
``*_batch`` helpers accept any leading batch shape ``(..., 2, 2)`` and are
what the ensemble code uses; the scalar functions validate their input and
delegate to them.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, DomainError

IDENTITY = np.eye(2, dtype=complex)
SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)
PAULIS = (SIGMA_X, SIGMA_Y, SIGMA_Z)

DENSITY_TOL = 1e-12
BLOCH_TOL = 1e-10
HERMITIAN_TOL = 1e-10
# both singular values below this => no information at all
TINY_SINGULAR = 1e-300


@dataclass(frozen=True)
class QubitModel:
    """Free qubit Hamiltonian ``H = -(E/2) sigma_z`` and the angle ``beta``
    between the charge basis and the energy eigenbasis (hbar = 1)."""

    energy: float
    beta: float

    def __post_init__(self):
        if not np.isfinite(self.energy) or self.energy < 0:
            raise DomainError(f"energy must be finite and >= 0, got {self.energy}")
        if not (0.0 <= self.beta <= np.pi / 2 + 1e-12):
            raise DomainError(f"beta must lie in [0, pi/2], got {self.beta}")

    @property
    def hamiltonian(self):
        return -0.5 * self.energy * SIGMA_Z

    @property
    def period(self):
        return 2 * np.pi / self.energy


def as_mat2(m):
    """Return ``m`` as a finite complex 2x2 array."""
    a = np.asarray(m, dtype=complex)
    if a.shape != (2, 2):
        raise DomainError(f"expected a 2x2 matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError("matrix has non-finite entries")
    return a


def dagger(m):
    return np.conj(np.swapaxes(m, -1, -2))


def check_density(rho, tol=DENSITY_TOL):
    """Validate a density matrix (Hermitian, unit trace, PSD) and return it."""
    rho = as_mat2(rho)
    if np.max(np.abs(rho - dagger(rho))) > tol:
        raise DomainError("density matrix is not Hermitian")
    if abs(np.trace(rho) - 1) > tol:
        raise DomainError(f"density matrix trace is {np.trace(rho).real}, not 1")
    if np.min(np.linalg.eigvalsh(rho)) < -tol:
        raise DomainError("density matrix is not positive semidefinite")
    return rho


def bloch_from_density(rho):
    """Bloch vector ``r_i = Tr(rho sigma_i)`` of a qubit density matrix."""
    rho = check_density(rho)
    return bloch_from_density_batch(rho)


def bloch_from_density_batch(rho):
    rho = np.asarray(rho)
    x = 2 * rho[..., 0, 1].real
    y = -2 * rho[..., 0, 1].imag
    z = (rho[..., 0, 0] - rho[..., 1, 1]).real
    return np.stack([x, y, z], axis=-1)


def density_from_bloch(r):
    """Density matrix ``(1 + r.sigma)/2``; raises if ``|r| > 1``."""
    r = np.asarray(r, dtype=float)
    if r.shape != (3,) or not np.all(np.isfinite(r)):
        raise DomainError("Bloch vector must be three finite reals")
    if r @ r > (1 + BLOCH_TOL) ** 2:
        raise DomainError(f"Bloch vector length {np.linalg.norm(r)} exceeds 1")
    return density_from_bloch_batch(r)


def density_from_bloch_batch(r):
    r = np.asarray(r, dtype=float)
    out = np.empty(r.shape[:-1] + (2, 2), dtype=complex)
    out[..., 0, 0] = 0.5 * (1 + r[..., 2])
    out[..., 1, 1] = 0.5 * (1 - r[..., 2])
    out[..., 0, 1] = 0.5 * (r[..., 0] - 1j * r[..., 1])
    out[..., 1, 0] = 0.5 * (r[..., 0] + 1j * r[..., 1])
    return out


def unit_vector(theta, phi):
    """Cartesian unit vector for spherical angles (works on arrays)."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    st = np.sin(theta)
    return np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)


def angles_from_vector(v):
    """Spherical ``(theta, phi)`` of a (not necessarily unit) 3-vector;
    ``phi`` is reported in ``[0, 2 pi)``."""
    v = np.asarray(v, dtype=float)
    rho_xy = np.hypot(v[..., 0], v[..., 1])
    theta = np.arctan2(rho_xy, v[..., 2])
    phi = np.mod(np.arctan2(v[..., 1], v[..., 0]), 2 * np.pi)
    return theta, phi


def sigma_n(beta):
    """Charge-basis observable ``|R><R| - |L><L| = cos(b) sz + sin(b) sx``."""
    return np.cos(beta) * SIGMA_Z + np.sin(beta) * SIGMA_X


def charge_states(beta):
    """Kets ``(|R>, |L>)`` written in the energy eigenbasis ``{|0>, |1>}``."""
    c, s = np.cos(beta / 2), np.sin(beta / 2)
    return np.array([c, s], dtype=complex), np.array([s, -c], dtype=complex)


def ket_bloch(ket):
    """Bloch vector of a (normalised) ket."""
    a0, a1 = ket[..., 0], ket[..., 1]
    cross = np.conj(a0) * a1
    return np.stack([2 * cross.real, 2 * cross.imag,
                     np.abs(a0) ** 2 - np.abs(a1) ** 2], axis=-1)


def _fix_phase(v):
    # first component real and >= 0; if it vanishes, the second one instead
    a0 = v[..., 0]
    use0 = np.abs(a0) > 0
    ref = np.where(use0, a0, v[..., 1])
    # bring subnormal references to unit size before taking their phase
    big = np.maximum(np.abs(ref.real), np.abs(ref.imag))
    big = np.where(big > 0, big, 1)
    ref = (ref.real / big) + 1j * (ref.imag / big)
    mag = np.abs(ref)
    phase = np.where(mag > 0, np.conj(ref) / np.where(mag > 0, mag, 1), 1)
    return v * phase[..., None]


def eig_hermitian2_batch(m):
    """Eigen-decomposition of Hermitian 2x2 matrices, largest eigenvalue first.

    Returns ``(val1, val2, vec1, vec2)`` with ``val1 >= val2``.  No input
    validation; the imaginary parts of the diagonal are ignored.
    """
    m = np.asarray(m, dtype=complex)
    a = m[..., 0, 0].real
    c = m[..., 1, 1].real
    b = 0.5 * (m[..., 0, 1] + np.conj(m[..., 1, 0]))
    half_tr = 0.5 * (a + c)
    half_diff = 0.5 * (a - c)
    disc = np.hypot(half_diff, np.abs(b))
    val1 = half_tr + disc
    val2 = half_tr - disc

    # two algebraically equivalent eigenvector forms; keep the better scaled one
    u = np.stack([b, (val1 - a).astype(complex)], axis=-1)
    w = np.stack([(val1 - c).astype(complex), np.conj(b)], axis=-1)
    nu = np.linalg.norm(u, axis=-1)
    nw = np.linalg.norm(w, axis=-1)
    vec = np.where((nu >= nw)[..., None], u, w)
    norm = np.maximum(nu, nw)

    diagonal = np.abs(b) == 0
    e1 = np.array([1, 0], dtype=complex)
    e2 = np.array([0, 1], dtype=complex)
    diag_vec = np.where((a >= c)[..., None], e1, e2)
    safe = np.where(norm > 0, norm, 1)[..., None]
    vec1 = np.where((diagonal | (norm == 0))[..., None], diag_vec, vec / safe)
    vec1 = _fix_phase(vec1)
    vec2 = np.stack([-np.conj(vec1[..., 1]), np.conj(vec1[..., 0])], axis=-1)
    vec2 = _fix_phase(vec2)
    return val1, val2, vec1, vec2


def eig_hermitian2(m):
    """Eigenpairs ``((val1, vec1), (val2, vec2))`` of a Hermitian 2x2 matrix.

    Eigenvalues are ordered ``val1 >= val2``.  Each eigenvector is fixed to
    have a real non-negative first component.  For a multiple of the
    identity the eigenvectors are ``e1`` and ``e2``.

    Raises
    ------
    DomainError
        If ``m`` is not Hermitian to within ``1e-10`` (relative).
    """
    m = as_mat2(m)
    scale = max(1.0, float(np.max(np.abs(m))))
    if np.max(np.abs(m - dagger(m))) > HERMITIAN_TOL * scale:
        raise DomainError("matrix is not Hermitian")
    val1, val2, vec1, vec2 = eig_hermitian2_batch(m)
    return (float(val1), vec1), (float(val2), vec2)


def polar_decompose_batch(m, det_phase=None):
    """Right polar decomposition ``m = rot @ meas`` of 2x2 matrices.

    Closed form: with ``d = det m`` and ``s = sigma_1 + sigma_2 =
    sqrt(|m|_F^2 + 2|d|)``,

        rot  = (m + (d/|d|) adj(m)^H) / s
        meas = (m^H m + |d| 1) / s

    which avoids any iteration.  When ``d == 0`` the free column of ``rot``
    is completed with phase factor 1.  Matrices whose entries all vanish
    (below ``1e-300``) raise :class:`DegenerateInputError`.

    ``det_phase`` optionally supplies the known unit phase ``d/|d|``.  For
    nearly singular ``m`` the computed determinant is dominated by
    round-off, while ``rot`` itself is well defined once the phase is known.
    """
    m = np.asarray(m, dtype=complex)
    scale = np.max(np.abs(m), axis=(-1, -2))
    if np.any(~(scale >= TINY_SINGULAR)):
        raise DegenerateInputError("matrix is (numerically) zero; nothing to decompose")
    x = m / scale[..., None, None]
    det = x[..., 0, 0] * x[..., 1, 1] - x[..., 0, 1] * x[..., 1, 0]
    absdet = np.abs(det)
    if det_phase is None:
        phase = np.where(absdet > 0, det / np.where(absdet > 0, absdet, 1), 1)
    else:
        phase = np.broadcast_to(np.asarray(det_phase, dtype=complex), absdet.shape)
    fro2 = np.sum(np.abs(x) ** 2, axis=(-1, -2))
    s = np.sqrt(fro2 + 2 * absdet)
    adj_h = np.empty_like(x)
    adj_h[..., 0, 0] = np.conj(x[..., 1, 1])
    adj_h[..., 0, 1] = -np.conj(x[..., 1, 0])
    adj_h[..., 1, 0] = -np.conj(x[..., 0, 1])
    adj_h[..., 1, 1] = np.conj(x[..., 0, 0])
    rot = (x + phase[..., None, None] * adj_h) / s[..., None, None]
    gram = dagger(x) @ x
    gram[..., 0, 1] = 0.5 * (gram[..., 0, 1] + np.conj(gram[..., 1, 0]))
    gram[..., 1, 0] = np.conj(gram[..., 0, 1])
    meas = (gram + absdet[..., None, None] * np.eye(2)) / s[..., None, None]
    meas = meas * scale[..., None, None]
    return rot, meas


def polar_decompose(m, det_phase=None):
    """Polar decomposition ``m = rot @ meas`` with ``rot`` unitary and
    ``meas = sqrt(m^H m)`` Hermitian positive semidefinite."""
    m = as_mat2(m)
    return polar_decompose_batch(m, det_phase)


def purity(rho):
    rho = np.asarray(rho)
    return np.real(np.einsum("...ij,...ji->...", rho, rho))
