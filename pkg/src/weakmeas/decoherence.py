"""Measurement with relaxation and dephasing, in the 4x4 superoperator
picture.

Density matrices are vectorised as ``(rho00, rho11, rho01, rho10)``.  The
record-conditioned propagator is only built for a Hamiltonian diagonal in
the charge basis (``beta = 0``); other angles go through
:func:`lindblad_sme_step` on states.
"""

from dataclasses import dataclass

import numpy as np

from .csvio import write_rows
from .errors import DegenerateInputError, DomainError, UnsupportedConfigurationError
from .qpc import QpcModel
from .qubit import SIGMA_Z, QubitModel, dagger
from .trajectory import (
    RngStream,
    _inverse_cdf,
    _UniformSource,
    StepTables,
    UNIFORM_BLOCK,
    sme_step,
)

SIGMA_MINUS = np.array([[0, 1], [0, 0]], dtype=complex)


@dataclass(frozen=True)
class DecoherenceModel:
    """Relaxation rate ``gamma_r`` (channel ``sigma_-``) and pure dephasing
    rate ``gamma_p``."""

    gamma_r: float = 0.0
    gamma_p: float = 0.0

    def __post_init__(self):
        for name in ("gamma_r", "gamma_p"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise DomainError(f"{name} must be finite and >= 0, got {v}")


def vectorize(rho):
    rho = np.asarray(rho)
    return np.stack([rho[..., 0, 0], rho[..., 1, 1], rho[..., 0, 1], rho[..., 1, 0]], axis=-1)


def unvectorize(vec):
    vec = np.asarray(vec)
    out = np.empty(vec.shape[:-1] + (2, 2), dtype=complex)
    out[..., 0, 0] = vec[..., 0]
    out[..., 1, 1] = vec[..., 1]
    out[..., 0, 1] = vec[..., 2]
    out[..., 1, 0] = vec[..., 3]
    return out


def _unit_interval(name, v, low_open=False):
    if not np.isfinite(v) or v > 1 or v < 0 or (low_open and v == 0):
        bound = "(0, 1]" if low_open else "[0, 1]"
        raise DomainError(f"{name} must lie in {bound}, got {v}")


def meas_super(P, M, sign=+1):
    """Measurement outcome of probability ``P`` (for the maximally mixed
    state) and fidelity ``M``; ``sign`` selects which state it favours."""
    _unit_interval("P", P, low_open=True)
    _unit_interval("M", M)
    if sign not in (1, -1):
        raise DomainError("sign must be +1 or -1")
    coh = np.sqrt(1 - M * M)
    return P * np.diag([1 + sign * M, 1 - sign * M, coh, coh]).astype(complex)


def relax_super(D_r):
    """Relaxation towards ``|0>`` with remaining excited fraction ``D_r``."""
    _unit_interval("D_r", D_r)
    s = np.sqrt(D_r)
    return np.array([[1, 1 - D_r, 0, 0],
                     [0, D_r, 0, 0],
                     [0, 0, s, 0],
                     [0, 0, 0, s]], dtype=complex)


def dephase_super(D_p):
    """Pure dephasing that scales coherences by ``D_p``."""
    _unit_interval("D_p", D_p)
    return np.diag([1, 1, D_p, D_p]).astype(complex)


def fidelity_from_super(u):
    """``|(U11 - U12 - U22) / (U11 + U12 + U22)|`` from the population block.

    Valid for propagators of the measurement-then-decay shape (upper
    triangular, real population block)."""
    u = np.asarray(u)
    if u.shape[-2:] != (4, 4):
        raise DomainError("expected a 4x4 superoperator")
    pop = np.real(u[..., :2, :2])
    if np.any(np.abs(np.imag(u[..., :2, :2])) > 1e-12 * np.maximum(1, np.abs(pop))):
        raise DomainError("population block must be real")
    a, b, d = pop[..., 0, 0], pop[..., 0, 1], pop[..., 1, 1]
    den = a + b + d
    if np.any(np.abs(den) < 1e-300):
        raise DegenerateInputError("vanishing denominator")
    return np.abs((a - b - d) / den)


def measurement_increments(model: QpcModel, bins):
    """Per-step ``G_k = 2 dt (I_k - Ibar) / (tau_m dIbar)`` of a record."""
    current = model.bin_centers[np.asarray(bins)] - model.i_center
    return 2 * model.delta_t * current / (model.tau_m * model.delta_I_bar)


def euler_generator(g, gamma_r, gamma_p, tau_m, dt):
    """One Euler step ``1 + dU`` of the propagator; ``g`` already includes ``dt``."""
    coh = 1 - (gamma_r / 2 + gamma_p + 1 / (2 * tau_m)) * dt
    return np.array([[1 + g, gamma_r * dt, 0, 0],
                     [0, 1 - gamma_r * dt - g, 0, 0],
                     [0, 0, coh, 0],
                     [0, 0, 0, coh]], dtype=complex)


def propagate_super(g, gamma_r, gamma_p, tau_m, dt):
    """Euler propagation along increments ``g`` (shape ``(..., n_steps)``).

    Returns ``(u, log_norm)``: the 4x4 propagators rescaled by powers of
    two to stay finite, and the log of the factors removed.
    """
    g = np.atleast_1d(np.asarray(g, dtype=float))
    shape = g.shape[:-1]
    a = np.ones(shape)
    b = np.zeros(shape)
    d = np.ones(shape)
    c = np.ones(shape)
    exps = np.zeros(shape, dtype=np.int64)
    rate_c = (gamma_r / 2 + gamma_p + 1 / (2 * tau_m)) * dt
    decay = gamma_r * dt
    for k in range(g.shape[-1]):
        gk = g[..., k]
        a, b, d = (1 + gk) * a, (1 + gk) * b + decay * d, (1 - decay - gk) * d
        c = (1 - rate_c) * c
        a, b, d, c, exps = _rescale(a, b, d, c, exps)
    return _assemble(a, b, d, c), exps * np.log(2.0)


def _rescale(a, b, d, c, exps):
    _, e = np.frexp(np.maximum(np.maximum(np.abs(a), np.abs(b)), np.abs(c)))
    scale = np.ldexp(1.0, -e)
    return a * scale, b * scale, d * scale, c * scale, exps + e


def _assemble(a, b, d, c):
    out = np.zeros(np.shape(a) + (4, 4), dtype=complex)
    out[..., 0, 0] = a
    out[..., 0, 1] = b
    out[..., 1, 1] = d
    out[..., 2, 2] = c
    out[..., 3, 3] = c
    return out


def closed_form_super(g, gamma_r, gamma_p, tau_m, dt):
    """Continuous-time solution for a piecewise-constant record, normalised
    so that the ``(0, 0)`` entry is 1.

    With ``S(t) = sum_k g_k`` up to ``t``: ``U00 = exp(S)``,
    ``U11 = exp(-gamma_r t - S)``, ``U01 = gamma_r int exp(-gamma_r t')
    exp(S(t) - 2 S(t')) dt'``, coherences ``exp(-(gamma_r/2 + gamma_p +
    1/(2 tau_m)) t)``.  Returned divided by ``U00``.
    """
    g = np.atleast_1d(np.asarray(g, dtype=float))
    n = g.shape[-1]
    s_before = np.concatenate([np.zeros(g.shape[:-1] + (1,)), np.cumsum(g, axis=-1)], axis=-1)
    total = s_before[..., -1]
    t = n * dt
    # within step k, S rises linearly from s_before[k] by g_k
    tk = np.arange(n) * dt
    rate = 2 * g / dt + gamma_r
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        seg = np.where(np.abs(rate * dt) > 1e-12,
                       -np.expm1(-rate * dt) / rate,
                       dt * (1 - rate * dt / 2))
    b = gamma_r * np.sum(np.exp(-gamma_r * tk - 2 * s_before[..., :-1]) * seg, axis=-1)
    out = np.zeros(g.shape[:-1] + (4, 4), dtype=complex)
    out[..., 0, 0] = 1.0
    out[..., 0, 1] = b
    out[..., 1, 1] = np.exp(-gamma_r * t - 2 * total)
    coh = np.exp(-(gamma_r / 2 + gamma_p + 1 / (2 * tau_m)) * t - total)
    out[..., 2, 2] = coh
    out[..., 3, 3] = coh
    return out


def weighted_increment_terms(g, gamma_r, dt):
    """Per-step terms ``exp(-gamma_r t_k) [exp(-2 S_{k+1}) - exp(-2 S_k)]``
    whose sum is the ``K`` of :func:`fidelity_from_increments`.

    Unscaled, so only suitable for records short enough that ``exp(-2 S)``
    stays finite.
    """
    g = np.atleast_1d(np.asarray(g, dtype=float))
    s = np.concatenate([np.zeros(g.shape[:-1] + (1,)), np.cumsum(g, axis=-1)], axis=-1)
    tk = np.arange(g.shape[-1]) * dt
    return np.exp(-gamma_r * tk - 2 * s[..., :-1]) * np.expm1(-2 * g)


def fidelity_from_increments(g, gamma_r, dt):
    """Record fidelity ``|K / (2 + K)|`` with
    ``K = sum_k exp(-gamma_r t_k) [exp(-2 S_{k+1}) - exp(-2 S_k)]``,
    ``S_k`` the running sum of the increments (left-endpoint weights)."""
    g = np.atleast_1d(np.asarray(g, dtype=float))
    s = np.concatenate([np.zeros(g.shape[:-1] + (1,)), np.cumsum(g, axis=-1)], axis=-1)
    tk = np.arange(g.shape[-1]) * dt
    # factor exp(-2 S_k) out of each difference to avoid overflow
    log_w = -gamma_r * tk - 2 * s[..., :-1]
    diffs = np.expm1(-2 * g)
    shift = np.max(log_w, axis=-1, keepdims=True)
    k_scaled = np.sum(np.exp(log_w - shift) * diffs, axis=-1)
    shift = shift[..., 0]
    # |K/(2+K)| evaluated stably for huge or tiny K
    with np.errstate(over="ignore"):
        big = shift > 700
        k_val = np.where(big, 0.0, k_scaled * np.exp(np.minimum(shift, 700)))
    f = np.abs(k_val / (2 + k_val))
    f_big = np.where(k_scaled == 0, 0.0, 1.0)
    return np.where(big, f_big, f)


def fidelity_with_decoherence(bins, gamma_r, model: QpcModel):
    """Fidelity of a record under relaxation, from the closed-form integral."""
    return fidelity_from_increments(measurement_increments(model, bins), gamma_r,
                                    model.delta_t)


def f_max_estimate(tau_d, tau_m):
    """Decoherence-limited fidelity ceiling ``tau_d / (tau_m + tau_d)``."""
    if not (tau_d > 0 and tau_m > 0):
        raise DomainError("tau_d and tau_m must be positive")
    return tau_d / (tau_m + tau_d)


@dataclass
class DecoheringRecords:
    bins: np.ndarray
    u_total: np.ndarray
    log_norm: np.ndarray
    rho_final: np.ndarray


def run_decohering_trajectories(model: QpcModel, qubit: QubitModel, decoherence: DecoherenceModel,
                                rho0_vec, n_steps, n_trajectories, master_seed, start_index=0):
    """Records with relaxation and dephasing for ``beta = 0``.

    Bins are drawn from the current normalised state; state and propagator
    follow the Euler step of the 4x4 generator.
    """
    if qubit.beta != 0:
        raise UnsupportedConfigurationError(
            "record-conditioned superoperators are only available for beta = 0")
    if int(n_steps) < 1:
        raise DomainError("n_steps must be >= 1")
    rho0 = np.asarray(rho0_vec, dtype=complex)
    if rho0.shape != (4,):
        raise DomainError("rho0_vec must have four entries")
    tab = StepTables(model, qubit)
    gens = [RngStream(master_seed, int(i)).generator()
            for i in range(start_index, start_index + n_trajectories)]
    source = _UniformSource(gens)
    g_table = measurement_increments(model, np.arange(model.n_bins))
    dt = model.delta_t
    gr, gp = decoherence.gamma_r, decoherence.gamma_p
    rate_c = (gr / 2 + gp + 1 / (2 * model.tau_m)) * dt
    decay = gr * dt

    batch = n_trajectories
    p0 = np.full(batch, rho0[0].real)
    p1 = np.full(batch, rho0[1].real)
    coh = np.full(batch, rho0[2])
    a = np.ones(batch)
    b = np.zeros(batch)
    d = np.ones(batch)
    c = np.ones(batch)
    exps = np.zeros(batch, dtype=np.int64)
    bins = np.empty((batch, n_steps), dtype=np.int32)
    for step in range(n_steps):
        off = step % UNIFORM_BLOCK
        if off == 0:
            block = source.next_block(min(UNIFORM_BLOCK, n_steps - step))
        # beta = 0: |R> = |0>, |L> = |1>
        k = _inverse_cdf(tab, np.maximum(p1, 0.0), np.maximum(p0, 0.0), block[:, off])
        bins[:, step] = k
        gk = g_table[k]
        p0, p1 = (1 + gk) * p0 + decay * p1, (1 - decay - gk) * p1
        coh = (1 - rate_c) * coh
        tr = p0 + p1
        p0, p1, coh = p0 / tr, p1 / tr, coh / tr
        a, b, d = (1 + gk) * a, (1 + gk) * b + decay * d, (1 - decay - gk) * d
        c = (1 - rate_c) * c
        a, b, d, c, exps = _rescale(a, b, d, c, exps)
    rho = np.stack([p0, p1, coh, np.conj(coh)], axis=-1)
    return DecoheringRecords(bins, _assemble(a, b, d, c), exps * np.log(2.0), rho)


def run_decohering_trajectory(model: QpcModel, qubit: QubitModel, decoherence: DecoherenceModel,
                              rho0_vec, n_steps, rng: RngStream):
    """Single-record version of :func:`run_decohering_trajectories`;
    returns ``(u_total, log_norm, bins)``."""
    if not isinstance(rng, RngStream):
        raise DomainError("rng must be an RngStream")
    res = run_decohering_trajectories(model, qubit, decoherence, rho0_vec, n_steps, 1,
                                      rng.master_seed, rng.stream_index)
    return res.u_total[0], float(res.log_norm[0]), res.bins[0]


def _dissipator(rho, op):
    op_d = dagger(op)
    n = op_d @ op
    return op @ rho @ op_d - 0.5 * (n @ rho + rho @ n)


def lindblad_sme_step(rho, qubit: QubitModel, tau_m, decoherence: DecoherenceModel, dt, dW):
    """:func:`~weakmeas.trajectory.sme_step` plus relaxation (``sigma_-`` at
    ``gamma_r``) and dephasing (``sigma_z`` at ``gamma_p``, coherence decay
    rate ``2 gamma_p``).  ``tau_m = inf`` switches the measurement off."""
    rho = np.asarray(rho, dtype=complex)
    if np.isinf(tau_m):
        ham = qubit.hamiltonian
        new = rho - 1j * (ham @ rho - rho @ ham) * dt
    else:
        new = sme_step(rho, qubit, tau_m, dt, dW)
    if decoherence.gamma_r:
        new = new + decoherence.gamma_r * dt * _dissipator(rho, SIGMA_MINUS)
    if decoherence.gamma_p:
        new = new + decoherence.gamma_p * dt * _dissipator(rho, SIGMA_Z)
    new = 0.5 * (new + dagger(new))
    tr = np.real(np.trace(new, axis1=-2, axis2=-1))[..., None, None]
    return new / tr


def write_fmax_csv(path, rows):
    """``rows`` of ``(tau_d_over_tau_m, F_max_formula, F_max_montecarlo, stderr)``."""
    write_rows(path, ["tau_d_over_tau_m", "F_max_formula", "F_max_montecarlo", "stderr"], rows)
