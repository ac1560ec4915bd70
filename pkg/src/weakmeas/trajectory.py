"""Monte Carlo detector records and conditioned evolution.

The ensemble engine keeps every matrix as separate real and imaginary
float arrays and spells out each product with a fixed operation order.
Only correctly rounded elementwise operations (``+ - * /``, ``sqrt``,
``frexp``/``ldexp``) run inside the step loop, so the result for a given
trajectory does not depend on how many other trajectories share its batch
or on which worker process ran it.
"""

import concurrent.futures as cf
import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, ImpossibleOutcomeError
from .qpc import QpcModel
from .qubit import (
    IDENTITY,
    QubitModel,
    as_mat2,
    charge_states,
    check_density,
    dagger,
    sigma_n,
)

RENORM_LOW = 1e-6   # bounds on |U|_F^2, i.e. |U|_F in [1e-3, 1e3]
RENORM_HIGH = 1e6
TRACE_FLOOR = 1e-300
UNIFORM_BLOCK = 256
DEFAULT_HISTORY_STRIDE = 10
LN2 = math.log(2.0)


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream owned by one trajectory."""

    master_seed: int
    stream_index: int

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2 ** 64:
            raise DomainError("master_seed must be a 64-bit unsigned integer")
        if int(self.stream_index) < 0:
            raise DomainError("stream_index must be non-negative")

    def generator(self):
        seq = np.random.SeedSequence(int(self.master_seed), spawn_key=(int(self.stream_index),))
        return np.random.Generator(np.random.Philox(seq))


def _as_generator(rng):
    if isinstance(rng, RngStream):
        return rng.generator()
    if isinstance(rng, np.random.Generator):
        return rng
    raise DomainError("rng must be an RngStream or numpy Generator")


@dataclass
class TrajectoryRecord:
    """One detector record with the state and propagator it produced."""

    bins: np.ndarray
    rho_final: np.ndarray
    u_total: np.ndarray
    log_norm: float
    n_bins: int
    rho_history: np.ndarray | None = None

    @property
    def n_steps(self):
        return len(self.bins)


class StepTables:
    """Per-bin lookup tables for one (detector, qubit) pair, split into real
    arrays for the ensemble engine."""

    def __init__(self, model: QpcModel, qubit: QubitModel):
        self.model = model
        self.qubit = qubit
        self.n_bins = model.n_bins
        kraus = model.kraus_table(qubit.beta)
        k00 = kraus[:, 0, 0].copy()
        k01 = kraus[:, 0, 1].copy()
        k11 = kraus[:, 1, 1].copy()
        self.k00, self.k01, self.k11 = k00, k01, k11
        # rho -> K rho K for real symmetric K
        self.t00 = (k00 * k00, 2 * k00 * k01, k01 * k01)
        self.t11 = (k01 * k01, 2 * k01 * k11, k11 * k11)
        self.t01 = (k00 * k01, k00 * k11 + k01 * k01, k00 * k11 - k01 * k01, k01 * k11)
        self.cdf_l = model.current_cdf("L")
        self.cdf_r = model.current_cdf("R")
        half = 0.5 * qubit.energy * model.delta_t
        self.h0 = (math.cos(half), math.sin(half))
        self.h1 = (math.cos(half), -math.sin(half))
        full = qubit.energy * model.delta_t
        self.coh = (math.cos(full), math.sin(full))
        ket_r, ket_l = charge_states(qubit.beta)
        s = ket_l[0].real
        c = -ket_l[1].real
        self.w_l = (s * s, c * c, -2 * s * c)
        self.w_r = (c * c, s * s, 2 * s * c)


def _free_rho(tab, r00, r11, cr, ci):
    cs, sn = tab.coh
    return r00, r11, cr * cs - ci * sn, cr * sn + ci * cs


def _charge_weights(tab, r00, r11, cr):
    wl = tab.w_l[0] * r00 + tab.w_l[1] * r11 + tab.w_l[2] * cr
    wr = tab.w_r[0] * r00 + tab.w_r[1] * r11 + tab.w_r[2] * cr
    return np.maximum(wl, 0.0), np.maximum(wr, 0.0)


def _inverse_cdf(tab, wl, wr, uniform):
    """Smallest bin ``k`` with ``wl cdf_L[k] + wr cdf_R[k] > u (wl + wr)``."""
    target = uniform * (wl + wr)
    lo = np.zeros(np.shape(target), dtype=np.intp)
    hi = np.full(np.shape(target), tab.n_bins - 1, dtype=np.intp)
    while np.any(lo < hi):
        mid = (lo + hi) // 2
        val = wl * tab.cdf_l[mid] + wr * tab.cdf_r[mid]
        above = val > target
        hi = np.where(above, mid, hi)
        lo = np.where(above, lo, mid + 1)
    return lo


def _measure_rho(tab, k, r00, r11, cr, ci):
    a = tab.t00
    b = tab.t11
    c = tab.t01
    n00 = a[0][k] * r00 + a[1][k] * cr + a[2][k] * r11
    n11 = b[0][k] * r00 + b[1][k] * cr + b[2][k] * r11
    nr = c[0][k] * r00 + c[1][k] * cr + c[3][k] * r11
    ni = c[2][k] * ci
    tr = n00 + n11
    if np.any(~(tr > TRACE_FLOOR)):
        raise ImpossibleOutcomeError("sampled outcome has vanishing probability")
    return n00 / tr, n11 / tr, nr / tr, ni / tr


def _propagate_u(tab, k, ur, ui):
    """``U <- U_H K_k U`` on split arrays; ``ur``/``ui`` are lists of the four
    entries (00, 01, 10, 11)."""
    k00 = tab.k00[k]
    k01 = tab.k01[k]
    k11 = tab.k11[k]
    v = [None] * 4
    w = [None] * 4
    for j in (0, 1):
        v[j] = k00 * ur[j] + k01 * ur[2 + j]
        w[j] = k00 * ui[j] + k01 * ui[2 + j]
        v[2 + j] = k01 * ur[j] + k11 * ur[2 + j]
        w[2 + j] = k01 * ui[j] + k11 * ui[2 + j]
    # free evolution scales row 0 by h0 and row 1 by h1
    h0r, h0i = tab.h0
    h1r, h1i = tab.h1
    out_r = [None] * 4
    out_i = [None] * 4
    for j in (0, 1):
        out_r[j] = v[j] * h0r - w[j] * h0i
        out_i[j] = v[j] * h0i + w[j] * h0r
        out_r[2 + j] = v[2 + j] * h1r - w[2 + j] * h1i
        out_i[2 + j] = v[2 + j] * h1i + w[2 + j] * h1r
    return out_r, out_i


def _renormalize(ur, ui, exps):
    fro2 = ur[0] * ur[0] + ui[0] * ui[0]
    for j in (1, 2, 3):
        fro2 = fro2 + ur[j] * ur[j] + ui[j] * ui[j]
    out = (fro2 < RENORM_LOW) | (fro2 > RENORM_HIGH)
    if not np.any(out):
        return ur, ui, exps
    _, e = np.frexp(np.sqrt(fro2))
    e = np.where(out, e, 0)
    scale = np.ldexp(1.0, -e)
    return [x * scale for x in ur], [x * scale for x in ui], exps + e


def _join(re, im):
    m = np.empty(re[0].shape + (2, 2), dtype=complex)
    for j, (a, b) in enumerate(((0, 0), (0, 1), (1, 0), (1, 1))):
        m[..., a, b] = re[j] + 1j * im[j]
    return m


def _split_rho(rho, batch):
    rho = np.broadcast_to(np.asarray(rho, dtype=complex), (batch, 2, 2))
    return (rho[:, 0, 0].real.copy(), rho[:, 1, 1].real.copy(),
            rho[:, 0, 1].real.copy(), rho[:, 0, 1].imag.copy())


def _join_rho(r00, r11, cr, ci):
    m = np.empty(r00.shape + (2, 2), dtype=complex)
    m[..., 0, 0] = r00
    m[..., 1, 1] = r11
    m[..., 0, 1] = cr + 1j * ci
    m[..., 1, 0] = cr - 1j * ci
    return m


@dataclass
class EnsembleResult:
    """Output of :func:`simulate_ensemble`; leading axis indexes trajectories.

    ``u_snapshots[j]`` is the propagator after ``snapshot_steps[j]`` steps
    and ``log_snapshots[j]`` the matching log normalisation.
    """

    indices: np.ndarray
    u_final: np.ndarray
    log_norm: np.ndarray
    rho_final: np.ndarray
    bins: np.ndarray | None = None
    snapshot_steps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    u_snapshots: np.ndarray | None = None
    log_snapshots: np.ndarray | None = None
    history_steps: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    rho_history: np.ndarray | None = None

    def __len__(self):
        return len(self.indices)

    def record(self, i, n_bins):
        bins = None if self.bins is None else self.bins[i]
        hist = None if self.rho_history is None else self.rho_history[:, i]
        return TrajectoryRecord(bins, self.rho_final[i], self.u_final[i],
                                float(self.log_norm[i]), n_bins, hist)


def _check_steps(n_steps, every, name):
    """Step counts at which to record: every ``every`` steps, or an explicit
    increasing list of step counts."""
    if every is None:
        return np.zeros(0, dtype=int)
    if np.ndim(every) == 1:
        steps = np.asarray(every, dtype=int)
        if np.any(np.diff(steps) <= 0) or (len(steps) and (steps[0] < 1 or steps[-1] > n_steps)):
            raise DomainError(f"{name} must be increasing within [1, n_steps]")
        return steps
    if int(every) < 1:
        raise DomainError(f"{name} must be >= 1")
    return np.arange(int(every), n_steps + 1, int(every))


def _run_batch(tab, rho0, n_steps, uniforms=None, fixed_bins=None, snapshot_every=None,
               history_stride=None, keep_bins=False, track_rho=True):
    """Core loop.  Exactly one of ``uniforms`` (a callable returning the next
    block of uniforms, shape ``(batch, length)``) or ``fixed_bins`` is given."""
    batch = len(fixed_bins) if fixed_bins is not None else uniforms.batch
    ur = [np.ones(batch), np.zeros(batch), np.zeros(batch), np.ones(batch)]
    ui = [np.zeros(batch) for _ in range(4)]
    exps = np.zeros(batch, dtype=np.int64)
    rho = _split_rho(rho0, batch) if track_rho else None

    snap_steps = _check_steps(n_steps, snapshot_every, "snapshot_every")
    hist_steps = _check_steps(n_steps, history_stride, "history_stride")
    u_snaps = np.empty((len(snap_steps), batch, 2, 2), dtype=complex)
    log_snaps = np.empty((len(snap_steps), batch))
    rho_hist = np.empty((len(hist_steps), batch, 2, 2), dtype=complex) if track_rho else None
    bins_out = np.empty((batch, n_steps), dtype=np.int32) if keep_bins else None
    snap_pos = hist_pos = 0
    block = None
    for step in range(n_steps):
        if fixed_bins is not None:
            k = fixed_bins[:, step]
        else:
            off = step % UNIFORM_BLOCK
            if off == 0:
                block = uniforms.next_block(min(UNIFORM_BLOCK, n_steps - step))
            wl, wr = _charge_weights(tab, rho[0], rho[1], rho[2])
            k = _inverse_cdf(tab, wl, wr, block[:, off])
        if track_rho:
            rho = _free_rho(tab, *_measure_rho(tab, k, *rho))
        ur, ui = _propagate_u(tab, k, ur, ui)
        ur, ui, exps = _renormalize(ur, ui, exps)
        if keep_bins:
            bins_out[:, step] = k
        done = step + 1
        if snap_pos < len(snap_steps) and snap_steps[snap_pos] == done:
            u_snaps[snap_pos] = _join(ur, ui)
            log_snaps[snap_pos] = exps * LN2
            snap_pos += 1
        if track_rho and hist_pos < len(hist_steps) and hist_steps[hist_pos] == done:
            rho_hist[hist_pos] = _join_rho(*rho)
            hist_pos += 1
    return dict(
        u_final=_join(ur, ui),
        log_norm=exps * LN2,
        rho_final=_join_rho(*rho) if track_rho else None,
        bins=bins_out,
        snapshot_steps=snap_steps,
        u_snapshots=u_snaps if len(snap_steps) else None,
        log_snapshots=log_snaps if len(snap_steps) else None,
        history_steps=hist_steps,
        rho_history=rho_hist if (track_rho and len(hist_steps)) else None,
    )


class _UniformSource:
    def __init__(self, generators):
        self.generators = generators
        self.batch = len(generators)

    def next_block(self, length):
        out = np.empty((self.batch, length))
        for i, g in enumerate(self.generators):
            out[i] = g.random(length)
        return out


def sample_bin(model: QpcModel, qubit: QubitModel, rho, rng):
    """Draw one current bin for state ``rho`` by inverse-CDF sampling of
    ``P_L(k) <L|rho|L> + P_R(k) <R|rho|R>``."""
    rho = check_density(rho)
    tab = StepTables(model, qubit)
    r00, r11, cr, _ = _split_rho(rho, 1)
    wl, wr = _charge_weights(tab, r00, r11, cr)
    u = _as_generator(rng).random(1)
    return int(_inverse_cdf(tab, wl, wr, u)[0])


def apply_step(rho, u):
    """Conditioned update ``u rho u^H / Tr(u rho u^H)``."""
    rho = as_mat2(rho)
    u = as_mat2(u)
    new = u @ rho @ dagger(u)
    tr = np.trace(new).real
    if not tr > TRACE_FLOOR:
        raise ImpossibleOutcomeError(f"outcome probability {tr} vanishes")
    new = new / tr
    return 0.5 * (new + dagger(new))


def run_trajectory(model: QpcModel, qubit: QubitModel, rho0, n_steps, rng,
                   record_history=False, history_stride=DEFAULT_HISTORY_STRIDE):
    """Generate one record of ``n_steps`` detector readings.

    Each step samples a bin from the current state, applies the matching
    measurement operator and then the free evolution over ``delta_t``.  ``u_total`` is kept
    within range by exact power-of-two rescaling; ``log_norm`` is the
    accumulated log of the removed factors.
    """
    if int(n_steps) < 1:
        raise DomainError("n_steps must be >= 1")
    rho0 = check_density(rho0)
    tab = StepTables(model, qubit)
    res = _run_batch(tab, rho0, int(n_steps), uniforms=_UniformSource([_as_generator(rng)]),
                     history_stride=history_stride if record_history else None,
                     keep_bins=True)
    hist = res["rho_history"][:, 0] if res["rho_history"] is not None else None
    return TrajectoryRecord(res["bins"][0], res["rho_final"][0], res["u_final"][0],
                            float(res["log_norm"][0]), model.n_bins, hist)


def flip_record(record):
    """Mirror every reading about the central current."""
    if isinstance(record, TrajectoryRecord):
        return TrajectoryRecord(record.n_bins - 1 - np.asarray(record.bins), record.rho_final,
                                record.u_total, record.log_norm, record.n_bins, record.rho_history)
    raise DomainError("flip_record expects a TrajectoryRecord")


def replay_record(model: QpcModel, qubit: QubitModel, bins):
    """Propagator of a given record, computed exactly as during generation
    (same renormalisation schedule).  Returns ``(u_total, log_norm)``; for
    a 2-D ``bins`` array the outputs are batched."""
    bins = np.asarray(bins, dtype=np.intp)
    single = bins.ndim == 1
    bins = np.atleast_2d(bins)
    if bins.size and (bins.min() < 0 or bins.max() >= model.n_bins):
        raise DomainError("bin index out of range")
    tab = StepTables(model, qubit)
    if bins.shape[1] == 0:
        u = np.broadcast_to(IDENTITY, (bins.shape[0], 2, 2)).copy()
        logn = np.zeros(bins.shape[0])
    else:
        res = _run_batch(tab, None, bins.shape[1], fixed_bins=bins, track_rho=False)
        u, logn = res["u_final"], res["log_norm"]
    if single:
        return u[0], float(logn[0])
    return u, logn


def _ensemble_chunk(args):
    model, qubit, rho0, n_steps, master_seed, indices, opts = args
    tab = StepTables(model, qubit)
    gens = [RngStream(master_seed, int(i)).generator() for i in indices]
    res = _run_batch(tab, rho0, n_steps, uniforms=_UniformSource(gens), **opts)
    return res


def simulate_ensemble(model: QpcModel, qubit: QubitModel, rho0, n_steps, n_trajectories,
                      master_seed, start_index=0, snapshot_every=None, history_stride=None,
                      keep_bins=False, workers=1, chunk_size=2000):
    """Run ``n_trajectories`` independent records.

    Trajectory ``i`` draws from ``RngStream(master_seed, start_index + i)``,
    so results are identical for any ``workers`` and ``chunk_size``.
    ``rho0`` is a single density matrix or one per trajectory.
    """
    n_steps = int(n_steps)
    if n_steps < 1:
        raise DomainError("n_steps must be >= 1")
    if n_trajectories < 1:
        raise DomainError("n_trajectories must be >= 1")
    rho0 = np.asarray(rho0, dtype=complex)
    per_traj = rho0.ndim == 3
    if per_traj and len(rho0) != n_trajectories:
        raise DomainError("need one initial state per trajectory")
    for r in (rho0 if per_traj else [rho0]):
        check_density(r)
    indices = np.arange(start_index, start_index + n_trajectories)
    opts = dict(snapshot_every=snapshot_every, history_stride=history_stride, keep_bins=keep_bins)
    tasks = []
    for lo in range(0, n_trajectories, chunk_size):
        sl = slice(lo, min(lo + chunk_size, n_trajectories))
        r0 = rho0[sl] if per_traj else rho0
        tasks.append((model, qubit, r0, n_steps, master_seed, indices[sl], opts))
    if workers > 1 and len(tasks) > 1:
        with cf.ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_ensemble_chunk, tasks))
    else:
        parts = [_ensemble_chunk(t) for t in tasks]

    def cat(key, axis=0):
        if parts[0][key] is None:
            return None
        return np.concatenate([p[key] for p in parts], axis=axis)

    return EnsembleResult(
        indices=indices,
        u_final=cat("u_final"),
        log_norm=cat("log_norm"),
        rho_final=cat("rho_final"),
        bins=cat("bins"),
        snapshot_steps=parts[0]["snapshot_steps"],
        u_snapshots=cat("u_snapshots", axis=1),
        log_snapshots=cat("log_snapshots", axis=1),
        history_steps=parts[0]["history_steps"],
        rho_history=cat("rho_history", axis=1),
    )


def enumerate_record_probabilities(model: QpcModel, qubit: QubitModel, rho0, n_steps):
    """Exact probability ``Tr(U^H U rho0)`` of every possible record.

    Returns ``(records, probs)`` with records in lexicographic bin order.
    Intended for toy models (``n_bins ** n_steps`` records).
    """
    rho0 = check_density(rho0)
    grids = np.meshgrid(*[np.arange(model.n_bins)] * n_steps, indexing="ij")
    records = np.stack([g.ravel() for g in grids], axis=1)
    u, logn = replay_record(model, qubit, records)
    gram = dagger(u) @ u
    probs = np.real(np.einsum("rij,ji->r", gram, rho0)) * np.exp(2 * logn)
    return records, probs


def dump_records(path, bins, header):
    """Write one comma-separated record per line after a ``# config <hash>`` header."""
    digest = hashlib.sha256(header.encode()).hexdigest()[:16]
    with open(path, "w", newline="\n") as fh:
        fh.write(f"# config {digest}\n")
        for row in np.asarray(bins):
            fh.write(",".join(str(int(b)) for b in row) + "\n")


def load_records(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            rows.append([int(x) for x in line.split(",")])
    return np.array(rows, dtype=np.intp)


# continuous-limit integrators


def _expect(rho, op):
    return np.real(np.einsum("...ij,ji->...", rho, op))


def sme_step(rho, qubit: QubitModel, tau_m, dt, dW):
    """One Euler-Maruyama step of the Ito stochastic master equation.

    ``drho = -i[H, rho] dt + (sn rho sn - rho) dt/(4 tau_m)
    + (sn rho + rho sn - 2<sn> rho) dW/(2 sqrt(tau_m))``

    Works on a single state or a batch ``(..., 2, 2)`` with matching ``dW``.
    The result is re-Hermitised and trace-normalised.
    """
    rho = np.asarray(rho, dtype=complex)
    dW = np.asarray(dW, dtype=float)[..., None, None]
    sn = sigma_n(qubit.beta)
    ham = qubit.hamiltonian
    mean = _expect(rho, sn)[..., None, None]
    comm = ham @ rho - rho @ ham
    anti = sn @ rho + rho @ sn
    new = (rho - 1j * comm * dt
           + (sn @ rho @ sn - rho) * (dt / (4 * tau_m))
           + (anti - 2 * mean * rho) * (dW / (2 * np.sqrt(tau_m))))
    new = 0.5 * (new + dagger(new))
    tr = np.real(np.trace(new, axis1=-2, axis2=-1))[..., None, None]
    return new / tr


def sde_u_step(u_total, rho, qubit: QubitModel, tau_m, dt, dW):
    """Euler-Maruyama step of the propagator equation
    ``dU = ([<sn> dt/(2 tau_m) + dW/(2 sqrt(tau_m))] sn - i H dt) U``,
    sharing the innovation ``dW`` with the paired :func:`sme_step`."""
    u_total = np.asarray(u_total, dtype=complex)
    sn = sigma_n(qubit.beta)
    mean = _expect(np.asarray(rho, dtype=complex), sn)
    drive = (mean * dt / (2 * tau_m) + np.asarray(dW) / (2 * np.sqrt(tau_m)))[..., None, None]
    gen = drive * sn - 1j * qubit.hamiltonian * dt
    return u_total + gen @ u_total


def signal_kraus_step(qubit: QubitModel, tau_m, dt, dy):
    """Exact propagator for one step of a continuous record ``dy``
    (``dy = <sn> dt + sqrt(tau_m) dW``): ``exp(-i H dt) exp(dy sn/(2 tau_m))``
    up to a scalar factor, matching the read-then-evolve order of the
    binned engine."""
    a = np.asarray(dy, dtype=float)[..., None, None] / (2 * tau_m)
    sn = sigma_n(qubit.beta)
    meas = np.cosh(a) * IDENTITY + np.sinh(a) * sn
    half = 0.5 * qubit.energy * dt
    free = np.diag([np.exp(1j * half), np.exp(-1j * half)])
    return free @ meas


def run_sme(qubit: QubitModel, tau_m, rho0, dt, dW, track_u=True, path_stride=1):
    """Integrate the SME (and optionally the propagator SDE) along noise
    increments ``dW`` of shape ``(batch, n_steps)``.

    Returns ``(rho_path, u_final, signal)`` where ``rho_path`` holds the
    state every ``path_stride`` steps starting at step 0, shape
    ``(n_steps // path_stride + 1, batch, 2, 2)``, and ``signal`` holds the
    record increments ``dy = <sn> dt + sqrt(tau_m) dW``.
    """
    dW = np.atleast_2d(np.asarray(dW, dtype=float))
    batch, n = dW.shape
    rho = np.broadcast_to(np.asarray(rho0, dtype=complex), (batch, 2, 2)).copy()
    u = np.broadcast_to(IDENTITY, (batch, 2, 2)).copy()
    sn = sigma_n(qubit.beta)
    if path_stride < 1:
        raise DomainError(f"path_stride must be >= 1, got {path_stride}")
    path = np.empty((n // path_stride + 1, batch, 2, 2), dtype=complex)
    path[0] = rho
    signal = np.empty((batch, n))
    for j in range(n):
        signal[:, j] = _expect(rho, sn) * dt + np.sqrt(tau_m) * dW[:, j]
        if track_u:
            u = sde_u_step(u, rho, qubit, tau_m, dt, dW[:, j])
            norm = np.linalg.norm(u, axis=(-2, -1))[..., None, None]
            u = u / norm
        rho = sme_step(rho, qubit, tau_m, dt, dW[:, j])
        if (j + 1) % path_stride == 0:
            path[(j + 1) // path_stride] = rho
    return path, (u if track_u else None), signal


def brownian_increments(rng, batch, n_steps, dt):
    """Gaussian increments of variance ``dt`` via the inverse normal CDF."""
    from scipy.special import ndtri

    g = _as_generator(rng)
    u = g.random((batch, n_steps))
    # keep away from 0 so ndtri stays finite
    u = np.where(u == 0.0, np.finfo(float).tiny, u)
    return ndtri(u) * np.sqrt(dt)
