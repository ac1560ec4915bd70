"""Phenomenological QPC detector: binned Gaussian current distributions and
the per-step propagators built from them."""

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import DomainError
from .qubit import QubitModel, charge_states, sigma_n

CHARGE_STATES = ("L", "R")


@dataclass(frozen=True)
class QpcModel:
    """Binned detector model.

    Currents are measured in units where the bin width ``delta_I`` is 1 by
    default.  Bin centres sit symmetrically about the midpoint
    ``i_center = (i_mean_L + i_mean_R)/2``, so mirroring a bin index
    ``k -> n_bins - 1 - k`` mirrors the current about ``i_center``.

    Attributes
    ----------
    i_mean_L, i_mean_R : float
        Mean current for the qubit in ``|L>`` and ``|R>``; ``i_mean_R > i_mean_L``.
    sigma_bins : float
        Standard deviation of each current distribution, in bins.
    n_bins : int
        Number of discrete current values.
    delta_t : float
        Duration of one detector step.
    delta_I : float
        Bin width.
    """

    i_mean_L: float
    i_mean_R: float
    sigma_bins: float
    n_bins: int
    delta_t: float
    delta_I: float = 1.0

    def __post_init__(self):
        if int(self.n_bins) != self.n_bins or self.n_bins < 3:
            raise DomainError(f"n_bins must be an integer >= 3, got {self.n_bins}")
        if not self.sigma_bins > 0:
            raise DomainError("sigma_bins must be positive")
        if not self.delta_t > 0:
            raise DomainError("delta_t must be positive")
        if not self.delta_I > 0:
            raise DomainError("delta_I must be positive")
        if not self.i_mean_R > self.i_mean_L:
            raise DomainError("i_mean_R must exceed i_mean_L")

    @classmethod
    def from_coupling(cls, coupling, energy, n_bins=100, sigma_bins=10.0,
                      delta_t_factor=0.1):
        """Build the model from the dimensionless coupling ``E tau_m / (2 pi)``.

        The step is ``delta_t = delta_t_factor * pi / E`` and the peak
        separation is chosen so that the measurement time equals
        ``coupling * 2 pi / E``.
        """
        if not (coupling > 0 and np.isfinite(coupling)):
            raise DomainError(f"coupling must be positive, got {coupling}")
        if not (energy > 0 and np.isfinite(energy)):
            raise DomainError(f"energy must be positive, got {energy}")
        if not delta_t_factor > 0:
            raise DomainError("delta_t_factor must be positive")
        delta_t = delta_t_factor * np.pi / energy
        tau_m = coupling * 2 * np.pi / energy
        sigma = float(sigma_bins)
        separation = 2 * sigma * np.sqrt(delta_t / tau_m)
        return cls(-separation / 2, separation / 2, float(sigma_bins), int(n_bins), delta_t)

    @property
    def sigma(self):
        return self.sigma_bins * self.delta_I

    @property
    def i_center(self):
        return 0.5 * (self.i_mean_L + self.i_mean_R)

    @property
    def delta_I_bar(self):
        return self.i_mean_R - self.i_mean_L

    @property
    def tau_m(self):
        return 4 * self.sigma ** 2 * self.delta_t / self.delta_I_bar ** 2

    def coupling(self, energy):
        return energy * self.tau_m / (2 * np.pi)

    @cached_property
    def bin_centers(self):
        k = np.arange(self.n_bins)
        return self.i_center + (k - (self.n_bins - 1) / 2) * self.delta_I

    def mirror_bin(self, k):
        return self.n_bins - 1 - np.asarray(k)

    def gaussian_density(self, current, state):
        """Unnormalised probability of one bin, ``delta_I`` times the Gaussian density."""
        mean = self._mean(state)
        pref = self.delta_I / (self.sigma * np.sqrt(2 * np.pi))
        return pref * np.exp(-((np.asarray(current) - mean) ** 2) / (2 * self.sigma ** 2))

    def _mean(self, state):
        if state == "L":
            return self.i_mean_L
        if state == "R":
            return self.i_mean_R
        raise DomainError(f"charge state must be 'L' or 'R', got {state!r}")

    @cached_property
    def _pmfs(self):
        w = self.gaussian_density(self.bin_centers, "L")
        w = w / w.sum()
        # the grid is symmetric about i_center, so R is the exact mirror of L
        out = {"L": w, "R": w[::-1].copy()}
        for v in out.values():
            v.setflags(write=False)
        return out

    def current_pmf(self, state):
        """Probability of each bin given the qubit is in charge state ``state``."""
        self._mean(state)
        return self._pmfs[state]

    def truncated_mass(self, state):
        """Gaussian probability mass lying outside the bin grid."""
        from scipy.special import ndtr

        mean = self._mean(state)
        lo = self.bin_centers[0] - 0.5 * self.delta_I
        hi = self.bin_centers[-1] + 0.5 * self.delta_I
        return float(ndtr((lo - mean) / self.sigma) + ndtr(-(hi - mean) / self.sigma))

    @cached_property
    def _cdfs(self):
        out = {}
        for state in CHARGE_STATES:
            c = np.cumsum(self._pmfs[state])
            c[-1] = 1.0
            c.setflags(write=False)
            out[state] = c
        return out

    def current_cdf(self, state):
        self._mean(state)
        return self._cdfs[state]

    def _check_bin(self, k):
        if int(k) != k or not 0 <= k < self.n_bins:
            raise DomainError(f"bin index {k} outside [0, {self.n_bins})")
        return int(k)

    def kraus_table(self, beta):
        """Measurement operators for every bin, shape ``(n_bins, 2, 2)``, real."""
        ket_r, ket_l = charge_states(beta)
        proj_r = np.outer(ket_r, ket_r.conj()).real
        proj_l = np.outer(ket_l, ket_l.conj()).real
        amp_l = np.sqrt(self._pmfs["L"])
        amp_r = np.sqrt(self._pmfs["R"])
        return amp_l[:, None, None] * proj_l + amp_r[:, None, None] * proj_r

    def kraus_for_bin(self, beta, k):
        """Measurement operator ``sqrt(P_L) |L><L| + sqrt(P_R) |R><R|`` for bin ``k``."""
        k = self._check_bin(k)
        return self.kraus_table(beta)[k].astype(complex)

    def hamiltonian_step(self, qubit: QubitModel):
        """Exact free evolution ``exp(-i H delta_t)`` over one step."""
        half = 0.5 * qubit.energy * self.delta_t
        return np.diag([np.exp(1j * half), np.exp(-1j * half)])

    def step_table(self, qubit: QubitModel):
        """Step propagators ``free_evolution @ kraus`` for all bins, complex."""
        return self.hamiltonian_step(qubit) @ self.kraus_table(qubit.beta)

    def step_propagator(self, qubit: QubitModel, k):
        """One step: read the detector, then evolve freely for ``delta_t``."""
        k = self._check_bin(k)
        return self.hamiltonian_step(qubit) @ self.kraus_for_bin(qubit.beta, k)

    def linearized_kraus(self, beta, current):
        """First-order measurement operator ``1 + dt (I - Ibar)/(tau_m dIbar) sigma_n``
        (unnormalised), used by the continuous-limit code paths."""
        g = self.delta_t * (current - self.i_center) / (self.tau_m * self.delta_I_bar)
        return np.eye(2, dtype=complex) + g * sigma_n(beta)
