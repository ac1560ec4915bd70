"""Experiment configuration, presets and the deterministic runner."""

import hashlib
import json
import math
import os
import shutil
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field, fields, replace
from decimal import Decimal
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .analysis import (
    charge_basis_axis,
    charge_basis_fidelity_slope,
    decompose_batch,
    fidelity_curve,
    fixed_basis_average_fidelity,
    spectral_coefficients,
    write_avg_fidelity_csv,
    write_axes_csv,
    write_fidelity_curve_csv,
    write_spectra_csv,
)
from .csvio import write_rows
from .decoherence import (
    DecoherenceModel,
    f_max_estimate,
    fidelity_from_super,
    run_decohering_trajectories,
    write_fmax_csv,
)
from .errors import ConfigError
from .qpc import QpcModel
from .qubit import QubitModel, density_from_bloch, purity, unit_vector
from .tomography import reconstruct, write_estimate_csv, write_samples_csv
from .trajectory import enumerate_record_probabilities, simulate_ensemble

PURITY_THRESHOLD = 1 - 1e-5
MAX_SEED = 2 ** 64 - 1

PRESETS = {
    "fig2_scatter": "measurement axes for a grid of couplings and angles",
    "fig3_fidelity": "mean fidelity against time for one angle",
    "fig4_spectra": "zonal harmonic coefficients of the axis distribution",
    "fig5_avg_fidelity": "average fidelity of guessing along fixed axes",
    "fig6_coupling_sweep": "charge-basis average fidelity against coupling",
    "fig7_slope": "small-coupling slope of the charge-basis fidelity against angle",
    "fig8_decoherence": "maximum fidelity under relaxation against tau_d / tau_m",
    "qst_demo": "state tomography from stochastic-basis results",
    "toy_enumeration": "sampled against enumerated record probabilities of a toy detector",
}

# keys that must be present for each preset (beta may come as beta or beta_over_pi)
REQUIRED = {
    "fig3_fidelity": ("beta",),
    "fig4_spectra": ("beta",),
    "fig5_avg_fidelity": ("beta",),
    "fig6_coupling_sweep": ("beta",),
}

NO_DECOHERENCE = frozenset(PRESETS) - {"fig8_decoherence"}

PRESET_DEFAULTS = {
    "fig2_scatter": dict(n_trajectories=200, couplings=(0.01, 0.2, 5.0),
                         betas_over_pi=(0.0, 0.125, 0.25, 0.375, 0.5)),
    "fig3_fidelity": dict(coupling=5.0, t_curve_over_tau_m=6.0, curve_step_over_tau_m=0.1),
    "fig4_spectra": dict(coupling=5.0),
    "fig5_avg_fidelity": dict(coupling=5.0, axes_theta_over_pi=(0.0, 0.25, 0.5)),
    "fig6_coupling_sweep": dict(couplings=(0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0)),
    "fig7_slope": dict(coupling=0.06,
                       betas_over_pi=(0.0, 0.0625, 0.125, 0.1875, 0.25, 0.3125, 0.375,
                                      0.4375, 0.5)),
    "fig8_decoherence": dict(coupling=5.0, delta_t_factor=0.025, n_trajectories=2000,
                             tau_d_over_tau_m=(0.25, 0.5, 1.0, 2.0, 4.0)),
    "qst_demo": dict(coupling=5.0, beta=math.acos(1 / math.sqrt(3)), initial_r=1.0,
                     initial_theta_over_pi=1 / 3, initial_phi_over_pi=0.25),
    "toy_enumeration": dict(coupling=0.5, beta_over_pi=0.25, n_bins=5, sigma_bins=1.0,
                            n_steps=3, n_trajectories=10 ** 6, initial_r=1.0,
                            initial_theta_over_pi=1 / 3, initial_phi_over_pi=0.25),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description.

    Angles given as ``*_over_pi`` are stored as exact decimals and turned
    into radians only when used.
    """

    preset: str
    beta: float | None = None
    beta_over_pi: Decimal | None = None
    betas_over_pi: tuple | None = None
    coupling: float | None = None
    couplings: tuple | None = None
    energy: float = 1.0
    n_trajectories: int = 10_000
    n_steps: int | None = None
    t_final_over_tau_m: float = 40.0
    t_curve_over_tau_m: float = 6.0
    curve_step_over_tau_m: float = 0.1
    n_bins: int = 100
    sigma_bins: float = 10.0
    delta_t_factor: float = 0.1
    seed: int = 20_070_101
    gamma_r: float = 0.0
    gamma_p: float = 0.0
    tau_d_over_tau_m: tuple | None = None
    axes_theta_over_pi: tuple | None = None
    phi_meas_over_pi: Decimal = Decimal(0)
    initial_r: float = 0.0
    initial_theta_over_pi: Decimal = Decimal(0)
    initial_phi_over_pi: Decimal = Decimal(0)
    n_max: int = 10
    output_dir: str | None = None
    workers: int = 1
    explicit: frozenset = field(default=frozenset(), compare=False)

    def beta_values(self):
        """Angles in radians for presets that sweep or fix ``beta``."""
        if self.betas_over_pi is not None and "beta" not in self.explicit:
            return [float(b) * math.pi for b in self.betas_over_pi]
        return [self.beta_radians()]

    def beta_radians(self):
        if self.beta_over_pi is not None:
            return float(self.beta_over_pi) * math.pi
        return float(self.beta if self.beta is not None else 0.0)

    def coupling_values(self):
        if self.couplings is not None and "coupling" not in self.explicit:
            return [float(c) for c in self.couplings]
        return [float(self.coupling)]

    def initial_state(self):
        bloch = self.initial_r * unit_vector(float(self.initial_theta_over_pi) * math.pi,
                                             float(self.initial_phi_over_pi) * math.pi)
        return density_from_bloch(bloch)

    def qpc(self, coupling):
        return QpcModel.from_coupling(coupling, self.energy, n_bins=self.n_bins,
                                      sigma_bins=self.sigma_bins,
                                      delta_t_factor=self.delta_t_factor)

    def steps_for(self, model: QpcModel, t_over_tau_m=None):
        """``n_steps`` if fixed, else enough steps to cover ``t_over_tau_m``
        (default ``t_final_over_tau_m``) measurement times."""
        if self.n_steps is not None and t_over_tau_m is None:
            return int(self.n_steps)
        t = self.t_final_over_tau_m if t_over_tau_m is None else t_over_tau_m
        return max(1, math.ceil(t * model.tau_m / model.delta_t - 1e-9))

    def echo(self):
        out = {}
        for f in fields(self):
            if f.name == "explicit":
                continue
            v = getattr(self, f.name)
            if isinstance(v, Decimal):
                v = str(v)
            elif isinstance(v, tuple):
                v = [str(x) if isinstance(x, Decimal) else x for x in v]
            out[f.name] = v
        return out


_FIELD_TYPES = {
    "preset": "str", "beta": "real", "beta_over_pi": "decimal", "betas_over_pi": "decimals",
    "coupling": "real", "couplings": "reals", "energy": "real", "n_trajectories": "int",
    "n_steps": "int", "t_final_over_tau_m": "real", "t_curve_over_tau_m": "real",
    "curve_step_over_tau_m": "real", "n_bins": "int", "sigma_bins": "real",
    "delta_t_factor": "real", "seed": "int", "gamma_r": "real", "gamma_p": "real",
    "tau_d_over_tau_m": "reals", "axes_theta_over_pi": "decimals",
    "phi_meas_over_pi": "decimal", "initial_r": "real", "initial_theta_over_pi": "decimal",
    "initial_phi_over_pi": "decimal", "n_max": "int", "output_dir": "str", "workers": "int",
}


def _convert(name, kind, value):
    def real(v):
        if isinstance(v, bool) or not isinstance(v, (int, Decimal)):
            raise ConfigError(f"field '{name}': expected a number, got {v!r}")
        x = float(v)
        if not math.isfinite(x):
            raise ConfigError(f"field '{name}': must be finite")
        return x

    def dec(v):
        if isinstance(v, bool) or not isinstance(v, (int, Decimal)):
            raise ConfigError(f"field '{name}': expected a number, got {v!r}")
        if not Decimal(v).is_finite():
            raise ConfigError(f"field '{name}': must be finite")
        return Decimal(v)

    if kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"field '{name}': expected a string")
        return value
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"field '{name}': expected an integer, got {value!r}")
        return value
    if kind == "real":
        return real(value)
    if kind == "decimal":
        return dec(value)
    if not isinstance(value, list) or not value:
        raise ConfigError(f"field '{name}': expected a non-empty list")
    conv = real if kind == "reals" else dec
    return tuple(conv(v) for v in value)


def _range_checks(cfg: ExperimentConfig):
    def need(cond, name, msg):
        if not cond:
            raise ConfigError(f"field '{name}': {msg}")

    need(cfg.energy > 0, "energy", "must be positive")
    need(cfg.n_trajectories >= 1, "n_trajectories", "must be >= 1")
    need(cfg.n_steps is None or cfg.n_steps >= 1, "n_steps", "must be >= 1")
    need(cfg.t_final_over_tau_m > 0, "t_final_over_tau_m", "must be positive")
    need(cfg.t_curve_over_tau_m > 0, "t_curve_over_tau_m", "must be positive")
    need(cfg.curve_step_over_tau_m > 0, "curve_step_over_tau_m", "must be positive")
    need(cfg.n_bins >= 3, "n_bins", "must be >= 3")
    need(cfg.sigma_bins > 0, "sigma_bins", "must be positive")
    need(cfg.delta_t_factor > 0, "delta_t_factor", "must be positive")
    need(0 <= cfg.seed <= MAX_SEED, "seed", "must be a 64-bit unsigned integer")
    need(cfg.gamma_r >= 0, "gamma_r", "must be non-negative")
    need(cfg.gamma_p >= 0, "gamma_p", "must be non-negative")
    need(0 <= cfg.initial_r <= 1, "initial_r", "must lie in [0, 1]")
    need(cfg.workers >= 1, "workers", "must be >= 1")
    need(cfg.n_max >= 0 and cfg.n_max % 2 == 0, "n_max", "must be a non-negative even integer")
    if cfg.coupling is not None:
        need(cfg.coupling > 0, "coupling", "must be positive")
    for c in cfg.couplings or ():
        need(c > 0, "couplings", "entries must be positive")
    for t in cfg.tau_d_over_tau_m or ():
        need(t > 0, "tau_d_over_tau_m", "entries must be positive")
    if cfg.beta is not None and cfg.beta_over_pi is not None:
        raise ConfigError("field 'beta': give either beta or beta_over_pi, not both")
    beta = cfg.beta_radians()
    need(0 <= beta <= math.pi / 2 + 1e-12, "beta", "must lie in [0, pi/2]")
    for b in cfg.betas_over_pi or ():
        need(0 <= b <= Decimal("0.5"), "betas_over_pi", "entries must lie in [0, 0.5]")
    if cfg.preset == "fig8_decoherence":
        need(cfg.beta_radians() == 0, "beta", "relaxation runs support beta = 0 only")
    if cfg.preset == "toy_enumeration":
        need(cfg.n_bins ** (cfg.n_steps or 1) <= 10 ** 6, "n_steps",
             "enumeration limited to 1e6 records")


def validate_config(raw_text, source="<config>"):
    """Parse TOML text into an :class:`ExperimentConfig`.

    Raises
    ------
    ConfigError
        On a parse error (with line and column), an unknown key, a missing
        required field or a value outside its range.
    """
    try:
        data = tomllib.loads(raw_text, parse_float=Decimal)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: parse error: {exc}") from None
    unknown = sorted(set(data) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(f"{source}: unknown key(s): {', '.join(unknown)}")
    if "preset" not in data:
        raise ConfigError(f"{source}: field 'preset' is required")
    preset = data["preset"]
    if preset not in PRESETS:
        raise ConfigError(f"{source}: field 'preset': unknown preset {preset!r}; "
                          f"choose from {', '.join(PRESETS)}")
    present = set(data)
    if "beta_over_pi" in present:
        present.add("beta")
    if "couplings" in present:
        present.add("coupling")
    for req in REQUIRED.get(preset, ()):
        if req not in present:
            raise ConfigError(f"{source}: field '{req}' is required for preset {preset}")

    values = {}
    for key, raw in PRESET_DEFAULTS.get(preset, {}).items():
        if key in ("beta", "beta_over_pi") and ({"beta", "beta_over_pi"} & set(data)):
            continue
        if key == "betas_over_pi" and ({"beta", "beta_over_pi"} & set(data)):
            continue
        if key in ("coupling", "couplings") and ({"coupling", "couplings"} & set(data)):
            continue
        kind = _FIELD_TYPES[key]
        if kind == "decimal":
            raw = Decimal(str(raw))
        elif kind == "decimals":
            raw = tuple(Decimal(str(x)) for x in raw)
        values[key] = raw
    for key, raw in data.items():
        values[key] = _convert(key, _FIELD_TYPES[key], raw)
    explicit = set(data)
    if "beta_over_pi" in explicit:
        explicit.add("beta")
    try:
        cfg = ExperimentConfig(**values, explicit=frozenset(explicit))
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if cfg.coupling is None and cfg.couplings is None:
        raise ConfigError(f"{source}: field 'coupling' is required for preset {preset}")
    try:
        _range_checks(cfg)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return validate_config(text, str(path))


def _tag(value):
    return format(value, "g") if isinstance(value, float) else str(value)


class _Runner:
    """Runs one preset into ``out_dir`` and collects manifest facts."""

    def __init__(self, cfg: ExperimentConfig, out_dir: Path):
        self.cfg = cfg
        self.out = out_dir
        self.purities = []
        self.facts = {}

    def ensemble(self, model, qubit, rho0, n_steps, **kw):
        res = simulate_ensemble(model, qubit, rho0, n_steps, self.cfg.n_trajectories,
                                self.cfg.seed, workers=self.cfg.workers, **kw)
        self.purities.append(float(np.mean(purity(res.rho_final))))
        return res

    def fig2_scatter(self):
        cfg = self.cfg
        for coupling in cfg.coupling_values():
            model = cfg.qpc(coupling)
            for beta_idx, beta in enumerate(cfg.beta_values()):
                qubit = QubitModel(cfg.energy, beta)
                res = self.ensemble(model, qubit, cfg.initial_state(), cfg.steps_for(model))
                dec = decompose_batch(res.u_final, with_rot=False)
                label = (_tag(cfg.betas_over_pi[beta_idx])
                         if cfg.betas_over_pi is not None and "beta" not in cfg.explicit
                         else _tag(beta))
                write_axes_csv(self.out / f"axes_coupling-{_tag(coupling)}_beta-{label}.csv",
                               dec, res.indices)

    def fig3_fidelity(self):
        cfg = self.cfg
        model = cfg.qpc(cfg.coupling_values()[0])
        qubit = QubitModel(cfg.energy, cfg.beta_radians())
        n_steps = cfg.steps_for(model)
        stride = max(1, round(cfg.curve_step_over_tau_m * model.tau_m / model.delta_t))
        last = min(n_steps, cfg.steps_for(model, cfg.t_curve_over_tau_m))
        snaps = np.arange(stride, last + 1, stride)
        res = self.ensemble(model, qubit, cfg.initial_state(), n_steps, snapshot_every=snaps)
        curve = fidelity_curve(res.u_snapshots, res.snapshot_steps, model.delta_t, model.tau_m)
        write_fidelity_curve_csv(self.out / "fidelity_curve.csv", curve)

    def fig4_spectra(self):
        cfg = self.cfg
        model = cfg.qpc(cfg.coupling_values()[0])
        qubit = QubitModel(cfg.energy, cfg.beta_radians())
        res = self.ensemble(model, qubit, cfg.initial_state(), cfg.steps_for(model))
        dec = decompose_batch(res.u_final, with_rot=False)
        orders, c, err = spectral_coefficients(dec.axis_theta, cfg.n_max)
        write_spectra_csv(self.out / "spectra.csv", orders, c, err)
        write_axes_csv(self.out / "axes.csv", dec, res.indices)

    def _avg_fidelity(self, model, beta, axis):
        qubit = QubitModel(self.cfg.energy, beta)
        res = self.ensemble(model, qubit, density_from_bloch(axis), self.cfg.steps_for(model))
        dec = decompose_batch(res.u_final, with_rot=False)
        return fixed_basis_average_fidelity(dec.result_direction, axis)

    def fig5_avg_fidelity(self):
        cfg = self.cfg
        model = cfg.qpc(cfg.coupling_values()[0])
        beta = cfg.beta_radians()
        phi = float(cfg.phi_meas_over_pi) * math.pi
        rows = []
        for theta_pi in cfg.axes_theta_over_pi:
            theta = float(theta_pi) * math.pi
            f_bar, err = self._avg_fidelity(model, beta, unit_vector(theta, phi))
            rows.append((beta, theta, f_bar, err))
        write_avg_fidelity_csv(self.out / "avg_fidelity.csv", rows)

    def fig6_coupling_sweep(self):
        cfg = self.cfg
        beta = cfg.beta_radians()
        axis = charge_basis_axis(beta)
        rows = []
        for coupling in cfg.coupling_values():
            f_bar, err = self._avg_fidelity(cfg.qpc(coupling), beta, axis)
            rows.append((coupling, beta, float(np.arccos(axis[2])), f_bar, err))
        write_rows(self.out / "coupling_sweep.csv",
                   ["coupling", "beta", "theta_meas", "F_bar", "stderr"], rows)

    def fig7_slope(self):
        cfg = self.cfg
        coupling = cfg.coupling_values()[0]
        model = cfg.qpc(coupling)
        rows = []
        for beta in cfg.beta_values():
            f_bar, err = self._avg_fidelity(model, beta, charge_basis_axis(beta))
            rows.append((beta, f_bar, err, charge_basis_fidelity_slope(f_bar, coupling),
                         err / coupling))
        write_rows(self.out / "slope.csv",
                   ["beta", "F_bar", "stderr", "slope", "slope_stderr"], rows)

    def fig8_decoherence(self):
        cfg = self.cfg
        model = cfg.qpc(cfg.coupling_values()[0])
        qubit = QubitModel(cfg.energy, 0.0)
        rho_vec = np.array([0.5, 0.5, 0.0, 0.0], dtype=complex)
        rows = []
        for ratio in cfg.tau_d_over_tau_m:
            tau_d = ratio * model.tau_m
            horizon = 12 * max(1.0, ratio)
            n_steps = cfg.steps_for(model, horizon)
            recs = run_decohering_trajectories(
                model, qubit, DecoherenceModel(1 / tau_d, cfg.gamma_p), rho_vec, n_steps,
                cfg.n_trajectories, cfg.seed)
            f = fidelity_from_super(recs.u_total)
            err = float(np.std(f, ddof=1) / np.sqrt(len(f))) if len(f) > 1 else 0.0
            rows.append((ratio, f_max_estimate(tau_d, model.tau_m), float(np.mean(f)), err))
        write_fmax_csv(self.out / "fmax.csv", rows)

    def qst_demo(self):
        cfg = self.cfg
        model = cfg.qpc(cfg.coupling_values()[0])
        qubit = QubitModel(cfg.energy, cfg.beta_radians())
        res = self.ensemble(model, qubit, cfg.initial_state(), cfg.steps_for(model))
        dec = decompose_batch(res.u_final, with_rot=False)
        write_samples_csv(self.out / "samples.csv", dec.result_direction)
        write_estimate_csv(self.out / "estimate.csv", reconstruct(dec.result_direction))

    def toy_enumeration(self):
        cfg = self.cfg
        model = cfg.qpc(cfg.coupling_values()[0])
        qubit = QubitModel(cfg.energy, cfg.beta_radians())
        n_steps = int(cfg.n_steps)
        rho0 = cfg.initial_state()
        records, exact = enumerate_record_probabilities(model, qubit, rho0, n_steps)
        res = self.ensemble(model, qubit, rho0, n_steps, keep_bins=True)
        codes = np.ravel_multi_index(tuple(res.bins.T), (model.n_bins,) * n_steps)
        counts = np.bincount(codes, minlength=len(records))
        n = cfg.n_trajectories
        emp = counts / n
        stderr = np.sqrt(exact * (1 - exact) / n)
        write_rows(self.out / "toy_records.csv",
                   ["record", "count", "empirical_prob", "exact_prob", "stderr"],
                   [("-".join(str(int(b)) for b in rec), c, e, x, s)
                    for rec, c, e, x, s in zip(records, counts, emp, exact, stderr)])
        # record plus mirrored record, for two orthogonal initial states
        flipped = np.ravel_multi_index(tuple(model.mirror_bin(records).T),
                                       (model.n_bins,) * n_steps)
        sums = []
        for bloch in ((0, 0, 1), (0, 0, -1)):
            _, p = enumerate_record_probabilities(model, qubit,
                                                  density_from_bloch(np.array(bloch, float)),
                                                  n_steps)
            sums.append(p + p[flipped])
        self.facts["pair_sum_max_difference"] = float(np.max(np.abs(sums[0] - sums[1])))
        self.facts["max_deviation_in_sigma"] = float(
            np.max(np.abs(emp - exact) / np.where(stderr > 0, stderr, np.inf)))


def _git_version():
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, timeout=5, cwd=Path(__file__).parent)
        if rev.returncode == 0:
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run_preset(cfg: ExperimentConfig, out_dir):
    """Run ``cfg`` and place its CSV files plus ``manifest.json`` in ``out_dir``.

    Output is staged in a temporary directory next to ``out_dir`` and moved
    into place only after the preset finished, so a failed run leaves no
    partial files.  Returns the manifest dictionary.
    """
    out_dir = Path(out_dir)
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=".weakmeas-", dir=out_dir.parent))
    try:
        start = time.perf_counter()
        runner = _Runner(cfg, stage)
        with np.errstate(invalid="raise", divide="raise", over="raise"):
            getattr(runner, cfg.preset)()
        wall = time.perf_counter() - start
        data_files = sorted(p.name for p in stage.iterdir())
        manifest = {
            "preset": cfg.preset,
            "config": cfg.echo(),
            "seed": cfg.seed,
            "version": _git_version(),
            "wall_time_s": wall,
            "files": {name: _sha256(stage / name) for name in data_files},
        }
        if cfg.preset in NO_DECOHERENCE and runner.purities:
            lowest = min(runner.purities)
            manifest["purity_check"] = {"min_mean_purity": lowest,
                                        "threshold": PURITY_THRESHOLD,
                                        "passed": bool(lowest >= PURITY_THRESHOLD)}
        manifest.update(runner.facts)
        (stage / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        out_dir.mkdir(parents=True, exist_ok=True)
        for p in stage.iterdir():
            os.replace(p, out_dir / p.name)
        return manifest
    finally:
        shutil.rmtree(stage, ignore_errors=True)


def with_overrides(cfg: ExperimentConfig, **overrides):
    """Copy of ``cfg`` with non-``None`` overrides applied and re-checked."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    if not changes:
        return cfg
    new = replace(cfg, **changes)
    _range_checks(new)
    return new
