"""Experiment orchestration: config parsing, runs, CSV and metadata output.

Each run writes one CSV (fixed float format, deterministic row order) plus a
JSON metadata sidecar capturing every config field, derived quantities, the
library version and wall time.  Corrector batches are scheduled on a worker
pool of the configured size; all file writes happen in the orchestrating
thread after the numerical work.
"""

import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import scipy.sparse as sparse

from . import __version__
from ._kernels import numba_enabled
from .coefficients import BUILTIN_NAMES, CoefficientSpec, build_coefficient
from .correctors import compute_all_correctors
from .effective import assemble_kernel, eta_estimator, local_coefficient
from .fem import DEFAULT_SOLVER_TOL, FeSpace, mass_matrix
from .geometry import build_uniform_mesh, refine_uniform
from .solvers import _Factor, make_solver, periodic_limit_check, worst_case_error

__all__ = [
    "ExperimentConfig",
    "ConfigError",
    "parse_config",
    "run_convergence",
    "run_resonance",
    "run_periodic_check",
    "run_single",
    "run_experiment",
    "export_plot_files",
]

EXPERIMENTS = ("convergence", "resonance", "periodic_check", "single_run")

POWER_ITERATION_CAP = 500

_FLOAT_FMT = "%.16e"


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    experiment: str = "convergence"
    coarse_n: list = field(default_factory=lambda: [2, 4, 8, 16])
    fine_levels: int = 3
    ell: int = 2
    coefficient: CoefficientSpec = field(default_factory=CoefficientSpec)
    eps_list: list = field(default_factory=lambda: [2.0 ** -k for k in range(7)])
    ell_list: list | None = None
    tol: float = 1e-6
    out_dir: str = "out"
    threads: int = 1
    allow_shallow_fine: bool = False
    max_global_dofs: int | None = None

    @property
    def fine_n(self):
        return max(self.coarse_n) * 2 ** self.fine_levels

    def as_dict(self):
        d = asdict(self)
        d["coefficient"] = self.coefficient.as_dict()
        return d


_DEFAULT_COEFF = {
    "convergence": "exp1_twofreq",
    "resonance": "exp2_resonance",
    "periodic_check": "laminate",
    "single_run": "exp1_twofreq",
}

_CONFIG_KEYS = {
    "experiment", "coarse_n", "fine_levels", "ell", "coefficient", "eps_list",
    "ell_list", "tol", "out_dir", "threads", "allow_shallow_fine",
    "max_global_dofs",
}
_COEFF_KEYS = {"name", "eps1", "eps2", "eps", "value", "low", "high", "period", "path"}


def parse_config(path=None, overrides=None, experiment=None):
    """Resolve a config from an optional JSON file plus flag overrides.

    Unknown keys are rejected (no silent ignore); invalid combinations
    produce messages naming the offending field.  Flags win over the file.
    """
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}")
        if not isinstance(raw, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
    for key in raw:
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")

    cfg = ExperimentConfig()
    if experiment is not None:
        cfg.experiment = experiment
    if "experiment" in raw:
        cfg.experiment = raw["experiment"]
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {cfg.experiment!r}")

    if cfg.experiment == "resonance":
        cfg.coarse_n = [16]
    elif cfg.experiment == "periodic_check":
        cfg.coarse_n = [4]
    elif cfg.experiment == "single_run":
        cfg.coarse_n = [8]
    cfg.coefficient = CoefficientSpec(name=_DEFAULT_COEFF[cfg.experiment])

    def apply(d, source):
        coeff_d = d.get("coefficient", {})
        if coeff_d:
            if not isinstance(coeff_d, dict):
                raise ConfigError(f"{source}: coefficient must be an object")
            for k in coeff_d:
                if k not in _COEFF_KEYS:
                    raise ConfigError(f"{source}: unknown coefficient key {k!r}")
            for k, v in coeff_d.items():
                setattr(cfg.coefficient, k, v)
        for k, v in d.items():
            if k in ("experiment", "coefficient"):
                continue
            setattr(cfg, k, v)

    apply(raw, f"config file {path}")
    if overrides:
        apply(overrides, "flags")

    _validate(cfg)
    return cfg


def _validate(cfg):
    if not cfg.coarse_n or not all(isinstance(n, int) and n >= 1 for n in cfg.coarse_n):
        raise ConfigError("coarse_n must be a nonempty list of integers >= 1")
    if not isinstance(cfg.fine_levels, int) or cfg.fine_levels < 0:
        raise ConfigError("fine_levels must be a nonnegative integer")
    if cfg.fine_levels < 2 and not cfg.allow_shallow_fine:
        raise ConfigError(
            "fine_levels: need >= 2 refinement levels over the finest coarse mesh "
            "(correctors are trivial otherwise); set allow_shallow_fine to override")
    if not isinstance(cfg.ell, int) or cfg.ell < 0:
        raise ConfigError("ell must be a nonnegative integer")
    if not (0.0 < cfg.tol < 1.0):
        raise ConfigError("tol must lie in (0, 1)")
    if not isinstance(cfg.threads, int) or cfg.threads < 1:
        raise ConfigError("threads must be a positive integer")
    if cfg.coefficient.name not in BUILTIN_NAMES:
        raise ConfigError(
            f"coefficient name must be one of {BUILTIN_NAMES}, got {cfg.coefficient.name!r}")
    fine_n = cfg.fine_n
    for n in cfg.coarse_n:
        q, r = divmod(fine_n, n)
        if r != 0 or q & (q - 1):
            raise ConfigError(
                f"coarse_n: fine mesh n={fine_n} is not a power-of-two refinement of n={n}")
    if cfg.experiment == "resonance":
        if not cfg.eps_list or not all(e > 0 for e in cfg.eps_list):
            raise ConfigError("eps_list must be a nonempty list of positive numbers")


# ---------------------------------------------------------------------------
# shared per-row machinery


def _row_meshes(cfg, n):
    levels = int(math.log2(cfg.fine_n // n))
    coarse = build_uniform_mesh(n)
    fine = refine_uniform(coarse, levels)
    return coarse, fine, levels


def _measure_row(cfg, n, coeff_spec):
    """Effective model plus the four worst-case errors for one coarse mesh."""
    coarse, fine, levels = _row_meshes(cfg, n)
    cs, fs = FeSpace(coarse, "dirichlet"), FeSpace(fine, "dirichlet")
    coeff = build_coefficient(coeff_spec, fine)
    cset = compute_all_correctors(cfg.ell, cs, fs, coeff, threads=cfg.threads)
    tensor = local_coefficient(assemble_kernel(cset, coeff))
    report = eta_estimator(tensor, coarse)

    M = mass_matrix(fine)
    mass_factor = _Factor(sparse.csc_matrix(M), what="mass matrix")
    reference = make_solver("reference", None, fs, coeff)
    sigmas, flags, iters = {}, {}, {}
    for kind in ("standard_fem", "local", "quasilocal", "best_approximation"):
        handle = make_solver(kind, cs, fs, coeff, ell=cfg.ell, correctors=cset,
                             tensor_field=tensor if kind == "local" else None)
        w = worst_case_error(reference, handle, tol=cfg.tol,
                             max_iter=POWER_ITERATION_CAP, mass=M,
                             mass_factor=mass_factor)
        sigmas[kind] = w.sigma
        flags[kind] = w.converged
        iters[kind] = w.iterations
    return {
        "H": coarse.mesh_size_H,
        "fine_levels": levels,
        "sigmas": sigmas,
        "flags": flags,
        "iterations": iters,
        "eta": report.eta,
        "alpha_H": report.alpha_H,
        "beta_H": report.beta_H,
        "max_face_jump": report.max_face_jump,
    }


def _flag_string(flags):
    order = ("standard_fem", "local", "quasilocal", "best_approximation")
    return "".join("1" if flags[k] else "0" for k in order)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def _write_meta(path, cfg, extra):
    meta = {
        "config": cfg.as_dict(),
        "library_version": __version__,
        "numba_enabled": numba_enabled(),
        "linear_solver_tol": DEFAULT_SOLVER_TOL,
        "power_iteration": {
            "tolerance": cfg.tol,
            "cap": POWER_ITERATION_CAP,
            "start_vector": "all-ones, mass-normalized",
            "note": ("worst-case error measured over the fine P1 space, a lower "
                     "bound for the L2 supremum"),
        },
    }
    meta.update(extra)
    with open(path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(x):
    return _FLOAT_FMT % x


def run_convergence(cfg):
    """Worst-case errors and estimator values over the configured H sweep."""
    t0 = time.time()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, row_meta = [], []
    for n in sorted(cfg.coarse_n):
        r = _measure_row(cfg, n, cfg.coefficient)
        s = r["sigmas"]
        rows.append([
            _fmt(r["H"]), _fmt(s["standard_fem"]), _fmt(s["local"]),
            _fmt(s["quasilocal"]), _fmt(s["best_approximation"]),
            _fmt(r["eta"]), _fmt(r["alpha_H"]), _fmt(r["beta_H"]),
            _flag_string(r["flags"]),
        ])
        row_meta.append({"coarse_n": n, "fine_levels": r["fine_levels"],
                         "power_iterations": r["iterations"]})
    csv_path = out / "convergence.csv"
    _write_csv(csv_path, ["H", "err_fem", "err_local", "err_quasilocal",
                          "err_best", "eta", "alpha_H", "beta_H",
                          "converged_flags"], rows)
    meta_path = out / "convergence.meta.json"
    _write_meta(meta_path, cfg, {"rows": row_meta, "wall_time_s": time.time() - t0})
    return {"csv": str(csv_path), "meta": str(meta_path)}


def run_single(cfg):
    """One coarse mesh, same measurements and columns as a convergence row."""
    t0 = time.time()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = sorted(cfg.coarse_n)[0]
    r = _measure_row(cfg, n, cfg.coefficient)
    s = r["sigmas"]
    rows = [[_fmt(r["H"]), _fmt(s["standard_fem"]), _fmt(s["local"]),
             _fmt(s["quasilocal"]), _fmt(s["best_approximation"]),
             _fmt(r["eta"]), _fmt(r["alpha_H"]), _fmt(r["beta_H"]),
             _flag_string(r["flags"])]]
    csv_path = out / "single_run.csv"
    _write_csv(csv_path, ["H", "err_fem", "err_local", "err_quasilocal",
                          "err_best", "eta", "alpha_H", "beta_H",
                          "converged_flags"], rows)
    meta_path = out / "single_run.meta.json"
    _write_meta(meta_path, cfg, {"rows": [{"coarse_n": n,
                "fine_levels": r["fine_levels"],
                "power_iterations": r["iterations"]}],
                "wall_time_s": time.time() - t0})
    return {"csv": str(csv_path), "meta": str(meta_path)}


def run_resonance(cfg):
    """Errors normalized by the best-approximation error over an eps sweep."""
    t0 = time.time()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = sorted(cfg.coarse_n)[0]
    rows, row_meta = [], []
    locals_rel = []
    for eps in cfg.eps_list:
        spec = CoefficientSpec(**{**cfg.coefficient.as_dict(), "eps": eps})
        r = _measure_row(cfg, n, spec)
        s = r["sigmas"]
        best = s["best_approximation"]
        rel = {k: s[k] / best if best > 0 else math.inf
               for k in ("standard_fem", "local", "quasilocal")}
        locals_rel.append(rel["local"])
        rows.append([
            _fmt(eps), _fmt(rel["standard_fem"]), _fmt(rel["local"]),
            _fmt(rel["quasilocal"]), _fmt(best), _fmt(r["eta"]),
            _fmt(r["alpha_H"]), _fmt(r["beta_H"]), _flag_string(r["flags"]),
        ])
        row_meta.append({"eps": eps, "coarse_n": n,
                         "fine_levels": r["fine_levels"],
                         "power_iterations": r["iterations"]})
    peak = int(np.argmax(locals_rel))
    csv_path = out / "resonance.csv"
    _write_csv(csv_path, ["eps", "err_fem_rel", "err_local_rel",
                          "err_quasilocal_rel", "err_best", "eta",
                          "alpha_H", "beta_H", "converged_flags"], rows)
    meta_path = out / "resonance.meta.json"
    _write_meta(meta_path, cfg, {
        "rows": row_meta,
        "resonance_peak_eps": cfg.eps_list[peak],
        "resonance_peak_err_local_rel": locals_rel[peak],
        "wall_time_s": time.time() - t0,
    })
    return {"csv": str(csv_path), "meta": str(meta_path)}


def run_periodic_check(cfg):
    """Idealized-coefficient consistency with classical homogenization."""
    t0 = time.time()
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = sorted(cfg.coarse_n)[0]
    coarse, fine, levels = _row_meshes(cfg, n)
    cs = FeSpace(coarse, "periodic_meanfree")
    fs = FeSpace(fine, "periodic_meanfree")
    coeff = build_coefficient(cfg.coefficient, fine)
    kwargs = {}
    if cfg.max_global_dofs is not None:
        kwargs["max_global_dofs"] = cfg.max_global_dofs
    rep = periodic_limit_check(coeff, cs, fs, ell_list=cfg.ell_list,
                               threads=cfg.threads, **kwargs)

    summary = [
        ["constancy_deviation", _fmt(rep.constancy_deviation)],
        ["mean_vs_cell", _fmt(rep.mean_vs_cell)],
        ["aligned", "1" if rep.aligned else "0"],
    ]
    for label, mat in (("mean", rep.mean_tensor), ("cell", rep.cell_tensor)):
        for r_ in range(2):
            for c_ in range(2):
                summary.append([f"{label}_A{r_ + 1}{c_ + 1}", _fmt(mat[r_, c_])])
    csv_path = out / "periodic_check.csv"
    _write_csv(csv_path, ["quantity", "value"], summary)

    decay_path = out / "periodic_decay.csv"
    _write_csv(decay_path, ["ell", "deviation"],
               [[str(ell), _fmt(dev)] for ell, dev in rep.ell_decay])
    meta_path = out / "periodic_check.meta.json"
    _write_meta(meta_path, cfg, {
        "coarse_n": n, "fine_levels": levels, "aligned": rep.aligned,
        "wall_time_s": time.time() - t0,
    })
    return {"csv": str(csv_path), "decay_csv": str(decay_path), "meta": str(meta_path)}


def run_experiment(cfg):
    runner = {
        "convergence": run_convergence,
        "resonance": run_resonance,
        "periodic_check": run_periodic_check,
        "single_run": run_single,
    }[cfg.experiment]
    return runner(cfg)


def export_plot_files(out_dir):
    """Rewrite the CSV outputs in out_dir as whitespace gnuplot .dat files."""
    out = Path(out_dir)
    written = []
    for name in ("convergence", "resonance", "single_run", "periodic_decay",
                 "periodic_check"):
        src = out / f"{name}.csv"
        if not src.exists():
            continue
        lines = src.read_text().strip().split("\n")
        header = lines[0].split(",")
        dst = out / f"{name}.dat"
        with open(dst, "w") as fh:
            fh.write("# " + "  ".join(header) + "\n")
            for line in lines[1:]:
                fh.write("  ".join(line.split(",")) + "\n")
        written.append(str(dst))
    if not written:
        raise ConfigError(f"out_dir: no experiment CSV files found in {out_dir!r}")
    return written
