"""Experiment driver: configuration, timing, error evaluation, CSV emission.

Runs the batch greedy for a list of batch sizes on the thermal-block problem,
measures offline/online/full-order times, evaluates relative test errors per
basis-prefix size, and writes the results as CSV files plus a resolved
``config.lock``.  In oracle mode every training snapshot is precomputed so
the strong greedy, the POD width surrogate, and the full empirical bound
check suite can run as well.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import fem, greedy, rb, theory
from .errors import ConfigurationError, NumericError
from .pool import WorkerPool

logger = logging.getLogger(__name__)

#: Default cap on the training-set size; tensor grids grow fast.
TRAINING_CAP_DEFAULT = 1_000_000

#: Number of full-order solves averaged for the t_full measurement.
FULL_SOLVE_SAMPLES = 10

SUMMARY_COLUMNS = [
    "batchsizes",
    "num_ext",
    "num_iter",
    "t_solve",
    "t_evaluate",
    "t_extend",
    "t_reduce",
    "t_other",
    "t_offline",
    "t_online",
    "t_online_n",
    "t_offline_n",
    "k_star",
]

_LOCK_KEYS = (
    "px",
    "py",
    "nx",
    "ny",
    "train_per_dim",
    "test_count",
    "seed",
    "batch_sizes",
    "tolerance",
    "worker_count",
    "oracle",
    "out",
    "max_basis_size",
    "training_cap",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Resolved settings for one experiment run."""

    px: int = 2
    py: int = 2
    nx: int = 32
    ny: Optional[int] = None
    train_per_dim: int = 5
    test_count: int = 100
    seed: int = 0
    batch_sizes: tuple = (1, 2, 4, 8)
    tolerance: float = 1e-5
    worker_count: int = 1
    oracle: bool = False
    out: str = "results"
    max_basis_size: int = 150
    training_cap: int = TRAINING_CAP_DEFAULT

    def __post_init__(self):
        if self.train_per_dim < 2:
            raise ConfigurationError(
                f"train_per_dim={self.train_per_dim} must be at least 2"
            )
        if self.test_count < 1:
            raise ConfigurationError(f"test_count={self.test_count} must be positive")
        sizes = tuple(int(b) for b in self.batch_sizes)
        if not sizes or any(b < 1 for b in sizes):
            raise ConfigurationError(f"invalid batch sizes {self.batch_sizes!r}")
        object.__setattr__(self, "batch_sizes", sizes)
        if self.tolerance <= 0:
            raise ConfigurationError(f"tolerance={self.tolerance} must be positive")
        if self.worker_count < 1:
            raise ConfigurationError(
                f"worker_count={self.worker_count} must be positive"
            )
        if self.max_basis_size < 1:
            raise ConfigurationError(
                f"max_basis_size={self.max_basis_size} must be positive"
            )
        if self.seed < 0:
            raise ConfigurationError(f"seed={self.seed} must be nonnegative")

    @property
    def resolved_ny(self) -> int:
        return self.nx if self.ny is None else self.ny

    @property
    def block_count(self) -> int:
        return self.px * self.py


@dataclass(frozen=True)
class RunSummary:
    """Aggregated results of one batch-size run."""

    batch_size: int
    num_ext: int
    num_iter: int
    t_solve: float
    t_evaluate: float
    t_extend: float
    t_reduce: float
    t_other: float
    t_offline: float
    t_online: float
    t_full: float
    k_star: Optional[int]
    err_final: float


def build_training_set(px, py, train_per_dim, cap=TRAINING_CAP_DEFAULT):
    """Full tensor grid of equidistant weights in [0.1, 1] per block.

    Points are ordered lexicographically with the last dimension varying
    fastest; the first point is all-0.1.
    """
    if px < 1 or py < 1:
        raise ConfigurationError(f"px={px} and py={py} must be at least 1")
    if train_per_dim < 2:
        raise ConfigurationError(f"train_per_dim={train_per_dim} must be at least 2")
    count = train_per_dim ** (px * py)
    if count > cap:
        raise ConfigurationError(
            f"training grid would hold {count} points (cap {cap}); "
            f"choose a smaller train_per_dim"
        )
    values = np.linspace(fem.MU_MIN_DEFAULT, fem.MU_MAX_DEFAULT, train_per_dim)
    grids = np.meshgrid(*([values] * (px * py)), indexing="ij")
    stacked = np.stack([g.ravel() for g in grids], axis=1)
    return [fem.ParameterPoint(row) for row in stacked]


def build_test_set(px, py, count, seed):
    """Uniform random parameters in the admissible box, reproducible by seed."""
    if count < 1:
        raise ConfigurationError(f"test_count={count} must be positive")
    rng = np.random.default_rng(seed)
    draws = rng.uniform(fem.MU_MIN_DEFAULT, fem.MU_MAX_DEFAULT, size=(count, px * py))
    return [fem.ParameterPoint(row) for row in draws]


def evaluate_test_error(basis, model, system, test_set, fom_cache=None):
    """Relative X-norm Galerkin errors over a test set.

    Returns ``(errors, max_error)`` with one entry per test parameter.  An
    empty basis yields the exact value 1 for every parameter (the reduced
    solution is zero).  Pass ``fom_cache`` (a dict keyed by parameter) to
    reuse full-order solutions across basis prefixes.
    """
    if fom_cache is None:
        fom_cache = {}
    errors = []
    for mu in test_set:
        snapshot = fom_cache.get(mu)
        if snapshot is None:
            snapshot = fem.solve_fom(system, mu)
            fom_cache[mu] = snapshot
        full_norm = fem.x_norm(snapshot.coefficients, system)
        if full_norm <= 0.0:
            raise NumericError(f"full-order solution at {mu} has zero norm")
        if model.basis_size == 0:
            errors.append(1.0)
            continue
        coefficients = rb.solve_rom(model, mu)
        approx = rb.reconstruct(basis, coefficients)
        errors.append(
            fem.x_norm(snapshot.coefficients - approx, system) / full_norm
        )
    return errors, max(errors)


def break_even(t_offline, t_full, t_online):
    """Number of parameter queries after which the reduced model pays off.

    Returns ``ceil(t_offline / (t_full - t_online))``, or None when a full
    solve is not slower than an online solve (no break-even exists).
    """
    if t_full <= t_online:
        return None
    return math.ceil(t_offline / (t_full - t_online))


def _error_decay_rows(basis, model, system, test_set, proxy, fom_cache):
    """Per-prefix rows (n, max training estimate, max relative test error)."""
    rows = []
    for n in range(basis.size + 1):
        sub_model = rb.prefix_model(model, n)
        _, worst = evaluate_test_error(
            basis.prefix(n), sub_model, system, test_set, fom_cache
        )
        rows.append((n, float(proxy[n]), worst))
    return rows


def _write_csv(path, header, rows):
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return Path(path)


def _format_value(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_summary(summaries: Sequence[RunSummary], path) -> Path:
    """Emit summary.csv with times normalized against the b=1 row."""
    reference = next(
        (s for s in summaries if s.batch_size == 1), summaries[0]
    )
    rows = []
    for s in summaries:
        rows.append(
            [
                s.batch_size,
                s.num_ext,
                s.num_iter,
                repr(s.t_solve),
                repr(s.t_evaluate),
                repr(s.t_extend),
                repr(s.t_reduce),
                repr(s.t_other),
                repr(s.t_offline),
                repr(s.t_online),
                repr(s.t_online / reference.t_online),
                repr(s.t_offline / reference.t_offline),
                _format_value(s.k_star),
            ]
        )
    return _write_csv(path, SUMMARY_COLUMNS, rows)


def write_lock(config: ExperimentConfig, path) -> Path:
    """Write the resolved configuration as flat key=value lines."""
    resolved = {
        "px": config.px,
        "py": config.py,
        "nx": config.nx,
        "ny": config.resolved_ny,
        "train_per_dim": config.train_per_dim,
        "test_count": config.test_count,
        "seed": config.seed,
        "batch_sizes": ",".join(str(b) for b in config.batch_sizes),
        "tolerance": repr(config.tolerance),
        "worker_count": config.worker_count,
        "oracle": "true" if config.oracle else "false",
        "out": config.out,
        "max_basis_size": config.max_basis_size,
        "training_cap": config.training_cap,
    }
    lines = [f"{key}={resolved[key]}" for key in _LOCK_KEYS]
    path = Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def load_config(path) -> ExperimentConfig:
    """Parse a flat key=value config file into an ExperimentConfig."""
    values = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    unknown = set(values) - set(_LOCK_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    int_keys = {
        "px", "py", "nx", "ny", "train_per_dim", "test_count", "seed",
        "worker_count", "max_basis_size", "training_cap",
    }
    try:
        for key, value in values.items():
            if key in int_keys:
                kwargs[key] = int(value)
            elif key == "tolerance":
                kwargs[key] = float(value)
            elif key == "batch_sizes":
                kwargs[key] = tuple(int(b) for b in value.split(","))
            elif key == "oracle":
                if value not in ("true", "false"):
                    raise ValueError(f"oracle must be true or false, got {value!r}")
                kwargs[key] = value == "true"
            else:
                kwargs[key] = value
    except ValueError as exc:
        raise ConfigurationError(f"{path}: {exc}") from exc
    return ExperimentConfig(**kwargs)


def _solve_training_snapshots(system, training, worker_count):
    with WorkerPool(worker_count) as pool:
        solutions = pool.map(lambda mu: fem.solve_fom(system, mu), training)
    return dict(zip(training, solutions))


def run_experiment(config: ExperimentConfig):
    """Run the configured experiment and write all result files.

    Returns the list of RunSummary objects, one per batch size, in the
    configured order.
    """
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    logger.info(
        "experiment: %dx%d blocks, nx=%d, ny=%d, %d^%d training points",
        config.px, config.py, config.nx, config.resolved_ny,
        config.train_per_dim, config.block_count,
    )
    mesh = fem.build_mesh(config.nx, config.resolved_ny, config.px, config.py)
    system = fem.assemble(mesh)
    training = build_training_set(
        config.px, config.py, config.train_per_dim, config.training_cap
    )
    training_weights = np.array([mu.weights for mu in training])
    test_set = build_test_set(config.px, config.py, config.test_count, config.seed)

    # Full-order reference timing, reusing the solutions for error evaluation.
    fom_cache = {}
    timing_set = test_set[: min(FULL_SOLVE_SAMPLES, len(test_set))]
    start = time.perf_counter()
    for mu in timing_set:
        fom_cache[mu] = fem.solve_fom(system, mu)
    t_full = (time.perf_counter() - start) / len(timing_set)
    logger.info("t_full = %.4g s (mean over %d solves)", t_full, len(timing_set))

    snapshots = None
    width = None
    report_runs = []
    if config.oracle:
        logger.info("oracle mode: solving all %d training snapshots", len(training))
        snapshots = _solve_training_snapshots(system, training, config.worker_count)
        width = theory.pod_width_upper_bound(snapshots, system)

    summaries = []
    for b in config.batch_sizes:
        greedy_config = greedy.GreedyConfig(
            training_set=training,
            batch_size=b,
            tolerance=config.tolerance,
            max_basis_size=config.max_basis_size,
            worker_count=config.worker_count,
        )
        start = time.perf_counter()
        basis, model, trace = greedy.run_batch_greedy(system, greedy_config)
        t_offline = time.perf_counter() - start
        t_solve = sum(rec.timings.solve for rec in trace.iterations)
        t_evaluate = sum(rec.timings.evaluate for rec in trace.iterations)
        t_extend = sum(rec.timings.extend for rec in trace.iterations)
        t_reduce = sum(rec.timings.reduce for rec in trace.iterations)
        t_other = max(t_offline - (t_solve + t_evaluate + t_extend + t_reduce), 0.0)

        start = time.perf_counter()
        for mu in test_set:
            rb.solve_rom(model, mu)
        t_online = (time.perf_counter() - start) / len(test_set)

        # Densify the estimator-max sequence after timing: batch runs only
        # sweep at batch boundaries, the decay files want every n.
        trace.sigma_proxy = greedy.sigma_proxy(model, training_weights)
        rows = _error_decay_rows(
            basis, model, system, test_set, trace.sigma_proxy, fom_cache,
        )
        err_final = rows[-1][2]
        summary = RunSummary(
            batch_size=b,
            num_ext=trace.extension_count,
            num_iter=trace.iteration_count,
            t_solve=t_solve,
            t_evaluate=t_evaluate,
            t_extend=t_extend,
            t_reduce=t_reduce,
            t_other=t_other,
            t_offline=t_offline,
            t_online=t_online,
            t_full=t_full,
            k_star=break_even(t_offline, t_full, t_online),
            err_final=err_final,
        )
        summaries.append(summary)
        logger.info(
            "b=%d: n=%d after %d iterations, stop=%s, err_final=%.3g, "
            "t_offline=%.3g s",
            b, trace.extension_count, trace.iteration_count, trace.stop_reason,
            err_final, t_offline,
        )

        _write_csv(
            out / f"errdecay_b{b}.csv",
            ["n", "est", "err"],
            [(n, repr(est), repr(err)) for n, est, err in rows],
        )
        greedy.export_trace(trace, out / f"trace_b{b}.csv")

        if config.oracle:
            sigma = greedy.true_sigma(basis, snapshots, system)
            gamma = theory.empirical_gamma(trace, sigma)
            checks = theory.run_theory_checks(trace, sigma, width.d_up, gamma=gamma)
            report_runs.append(
                {
                    "batch_size": b,
                    "mode": "weak",
                    "gamma": gamma,
                    "checks": [report.as_dict() for report in checks],
                }
            )

    if config.oracle:
        strong_config = greedy.GreedyConfig(
            training_set=training,
            batch_size=1,
            tolerance=config.tolerance,
            max_basis_size=config.max_basis_size,
            mode="strong",
        )
        strong_basis, strong_trace = greedy.run_strong_greedy(
            system, strong_config, snapshots
        )
        strong_sigma = greedy.true_sigma(strong_basis, snapshots, system)
        strong_gamma = theory.empirical_gamma(strong_trace, strong_sigma)
        strong_checks = theory.run_theory_checks(
            strong_trace, strong_sigma, width.d_up, gamma=strong_gamma
        )
        report_runs.append(
            {
                "batch_size": 1,
                "mode": "strong",
                "gamma": strong_gamma,
                "checks": [report.as_dict() for report in strong_checks],
            }
        )
        payload = {
            "format": "batchrb-theory-report",
            "version": 1,
            "runs": report_runs,
        }
        (out / "theory_report.json").write_text(
            json.dumps(payload, indent=2) + "\n", encoding="utf-8"
        )

    write_summary(summaries, out / "summary.csv")
    write_lock(config, out / "config.lock")
    return summaries
