"""Weak batch greedy and strong greedy basis construction.

One iteration of the batch variant with batch size b:

1. (Evaluate) sweep the error estimator over the training set with the
   current reduced model;
2. (Select) take the argmax as in the classical weak greedy, then the b - 1
   next-largest values of the *same* sweep — no re-evaluation between batch
   members;
3. (Solve) compute the b full-order snapshots, farming them out to the
   worker pool;
4. (Extend) orthonormalize the batch into the basis, discarding members that
   have become linearly dependent;
5. (Reduce) update the reduced operators and the estimator's offline data.

With b = 1 this is exactly the classical weak greedy.  Selection happens
before any parallel work and estimator sweeps run on a fixed single-threaded
path, so traces are independent of the worker count.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from time import perf_counter
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import estimator as est_mod
from . import rb
from .errors import ConfigurationError, DimensionError, GreedyError
from .fem import AffineSystem, ParameterPoint, Snapshot, solve_fom
from .pool import WorkerPool

__all__ = [
    "GreedyConfig",
    "GreedyTrace",
    "IterationRecord",
    "SelectionRecord",
    "PhaseTimings",
    "batch_indices",
    "select_batch",
    "run_batch_greedy",
    "run_strong_greedy",
    "true_sigma",
    "sigma_proxy",
    "export_trace",
    "export_amatrix",
]

logger = logging.getLogger(__name__)

STOP_TOLERANCE = "tolerance"
STOP_MAX_BASIS = "max_basis"
STOP_EXHAUSTED = "exhausted"


@dataclass
class GreedyConfig:
    """Configuration of a greedy run."""

    training_set: list[ParameterPoint]
    batch_size: int = 1
    tolerance: float = 1e-5
    max_basis_size: int = 150
    worker_count: int = 1
    drop_tol: float = rb.DROP_TOL_DEFAULT
    mode: str = "weak"

    def __post_init__(self):
        if int(self.batch_size) != self.batch_size or self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.tolerance > 0:
            raise ConfigurationError(f"tolerance must be positive, got {self.tolerance}")
        if self.max_basis_size < 1:
            raise ConfigurationError(
                f"max_basis_size must be >= 1, got {self.max_basis_size}"
            )
        if int(self.worker_count) != self.worker_count or self.worker_count < 1:
            raise ConfigurationError(
                f"worker_count must be >= 1, got {self.worker_count}"
            )
        if self.mode not in ("weak", "strong"):
            raise ConfigurationError(f"mode must be 'weak' or 'strong', got {self.mode}")
        if not self.training_set:
            raise ConfigurationError("training_set must not be empty")
        sizes = {mu.size for mu in self.training_set}
        if len(sizes) != 1:
            raise ConfigurationError(f"mixed parameter sizes in training set: {sizes}")
        seen = set()
        for mu in self.training_set:
            if mu.weights in seen:
                raise ConfigurationError(f"duplicate training point {mu.weights}")
            seen.add(mu.weights)


@dataclass(frozen=True)
class PhaseTimings:
    solve: float = 0.0
    evaluate: float = 0.0
    extend: float = 0.0
    reduce: float = 0.0
    other: float = 0.0


@dataclass
class SelectionRecord:
    """One selected training point: index, estimator value, extension outcome."""

    param_index: int
    parameter: ParameterPoint
    estimate: float
    accepted: bool = True


@dataclass
class IterationRecord:
    iteration: int
    basis_size: int  # before this iteration's extension
    max_estimate: float
    rel_estimate: float
    selections: list[SelectionRecord]
    timings: PhaseTimings


@dataclass
class GreedyTrace:
    """Per-iteration records plus the expansion matrix of accepted snapshots."""

    batch_size: int
    gamma_weak: float
    iterations: list[IterationRecord] = field(default_factory=list)
    amatrix_rows: list[np.ndarray] = field(default_factory=list)
    stop_reason: str = ""
    # Estimator max over the training set for every basis size 0..n, filled
    # in after the run (see sigma_proxy); the live loop only records the max
    # at batch boundaries.
    sigma_proxy: Optional[np.ndarray] = None

    @property
    def proxy_sizes(self) -> list[int]:
        """Basis sizes at which the estimator max was recorded."""
        return [rec.basis_size for rec in self.iterations]

    @property
    def proxy_values(self) -> list[float]:
        """Estimator max over the training set per recorded basis size."""
        return [rec.max_estimate for rec in self.iterations]

    @property
    def extension_count(self) -> int:
        """Number of accepted basis vectors."""
        return len(self.amatrix_rows)

    @property
    def iteration_count(self) -> int:
        """Number of iterations that selected candidates (the final
        stop-check sweep is recorded but does not count)."""
        return sum(1 for rec in self.iterations if rec.selections)

    @property
    def amatrix(self) -> np.ndarray:
        """Lower-triangular expansion matrix: row m holds the coefficients of
        accepted snapshot m in the orthonormal basis, diagonal = remainder norm."""
        n = len(self.amatrix_rows)
        matrix = np.zeros((n, n))
        for m, row in enumerate(self.amatrix_rows):
            matrix[m, : len(row)] = row
        return matrix

    def selected_indices(self, accepted_only: bool = False) -> list[int]:
        out = []
        for rec in self.iterations:
            for sel in rec.selections:
                if sel.accepted or not accepted_only:
                    out.append(sel.param_index)
        return out


def batch_indices(iteration: int, batch_size: int) -> tuple[int, int]:
    """Index range [n_low, n_high] of basis vectors added at one iteration.

    Without discards, iteration ell adds vectors number b*ell through
    b*(ell+1) - 1 (0-based).
    """
    if iteration < 0 or batch_size < 1:
        raise IndexError(f"need iteration >= 0 and batch_size >= 1")
    return batch_size * iteration, batch_size * (iteration + 1) - 1


def select_batch(
    estimates: np.ndarray, batch_size: int, excluded: Iterable[int] = ()
) -> list[int]:
    """Pick the batch_size largest estimates outside the excluded set.

    The first pick is the classical weak-greedy argmax; the rest are the
    next-largest values of the same estimate vector.  Ties break toward the
    smaller training-set index.  Returns fewer than batch_size indices when
    candidates run out; an empty list signals termination.
    """
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    estimates = np.asarray(estimates, dtype=float)
    excluded = set(excluded)
    order = np.lexsort((np.arange(len(estimates)), -estimates))
    picks = [int(i) for i in order if int(i) not in excluded]
    return picks[:batch_size]


def _record_extension(trace, iter_rec, records):
    for sel, ext in zip(iter_rec.selections, records):
        sel.accepted = ext.accepted
        if ext.accepted:
            trace.amatrix_rows.append(np.asarray(ext.coefficients))


def run_batch_greedy(
    system: AffineSystem,
    config: GreedyConfig,
    bounds: Optional[est_mod.EffectivityBounds] = None,
    solver: Optional[Callable[[AffineSystem, ParameterPoint], Snapshot]] = None,
) -> tuple[rb.ReducedBasis, rb.ReducedModel, GreedyTrace]:
    """Run the weak batch greedy until tolerance, basis cap, or exhaustion.

    Stopping uses the relative criterion
    max_mu Delta_n(mu) <= tolerance * max_mu Delta_0(mu), checked during the
    Evaluate phase before selection.  Raises :class:`GreedyError` carrying
    the offending parameter and the partial trace if a full-order solve
    fails.
    """
    if bounds is None:
        bounds = est_mod.EffectivityBounds()
    if solver is None:
        solver = solve_fom
    p_size = config.training_set[0].size
    if p_size != system.block_count:
        raise DimensionError(
            f"training parameters have {p_size} weights, "
            f"system has {system.block_count} blocks"
        )

    weights_matrix = np.array([mu.weights for mu in config.training_set])
    basis = rb.ReducedBasis.empty(system.dof_count)
    model = rb.reduce(basis, system)
    riesz_solver = est_mod.RieszSolver(system)
    data = est_mod.build_estimator(model, basis, system, bounds=bounds, solver=riesz_solver)
    trace = GreedyTrace(
        batch_size=config.batch_size,
        gamma_weak=bounds.gamma_greedy(system.block_count),
    )

    def solve_one(mu: ParameterPoint) -> Snapshot:
        return solver(system, mu)

    excluded: set[int] = set()
    delta0_max: Optional[float] = None
    iteration = 0
    with WorkerPool(config.worker_count) as pool:
        while True:
            iter_start = perf_counter()
            estimates = est_mod.estimate_sweep(data, model, weights_matrix)
            t_evaluate = perf_counter() - iter_start
            max_est = float(estimates.max())
            if delta0_max is None:
                delta0_max = max_est
            rel = max_est / delta0_max if delta0_max > 0 else 0.0

            stop = None
            if rel <= config.tolerance:
                stop = STOP_TOLERANCE
            elif basis.size >= config.max_basis_size:
                stop = STOP_MAX_BASIS
            else:
                chosen = select_batch(estimates, config.batch_size, excluded)
                if not chosen:
                    stop = STOP_EXHAUSTED
            if stop is not None:
                trace.iterations.append(
                    IterationRecord(
                        iteration=iteration,
                        basis_size=basis.size,
                        max_estimate=max_est,
                        rel_estimate=rel,
                        selections=[],
                        timings=PhaseTimings(evaluate=t_evaluate),
                    )
                )
                trace.stop_reason = stop
                break

            excluded.update(chosen)
            selections = [
                SelectionRecord(i, config.training_set[i], float(estimates[i]))
                for i in chosen
            ]

            t0 = perf_counter()
            try:
                snapshots = pool.map(solve_one, [sel.parameter for sel in selections])
            except Exception as exc:
                trace.stop_reason = "error"
                failed = getattr(exc, "parameter", None)
                raise GreedyError(
                    f"full-order solve failed during iteration {iteration}: {exc}",
                    parameter=failed,
                    trace=trace,
                ) from exc
            t_solve = perf_counter() - t0

            size_before = basis.size
            t0 = perf_counter()
            basis, ext_records = rb.extend(
                basis,
                snapshots,
                system,
                drop_tol=config.drop_tol,
                iteration=iteration,
            )
            t_extend = perf_counter() - t0

            t0 = perf_counter()
            model = rb.extend_model(model, basis, system)
            data = est_mod.build_estimator(
                model, basis, system, bounds=bounds, previous=data, solver=riesz_solver
            )
            t_reduce = perf_counter() - t0

            iter_rec = IterationRecord(
                iteration=iteration,
                basis_size=size_before,
                max_estimate=max_est,
                rel_estimate=rel,
                selections=selections,
                timings=PhaseTimings(
                    solve=t_solve,
                    evaluate=t_evaluate,
                    extend=t_extend,
                    reduce=t_reduce,
                    other=max(
                        perf_counter()
                        - iter_start
                        - (t_solve + t_evaluate + t_extend + t_reduce),
                        0.0,
                    ),
                ),
            )
            _record_extension(trace, iter_rec, ext_records)
            trace.iterations.append(iter_rec)
            logger.info(
                "iter %d: n=%d, max estimate %.3e (rel %.3e), batch %s",
                iteration,
                basis.size,
                max_est,
                rel,
                [sel.param_index for sel in selections],
            )
            iteration += 1

    return basis, model, trace


def run_strong_greedy(
    system: AffineSystem,
    config: GreedyConfig,
    snapshots: Mapping[ParameterPoint, Snapshot],
) -> tuple[rb.ReducedBasis, GreedyTrace]:
    """Batch greedy steered by true projection errors over precomputed snapshots.

    The residual table is downdated explicitly after each extension, so the
    reported errors stay accurate down to round-off (no Parseval shortcut).
    Phase timings: solve is zero (snapshots are given), evaluate covers the
    error sweep, reduce covers the residual-table downdate.
    """
    missing = [mu for mu in config.training_set if mu not in snapshots]
    if missing:
        raise ConfigurationError(
            f"{len(missing)} training points without snapshots, first: {missing[0].weights}"
        )
    gram = system.gram
    columns = np.column_stack(
        [np.asarray(snapshots[mu].coefficients, dtype=float) for mu in config.training_set]
    )
    residual = columns.copy()
    basis = rb.ReducedBasis.empty(system.dof_count)
    trace = GreedyTrace(batch_size=config.batch_size, gamma_weak=1.0)

    excluded: set[int] = set()
    err0_max: Optional[float] = None
    iteration = 0
    while True:
        iter_start = perf_counter()
        m_res = gram @ residual
        errors = np.sqrt(np.clip(np.einsum("ij,ij->j", residual, m_res), 0.0, None))
        t_evaluate = perf_counter() - iter_start
        max_err = float(errors.max())
        if err0_max is None:
            err0_max = max_err
        rel = max_err / err0_max if err0_max > 0 else 0.0

        stop = None
        if rel <= config.tolerance:
            stop = STOP_TOLERANCE
        elif basis.size >= config.max_basis_size:
            stop = STOP_MAX_BASIS
        else:
            chosen = select_batch(errors, config.batch_size, excluded)
            if not chosen:
                stop = STOP_EXHAUSTED
        if stop is not None:
            trace.iterations.append(
                IterationRecord(
                    iteration=iteration,
                    basis_size=basis.size,
                    max_estimate=max_err,
                    rel_estimate=rel,
                    selections=[],
                    timings=PhaseTimings(evaluate=t_evaluate),
                )
            )
            trace.stop_reason = stop
            break

        excluded.update(chosen)
        selections = [
            SelectionRecord(i, config.training_set[i], float(errors[i]))
            for i in chosen
        ]

        size_before = basis.size
        t0 = perf_counter()
        basis, ext_records = rb.extend(
            basis,
            [snapshots[sel.parameter] for sel in selections],
            system,
            drop_tol=config.drop_tol,
            iteration=iteration,
        )
        t_extend = perf_counter() - t0

        t0 = perf_counter()
        for j in range(size_before, basis.size):
            v = basis.vectors[:, j]
            coeffs = v @ (gram @ residual)
            residual -= np.outer(v, coeffs)
        t_reduce = perf_counter() - t0

        iter_rec = IterationRecord(
            iteration=iteration,
            basis_size=size_before,
            max_estimate=max_err,
            rel_estimate=rel,
            selections=selections,
            timings=PhaseTimings(
                evaluate=t_evaluate,
                extend=t_extend,
                reduce=t_reduce,
                other=max(
                    perf_counter() - iter_start - (t_evaluate + t_extend + t_reduce),
                    0.0,
                ),
            ),
        )
        _record_extension(trace, iter_rec, ext_records)
        trace.iterations.append(iter_rec)
        iteration += 1

    return basis, trace


def true_sigma(
    basis: rb.ReducedBasis,
    snapshots,
    system: AffineSystem,
    sizes: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Worst X-norm projection error onto each basis prefix.

    sigma[n] = max over snapshots of || f - P_{V_n} f ||_X for the nested
    prefixes V_n, computed by explicitly peeling one basis vector at a time
    from the residual table (certified against cancellation).

    `snapshots` is a mapping parameter -> Snapshot or a sequence of
    Snapshots; `sizes` defaults to 0..basis.size.
    """
    if isinstance(snapshots, Mapping):
        snapshot_list = list(snapshots.values())
    else:
        snapshot_list = list(snapshots)
    if not snapshot_list:
        raise ConfigurationError("need at least one snapshot")
    if sizes is None:
        sizes = range(basis.size + 1)
    sizes = list(sizes)
    if any(n < 0 or n > basis.size for n in sizes):
        raise IndexError(f"requested sizes outside [0, {basis.size}]")

    gram = system.gram
    residual = np.column_stack(
        [np.asarray(s.coefficients, dtype=float) for s in snapshot_list]
    )
    wanted = set(sizes)
    values: dict[int, float] = {}
    for n in range(basis.size + 1):
        if n in wanted:
            m_res = gram @ residual
            norms = np.sqrt(np.clip(np.einsum("ij,ij->j", residual, m_res), 0.0, None))
            values[n] = float(norms.max())
        if n == basis.size:
            break
        v = basis.vectors[:, n]
        coeffs = v @ (gram @ residual)
        residual -= np.outer(v, coeffs)
    return np.array([values[n] for n in sizes])


def sigma_proxy(
    model: rb.ReducedModel,
    weights: np.ndarray,
    sizes: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Estimator max over a training set for each nested basis prefix.

    proxy[k] = max_mu Delta_n(mu) with n = sizes[k], evaluated by slicing
    the reduced model and the offline estimator tables down to the first n
    basis vectors.  At the sizes where the greedy loop swept (multiples of
    the batch size), this reproduces the recorded per-iteration maxima
    exactly; the sizes in between are what a batch run never evaluates live.

    `model` must carry estimator data (as left behind by the greedy loop);
    `weights` is a (T, P) array of training weights; `sizes` defaults to
    0..model.basis_size.
    """
    data = model.estimator_data
    if data is None:
        raise ConfigurationError("model carries no estimator data")
    if sizes is None:
        sizes = range(model.basis_size + 1)
    sizes = list(sizes)
    if any(n < 0 or n > model.basis_size for n in sizes):
        raise IndexError(f"requested sizes outside [0, {model.basis_size}]")
    weights = np.atleast_2d(np.asarray(weights, dtype=float))
    out = np.empty(len(sizes))
    for k, n in enumerate(sizes):
        sub_data = est_mod.prefix_data(data, n)
        sub_model = rb.prefix_model(model, n)
        out[k] = float(est_mod.estimate_sweep(sub_data, sub_model, weights).max())
    return out


def export_trace(trace: GreedyTrace, path) -> Path:
    """Write one CSV row per selection: iteration, basis size at evaluation,
    training index, estimator value, acceptance, and phase timings.

    The final stop-check sweep is included with an empty param_id so the
    estimator-max sequence is recoverable from the file.
    """
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(
            [
                "iter",
                "n",
                "param_id",
                "est_value",
                "accepted",
                "t_solve",
                "t_evaluate",
                "t_extend",
                "t_reduce",
            ]
        )
        for rec in trace.iterations:
            timing_cells = [
                repr(rec.timings.solve),
                repr(rec.timings.evaluate),
                repr(rec.timings.extend),
                repr(rec.timings.reduce),
            ]
            if not rec.selections:
                writer.writerow(
                    [rec.iteration, rec.basis_size, "", repr(rec.max_estimate), ""]
                    + timing_cells
                )
                continue
            for sel in rec.selections:
                writer.writerow(
                    [
                        rec.iteration,
                        rec.basis_size,
                        sel.param_index,
                        repr(sel.estimate),
                        int(sel.accepted),
                    ]
                    + timing_cells
                )
    return path


def export_amatrix(trace: GreedyTrace, path) -> Path:
    """Write the lower-triangular expansion matrix as (i, j, a_ij) rows."""
    path = Path(path)
    with path.open("w", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["i", "j", "a_ij"])
        for i, row in enumerate(trace.amatrix_rows):
            for j, value in enumerate(row):
                writer.writerow([i, j, repr(float(value))])
    return path
