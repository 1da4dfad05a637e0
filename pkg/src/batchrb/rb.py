"""Reduced basis container, orthonormal extension, and Galerkin reduction.

The basis is kept X-orthonormal (X = H^1_0 seminorm metric) by modified
Gram-Schmidt with one full re-orthogonalization pass.  Extension records the
expansion coefficients of every incoming snapshot with respect to the updated
basis; these rows form the lower-triangular matrix consumed by the
convergence-theory checks.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, DimensionError, NumericError
from .fem import AffineSystem, ParameterPoint, Snapshot

__all__ = [
    "BasisVectorOrigin",
    "ReducedBasis",
    "ReducedModel",
    "ExtensionRecord",
    "extend",
    "reduce",
    "extend_model",
    "prefix_model",
    "solve_rom",
    "reconstruct",
    "save_artifact",
    "load_artifact",
]

#: Snapshots whose orthogonal remainder falls below this fraction of their
#: incoming X-norm are treated as linearly dependent and discarded.
DROP_TOL_DEFAULT = 1e-10

ARTIFACT_FORMAT = "batchrb-rom"
ARTIFACT_VERSION = 1


@dataclass(frozen=True)
class BasisVectorOrigin:
    """Where a basis vector came from: parameter, greedy iteration, batch rank."""

    parameter: ParameterPoint
    iteration: int
    batch_rank: int


@dataclass
class ReducedBasis:
    """X-orthonormal basis vectors (columns) with per-vector provenance."""

    vectors: np.ndarray  # (dof_count, size)
    provenance: list[BasisVectorOrigin] = field(default_factory=list)

    def __post_init__(self):
        if self.vectors.ndim != 2:
            raise DimensionError("basis vectors must form a 2-d column matrix")
        if len(self.provenance) != self.vectors.shape[1]:
            raise DimensionError(
                f"{self.vectors.shape[1]} vectors but "
                f"{len(self.provenance)} provenance entries"
            )

    @classmethod
    def empty(cls, dof_count: int) -> "ReducedBasis":
        return cls(vectors=np.empty((dof_count, 0)), provenance=[])

    @property
    def size(self) -> int:
        return self.vectors.shape[1]

    @property
    def dof_count(self) -> int:
        return self.vectors.shape[0]

    def prefix(self, n: int) -> "ReducedBasis":
        """The sub-basis of the first n vectors (greedy order is nested)."""
        if not 0 <= n <= self.size:
            raise IndexError(f"prefix size {n} outside [0, {self.size}]")
        return ReducedBasis(self.vectors[:, :n], self.provenance[:n])


@dataclass
class ReducedModel:
    """Galerkin-reduced affine operator, load, and optional estimator data."""

    components: np.ndarray  # (P, n, n)
    load: np.ndarray  # (n,)
    system_fingerprint: str = ""
    estimator_data: Optional[object] = None  # estimator.EstimatorData

    @property
    def basis_size(self) -> int:
        return self.load.shape[0]

    @property
    def block_count(self) -> int:
        return self.components.shape[0]

    def matrix(self, weights) -> np.ndarray:
        """Dense reduced operator A_r(mu) = sum_p mu_p (V^T A_p V)."""
        if isinstance(weights, ParameterPoint):
            weights = weights.as_array()
        w = np.asarray(weights, dtype=float)
        if w.shape != (self.block_count,):
            raise DimensionError(
                f"expected {self.block_count} weights, got shape {w.shape}"
            )
        return np.einsum("p,pij->ij", w, self.components)


@dataclass(frozen=True)
class ExtensionRecord:
    """Outcome of orthogonalizing one snapshot during extend().

    `coefficients` is the expansion row of the incoming snapshot: projections
    onto the previously accepted vectors (both MGS passes summed) followed,
    for accepted snapshots, by the remainder norm as the diagonal entry.
    """

    parameter: ParameterPoint
    accepted: bool
    coefficients: np.ndarray
    incoming_norm: float
    residual_norm: float


def _mgs_insert(w, basis_cols, gram_cols, gram, drop_tol, incoming_norm):
    """Two-pass MGS of w against the given X-orthonormal columns.

    Returns (unit remainder or None, projection coefficients, remainder norm).
    """
    coeffs = np.zeros(len(basis_cols))
    for _ in range(2):
        mw = gram @ w
        for j, (v, mv) in enumerate(zip(basis_cols, gram_cols)):
            c = float(v @ mw)
            w = w - c * v
            mw = mw - c * mv
            coeffs[j] += c
    mw = gram @ w
    rnorm = float(np.sqrt(max(w @ mw, 0.0)))
    if rnorm <= drop_tol * incoming_norm:
        return None, coeffs, rnorm
    return w / rnorm, coeffs, rnorm


def extend(
    basis: ReducedBasis,
    snapshots: Sequence[Snapshot],
    system: AffineSystem,
    drop_tol: float = DROP_TOL_DEFAULT,
    iteration: int = 0,
    ranks: Optional[Sequence[int]] = None,
) -> tuple[ReducedBasis, list[ExtensionRecord]]:
    """Orthonormally extend the basis by a batch of snapshots.

    Snapshots are processed in the given order; each is orthogonalized (MGS
    with one re-orthogonalization pass) against all previously accepted
    vectors including earlier members of the same batch.  Members whose
    remainder norm falls below ``drop_tol`` times their incoming X-norm are
    discarded and reported with ``accepted=False``.

    Parameters
    ----------
    basis : ReducedBasis
    snapshots : sequence of Snapshot
    system : AffineSystem
        Supplies the X-inner-product Gram matrix.
    drop_tol : float
        Relative linear-dependence threshold.
    iteration, ranks :
        Provenance bookkeeping: greedy iteration index and within-batch
        positions (defaults to 0, 1, 2, ...).

    Returns
    -------
    (ReducedBasis, list[ExtensionRecord])
        The extended basis and one record per incoming snapshot.
    """
    if ranks is None:
        ranks = range(len(snapshots))
    gram = system.gram
    cols = [basis.vectors[:, j] for j in range(basis.size)]
    gram_cols = [gram @ v for v in cols]
    provenance = list(basis.provenance)
    records: list[ExtensionRecord] = []

    for rank, snap in zip(ranks, snapshots):
        u = np.asarray(snap.coefficients, dtype=float)
        if u.shape != (system.dof_count,):
            raise DimensionError(
                f"snapshot has shape {u.shape}, system expects ({system.dof_count},)"
            )
        incoming = float(np.sqrt(max(u @ (gram @ u), 0.0)))
        if incoming == 0.0:
            records.append(
                ExtensionRecord(snap.parameter, False, np.zeros(len(cols)), 0.0, 0.0)
            )
            continue
        unit, coeffs, rnorm = _mgs_insert(
            u.copy(), cols, gram_cols, gram, drop_tol, incoming
        )
        if unit is None:
            records.append(
                ExtensionRecord(snap.parameter, False, coeffs, incoming, rnorm)
            )
            continue
        cols.append(unit)
        gram_cols.append(gram @ unit)
        provenance.append(BasisVectorOrigin(snap.parameter, iteration, int(rank)))
        row = np.append(coeffs, rnorm)
        records.append(ExtensionRecord(snap.parameter, True, row, incoming, rnorm))

    vectors = (
        np.column_stack(cols) if cols else np.empty((system.dof_count, 0))
    )
    return ReducedBasis(vectors, provenance), records


def reduce(basis: ReducedBasis, system: AffineSystem) -> ReducedModel:
    """Project the affine operator and load onto the basis (from scratch).

    The reduced component matrices are symmetrized to suppress round-off
    asymmetry; for admissible parameters the combined reduced operator is
    symmetric positive definite.
    """
    v = basis.vectors
    comps = np.empty((system.block_count, basis.size, basis.size))
    for p, a_p in enumerate(system.components):
        b = v.T @ (a_p @ v)
        comps[p] = 0.5 * (b + b.T)
    return ReducedModel(
        components=comps,
        load=v.T @ system.load,
        system_fingerprint=system.fingerprint,
    )


def extend_model(
    model: ReducedModel, basis: ReducedBasis, system: AffineSystem
) -> ReducedModel:
    """Grow a reduced model to match an extended basis without full recomputation.

    The leading block of each reduced component is carried over; only the new
    rows/columns are projected.  Values agree with :func:`reduce` to round-off
    (relative 1e-12 contract).
    """
    n_old = model.basis_size
    n_new = basis.size
    if n_new < n_old:
        raise DimensionError(f"basis shrank from {n_old} to {n_new}")
    if n_new == n_old:
        return model
    v_all = basis.vectors
    v_new = v_all[:, n_old:]
    comps = np.empty((system.block_count, n_new, n_new))
    for p, a_p in enumerate(system.components):
        apv = a_p @ v_new
        cross = v_all[:, :n_old].T @ apv  # (n_old, added)
        corner = v_new.T @ apv
        comps[p, :n_old, :n_old] = model.components[p]
        comps[p, :n_old, n_old:] = cross
        comps[p, n_old:, :n_old] = cross.T
        comps[p, n_old:, n_old:] = 0.5 * (corner + corner.T)
    load = np.concatenate([model.load, v_new.T @ system.load])
    return ReducedModel(
        components=comps,
        load=load,
        system_fingerprint=model.system_fingerprint,
    )


def prefix_model(model: ReducedModel, n: int) -> ReducedModel:
    """The reduced model of the first n basis vectors (leading blocks)."""
    if not 0 <= n <= model.basis_size:
        raise IndexError(f"prefix size {n} outside [0, {model.basis_size}]")
    return ReducedModel(
        components=model.components[:, :n, :n].copy(),
        load=model.load[:n].copy(),
        system_fingerprint=model.system_fingerprint,
    )


def solve_rom(model: ReducedModel, mu: ParameterPoint) -> np.ndarray:
    """Solve the reduced Galerkin system by dense symmetric factorization."""
    if mu.size != model.block_count:
        raise DimensionError(
            f"parameter has {mu.size} weights, model has {model.block_count} blocks"
        )
    if model.basis_size == 0:
        return np.zeros(0)
    matrix = model.matrix(mu)
    try:
        factor = scipy.linalg.cho_factor(matrix)
    except scipy.linalg.LinAlgError as exc:
        raise NumericError(
            f"reduced operator not positive definite at mu={mu.weights}: {exc}"
        ) from exc
    return scipy.linalg.cho_solve(factor, model.load)


def reconstruct(basis: ReducedBasis, coefficients: np.ndarray) -> np.ndarray:
    """Lift reduced coefficients to the full-order space: V @ c."""
    c = np.asarray(coefficients, dtype=float)
    if c.shape != (basis.size,):
        raise DimensionError(
            f"expected {basis.size} coefficients, got shape {c.shape}"
        )
    return basis.vectors @ c


def _encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr)
    return {
        "shape": list(arr.shape),
        "dtype": str(arr.dtype),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def _decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype=np.dtype(obj["dtype"])).reshape(obj["shape"]).copy()


def save_artifact(model: ReducedModel, basis: ReducedBasis, path) -> Path:
    """Write the online artifact: reduced operators, provenance, estimator tables.

    The artifact carries everything needed for online solves and error
    estimates (reduced matrices, load, estimator gramian tables) plus the
    system content hash; full-order vectors are not stored.
    """
    payload = {
        "format": ARTIFACT_FORMAT,
        "version": ARTIFACT_VERSION,
        "block_count": model.block_count,
        "basis_size": model.basis_size,
        "system_fingerprint": model.system_fingerprint,
        "provenance": [
            {
                "weights": list(origin.parameter.weights),
                "iteration": origin.iteration,
                "batch_rank": origin.batch_rank,
            }
            for origin in basis.provenance
        ],
        "reduced_components": _encode_array(model.components),
        "reduced_load": _encode_array(model.load),
        "estimator": None,
    }
    data = model.estimator_data
    if data is not None:
        payload["estimator"] = {
            "g_ff": data.g_ff,
            "g_fc": _encode_array(data.g_fc),
            "g_cc": _encode_array(data.g_cc),
            "mu_min": data.bounds.mu_min,
            "mu_max": data.bounds.mu_max,
        }
    path = Path(path)
    path.write_text(json.dumps(payload))
    return path


def load_artifact(
    path, system: Optional[AffineSystem] = None
) -> tuple[ReducedModel, list[BasisVectorOrigin]]:
    """Read an artifact written by :func:`save_artifact`.

    If `system` is given, its content hash must match the one stored in the
    artifact.  The returned model supports online operations (solve_rom,
    estimate); operations needing full-order data are unavailable.
    """
    payload = json.loads(Path(path).read_text())
    if payload.get("format") != ARTIFACT_FORMAT:
        raise ConfigurationError(f"not a {ARTIFACT_FORMAT} artifact: {path}")
    if payload.get("version") != ARTIFACT_VERSION:
        raise ConfigurationError(
            f"artifact version {payload.get('version')} unsupported "
            f"(expected {ARTIFACT_VERSION})"
        )
    if system is not None and system.fingerprint != payload["system_fingerprint"]:
        raise ConfigurationError(
            "artifact was built for a different assembled system "
            f"(hash {payload['system_fingerprint'][:12]}... vs "
            f"{system.fingerprint[:12]}...)"
        )
    model = ReducedModel(
        components=_decode_array(payload["reduced_components"]),
        load=_decode_array(payload["reduced_load"]),
        system_fingerprint=payload["system_fingerprint"],
    )
    est = payload.get("estimator")
    if est is not None:
        from .estimator import EffectivityBounds, EstimatorData

        bounds = EffectivityBounds(mu_min=est["mu_min"], mu_max=est["mu_max"])
        model.estimator_data = EstimatorData(
            riesz_load=None,
            riesz_components=None,
            g_ff=float(est["g_ff"]),
            g_fc=_decode_array(est["g_fc"]),
            g_cc=_decode_array(est["g_cc"]),
            bounds=bounds,
        )
    provenance = [
        BasisVectorOrigin(
            parameter=ParameterPoint(tuple(entry["weights"])),
            iteration=int(entry["iteration"]),
            batch_rank=int(entry["batch_rank"]),
        )
        for entry in payload["provenance"]
    ]
    return model, provenance
