"""Exact finite-state engine: measures, kernels, potentials and weighted Markov models.

Everything in this module is dense numpy over enumerated state spaces.  A
weighted model is an initial distribution, a chain of Markov transition
matrices and one non-negative weight function per time step; the engine
computes its unnormalised/normalised marginal flows and the backward
completion kernels exactly, which is what every variance identity in
:mod:`knotpf.variance` is built on.

State spaces may differ from one time step to the next (knot operations
introduce intermediate spaces), so kernels are general rectangular matrices.
All values are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateModelError, DimensionError, DomainError

ROW_SUM_TOL = 1e-12     # structural invariants (row sums, normalisation)
IDENTITY_TOL = 1e-10    # accumulated matrix-product identities


def _as_float_array(values, ndim, name):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != ndim:
        raise DimensionError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} contains non-finite entries")
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FiniteMeasure:
    """Non-negative weight vector over an enumerated state space.

    ``normalized`` asserts the weights sum to one; unnormalised measures keep
    their raw mass because the normalised/unnormalised distinction is load
    bearing throughout (normalisation is always explicit, never implicit).
    """

    weights: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = _as_float_array(self.weights, 1, "measure weights")
        if np.any(arr < 0):
            raise DomainError("measure weights must be non-negative")
        if self.normalized and abs(arr.sum() - 1.0) > ROW_SUM_TOL:
            raise DomainError(f"normalized measure sums to {arr.sum()!r}, not 1")
        object.__setattr__(self, "weights", arr)

    def __len__(self):
        return self.weights.shape[0]

    def total(self) -> float:
        return float(self.weights.sum())

    def integrate(self, values) -> float:
        """Integral of a function given as a vector over the same space."""
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.weights.shape:
            raise DimensionError(
                f"function has length {values.shape}, measure has {self.weights.shape}")
        return float(self.weights @ values)

    def normalize(self) -> "FiniteMeasure":
        total = self.total()
        if total <= 0.0:
            raise DegenerateModelError("cannot normalize a zero-mass measure")
        return FiniteMeasure(self.weights / total, normalized=True)


@dataclass(frozen=True)
class FiniteKernel:
    """Dense non-negative kernel; rows index source states, columns destinations."""

    matrix: np.ndarray
    is_markov: bool = True

    def __post_init__(self):
        arr = _as_float_array(self.matrix, 2, "kernel matrix")
        if np.any(arr < 0):
            raise DomainError("kernel entries must be non-negative")
        if self.is_markov:
            rows = arr.sum(axis=1)
            if np.any(np.abs(rows - 1.0) > ROW_SUM_TOL):
                worst = float(np.max(np.abs(rows - 1.0)))
                raise DomainError(f"Markov kernel rows must sum to 1 (max deviation {worst:.3e})")
        object.__setattr__(self, "matrix", arr)

    @property
    def n_source(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_dest(self) -> int:
        return self.matrix.shape[1]

    @staticmethod
    def identity(n: int) -> "FiniteKernel":
        return FiniteKernel(np.eye(n))

    @staticmethod
    def point_mass_row(weights) -> "FiniteKernel":
        """A measure embedded as a single-row kernel from a synthetic source state."""
        return FiniteKernel(np.asarray(weights, dtype=np.float64)[None, :])


@dataclass(frozen=True)
class PotentialFn:
    """Non-negative weight function over one time step's state space."""

    values: np.ndarray

    def __post_init__(self):
        arr = _as_float_array(self.values, 1, "potential values")
        if np.any(arr < 0):
            raise DomainError("potential values must be non-negative")
        if not np.any(arr > 0):
            raise DomainError("potential is identically zero")
        object.__setattr__(self, "values", arr)

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class TestFunction:
    """Real-valued function over the terminal state space."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _as_float_array(self.values, 1, "test function"))

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True)
class FKModel:
    """Initial distribution, Markov kernels and one potential per time step.

    ``kernels[p-1]`` moves states from time ``p-1`` to time ``p`` and
    ``potentials[p]`` weights time-``p`` states, so a model with horizon ``n``
    has ``n`` kernels and ``n + 1`` potentials.  A model whose terminal
    potential is identically one behaves as the weight-free (predictive) case.
    """

    initial: FiniteMeasure
    kernels: tuple[FiniteKernel, ...]
    potentials: tuple[PotentialFn, ...]

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(self.kernels))
        object.__setattr__(self, "potentials", tuple(self.potentials))
        n = len(self.kernels)
        if len(self.potentials) != n + 1:
            raise DimensionError(
                f"horizon {n} needs {n + 1} potentials, got {len(self.potentials)}")
        if abs(self.initial.total() - 1.0) > ROW_SUM_TOL:
            raise DomainError("initial measure must be a probability distribution")
        sizes = self.state_sizes()
        for p, kern in enumerate(self.kernels):
            if kern.n_source != sizes[p]:
                raise DimensionError(
                    f"kernel at step {p + 1} has {kern.n_source} source states, "
                    f"expected {sizes[p]}")
        for p, pot in enumerate(self.potentials):
            if len(pot) != sizes[p]:
                raise DimensionError(
                    f"potential at step {p} has length {len(pot)}, expected {sizes[p]}")

    @property
    def horizon(self) -> int:
        return len(self.kernels)

    def state_sizes(self) -> list[int]:
        """Number of states at each time 0..n."""
        sizes = [len(self.initial)]
        for kern in self.kernels:
            sizes.append(kern.n_dest)
        return sizes

    def kernel_at(self, t: int) -> FiniteKernel:
        """Transition kernel into time ``t`` (the initial law for ``t == 0``),
        uniformly represented as a row kernel so time-0 code paths need no
        special casing."""
        if t == 0:
            return FiniteKernel.point_mass_row(self.initial.weights)
        return self.kernels[t - 1]


def kernel_apply(kernel: FiniteKernel, values) -> np.ndarray:
    """Apply a kernel to a function: matrix-vector product, one value per source state."""
    values = np.asarray(values, dtype=np.float64)
    if values.shape != (kernel.n_dest,):
        raise DimensionError(
            f"function has shape {values.shape}, kernel has {kernel.n_dest} destinations")
    return kernel.matrix @ values


def measure_apply(measure: FiniteMeasure, kernel: FiniteKernel) -> FiniteMeasure:
    """Push a measure through a kernel: row-vector times matrix."""
    if len(measure) != kernel.n_source:
        raise DimensionError(
            f"measure has {len(measure)} states, kernel has {kernel.n_source} sources")
    return FiniteMeasure(measure.weights @ kernel.matrix)


def twist_kernel(kernel: FiniteKernel, weight_fn: PotentialFn | np.ndarray) -> FiniteKernel:
    """Reweight each kernel row toward a non-negative function and renormalise.

    Rows whose image gives the function zero mass are returned unchanged;
    that convention keeps the output Markov everywhere and makes the
    untwisting identity hold row-for-row including the zero-mass rows.
    Point-mass rows are fixed points, so identity kernels twist to themselves.
    """
    h = weight_fn.values if isinstance(weight_fn, PotentialFn) else np.asarray(
        weight_fn, dtype=np.float64)
    if np.any(h < 0):
        raise DomainError("twisting function must be non-negative")
    if h.shape != (kernel.n_dest,):
        raise DimensionError(
            f"twisting function has shape {h.shape}, kernel has {kernel.n_dest} destinations")
    if not kernel.is_markov:
        raise DomainError("only Markov kernels can be twisted")
    mass = kernel.matrix @ h
    out = kernel.matrix.copy()
    live = mass > 0.0
    out[live] = kernel.matrix[live] * h[None, :] / mass[live, None]
    return FiniteKernel(out)


def twist_measure(measure: FiniteMeasure, weight_fn: PotentialFn | np.ndarray) -> FiniteMeasure:
    """Reweight a probability measure by a non-negative function.

    Returns the measure unchanged when the function has zero mass under it,
    mirroring the kernel convention.
    """
    h = weight_fn.values if isinstance(weight_fn, PotentialFn) else np.asarray(
        weight_fn, dtype=np.float64)
    if np.any(h < 0):
        raise DomainError("twisting function must be non-negative")
    if h.shape != measure.weights.shape:
        raise DimensionError("twisting function and measure have different lengths")
    mass = float(measure.weights @ h)
    if mass <= 0.0:
        return measure
    return FiniteMeasure(measure.weights * h / mass, normalized=abs(
        measure.weights.sum() - 1.0) <= ROW_SUM_TOL)


@dataclass(frozen=True)
class MarginalMeasures:
    """The four marginal flows of a model, one entry per time 0..n.

    ``predictive[p]`` is the unnormalised pre-weighting marginal,
    ``updated[p]`` the same after multiplying in the step-``p`` potential;
    ``*_probs`` are their normalised counterparts.
    """

    predictive: tuple[FiniteMeasure, ...]
    updated: tuple[FiniteMeasure, ...]
    predictive_probs: tuple[FiniteMeasure, ...]
    updated_probs: tuple[FiniteMeasure, ...]

    def predictive_mass(self, p: int) -> float:
        return self.predictive[p].total()

    def updated_mass(self, p: int) -> float:
        return self.updated[p].total()


def predictive_measures(model: FKModel) -> MarginalMeasures:
    """Run the reweight-then-propagate recursion exactly.

    The time-0 predictive marginal is the initial law; each successor is the
    current marginal multiplied by its potential and pushed through the next
    kernel.  Raises :class:`DegenerateModelError` as soon as any marginal
    loses all mass, since every downstream quantity divides by these masses.
    """
    gammas = [FiniteMeasure(model.initial.weights)]
    for p in range(model.horizon):
        weighted = gammas[p].weights * model.potentials[p].values
        gammas.append(FiniteMeasure(weighted @ model.kernels[p].matrix))
    updated = [FiniteMeasure(g.weights * pot.values)
               for g, pot in zip(gammas, model.potentials)]
    for p, (g, u) in enumerate(zip(gammas, updated)):
        if g.total() <= 0.0:
            raise DegenerateModelError(f"predictive marginal at step {p} has zero mass")
        if u.total() <= 0.0:
            raise DegenerateModelError(f"updated marginal at step {p} has zero mass")
    return MarginalMeasures(
        predictive=tuple(gammas),
        updated=tuple(updated),
        predictive_probs=tuple(g.normalize() for g in gammas),
        updated_probs=tuple(u.normalize() for u in updated),
    )


def completion_kernels(model: FKModel) -> list[FiniteKernel]:
    """Backward kernels that complete the model from each time step.

    Entry ``p`` maps time-``p`` states to the terminal space and satisfies
    ``predictive[p] . completion[p] == predictive[n]``: the terminal entry is
    the identity and earlier entries accumulate potential-weighted transition
    products backwards.  These are non-negative but not Markov.
    """
    n = model.horizon
    sizes = model.state_sizes()
    mats = [None] * (n + 1)
    mats[n] = np.eye(sizes[n])
    for p in range(n - 1, -1, -1):
        step = model.potentials[p].values[:, None] * model.kernels[p].matrix
        mats[p] = step @ mats[p + 1]
    return [FiniteKernel(m, is_markov=False) for m in mats]


def tensor_kernel(first: FiniteKernel, second: FiniteKernel) -> FiniteKernel:
    """Kernel into a product space: route through ``first``, then ``second``.

    Destination states are pairs ``(i, j)`` enumerated row-major, with entry
    ``first[w, i] * second[i, j]``; requires ``first`` destinations to match
    ``second`` sources.
    """
    if first.n_dest != second.n_source:
        raise DimensionError(
            f"tensor factors not composable: {first.n_dest} vs {second.n_source}")
    out = first.matrix[:, :, None] * second.matrix[None, :, :]
    return FiniteKernel(
        out.reshape(first.n_source, first.n_dest * second.n_dest),
        is_markov=first.is_markov and second.is_markov,
    )


def tensor_values(first, second) -> np.ndarray:
    """Function on a row-major product space: ``out[(i, j)] = first[i] * second[j]``."""
    a = np.asarray(first, dtype=np.float64)
    b = np.asarray(second, dtype=np.float64)
    return (a[:, None] * b[None, :]).ravel()


def lift_to_pairs(values, n_first: int) -> np.ndarray:
    """Extend a function on the second factor to the product space: ``(i, j) -> f(j)``."""
    v = np.asarray(values, dtype=np.float64)
    return np.tile(v, n_first)


def model_to_dict(model: FKModel) -> dict:
    return {
        "horizon": model.horizon,
        "initial": model.initial.weights.tolist(),
        "kernels": [k.matrix.tolist() for k in model.kernels],
        "potentials": [p.values.tolist() for p in model.potentials],
    }


def model_from_dict(payload: dict) -> FKModel:
    model = FKModel(
        initial=FiniteMeasure(np.asarray(payload["initial"], dtype=np.float64)),
        kernels=tuple(FiniteKernel(np.asarray(k, dtype=np.float64))
                      for k in payload["kernels"]),
        potentials=tuple(PotentialFn(np.asarray(p, dtype=np.float64))
                         for p in payload["potentials"]),
    )
    if model.horizon != payload.get("horizon", model.horizon):
        raise DimensionError("declared horizon does not match kernel count")
    return model


def save_model(model: FKModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=2) + "\n")


def load_model(path) -> FKModel:
    return model_from_dict(json.loads(Path(path).read_text()))
