"""Knot operators: factorise one transition of a model and partially adapt it.

A knot at time ``t`` is a factorisation ``M_t == R K`` of that step's kernel.
Applying it replaces ``M_t`` by ``R``, pre-integrates the step's potential
through ``K`` and pushes the ``K``-twist into the next kernel, which leaves
every terminal quantity unchanged while never increasing the asymptotic
variance of the associated particle filter.  This module implements single
knots, simultaneous batches of them, terminal-time knots on product-extended
models, and the named special cases (trivial, adapted, marginalisation).

Time-0 knots carry their measure as a single-row kernel from a synthetic
singleton state so the ``t == 0`` and ``t >= 1`` code paths coincide.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import CompatibilityError, DimensionError, DomainError
from .fk import (
    FiniteKernel,
    FiniteMeasure,
    FKModel,
    PotentialFn,
    kernel_apply,
    lift_to_pairs,
    predictive_measures,
    tensor_kernel,
    tensor_values,
    twist_kernel,
)

COMPAT_TOL = 1e-10


@dataclass(frozen=True)
class Knot:
    """A time index and an ordered factor pair ``(R, K)`` with composable shapes."""

    t: int
    r: FiniteKernel
    k: FiniteKernel

    def __post_init__(self):
        if self.t < 0:
            raise DomainError(f"knot time must be non-negative, got {self.t}")
        if self.r.n_dest != self.k.n_source:
            raise DimensionError(
                f"knot factors not composable: {self.r.n_dest} vs {self.k.n_source}")
        if self.t == 0 and self.r.n_source != 1:
            raise DimensionError("a time-0 knot's first factor must be a single-row measure")

    def product(self) -> np.ndarray:
        return self.r.matrix @ self.k.matrix


@dataclass(frozen=True)
class Knotset:
    """One knot per non-terminal time, applied simultaneously."""

    knots: tuple[Knot, ...]

    def __post_init__(self):
        object.__setattr__(self, "knots", tuple(self.knots))
        times = [kn.t for kn in self.knots]
        if times != list(range(len(times))):
            raise DomainError(f"knotset must cover times 0..n-1 exactly once, got {times}")

    def __len__(self):
        return len(self.knots)


@dataclass(frozen=True)
class TerminalKnot:
    """Factor pair acting at the terminal time of a product-extended model."""

    r: FiniteKernel
    k: FiniteKernel

    def __post_init__(self):
        if self.r.n_dest != self.k.n_source:
            raise DimensionError(
                f"terminal knot factors not composable: {self.r.n_dest} vs {self.k.n_source}")

    def product(self) -> np.ndarray:
        return self.r.matrix @ self.k.matrix


@dataclass(frozen=True)
class TerminalKnotset:
    """A knotset together with a terminal knot (times 0..n)."""

    knots: tuple[Knot, ...]
    terminal: TerminalKnot

    def __post_init__(self):
        object.__setattr__(self, "knots", tuple(self.knots))
        times = [kn.t for kn in self.knots]
        if times != list(range(len(times))):
            raise DomainError(f"terminal knotset must cover times 0..n-1, got {times}")


@dataclass(frozen=True)
class ExtendedModel:
    """A model whose terminal space is a pair space, with factor bookkeeping.

    ``model`` is an ordinary :class:`FKModel` over the enumerated product
    space; ``reference`` is the model it extends and ``target`` the positive
    function the extension prepares terminal knots for.  ``first_factor`` and
    ``second_factor`` store the kernels whose composition reproduces the
    terminal kernel; they are maintained by the constructors here because the
    factorisation is not recoverable from an arbitrary product kernel.
    """

    model: FKModel
    reference: FKModel
    target: np.ndarray
    first_factor: FiniteKernel | None
    second_factor: FiniteKernel | None

    @property
    def horizon(self) -> int:
        return self.model.horizon

    def weight_factor(self) -> np.ndarray:
        """The terminal potential's first-factor component: ``V`` applied to
        the reference terminal potential times the target."""
        self._require_factors()
        gphi = self.reference.potentials[-1].values * self.target
        return self.second_factor.matrix @ gphi

    def _require_factors(self):
        if self.first_factor is None or self.second_factor is None:
            raise CompatibilityError("extended model does not carry a terminal factorisation")


def knot_is_compatible(knot: Knot, model: FKModel, tol: float = COMPAT_TOL) -> bool:
    """True when the knot's factor product reproduces the model's kernel at its time."""
    if not 0 <= knot.t < model.horizon:
        raise DomainError(f"knot time {knot.t} outside 0..{model.horizon - 1}")
    target = model.kernel_at(knot.t)
    prod = knot.product()
    if prod.shape != target.matrix.shape:
        raise DimensionError(
            f"knot product has shape {prod.shape}, kernel has {target.matrix.shape}")
    return bool(np.max(np.abs(prod - target.matrix)) <= tol)


def _require_compatible(knot: Knot, model: FKModel, tol: float):
    if not knot_is_compatible(knot, model, tol):
        err = float(np.max(np.abs(knot.product() - model.kernel_at(knot.t).matrix)))
        raise CompatibilityError(
            f"knot at time {knot.t} does not factorise the kernel (max error {err:.3e})")


def apply_knot(knot: Knot, model: FKModel | ExtendedModel, tol: float = COMPAT_TOL):
    """Apply one knot, preserving the horizon and all terminal quantities.

    The knotted model keeps every component except: the kernel at the knot's
    time becomes ``R``, the potential there becomes ``K`` applied to it, and
    the next kernel is pre-composed with the potential-twisted ``K``.
    Extended models additionally track the effect on their terminal
    factorisation so they stay usable with terminal knots.
    """
    if isinstance(model, ExtendedModel):
        return _apply_knot_extended(knot, model, tol)
    _require_compatible(knot, model, tol)
    t, n = knot.t, model.horizon
    potentials = list(model.potentials)
    kernels = list(model.kernels)
    twisted = twist_kernel(knot.k, model.potentials[t])
    potentials[t] = PotentialFn(kernel_apply(knot.k, model.potentials[t].values))
    kernels[t] = FiniteKernel(twisted.matrix @ model.kernels[t].matrix)
    if t == 0:
        initial = FiniteMeasure(knot.r.matrix[0])
    else:
        initial = model.initial
        kernels[t - 1] = knot.r
    return FKModel(initial=initial, kernels=tuple(kernels), potentials=tuple(potentials))


def _apply_knot_extended(knot: Knot, ext: ExtendedModel, tol: float) -> ExtendedModel:
    n = ext.horizon
    if knot.t >= n:
        raise DomainError("use a TerminalKnot to act at the terminal time")
    first = ext.first_factor
    if knot.t == n - 1 and first is not None:
        twisted = twist_kernel(knot.k, ext.model.potentials[n - 1])
        first = FiniteKernel(twisted.matrix @ first.matrix)
        new_model = _apply_knot_factored_terminal(knot, ext, first, tol)
    else:
        new_model = apply_knot(knot, ext.model, tol)
    return replace(ext, model=new_model, first_factor=first)


def _apply_knot_factored_terminal(knot: Knot, ext: ExtendedModel,
                                  new_first: FiniteKernel, tol: float) -> FKModel:
    # Rebuild the terminal kernel from the updated factorisation rather than
    # multiplying into the enumerated product matrix; the two agree up to
    # rounding but the factored form keeps the bookkeeping exact.
    base = apply_knot(knot, ext.model, tol)
    gphi = ext.reference.potentials[-1].values * ext.target
    terminal = tensor_kernel(new_first, twist_kernel(ext.second_factor, gphi))
    kernels = list(base.kernels)
    kernels[-1] = terminal
    return FKModel(initial=base.initial, kernels=tuple(kernels), potentials=base.potentials)


def apply_knotset(ks: Knotset, model: FKModel | ExtendedModel, tol: float = COMPAT_TOL):
    """Apply a full knotset simultaneously (closed form).

    Every member must be compatible with the *original* model; the result
    equals applying the members one at a time in descending time order.
    """
    if isinstance(model, ExtendedModel):
        out = model
        for kn in sorted(ks.knots, key=lambda kn: -kn.t):
            out = apply_knot(kn, out, tol)
        return out
    n = model.horizon
    if len(ks) != n:
        raise DimensionError(f"knotset has {len(ks)} knots, model horizon is {n}")
    for kn in ks.knots:
        _require_compatible(kn, model, tol)
    r = [kn.r for kn in ks.knots]
    k = [kn.k for kn in ks.knots]
    kernels = []
    potentials = [PotentialFn(kernel_apply(k[p], model.potentials[p].values))
                  for p in range(n)]
    potentials.append(model.potentials[n])
    for p in range(1, n):
        twisted = twist_kernel(k[p - 1], model.potentials[p - 1])
        kernels.append(FiniteKernel(twisted.matrix @ r[p].matrix))
    twisted = twist_kernel(k[n - 1], model.potentials[n - 1])
    kernels.append(FiniteKernel(twisted.matrix @ model.kernels[n - 1].matrix))
    return FKModel(
        initial=FiniteMeasure(r[0].matrix[0]),
        kernels=tuple(kernels),
        potentials=tuple(potentials),
    )


def trivial_knot(model: FKModel, t: int) -> Knot:
    """The knot ``(M_t, Id)`` whose application is the identity on models."""
    if not 0 <= t < model.horizon:
        raise IndexError(f"time {t} outside 0..{model.horizon - 1}")
    target = model.kernel_at(t)
    return Knot(t, target, FiniteKernel.identity(target.n_dest))


def adapted_knot(model: FKModel, t: int) -> Knot:
    """The knot ``(Id, M_t)``: fully adapts the step-``t`` kernel to its potential.

    At time 0 the identity degenerates to a point mass on a synthetic
    singleton state whose single outgoing row is the initial law.
    """
    if not 0 <= t < model.horizon:
        raise IndexError(f"time {t} outside 0..{model.horizon - 1}")
    target = model.kernel_at(t)
    if t == 0:
        return Knot(0, FiniteKernel.point_mass_row([1.0]), target)
    return Knot(t, FiniteKernel.identity(target.n_source), target)


def trivial_knotset(model: FKModel) -> Knotset:
    return Knotset(tuple(trivial_knot(model, t) for t in range(model.horizon)))


def adapted_knotset(model: FKModel) -> Knotset:
    return Knotset(tuple(adapted_knot(model, t) for t in range(model.horizon)))


def phi_extend(model: FKModel, phi) -> ExtendedModel:
    """Duplicate the terminal coordinate, preparing the model for terminal knots.

    The terminal kernel becomes ``M_n`` tensored with the identity and the
    terminal potential ``(G_n * phi)`` on the first coordinate times
    ``1 / phi`` on the second, which leaves every estimate of the form
    ``f(second coordinate)`` unchanged.  ``phi`` must be strictly positive
    wherever the terminal updated marginal has mass.
    """
    phi = np.asarray(phi, dtype=np.float64)
    n = model.horizon
    if n < 1:
        raise DomainError("terminal extension needs horizon >= 1")
    m_term = model.state_sizes()[n]
    if phi.shape != (m_term,):
        raise DimensionError(f"target function has shape {phi.shape}, expected ({m_term},)")
    support = predictive_measures(model).updated[n].weights > 0.0
    if np.any(phi[support] <= 0.0):
        raise DomainError("target function must be positive on the terminal support")
    first = model.kernels[n - 1]
    second = FiniteKernel.identity(m_term)
    gphi = model.potentials[n].values * phi
    # states where phi == 0 lie off the updated support and receive no pair
    # mass, so their reciprocal is an arbitrary placeholder
    inv_phi = np.zeros_like(phi)
    inv_phi[phi > 0.0] = 1.0 / phi[phi > 0.0]
    kernels = list(model.kernels)
    kernels[n - 1] = tensor_kernel(first, twist_kernel(second, gphi))
    potentials = list(model.potentials)
    potentials[n] = PotentialFn(tensor_values(kernel_apply(second, gphi), inv_phi))
    extended = FKModel(initial=model.initial, kernels=tuple(kernels),
                       potentials=tuple(potentials))
    return ExtendedModel(model=extended, reference=model, target=phi,
                         first_factor=first, second_factor=second)


def pair_test_function(ext: ExtendedModel, values) -> np.ndarray:
    """Lift a function on the reference terminal space to the pair space."""
    ext._require_factors()
    return lift_to_pairs(values, ext.first_factor.n_dest)


def apply_terminal_knot(tk: TerminalKnot, ext: ExtendedModel,
                        tol: float = COMPAT_TOL) -> ExtendedModel:
    """Apply a terminal knot to a factored extended model.

    Requires the knot's factor product to reproduce the extension's first
    factor; the new terminal kernel routes through ``R`` and the
    weight-twisted ``K``, and the new terminal potential pre-integrates the
    first-factor weight through ``K``.
    """
    ext._require_factors()
    u = ext.first_factor
    prod = tk.product()
    if prod.shape != u.matrix.shape:
        raise CompatibilityError(
            f"terminal knot product has shape {prod.shape}, factor has {u.matrix.shape}")
    err = float(np.max(np.abs(prod - u.matrix)))
    if err > tol:
        raise CompatibilityError(
            f"terminal knot does not factorise the terminal kernel (max error {err:.3e})")
    h = ext.weight_factor()
    gphi = ext.reference.potentials[-1].values * ext.target
    second_twisted = twist_kernel(ext.second_factor, gphi)
    new_terminal = tensor_kernel(tk.r, FiniteKernel(
        twist_kernel(tk.k, h).matrix @ second_twisted.matrix))
    phi = ext.target
    inv_phi = np.where(phi > 0.0, 1.0 / np.where(phi > 0.0, phi, 1.0), 0.0)
    new_potential = PotentialFn(tensor_values(kernel_apply(tk.k, h), inv_phi))
    kernels = list(ext.model.kernels)
    kernels[-1] = new_terminal
    potentials = list(ext.model.potentials)
    potentials[-1] = new_potential
    new_model = FKModel(initial=ext.model.initial, kernels=tuple(kernels),
                        potentials=tuple(potentials))
    new_second = FiniteKernel(tk.k.matrix @ ext.second_factor.matrix)
    return replace(ext, model=new_model, first_factor=tk.r, second_factor=new_second)


def trivial_terminal_knot(ext: ExtendedModel) -> TerminalKnot:
    ext._require_factors()
    u = ext.first_factor
    return TerminalKnot(u, FiniteKernel.identity(u.n_dest))


def adapted_terminal_knot(ext: ExtendedModel) -> TerminalKnot:
    ext._require_factors()
    u = ext.first_factor
    return TerminalKnot(FiniteKernel.identity(u.n_source), u)


def adapted_terminal_knotset(model: FKModel) -> TerminalKnotset:
    """Adapted knots at every time including the terminal one."""
    knots = tuple(adapted_knot(model, t) for t in range(model.horizon))
    terminal = TerminalKnot(
        FiniteKernel.identity(model.kernels[-1].n_source), model.kernels[-1])
    return TerminalKnotset(knots=knots, terminal=terminal)


def nc_knotset_model(model: FKModel, tks: TerminalKnotset,
                     tol: float = COMPAT_TOL) -> FKModel:
    """Simplified normalising-constant model from a terminal knotset.

    Implicitly extends the model with the unit target, applies all ``n + 1``
    knots and drops the redundant second terminal coordinate, whose twisted
    kernel never needs simulating.  The result has the same terminal updated
    mass as the input and never a larger variance for estimating it.
    """
    n = model.horizon
    if len(tks.knots) != n:
        raise DimensionError(f"terminal knotset has {len(tks.knots)} non-terminal knots, "
                             f"model horizon is {n}")
    for kn in tks.knots:
        _require_compatible(kn, model, tol)
    term_target = model.kernels[n - 1].matrix if n >= 1 else model.initial.weights[None, :]
    term_err = float(np.max(np.abs(tks.terminal.product() - term_target)))
    if term_err > tol:
        raise CompatibilityError(
            f"terminal knot does not factorise the terminal kernel (max error {term_err:.3e})")
    r = [kn.r for kn in tks.knots] + [tks.terminal.r]
    k = [kn.k for kn in tks.knots] + [tks.terminal.k]
    potentials = [PotentialFn(kernel_apply(k[p], model.potentials[p].values))
                  for p in range(n + 1)]
    kernels = []
    for p in range(1, n + 1):
        twisted = twist_kernel(k[p - 1], model.potentials[p - 1])
        kernels.append(FiniteKernel(twisted.matrix @ r[p].matrix))
    return FKModel(initial=FiniteMeasure(r[0].matrix[0]),
                   kernels=tuple(kernels), potentials=tuple(potentials))


def marginalisation_knot(u: FiniteKernel, v: FiniteKernel, t: int) -> Knot:
    """Knot that splits a product-space kernel into marginal and conditional parts.

    ``u`` maps source states to the first coordinate; ``v`` maps enumerated
    pairs (first coordinate, source state) to the second coordinate.  The
    returned knot's first factor keeps the source state alongside the sampled
    first coordinate and its second factor fills in the conditional second
    coordinate, so the factor product equals the joint kernel built by
    :func:`pair_conditional_kernel`.
    """
    a, b = u.n_source, u.n_dest
    if v.n_source != b * a:
        raise DimensionError(
            f"conditional kernel has {v.n_source} source states, expected {b}*{a}")
    c = v.n_dest
    r = np.zeros((a, b * a))
    for x in range(a):
        r[x, np.arange(b) * a + x] = u.matrix[x]
    k = np.zeros((b * a, b * c))
    for y1 in range(b):
        rows = y1 * a + np.arange(a)
        k[rows, y1 * c:(y1 + 1) * c] = v.matrix[rows]
    return Knot(t, FiniteKernel(r, is_markov=u.is_markov),
                FiniteKernel(k, is_markov=v.is_markov))


def pair_conditional_kernel(u: FiniteKernel, v: FiniteKernel) -> FiniteKernel:
    """Joint kernel onto row-major pairs: first coordinate from ``u``, second
    from ``v`` given (first coordinate, source state)."""
    a, b = u.n_source, u.n_dest
    if v.n_source != b * a:
        raise DimensionError(
            f"conditional kernel has {v.n_source} source states, expected {b}*{a}")
    c = v.n_dest
    out = np.zeros((a, b * c))
    for x in range(a):
        for z1 in range(b):
            out[x, z1 * c:(z1 + 1) * c] = u.matrix[x, z1] * v.matrix[z1 * a + x]
    return FiniteKernel(out, is_markov=u.is_markov and v.is_markov)


def complete_knotset(ks: Knotset, model: FKModel, tol: float = COMPAT_TOL) -> Knotset:
    """Knotset that upgrades an applied knotset to the adapted one.

    Applying the returned knotset to ``apply_knotset(ks, model)`` reproduces
    ``apply_knotset(adapted_knotset(model), model)`` exactly: entry ``p`` pairs
    the potential-twisted ``K_{p-1}`` with ``R_p``, and the time-0 entry embeds
    ``R_0`` behind a synthetic singleton.
    """
    n = model.horizon
    if len(ks) != n:
        raise DimensionError(f"knotset has {len(ks)} knots, model horizon is {n}")
    for kn in ks.knots:
        _require_compatible(kn, model, tol)
    out = [Knot(0, FiniteKernel.point_mass_row([1.0]), ks.knots[0].r)]
    for p in range(1, n):
        u = twist_kernel(ks.knots[p - 1].k, model.potentials[p - 1])
        out.append(Knot(p, u, ks.knots[p].r))
    return Knotset(tuple(out))


def knot_to_dict(knot: Knot) -> dict:
    return {"t": knot.t, "r": knot.r.matrix.tolist(), "k": knot.k.matrix.tolist()}


def knot_from_dict(payload: dict) -> Knot:
    return Knot(int(payload["t"]),
                FiniteKernel(np.asarray(payload["r"], dtype=np.float64)),
                FiniteKernel(np.asarray(payload["k"], dtype=np.float64)))


def knotset_to_dict(ks: Knotset) -> dict:
    return {"knots": [knot_to_dict(kn) for kn in ks.knots]}


def knotset_from_dict(payload: dict) -> Knotset:
    return Knotset(tuple(knot_from_dict(item) for item in payload["knots"]))


def save_knotset(ks: Knotset, path) -> None:
    Path(path).write_text(json.dumps(knotset_to_dict(ks), indent=2) + "\n")


def load_knotset(path) -> Knotset:
    return knotset_from_dict(json.loads(Path(path).read_text()))
