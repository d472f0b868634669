"""Exact asymptotic variances, knot reduction identities, and the empirical harness.

The exact side evaluates the per-time variance decomposition of a particle
filter's terminal estimators on finite models, in four flavours: the raw and
mean-centred versions of the pre-weighting (predictive) and post-weighting
(updated) terminal estimators.  The reduction formulas quantify exactly how
much each knot removes, so equality with the two-sided difference is a strong
end-to-end check of both engines.

The empirical side replays many independent filters and reports the
CLT-scaled sample variance with a jackknife standard error.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CompatibilityError, DegenerateModelError, DegenerateWeightsError, DomainError
from .fk import FKModel, TestFunction, completion_kernels, predictive_measures, twist_kernel
from .knots import ExtendedModel, Knotset, TerminalKnot, apply_knotset
from .smc import replication_rng, run_particle_filter, estimate_terminal

VARIANTS = ("predictive", "predictive-centered", "updated", "updated-centered")


@dataclass(frozen=True)
class VarianceReport:
    """Per-time variance terms and their total for one estimator variant.

    ``center`` is the exact terminal mean subtracted inside the centred
    variants (``None`` for the raw ones).  ``total`` always equals
    ``terms.sum()`` by construction.
    """

    variant: str
    terms: np.ndarray
    total: float
    center: float | None

    def __post_init__(self):
        object.__setattr__(self, "terms", np.asarray(self.terms, dtype=np.float64))


@dataclass(frozen=True)
class KnotVarianceReduction:
    """Per-time variance removed by a knotset, and the total."""

    variant: str
    terms: np.ndarray
    total: float


@dataclass(frozen=True)
class EmpiricalVarianceReport:
    """CLT-scaled sample variance of a terminal estimator over replications."""

    variant: str
    n_particles: int
    n_replications: int
    sample_mean: float
    scaled_variance: float  # n_particles * sample variance
    se: float               # jackknife standard error of scaled_variance


def _phi_values(model: FKModel, phi) -> np.ndarray:
    values = phi.values if isinstance(phi, TestFunction) else np.asarray(phi, dtype=np.float64)
    m = model.state_sizes()[-1]
    if values.shape != (m,):
        raise DomainError(f"test function has shape {values.shape}, terminal space has {m}")
    return values


def _resolve_variant(model: FKModel, phi_values: np.ndarray, variant: str):
    """Return (effective function, scale, center) for a variant.

    The updated variants fold the terminal potential into the function and
    divide by the squared mean terminal weight; the centred ones subtract the
    exact terminal mean first.
    """
    if variant not in VARIANTS:
        raise DomainError(f"unknown variance variant {variant!r}")
    margins = predictive_measures(model)
    n = model.horizon
    eta_n = margins.predictive_probs[n]
    if variant == "predictive":
        return phi_values, 1.0, None, margins
    if variant == "predictive-centered":
        center = eta_n.integrate(phi_values)
        return phi_values - center, 1.0, center, margins
    g_n = model.potentials[n].values
    mean_weight = eta_n.integrate(g_n)
    if mean_weight <= 0.0:
        raise DegenerateModelError("terminal potential has zero mean; updated variants undefined")
    scale = 1.0 / mean_weight ** 2
    if variant == "updated":
        return g_n * phi_values, scale, None, margins
    center = margins.updated_probs[n].integrate(phi_values)
    return g_n * (phi_values - center), scale, center, margins


def asymptotic_variance(model: FKModel | ExtendedModel, phi,
                        variant: str = "predictive") -> VarianceReport:
    """Exact per-time asymptotic variance terms of a terminal particle estimator.

    Term ``p`` is the scaled second moment of the time-``p`` completion of the
    effective function minus the squared terminal mean; their sum is the
    variance appearing in the CLT for the chosen estimator variant.
    """
    if isinstance(model, ExtendedModel):
        model = model.model
    values = _phi_values(model, phi)
    psi, scale, center, margins = _resolve_variant(model, values, variant)
    completions = completion_kernels(model)
    n = model.horizon
    total_mass = margins.predictive_mass(n)
    eta_n = margins.predictive_probs[n]
    terminal_mean = eta_n.integrate(psi)
    terms = np.empty(n + 1)
    for p in range(n + 1):
        completed = completions[p].matrix @ psi
        second_moment = margins.predictive[p].integrate(completed ** 2)
        mass_p = margins.predictive_mass(p)
        terms[p] = scale * (mass_p * second_moment / total_mass ** 2 - terminal_mean ** 2)
    return VarianceReport(variant=variant, terms=terms, total=float(terms.sum()),
                          center=center)


def knot_variance_reduction(model: FKModel, ks: Knotset, phi,
                            variant: str = "predictive") -> KnotVarianceReduction:
    """Exact variance removed by a knotset, accumulated per non-terminal time.

    Term ``p`` weights the conditional variance of the completed function
    under the knot's second factor by the knot-model's time-``p`` predictive
    law; the total equals the direct difference of the exact variances of the
    original and knotted models.
    """
    values = _phi_values(model, phi)
    psi, scale, _, margins = _resolve_variant(model, values, variant)
    completions = completion_kernels(model)
    n = model.horizon
    if len(ks) != n:
        raise CompatibilityError(f"knotset has {len(ks)} knots, model horizon is {n}")
    total_mass = margins.predictive_mass(n)
    terms = np.empty(n)
    for p in range(n):
        knot = ks.knots[p]
        completed = completions[p].matrix @ psi
        cond_mean = knot.k.matrix @ completed
        cond_second = knot.k.matrix @ completed ** 2
        cond_var = cond_second - cond_mean ** 2
        if p == 0:
            carrier = knot.r.matrix[0]
        else:
            carrier = margins.updated_probs[p - 1].weights @ knot.r.matrix
        mass_p = margins.predictive_mass(p)
        terms[p] = scale * (mass_p ** 2 / total_mass ** 2) * float(carrier @ cond_var)
    return KnotVarianceReduction(variant=variant, terms=terms, total=float(terms.sum()))


def terminal_variance_difference(ext: ExtendedModel, tk: TerminalKnot, phi) -> float:
    """Exact updated-variance change from a terminal knot, for the lifted function.

    Evaluates the covariance form: the pre-terminal updated law pushed through
    the knot's first factor, applied to the covariance (under the second
    factor) between the terminal weight component and the weight times the
    second-factor image of the squared ratio of test function to target.
    Equals the direct difference of the updated variances at the pair-lifted
    test function.
    """
    ext._require_factors()
    u = ext.first_factor
    prod = tk.product()
    if prod.shape != u.matrix.shape or float(np.max(np.abs(prod - u.matrix))) > 1e-8:
        raise CompatibilityError("terminal knot does not factorise the terminal kernel")
    phi2 = np.asarray(phi.values if isinstance(phi, TestFunction) else phi, dtype=np.float64)
    target = ext.target
    if phi2.shape != target.shape:
        raise DomainError("test function must live on the reference terminal space")
    inv_target = np.zeros_like(target)
    inv_target[target > 0.0] = 1.0 / target[target > 0.0]
    gphi = ext.reference.potentials[-1].values * target
    p2 = twist_kernel(ext.second_factor, gphi)
    ratio_sq = (inv_target * phi2) ** 2
    weight = ext.weight_factor()
    image = p2.matrix @ ratio_sq
    cov = tk.k.matrix @ (weight * weight * image) \
        - (tk.k.matrix @ weight) * (tk.k.matrix @ (weight * image))
    margins = predictive_measures(ext.model)
    n = ext.horizon
    carrier = margins.updated_probs[n - 1].weights @ tk.r.matrix
    mean_weight = margins.predictive_probs[n].integrate(ext.model.potentials[n].values)
    return float(carrier @ cov) / mean_weight ** 2


def knotted_variance_pair(model: FKModel, ks: Knotset, phi,
                          variant: str = "predictive"):
    """Convenience: variance reports of a model and of its knotted counterpart."""
    before = asymptotic_variance(model, phi, variant)
    knotted = apply_knotset(ks, model)
    values = _phi_values(model, phi)
    after = asymptotic_variance(knotted, values, variant)
    return before, after


def jackknife_se_of_variance(samples: np.ndarray) -> float:
    """Jackknife standard error of the sample variance of iid replications."""
    x = np.asarray(samples, dtype=np.float64)
    r = x.shape[0]
    if r < 3:
        return float("nan")
    x = x - x.mean()
    s1 = x.sum()
    s2 = (x * x).sum()
    loo_mean = (s1 - x) / (r - 1)
    loo_ss = s2 - x * x
    loo_var = (loo_ss - (r - 1) * loo_mean ** 2) / (r - 2)
    return float(np.sqrt((r - 1) / r * ((loo_var - loo_var.mean()) ** 2).sum()))


def _estimator_value(system, phi, variant: str, normalizer: float) -> float:
    est = estimate_terminal(system, phi)
    if variant == "predictive":
        return est.predictive / normalizer
    if variant == "predictive-centered":
        return est.predictive_normalised
    if variant == "updated":
        return est.updated / normalizer
    return est.updated_normalised


def _run_replication_batch(args):
    model, phi, variant, n_particles, policy, master_seed, normalizer, indices = args
    out = np.empty(len(indices))
    for j, r in enumerate(indices):
        rng = replication_rng(master_seed, r)
        try:
            system = run_particle_filter(model, n_particles, policy, rng)
        except DegenerateWeightsError as exc:
            exc.replication = r
            raise
        out[j] = _estimator_value(system, phi, variant, normalizer)
    return out


def empirical_variance(model, phi, variant: str, n_particles: int, n_replications: int,
                       policy, master_seed: int, normalizer: float = 1.0,
                       jobs: int = 1) -> EmpiricalVarianceReport:
    """CLT-scaled empirical variance of a terminal estimator over replications.

    Replication ``r`` draws its generator from ``(master_seed, r)``, so the
    result is independent of ``jobs``; uncentred variants divide the raw
    estimator by ``normalizer`` (typically the exact terminal mass) before
    taking the variance.
    """
    if variant not in VARIANTS:
        raise DomainError(f"unknown variance variant {variant!r}")
    if n_particles < 2 or n_replications < 2:
        raise DomainError("need n_particles >= 2 and n_replications >= 2")
    indices = np.arange(n_replications)
    if jobs > 1:
        chunks = np.array_split(indices, jobs * 4)
        payloads = [(model, phi, variant, n_particles, policy, master_seed, normalizer, c)
                    for c in chunks if len(c)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            pieces = list(pool.map(_run_replication_batch, payloads))
        values = np.concatenate(pieces)
    else:
        values = _run_replication_batch(
            (model, phi, variant, n_particles, policy, master_seed, normalizer, indices))
    sample_var = float(values.var(ddof=1))
    return EmpiricalVarianceReport(
        variant=variant,
        n_particles=n_particles,
        n_replications=n_replications,
        sample_mean=float(values.mean()),
        scaled_variance=n_particles * sample_var,
        se=n_particles * jackknife_se_of_variance(values),
    )


def write_variance_csv(report: VarianceReport, path) -> None:
    """Serialise a report as (variant, p, term) rows plus a total row."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "p", "term"])
        for p, term in enumerate(report.terms):
            writer.writerow([report.variant, p, repr(float(term))])
        writer.writerow([report.variant, "total", repr(report.total)])
