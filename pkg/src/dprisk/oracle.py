"""Brute-force and quadrature oracles for validating samplers and formulas.

Everything here is deliberately independent of the sampling code paths it
checks: partition sums are enumerated, posteriors are integrated on grids,
and risk expectations are simulated directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import gammaln, logsumexp

from .errors import InputError, NumericalError

__all__ = [
    "bell_number",
    "enumerate_partitions",
    "ewens_log_weight",
    "ewens_weight",
    "gamma_poisson_log_marginal",
    "exact_marginal_likelihood",
    "partition_posterior",
    "QuadraturePosterior",
    "quadrature_posterior_1d",
    "mc_risk_oracle",
]

_MAX_ENUM_K = 9


def bell_number(K: int) -> int:
    """Bell number via the binomial recursion B_{n+1} = sum_s C(n,s) B_s."""
    if K < 0:
        raise InputError("K must be nonnegative")
    B = [1]
    for n in range(K):
        B.append(sum(math.comb(n, s) * B[s] for s in range(n + 1)))
    return B[K]


def enumerate_partitions(K: int) -> list[tuple[int, ...]]:
    """All set partitions of K items as canonical assignment tuples
    (restricted growth strings: z[0] = 0 and z[i] <= max(z[:i]) + 1)."""
    if not (1 <= K <= _MAX_ENUM_K):
        raise InputError(f"partition enumeration supports 1 <= K <= {_MAX_ENUM_K}")
    out: list[tuple[int, ...]] = []

    def extend(z: list[int], top: int) -> None:
        if len(z) == K:
            out.append(tuple(z))
            return
        for c in range(top + 2):
            z.append(c)
            extend(z, max(top, c))
            z.pop()

    extend([0], 0)
    return out


def _cluster_sizes(assignment: Sequence[int]) -> np.ndarray:
    z = np.asarray(assignment, dtype=np.int64)
    return np.bincount(z)


def ewens_log_weight(assignment: Sequence[int], m: float) -> float:
    """Log probability of a specific set partition under the Ewens (CRP)
    distribution: Gamma(m) m^c prod_j Gamma(n_j) / Gamma(m + K)."""
    if m <= 0:
        raise InputError("mass parameter m must be positive")
    sizes = _cluster_sizes(assignment)
    K = int(sizes.sum())
    c = sizes.shape[0]
    return float(
        gammaln(m) + c * math.log(m) + gammaln(sizes).sum() - gammaln(m + K)
    )


def ewens_weight(assignment: Sequence[int], m: float) -> float:
    return math.exp(ewens_log_weight(assignment, m))


def gamma_poisson_log_marginal(f_sum: float, pe_sum: float, f_terms: np.ndarray,
                               pe_terms: np.ndarray, a: float, b: float) -> float:
    """Log of the Gamma-Poisson cluster marginal

        int prod_k Poisson(f_k; pe_k * omega) Ga(omega; a, b) d omega
      = [prod_k pe_k^{f_k} / f_k!] * b^a Gamma(a + sum f) /
        [Gamma(a) (b + sum pe)^{a + sum f}]

    where pe_k = pi * e^{w_k' beta}.
    """
    const = float(np.sum(f_terms * np.log(pe_terms)) - gammaln(f_terms + 1.0).sum())
    return (
        const
        + a * math.log(b)
        + float(gammaln(a + f_sum) - gammaln(a))
        - (a + f_sum) * math.log(b + pe_sum)
    )


def _partition_log_terms(f: np.ndarray, pe: np.ndarray, m: float,
                         a: float, b: float) -> tuple[list[tuple[int, ...]], np.ndarray]:
    K = f.shape[0]
    partitions = enumerate_partitions(K)
    logs = np.empty(len(partitions))
    for i, z in enumerate(partitions):
        za = np.asarray(z)
        lw = ewens_log_weight(z, m)
        for j in range(int(za.max()) + 1):
            members = za == j
            lw += gamma_poisson_log_marginal(
                float(f[members].sum()), float(pe[members].sum()),
                f[members], pe[members], a, b)
        logs[i] = lw
    return partitions, logs


def exact_marginal_likelihood(table, spec, beta: np.ndarray, m: float, base) -> float:
    """Log marginal likelihood of the Gamma-base mixed model: the sum over
    all Bell(K) partitions of Ewens weight times per-cluster Gamma-Poisson
    marginals. Only feasible for small tables (K <= 8 recommended)."""
    from .dpmcmc import GammaBase
    from .loglinear import design_matrix

    if not isinstance(base, GammaBase):
        raise InputError("exact marginal enumeration requires a GammaBase")
    f = np.asarray(table.f[table.active], dtype=float)
    W = design_matrix(spec, active=table.active)
    pe = table.pi * np.exp(W @ np.asarray(beta, dtype=float))
    _, logs = _partition_log_terms(f, pe, m, base.a, base.b)
    return float(logsumexp(logs))


def partition_posterior(table, spec, beta: np.ndarray, m: float, base):
    """Exact posterior over set partitions given fixed beta and m under a
    GammaBase: returns (partitions, probabilities)."""
    from .dpmcmc import GammaBase
    from .loglinear import design_matrix

    if not isinstance(base, GammaBase):
        raise InputError("partition enumeration requires a GammaBase")
    f = np.asarray(table.f[table.active], dtype=float)
    W = design_matrix(spec, active=table.active)
    pe = table.pi * np.exp(W @ np.asarray(beta, dtype=float))
    partitions, logs = _partition_log_terms(f, pe, m, base.a, base.b)
    probs = np.exp(logs - logsumexp(logs))
    probs /= probs.sum()
    return partitions, probs


@dataclass
class QuadraturePosterior:
    """Trapezoid-rule normalized 1-d posterior on a grid."""

    grid: np.ndarray
    log_density: np.ndarray  # unnormalized on input, normalized after init
    log_norm: float

    @property
    def density(self) -> np.ndarray:
        return np.exp(self.log_density)

    def moment(self, order: int = 1, central: bool = False) -> float:
        x = self.grid
        if central:
            mu = self.moment(1)
            vals = (x - mu) ** order
        else:
            vals = x ** order
        return float(np.trapezoid(vals * self.density, x))

    @property
    def mean(self) -> float:
        return self.moment(1)

    @property
    def var(self) -> float:
        return self.moment(2, central=True)

    def cdf(self, x: np.ndarray) -> np.ndarray:
        dens = self.density
        cum = np.concatenate(
            [[0.0], np.cumsum(np.diff(self.grid) * (dens[1:] + dens[:-1]) / 2.0)])
        cum /= cum[-1]
        return np.interp(np.asarray(x, dtype=float), self.grid, cum)

    def ks_distance(self, samples: np.ndarray) -> float:
        """sup_x |empirical CDF - quadrature CDF| over the sample points."""
        s = np.sort(np.asarray(samples, dtype=float))
        n = s.shape[0]
        F = self.cdf(s)
        ecdf_hi = np.arange(1, n + 1) / n
        ecdf_lo = np.arange(0, n) / n
        return float(max(np.abs(ecdf_hi - F).max(), np.abs(ecdf_lo - F).max()))


def quadrature_posterior_1d(
    loglik: Callable[[np.ndarray], np.ndarray],
    log_prior: Callable[[np.ndarray], np.ndarray],
    grid: np.ndarray,
) -> QuadraturePosterior:
    """Normalize loglik + log_prior on a grid (vectorized callables)."""
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.shape[0] < 8:
        raise InputError("quadrature grid must be 1-d with at least 8 points")
    logd = np.asarray(loglik(grid), dtype=float) + np.asarray(log_prior(grid), dtype=float)
    if not np.all(np.isfinite(logd)):
        raise NumericalError("non-finite integrand on quadrature grid")
    peak = logd.max()
    dens = np.exp(logd - peak)
    norm = float(np.trapezoid(dens, grid))
    log_density = logd - peak - math.log(norm)
    return QuadraturePosterior(grid=grid, log_density=log_density,
                               log_norm=peak + math.log(norm))


def mc_risk_oracle(lam: float, pi: float, draws: int, seed: int):
    """Monte Carlo estimate of the per-cell risk expectations for a sample
    unique: simulate Y ~ Poisson((1 - pi) * lam) and average 1{Y = 0} and
    1 / (1 + Y). Returns (tau1, tau2, se1, se2)."""
    if draws < 10 ** 5:
        raise InputError("use at least 1e5 draws for the risk oracle")
    rng = np.random.default_rng(seed)
    mu = (1.0 - pi) * lam
    y = rng.poisson(mu, size=draws)
    t1 = (y == 0).astype(float)
    t2 = 1.0 / (1.0 + y)
    se1 = float(t1.std(ddof=1) / math.sqrt(draws))
    se2 = float(t2.std(ddof=1) / math.sqrt(draws))
    return float(t1.mean()), float(t2.mean()), se1, se2
