"""Gibbs sampler for Poisson log-linear models with Dirichlet-process
random effects.

One sweep draws from the conditionals in a fixed order: fixed effects by a
simplified manifold Langevin (SMMALA) Metropolis step, the cell partition
and cluster values by a collapsed conjugate update under a Gamma base
measure (or Metropolis reassignment with auxiliary proposals under a
Gaussian base), and the mass parameter by the usual beta-augmented mixture
draw. The partition sweeps are jitted with numba; they share one
numpy Generator with the Python-level updates, so a chain is a single
deterministic stream given its seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from numba import njit
from scipy.linalg import cholesky, solve_triangular

from .errors import InputError, NumericalError
from .loglinear import ModelSpec, design_matrix, fit_ml
from .table import ContingencyTable

__all__ = [
    "GammaBase",
    "GaussianBase",
    "SamplerConfig",
    "DPState",
    "PosteriorDraws",
    "smmala_update",
    "neal3_update",
    "neal5_update",
    "escobar_west_update",
    "gaussian_hyper_update",
    "initial_state",
    "run_chain",
    "pool_draws",
]


# -- base measures and configuration -----------------------------------------


@dataclass(frozen=True)
class GammaBase:
    """Base measure for omega = e^phi: Gamma(a, b) with rate b."""

    a: float = 1.0
    b: float = 0.1

    def __post_init__(self):
        if self.a <= 0 or self.b <= 0:
            raise InputError("GammaBase requires a > 0 and b > 0")


@dataclass(frozen=True)
class GaussianBase:
    """Gaussian base measure N(alpha, sigma^2) for phi, with conjugate
    hyperpriors alpha ~ N(mean0, var0) and sigma^2 ~ InvGamma(shape, scale)."""

    mean0: float = 0.0
    var0: float = 10.0
    sigma2_shape: float = 1.0
    sigma2_scale: float = 1.0

    def __post_init__(self):
        if self.var0 <= 0 or self.sigma2_shape <= 0 or self.sigma2_scale <= 0:
            raise InputError("GaussianBase hyperprior parameters must be positive")


@dataclass
class SamplerConfig:
    """Chain configuration. `draws` is the number of retained draws (H)."""

    burn_in: int = 5000
    draws: int = 5000
    thin: int = 2
    epsilon: float = 0.1
    epsilon_adapt_target: float = 0.574
    m_prior_shape: float = 1.0
    m_prior_rate: float = 0.1
    beta_prior_var: float = 10.0
    aux_components: int = 3
    phi_step: float = 0.5
    seed: int = 0
    empirical_bayes: bool = False
    fix_beta: tuple[float, ...] | None = None
    fix_m: float | None = None
    parametric: bool = False

    def __post_init__(self):
        if self.draws < 1:
            raise InputError("need at least one retained draw")
        if self.thin < 1 or self.burn_in < 0:
            raise InputError("thin must be >= 1 and burn_in >= 0")
        if self.epsilon <= 0:
            raise InputError("epsilon must be positive")
        if not (0.0 < self.epsilon_adapt_target < 1.0):
            raise InputError("epsilon_adapt_target must be in (0, 1)")
        if self.aux_components < 1:
            raise InputError("aux_components must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        known = {f for f in cls.__dataclass_fields__}
        bad = set(d) - known
        if bad:
            raise InputError(f"unknown sampler config fields: {sorted(bad)}")
        cfg = cls(**d)
        if cfg.fix_beta is not None:
            cfg.fix_beta = tuple(float(x) for x in cfg.fix_beta)
        return cfg

    def as_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        if d["fix_beta"] is not None:
            d["fix_beta"] = list(d["fix_beta"])
        return d


@dataclass
class DPState:
    """Current MCMC state. `phi` holds per-cluster log random effects
    (phi_j = log omega_j under a GammaBase); `z` maps active cells to
    cluster ids, always compact 0..c-1."""

    beta: np.ndarray
    z: np.ndarray
    phi: np.ndarray
    m: float
    alpha: float = 0.0
    sigma2: float = 1.0

    @property
    def n_clusters(self) -> int:
        return self.phi.shape[0]

    def cluster_sizes(self) -> np.ndarray:
        return np.bincount(self.z, minlength=self.n_clusters)

    def phi_cells(self) -> np.ndarray:
        return self.phi[self.z]


# -- SMMALA update for the fixed effects --------------------------------------


def _chol_metric(M: np.ndarray) -> np.ndarray:
    try:
        return cholesky(M, lower=True)
    except np.linalg.LinAlgError:
        pass
    try:
        return cholesky(M + 1e-10 * np.eye(M.shape[0]), lower=True)
    except np.linalg.LinAlgError:
        raise NumericalError(
            "SMMALA metric tensor is not positive definite (beyond 1e-10 jitter)")


def _smmala_parts(beta, W, f, pi, phi_cell, prior_var):
    eta = W @ beta + phi_cell
    with np.errstate(over="ignore"):
        lam_pi = pi * np.exp(eta)
    if not np.all(np.isfinite(lam_pi)):
        raise NumericalError("non-finite rates in SMMALA update")
    ll = float(f @ eta - lam_pi.sum())          # Poisson loglik up to a constant
    grad = W.T @ (f - lam_pi)                   # likelihood-only drift
    M = W.T @ (W * lam_pi[:, None]) + np.eye(beta.shape[0]) / prior_var
    return ll, grad, M


def _proposal_logpdf(x, mu, L, eps):
    q = x.shape[0]
    r = L.T @ (x - mu)
    return (-0.5 * q * math.log(2.0 * math.pi) - q * math.log(eps)
            + float(np.log(np.diag(L)).sum()) - float(r @ r) / (2.0 * eps * eps))


def smmala_update(
    beta: np.ndarray,
    W: np.ndarray,
    f: np.ndarray,
    pi: float,
    phi_cell: np.ndarray | float,
    epsilon: float,
    prior_var: float,
    rng: np.random.Generator,
):
    """One Metropolis step with the position-dependent Gaussian proposal
    N(mu, eps^2 M^{-1}), mu = beta + (eps^2 / 2) M^{-1} grad, where M is the
    Poisson Fisher information plus the prior precision. Returns
    (beta_new, accepted, acceptance_probability)."""
    beta = np.asarray(beta, dtype=float)
    ll_c, g_c, M_c = _smmala_parts(beta, W, f, pi, phi_cell, prior_var)
    L_c = _chol_metric(M_c)
    half = solve_triangular(L_c, g_c, lower=True)
    nat_grad_c = solve_triangular(L_c.T, half, lower=False)
    mu_c = beta + 0.5 * epsilon * epsilon * nat_grad_c

    z = rng.standard_normal(beta.shape[0])
    prop = mu_c + epsilon * solve_triangular(L_c.T, z, lower=False)

    ll_p, g_p, M_p = _smmala_parts(prop, W, f, pi, phi_cell, prior_var)
    L_p = _chol_metric(M_p)
    half = solve_triangular(L_p, g_p, lower=True)
    nat_grad_p = solve_triangular(L_p.T, half, lower=False)
    mu_p = prop + 0.5 * epsilon * epsilon * nat_grad_p

    lprior_c = -0.5 * float(beta @ beta) / prior_var
    lprior_p = -0.5 * float(prop @ prop) / prior_var
    log_alpha = (
        (ll_p + lprior_p) - (ll_c + lprior_c)
        + _proposal_logpdf(beta, mu_p, L_p, epsilon)
        - _proposal_logpdf(prop, mu_c, L_c, epsilon)
    )
    alpha_prob = min(1.0, math.exp(min(log_alpha, 0.0)))
    if math.log(rng.random()) < log_alpha:
        return prop, True, alpha_prob
    return beta, False, alpha_prob


# -- collapsed partition sweep, Gamma base (Neal's Algorithm 3) ---------------


@njit(cache=True)
def _neal3_sweep(f, pe, z, phi, n, sumf, sume, c, m, a, b, rng):
    """In-place collapsed Gibbs sweep over cells; returns the cluster count.

    pe holds pi * e^{w_k' beta}. Buffers phi/n/sumf/sume have capacity K;
    entries [0, c) are live. Cluster deletion swaps the last live cluster
    into the freed slot.
    """
    K = f.shape[0]
    lgam_a = math.lgamma(a)
    logw = np.empty(K + 1)
    for k in range(K):
        fk = f[k]
        pek = pe[k]
        j = z[k]
        n[j] -= 1
        sumf[j] -= fk
        sume[j] -= pek
        if n[j] == 0:
            last = c - 1
            if j != last:
                phi[j] = phi[last]
                n[j] = n[last]
                sumf[j] = sumf[last]
                sume[j] = sume[last]
                for i in range(K):
                    if z[i] == last:
                        z[i] = j
            c = last

        best = -1.0e308
        for j2 in range(c):
            lw = math.log(n[j2]) + fk * phi[j2] - pek * math.exp(phi[j2])
            logw[j2] = lw
            if lw > best:
                best = lw
        lw_new = (math.log(m) + math.lgamma(a + fk) - lgam_a
                  + a * math.log(b) - (a + fk) * math.log(b + pek))
        logw[c] = lw_new
        if lw_new > best:
            best = lw_new

        tot = 0.0
        for j2 in range(c + 1):
            w = math.exp(logw[j2] - best)
            logw[j2] = w
            tot += w
        u = rng.random() * tot
        acc = 0.0
        pick = c
        for j2 in range(c + 1):
            acc += logw[j2]
            if u <= acc:
                pick = j2
                break

        if pick == c:
            omega = rng.gamma(a + fk, 1.0 / (b + pek))
            phi[c] = math.log(omega)
            n[c] = 1
            sumf[c] = fk
            sume[c] = pek
            z[k] = c
            c += 1
        else:
            n[pick] += 1
            sumf[pick] += fk
            sume[pick] += pek
            z[k] = pick

    # conjugate refresh of every cluster value
    for j in range(c):
        omega = rng.gamma(a + sumf[j], 1.0 / (b + sume[j]))
        phi[j] = math.log(omega)
    return c


# -- Metropolis partition sweep, Gaussian base (Neal's Algorithm 5) -----------


@njit(cache=True)
def _neal5_sweep(f, pe, z, phi, n, sumf, sume, c, m, alpha, sigma, R, rng):
    """In-place Metropolis reassignment sweep with proposals from the
    conditional prior and fresh base-measure draws for new clusters;
    R proposal attempts per cell. Returns the cluster count."""
    K = f.shape[0]
    for k in range(K):
        fk = f[k]
        pek = pe[k]
        for _ in range(R):
            jcur = z[k]
            u = rng.random() * (K - 1.0 + m)
            acc = 0.0
            jprop = -1
            for j2 in range(c):
                w = float(n[j2])
                if j2 == jcur:
                    w -= 1.0
                acc += w
                if u <= acc:
                    jprop = j2
                    break

            if jprop == jcur:
                continue

            if jprop < 0:
                phistar = alpha + sigma * rng.standard_normal()
                logr = fk * (phistar - phi[jcur]) - pek * (math.exp(phistar) - math.exp(phi[jcur]))
                if math.log(rng.random()) < logr:
                    n[jcur] -= 1
                    sumf[jcur] -= fk
                    sume[jcur] -= pek
                    if n[jcur] == 0:
                        last = c - 1
                        if jcur != last:
                            phi[jcur] = phi[last]
                            n[jcur] = n[last]
                            sumf[jcur] = sumf[last]
                            sume[jcur] = sume[last]
                            for i in range(K):
                                if z[i] == last:
                                    z[i] = jcur
                        c = last
                    phi[c] = phistar
                    n[c] = 1
                    sumf[c] = fk
                    sume[c] = pek
                    z[k] = c
                    c += 1
            else:
                logr = fk * (phi[jprop] - phi[jcur]) - pek * (math.exp(phi[jprop]) - math.exp(phi[jcur]))
                if math.log(rng.random()) < logr:
                    n[jcur] -= 1
                    sumf[jcur] -= fk
                    sume[jcur] -= pek
                    if n[jcur] == 0:
                        last = c - 1
                        if jcur != last:
                            phi[jcur] = phi[last]
                            n[jcur] = n[last]
                            sumf[jcur] = sumf[last]
                            sume[jcur] = sume[last]
                            for i in range(K):
                                if z[i] == last:
                                    z[i] = jcur
                            if jprop == last:
                                jprop = jcur
                        c = last
                    n[jprop] += 1
                    sumf[jprop] += fk
                    sume[jprop] += pek
                    z[k] = jprop
    return c


def _aggregates(z, f, pe, c):
    n = np.bincount(z, minlength=c).astype(np.int64)
    sumf = np.bincount(z, weights=f, minlength=c)
    sume = np.bincount(z, weights=pe, minlength=c)
    return n, sumf, sume


def _phi_rw_update(phi, sumf, sume, alpha, sigma2, step, rng):
    """Vectorized random-walk Metropolis refresh of all cluster values under
    the Gaussian base. Returns the acceptance fraction."""
    c = phi.shape[0]
    prop = phi + step * rng.standard_normal(c)
    lp_cur = sumf * phi - sume * np.exp(phi) - (phi - alpha) ** 2 / (2.0 * sigma2)
    lp_new = sumf * prop - sume * np.exp(prop) - (prop - alpha) ** 2 / (2.0 * sigma2)
    accept = np.log(rng.random(c)) < (lp_new - lp_cur)
    phi[accept] = prop[accept]
    return float(accept.mean()) if c else 1.0


def gaussian_hyper_update(phi, base: GaussianBase, sigma2: float,
                          rng: np.random.Generator) -> tuple[float, float]:
    """Conjugate refresh of (alpha, sigma^2) given the cluster values."""
    c = phi.shape[0]
    prec = c / sigma2 + 1.0 / base.var0
    mean = (phi.sum() / sigma2 + base.mean0 / base.var0) / prec
    alpha = mean + math.sqrt(1.0 / prec) * rng.standard_normal()
    shape = base.sigma2_shape + 0.5 * c
    scale = base.sigma2_scale + 0.5 * float(((phi - alpha) ** 2).sum())
    sigma2_new = scale / rng.gamma(shape, 1.0)
    return float(alpha), float(sigma2_new)


# -- Escobar-West mass update -------------------------------------------------


def escobar_west_update(m: float, c: int, K: int, prior_shape: float,
                        prior_rate: float, rng: np.random.Generator) -> float:
    """Beta-augmented draw from m | c, K under a Gamma(shape, rate) prior."""
    eta = rng.beta(m + 1.0, K)
    rate_new = prior_rate - math.log(eta)
    odds = (prior_shape + c - 1.0) / (K * rate_new)
    if rng.random() < odds / (1.0 + odds):
        return float(rng.gamma(prior_shape + c, 1.0 / rate_new))
    return float(rng.gamma(prior_shape + c - 1.0, 1.0 / rate_new))


# -- spec-level wrappers -------------------------------------------------------


def neal3_update(state: DPState, table: ContingencyTable, spec: ModelSpec,
                 base: GammaBase, rng: np.random.Generator) -> DPState:
    """One collapsed partition-and-values sweep under the Gamma base."""
    if not isinstance(base, GammaBase):
        raise InputError("neal3_update requires a GammaBase")
    f = table.f[table.active].astype(np.float64)
    W = design_matrix(spec, active=table.active)
    pe = table.pi * np.exp(W @ state.beta)
    K = f.shape[0]
    z = state.z.astype(np.int64).copy()
    c0 = state.n_clusters
    phi = np.empty(K)
    phi[:c0] = state.phi
    n, sumf, sume = (np.empty(K, dtype=np.int64), np.empty(K), np.empty(K))
    n[:c0], sumf[:c0], sume[:c0] = _aggregates(z, f, pe, c0)
    c = _neal3_sweep(f, pe, z, phi, n, sumf, sume, c0, state.m, base.a, base.b, rng)
    return replace(state, z=z, phi=phi[:c].copy())


def neal5_update(state: DPState, table: ContingencyTable, spec: ModelSpec,
                 base: GaussianBase, rng: np.random.Generator,
                 aux_components: int = 3, phi_step: float = 0.5) -> DPState:
    """One Metropolis reassignment sweep plus cluster-value random walk and
    conjugate hyperparameter refresh under the Gaussian base."""
    if not isinstance(base, GaussianBase):
        raise InputError("neal5_update requires a GaussianBase")
    f = table.f[table.active].astype(np.float64)
    W = design_matrix(spec, active=table.active)
    pe = table.pi * np.exp(W @ state.beta)
    K = f.shape[0]
    z = state.z.astype(np.int64).copy()
    c0 = state.n_clusters
    phi = np.empty(K)
    phi[:c0] = state.phi
    n, sumf, sume = (np.empty(K, dtype=np.int64), np.empty(K), np.empty(K))
    n[:c0], sumf[:c0], sume[:c0] = _aggregates(z, f, pe, c0)
    c = _neal5_sweep(f, pe, z, phi, n, sumf, sume, c0, state.m,
                     state.alpha, math.sqrt(state.sigma2), aux_components, rng)
    phi_live = phi[:c].copy()
    n2, sumf2, sume2 = _aggregates(z, f, pe, c)
    _phi_rw_update(phi_live, sumf2, sume2, state.alpha, state.sigma2, phi_step, rng)
    alpha, sigma2 = gaussian_hyper_update(phi_live, base, state.sigma2, rng)
    return replace(state, z=z, phi=phi_live, alpha=alpha, sigma2=sigma2)


# -- chain ---------------------------------------------------------------------


@dataclass
class PosteriorDraws:
    """Retained draws: per-cell rates (H x K over active cells), fixed
    effects, cluster-count and mass traces, and sampler diagnostics."""

    lam: np.ndarray
    beta: np.ndarray
    c_trace: np.ndarray
    m_trace: np.ndarray
    acceptance_rate: float
    epsilon_final: float
    pi: float

    @property
    def H(self) -> int:
        return self.lam.shape[0]

    def diagnostics(self) -> dict:
        def summary(x):
            qs = np.quantile(x, [0.025, 0.5, 0.975])
            return {"mean": float(np.mean(x)), "q025": float(qs[0]),
                    "median": float(qs[1]), "q975": float(qs[2])}

        return {
            "H": int(self.H),
            "K": int(self.lam.shape[1]),
            "acceptance_rate": self.acceptance_rate,
            "epsilon_final": self.epsilon_final,
            "c_trace": summary(self.c_trace),
            "m_trace": summary(self.m_trace),
            "pi": self.pi,
        }

    def save(self, prefix: str | Path) -> None:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        np.save(f"{prefix}.lam.npy", self.lam)
        np.save(f"{prefix}.beta.npy", self.beta)
        np.save(f"{prefix}.c.npy", self.c_trace)
        np.save(f"{prefix}.m.npy", self.m_trace)
        with open(f"{prefix}.diag.json", "w") as fh:
            json.dump(self.diagnostics(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, prefix: str | Path) -> "PosteriorDraws":
        prefix = Path(prefix)
        with open(f"{prefix}.diag.json") as fh:
            diag = json.load(fh)
        return cls(
            lam=np.load(f"{prefix}.lam.npy"),
            beta=np.load(f"{prefix}.beta.npy"),
            c_trace=np.load(f"{prefix}.c.npy"),
            m_trace=np.load(f"{prefix}.m.npy"),
            acceptance_rate=diag["acceptance_rate"],
            epsilon_final=diag["epsilon_final"],
            pi=diag["pi"],
        )


def pool_draws(chains: list[PosteriorDraws]) -> PosteriorDraws:
    """Concatenate several chains' retained draws in the given order."""
    if not chains:
        raise InputError("no chains to pool")
    return PosteriorDraws(
        lam=np.concatenate([c.lam for c in chains], axis=0),
        beta=np.concatenate([c.beta for c in chains], axis=0),
        c_trace=np.concatenate([c.c_trace for c in chains]),
        m_trace=np.concatenate([c.m_trace for c in chains]),
        acceptance_rate=float(np.mean([c.acceptance_rate for c in chains])),
        epsilon_final=float(np.mean([c.epsilon_final for c in chains])),
        pi=chains[0].pi,
    )


def initial_state(table: ContingencyTable, spec: ModelSpec, base,
                  config: SamplerConfig, rng: np.random.Generator,
                  beta_init: np.ndarray | None = None) -> DPState:
    """Starting state: beta at the supplied value (or a flat-table heuristic),
    partition from a prior CRP draw, cluster values from their conditionals."""
    f = table.f[table.active].astype(np.float64)
    K = f.shape[0]
    q = spec.q
    if beta_init is not None:
        beta = np.asarray(beta_init, dtype=float).copy()
        if beta.shape != (q,):
            raise InputError(f"beta_init must have length {q}")
    else:
        beta = np.zeros(q)
        beta[0] = math.log(max(table.n, 1) / (table.pi * K))

    m = config.fix_m if config.fix_m is not None else (
        config.m_prior_shape / config.m_prior_rate)

    if config.parametric:
        z = np.arange(K, dtype=np.int64)
    else:
        # prior CRP draw keeps the initial cluster count realistic
        z = np.zeros(K, dtype=np.int64)
        sizes = [1]
        for i in range(1, K):
            u = rng.random() * (i + m)
            acc = 0.0
            pick = len(sizes)
            for j, s in enumerate(sizes):
                acc += s
                if u <= acc:
                    pick = j
                    break
            if pick == len(sizes):
                sizes.append(1)
            else:
                sizes[pick] += 1
            z[i] = pick
    c = int(z.max()) + 1

    W = design_matrix(spec, active=table.active)
    pe = table.pi * np.exp(W @ beta)
    alpha, sigma2 = 0.0, 1.0
    if isinstance(base, GammaBase):
        _, sumf, sume = _aggregates(z, f, pe, c)
        phi = np.log(rng.gamma(base.a + sumf, 1.0 / (base.b + sume)))
    elif isinstance(base, GaussianBase):
        alpha = base.mean0
        sigma2 = base.sigma2_scale / base.sigma2_shape
        phi = alpha + math.sqrt(sigma2) * rng.standard_normal(c)
    else:
        raise InputError(f"unknown base measure {base!r}")
    return DPState(beta=beta, z=z, phi=phi, m=float(m), alpha=alpha, sigma2=sigma2)


def run_chain(
    table: ContingencyTable,
    spec: ModelSpec,
    base,
    config: SamplerConfig,
    beta_init: np.ndarray | None = None,
) -> PosteriorDraws:
    """Run one chain and retain H = config.draws rate draws after burn-in.

    The step size adapts toward the target acceptance rate during burn-in
    only (Robbins-Monro on log epsilon) and is frozen afterwards. With
    config.empirical_bayes the fixed effects are pinned at their ML
    estimates and the SMMALA step is skipped; config.parametric freezes the
    partition at singletons (the infinite-mass counterpart model) and skips
    the mass update.
    """
    if tuple(v.name for v in spec.variables) != tuple(v.name for v in table.variables):
        raise InputError("spec variables do not match table variables")
    rng = np.random.default_rng(config.seed)

    W = design_matrix(spec, active=table.active)
    f = table.f[table.active].astype(np.float64)
    K, q = W.shape
    pi = table.pi

    if config.empirical_bayes:
        fit = fit_ml(table, spec)
        if not fit.converged:
            raise NumericalError(
                f"empirical-Bayes chain needs a converged ML fit: {fit.message}")
        beta_init = fit.beta_hat
        update_beta = False
    elif config.fix_beta is not None:
        beta_init = np.asarray(config.fix_beta, dtype=float)
        update_beta = False
    else:
        update_beta = True

    gauss = isinstance(base, GaussianBase)
    if not gauss and not isinstance(base, GammaBase):
        raise InputError(f"unknown base measure {base!r}")
    update_m = (config.fix_m is None) and not config.parametric

    state = initial_state(table, spec, base, config, rng, beta_init=beta_init)
    beta = state.beta
    z = state.z
    c = state.n_clusters
    phi = np.empty(K)
    phi[:c] = state.phi
    m = state.m
    alpha, sigma2 = state.alpha, state.sigma2

    eps = config.epsilon
    log_eps = math.log(eps)
    phi_step = config.phi_step
    log_phi_step = math.log(phi_step)

    H = config.draws
    total = config.burn_in + H * config.thin
    lam_out = np.empty((H, K))
    beta_out = np.empty((H, q))
    c_out = np.empty(H, dtype=np.int64)
    m_out = np.empty(H)
    n_buf = np.empty(K, dtype=np.int64)
    sumf_buf = np.empty(K)
    sume_buf = np.empty(K)

    accept_count = 0
    accept_total = 0
    h = 0
    for t in range(total):
        burn = t < config.burn_in

        if update_beta:
            beta, accepted, aprob = smmala_update(
                beta, W, f, pi, phi[:c][z], eps, config.beta_prior_var, rng)
            if burn:
                log_eps += (aprob - config.epsilon_adapt_target) / (1.0 + t) ** 0.6
                eps = math.exp(log_eps)
            else:
                accept_count += accepted
                accept_total += 1

        pe = pi * np.exp(W @ beta)
        if not np.all(np.isfinite(pe)):
            bad = int(np.flatnonzero(~np.isfinite(pe))[0])
            raise NumericalError(
                f"non-finite conditional rate at iteration {t}, cell {bad} "
                f"(fixed-effects scale blew up)")
        if config.parametric:
            if gauss:
                acc_frac = _phi_rw_update(phi[:K], f, pe, alpha, sigma2, phi_step, rng)
                alpha, sigma2 = gaussian_hyper_update(phi[:K], base, sigma2, rng)
                if burn:
                    log_phi_step += (acc_frac - 0.44) / (1.0 + t) ** 0.6
                    phi_step = math.exp(log_phi_step)
            else:
                phi[:K] = np.log(rng.gamma(base.a + f, 1.0 / (base.b + pe)))
            c = K
        elif gauss:
            n_buf[:c], sumf_buf[:c], sume_buf[:c] = _aggregates(z, f, pe, c)
            c = _neal5_sweep(f, pe, z, phi, n_buf, sumf_buf, sume_buf, c, m,
                             alpha, math.sqrt(sigma2), config.aux_components, rng)
            _, sumf2, sume2 = _aggregates(z, f, pe, c)
            acc_frac = _phi_rw_update(phi[:c], sumf2, sume2, alpha, sigma2, phi_step, rng)
            alpha, sigma2 = gaussian_hyper_update(phi[:c], base, sigma2, rng)
            if burn:
                log_phi_step += (acc_frac - 0.44) / (1.0 + t) ** 0.6
                phi_step = math.exp(log_phi_step)
        else:
            n_buf[:c], sumf_buf[:c], sume_buf[:c] = _aggregates(z, f, pe, c)
            c = _neal3_sweep(f, pe, z, phi, n_buf, sumf_buf, sume_buf, c, m,
                             base.a, base.b, rng)

        if update_m:
            m = escobar_west_update(m, c, K, config.m_prior_shape,
                                    config.m_prior_rate, rng)

        post = t - config.burn_in
        if post >= 0 and post % config.thin == config.thin - 1:
            lam = np.exp(W @ beta + phi[:c][z])
            if not np.all(np.isfinite(lam)) or np.any(lam <= 0):
                bad = int(np.flatnonzero(~np.isfinite(lam) | (lam <= 0))[0])
                raise NumericalError(
                    f"non-finite rate at iteration {t}, cell {bad}")
            lam_out[h] = lam
            beta_out[h] = beta
            c_out[h] = c
            m_out[h] = m
            h += 1

    return PosteriorDraws(
        lam=lam_out,
        beta=beta_out,
        c_trace=c_out,
        m_trace=m_out,
        acceptance_rate=(accept_count / accept_total) if accept_total else 1.0,
        epsilon_final=eps,
        pi=pi,
    )
