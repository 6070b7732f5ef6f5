"""Poisson log-linear models on contingency tables.

Cell rates are lambda_k = exp(w_k' beta); the sample counts are modelled as
f_k ~ Poisson(pi * lambda_k) with known sampling fraction pi. Design rows
use treatment (corner-point) coding with each variable's first declared
level as reference. The stage-one search maximizes the penalized
log-likelihood C0(gamma) = loglik - d * gamma over nested sets of two-way
interactions, where d counts parameters added to the independence model.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import networkx as nx
import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.special import gammaln

from .errors import InputError, NumericalError
from .table import ContingencyTable, KeyVariable

__all__ = [
    "ModelSpec",
    "MLFit",
    "PathStep",
    "C0PathResult",
    "independence_spec",
    "parse_shorthand",
    "design_row",
    "design_matrix",
    "poisson_loglik",
    "poisson_grad",
    "poisson_fisher",
    "fit_poisson_ml",
    "fit_ml",
    "c0_score",
    "c0_path_search",
    "default_gamma_grid",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ModelSpec:
    """Fixed-effects structure: main effects of every variable (always
    present) plus a set of two-way interactions, stored as name pairs
    normalized to variable declaration order."""

    variables: tuple[KeyVariable, ...]
    interactions: frozenset[tuple[str, str]] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "variables", tuple(self.variables))
        order = {v.name: i for i, v in enumerate(self.variables)}
        if len(order) != len(self.variables):
            raise InputError("duplicate variable names in spec")
        norm = set()
        for pair in self.interactions:
            u, v = pair
            if u not in order or v not in order:
                raise InputError(f"interaction {pair} references undeclared variable")
            if u == v:
                raise InputError(f"interaction {pair} pairs a variable with itself")
            if order[u] > order[v]:
                u, v = v, u
            norm.add((u, v))
        object.__setattr__(self, "interactions", frozenset(norm))

    # -- structure ----------------------------------------------------------

    @property
    def q(self) -> int:
        """Number of free parameters under treatment coding."""
        L = {v.name: v.n_levels for v in self.variables}
        q = 1 + sum(l - 1 for l in L.values())
        q += sum((L[u] - 1) * (L[v] - 1) for u, v in self.interactions)
        return q

    def sorted_interactions(self) -> list[tuple[str, str]]:
        order = {v.name: i for i, v in enumerate(self.variables)}
        return sorted(self.interactions, key=lambda p: (order[p[0]], order[p[1]]))

    def with_interaction(self, u: str, v: str) -> "ModelSpec":
        return ModelSpec(self.variables, self.interactions | {(u, v)})

    def shorthand(self) -> str:
        """Text form `I + A*B + C*D`; round-trips through parse_shorthand."""
        terms = ["I"] + [f"{u}*{v}" for u, v in self.sorted_interactions()]
        return " + ".join(terms)

    # -- design columns ------------------------------------------------------

    def _columns(self) -> list[tuple]:
        """Column descriptors: ('icpt',), ('main', axis, level),
        ('inter', axis_u, axis_v, level_u, level_v)."""
        order = {v.name: i for i, v in enumerate(self.variables)}
        cols: list[tuple] = [("icpt",)]
        for ax, v in enumerate(self.variables):
            for l in range(1, v.n_levels):
                cols.append(("main", ax, l))
        for u, v in self.sorted_interactions():
            au, av = order[u], order[v]
            Lu = self.variables[au].n_levels
            Lv = self.variables[av].n_levels
            for lu in range(1, Lu):
                for lv in range(1, Lv):
                    cols.append(("inter", au, av, lu, lv))
        return cols


def independence_spec(variables: Sequence[KeyVariable]) -> ModelSpec:
    return ModelSpec(tuple(variables), frozenset())


def parse_shorthand(text: str, variables: Sequence[KeyVariable]) -> ModelSpec:
    """Parse `I + A*B + ...` into a ModelSpec over the given variables."""
    names = {v.name for v in variables}
    terms = [t.strip() for t in text.split("+")]
    if not terms or terms[0] != "I":
        raise InputError(f"model shorthand must start with 'I': {text!r}")
    pairs = set()
    for t in terms[1:]:
        if not t:
            raise InputError(f"empty term in shorthand {text!r}")
        parts = [p.strip() for p in t.split("*")]
        if len(parts) != 2:
            raise InputError(f"only two-way interactions are supported, got {t!r}")
        u, v = parts
        if u not in names or v not in names:
            raise InputError(f"term {t!r} references unknown variable")
        pairs.add((u, v))
    return ModelSpec(tuple(variables), frozenset(pairs))


def design_row(spec: ModelSpec, cell_index: Sequence[int]) -> np.ndarray:
    """Design vector w_k for one cell (treatment coding)."""
    idx = tuple(int(i) for i in cell_index)
    if len(idx) != len(spec.variables):
        raise InputError("cell index length does not match variable count")
    for i, v in zip(idx, spec.variables):
        if not (0 <= i < v.n_levels):
            raise InputError(f"cell index {idx} out of range")
    row = np.zeros(spec.q)
    for c, col in enumerate(spec._columns()):
        if col[0] == "icpt":
            row[c] = 1.0
        elif col[0] == "main":
            _, ax, l = col
            row[c] = 1.0 if idx[ax] == l else 0.0
        else:
            _, au, av, lu, lv = col
            row[c] = 1.0 if (idx[au] == lu and idx[av] == lv) else 0.0
    return row


def design_matrix(spec: ModelSpec, active: np.ndarray | None = None) -> np.ndarray:
    """Dense design matrix over all cells in row-major order (or over the
    cells selected by the boolean mask `active`)."""
    shape = tuple(v.n_levels for v in spec.variables)
    n_cells = int(np.prod(shape))
    grids = np.unravel_index(np.arange(n_cells), shape)
    if active is not None:
        grids = tuple(g[active] for g in grids)
        n_cells = grids[0].shape[0]
    cols = spec._columns()
    W = np.zeros((n_cells, len(cols)))
    for c, col in enumerate(cols):
        if col[0] == "icpt":
            W[:, c] = 1.0
        elif col[0] == "main":
            _, ax, l = col
            W[:, c] = grids[ax] == l
        else:
            _, au, av, lu, lv = col
            W[:, c] = (grids[au] == lu) & (grids[av] == lv)
    return W


# -- Poisson likelihood pieces (shared with the MCMC module) -----------------


def poisson_loglik(beta: np.ndarray, W: np.ndarray, f: np.ndarray, pi: float,
                   offset: np.ndarray | float = 0.0) -> float:
    """Full log-likelihood sum_k [f_k (log pi + eta_k) - pi e^{eta_k} - log f_k!]
    with eta = W beta + offset."""
    eta = W @ beta + offset
    return float(f @ (np.log(pi) + eta) - pi * np.exp(eta).sum()
                 - gammaln(f + 1.0).sum())


def poisson_grad(beta: np.ndarray, W: np.ndarray, f: np.ndarray, pi: float,
                 offset: np.ndarray | float = 0.0) -> np.ndarray:
    mu = pi * np.exp(W @ beta + offset)
    return W.T @ (f - mu)


def poisson_fisher(beta: np.ndarray, W: np.ndarray, pi: float,
                   offset: np.ndarray | float = 0.0) -> np.ndarray:
    """Expected information sum_k pi lambda_k w_k w_k' (equals the negative
    Hessian for the canonical log link)."""
    mu = pi * np.exp(W @ beta + offset)
    return W.T @ (W * mu[:, None])


@dataclass
class MLFit:
    beta_hat: np.ndarray
    loglik: float
    converged: bool
    iterations: int
    grad_norm: float = np.nan
    message: str = ""


def fit_poisson_ml(
    W: np.ndarray,
    f: np.ndarray,
    pi: float,
    start: np.ndarray | None = None,
    max_iter: int = 200,
    tol_loglik: float = 1e-10,
    tol_grad: float = 1e-6,
) -> MLFit:
    """Newton's method with step halving on the Poisson log-likelihood.

    Convergence requires both a relative log-likelihood change below
    tol_loglik and a gradient max-norm below tol_grad. A rank-deficient
    information matrix or divergence yields converged=False with a message
    rather than an exception.
    """
    f = np.asarray(f, dtype=float)
    K, q = W.shape
    if start is None:
        beta = np.zeros(q)
        beta[0] = np.log(max(f.sum(), 1.0) / (pi * K))
    else:
        beta = np.asarray(start, dtype=float).copy()

    ll = poisson_loglik(beta, W, f, pi)
    message = ""
    for it in range(1, max_iter + 1):
        mu = pi * np.exp(W @ beta)
        g = W.T @ (f - mu)
        H = W.T @ (W * mu[:, None])
        try:
            chol = cho_factor(H, lower=True)
            step = cho_solve(chol, g)
        except np.linalg.LinAlgError:
            message = "information matrix is singular (rank-deficient design or empty margins)"
            return MLFit(beta, ll, False, it, float(np.abs(g).max()), message)
        if not np.all(np.isfinite(step)):
            message = "non-finite Newton step"
            return MLFit(beta, ll, False, it, float(np.abs(g).max()), message)

        # allow decreases at the loglik's floating-point noise floor, else a
        # correct full step near the optimum gets rejected and progress stalls
        noise = 1e-10 * (1.0 + abs(ll))
        scale = 1.0
        for _ in range(60):
            cand = beta + scale * step
            ll_new = poisson_loglik(cand, W, f, pi)
            if np.isfinite(ll_new) and ll_new >= ll - noise:
                break
            scale *= 0.5
        else:
            message = "step halving failed to improve the log-likelihood"
            return MLFit(beta, ll, False, it, float(np.abs(g).max()), message)

        rel_change = abs(ll_new - ll) / (1.0 + abs(ll_new))
        beta, ll = cand, ll_new
        g_now = W.T @ (f - pi * np.exp(W @ beta))
        gnorm = float(np.abs(g_now).max())
        if rel_change < tol_loglik and gnorm < tol_grad:
            return MLFit(beta, ll, True, it, gnorm)

    message = "maximum Newton iterations reached"
    g_now = W.T @ (f - pi * np.exp(W @ beta))
    return MLFit(beta, ll, False, max_iter, float(np.abs(g_now).max()), message)


def fit_ml(table: ContingencyTable, spec: ModelSpec,
           start: np.ndarray | None = None, **kwargs) -> MLFit:
    """Maximum-likelihood fit of `spec` on the table's non-structural cells."""
    if tuple(v.name for v in spec.variables) != tuple(v.name for v in table.variables):
        raise InputError("spec variables do not match table variables")
    W = design_matrix(spec, active=table.active)
    f = table.f[table.active]
    return fit_poisson_ml(W, f, table.pi, start=start, **kwargs)


# -- stage-one criterion and path search -------------------------------------


def c0_score(table: ContingencyTable, spec: ModelSpec, fit: MLFit,
             gamma: float, baseline_q: int) -> float:
    """Penalized log-likelihood loglik - d * gamma, d = q(spec) - baseline_q."""
    if not fit.converged:
        raise NumericalError(
            f"C0 undefined for non-converged fit of {spec.shorthand()!r}: {fit.message}")
    d = spec.q - baseline_q
    return fit.loglik - d * gamma


def default_gamma_grid(loglik_independence: float, size: int = 20,
                       floor: float = 2.0) -> np.ndarray:
    """Descending log-spaced penalty grid from |loglik|/2 down to `floor`."""
    hi = max(abs(loglik_independence) / 2.0, 2.0 * floor)
    return np.geomspace(hi, floor, size)


@dataclass
class PathStep:
    term: tuple[str, str]
    gamma: float
    c0: float
    d: int
    loglik: float


@dataclass
class C0PathResult:
    steps: list[PathStep]
    candidate_specs: list[ModelSpec]
    gamma_grid: np.ndarray = field(default_factory=lambda: np.array([]))

    def as_dict(self) -> dict:
        return {
            "steps": [
                {"term": list(s.term), "gamma": s.gamma, "c0": s.c0,
                 "d": s.d, "loglik": s.loglik}
                for s in self.steps
            ],
            "specs": [s.shorthand() for s in self.candidate_specs],
            "gamma_grid": [float(g) for g in self.gamma_grid],
        }


def _is_chordal_with(interactions, candidate, variables) -> bool:
    g = nx.Graph()
    g.add_nodes_from(v.name for v in variables)
    g.add_edges_from(interactions)
    g.add_edge(*candidate)
    return nx.is_chordal(g)


def c0_path_search(
    table: ContingencyTable,
    base: ModelSpec | None = None,
    gamma_grid: Sequence[float] | None = None,
    max_steps: int = 4,
    decomposability_check: bool = True,
    tol: float = 1e-9,
) -> C0PathResult:
    """Stepwise-forward search over two-way interactions driven by C0(gamma).

    Walking the (strictly descending, positive) penalty grid from its
    largest value, at each grid point the candidate interaction whose
    C0 most exceeds the current model's C0 is added (at most one addition
    per grid point); near-ties within `tol` go to the lexicographically
    smallest variable pair. Candidates breaking chordality of the
    interaction graph are skipped when decomposability_check is on, and
    candidates whose ML fit fails are skipped with a logged warning.
    """
    if base is None:
        base = independence_spec(table.variables)
    base_fit = fit_ml(table, base)
    if not base_fit.converged:
        raise NumericalError(f"baseline fit did not converge: {base_fit.message}")
    baseline_q = base.q

    if gamma_grid is None:
        gamma_grid = default_gamma_grid(base_fit.loglik)
    gamma_grid = np.asarray(list(gamma_grid), dtype=float)
    if gamma_grid.size == 0 or np.any(gamma_grid <= 0):
        raise InputError("gamma grid must be positive")
    if np.any(np.diff(gamma_grid) >= 0):
        raise InputError("gamma grid must be strictly descending")

    all_pairs = [
        (u.name, v.name)
        for i, u in enumerate(base.variables)
        for v in base.variables[i + 1:]
    ]

    current = base
    current_fit = base_fit
    fit_cache: dict[frozenset, MLFit] = {base.interactions: base_fit}
    steps: list[PathStep] = []
    specs = [base]

    for gamma in gamma_grid:
        if len(steps) >= max_steps:
            break
        c0_cur = current_fit.loglik - (current.q - baseline_q) * gamma

        best_pair = None
        best_c0 = -np.inf
        best_fit = None
        for pair in all_pairs:
            if pair in current.interactions:
                continue
            if decomposability_check and not _is_chordal_with(
                    current.interactions, pair, base.variables):
                continue
            cand = current.with_interaction(*pair)
            fit = fit_cache.get(cand.interactions)
            if fit is None:
                fit = fit_ml(table, cand, start=None)
                fit_cache[cand.interactions] = fit
            if not fit.converged:
                logger.warning("skipping candidate %s: %s",
                               cand.shorthand(), fit.message)
                continue
            c0_cand = fit.loglik - (cand.q - baseline_q) * gamma
            # pairs are visited in declaration order, so requiring a strict
            # improvement over the incumbent best breaks ties toward the
            # lexicographically smallest pair
            if c0_cand > best_c0 + tol:
                best_pair, best_c0, best_fit = pair, c0_cand, fit

        if best_pair is not None and best_c0 > c0_cur + tol:
            current = current.with_interaction(*best_pair)
            current_fit = best_fit
            steps.append(PathStep(term=best_pair, gamma=float(gamma), c0=float(best_c0),
                                  d=current.q - baseline_q, loglik=best_fit.loglik))
            specs.append(current)

    return C0PathResult(steps=steps, candidate_specs=specs, gamma_grid=gamma_grid)
