"""Per-cell and global disclosure-risk estimation from posterior draws.

Under the Poisson model the unseen remainder of a sample-unique cell is
F_k - 1 | f_k = 1 ~ Poisson(mu) with mu = (1 - pi) * lambda_k, giving the
closed forms

    tau1k* = Pr{F_k = 1 | f_k = 1} = exp(-mu)
    tau2k* = E[1 / F_k | f_k = 1]  = (1 - exp(-mu)) / mu

whose Monte Carlo counterparts live in dprisk.oracle. Global estimates sum
these over sample uniques per posterior draw; the standard error of the
posterior-mean estimator splits into within-cell variance, between-cell
deviance and between-cell codeviance components.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInputError, InputError
from .table import ContingencyTable

__all__ = [
    "DEFAULT_QUANTILE_LEVELS",
    "per_cell_risk",
    "star_trace_matrices",
    "global_risk_star",
    "global_risk_sim",
    "risk_quantiles",
    "se_decomposition",
    "PerCellRisk",
    "RiskReport",
    "build_risk_report",
]

DEFAULT_QUANTILE_LEVELS = (0.005, 0.025, 0.50, 0.975, 0.995)


def per_cell_risk(lam, pi: float):
    """Closed-form (tau1k*, tau2k*) for sample-unique cells; vectorized in lam.

    pi = 1 observes the whole population, so both risks are 1 exactly.
    """
    lam = np.asarray(lam, dtype=float)
    if np.any(lam <= 0):
        raise InputError("cell rates must be positive")
    if not (0.0 < pi <= 1.0):
        raise InputError(f"pi must be in (0, 1], got {pi}")
    if pi == 1.0:
        ones = np.ones_like(lam)
        return ones, ones.copy()
    mu = (1.0 - pi) * lam
    tau1 = np.exp(-mu)
    with np.errstate(invalid="ignore"):
        tau2 = np.where(mu > 0, -np.expm1(-mu) / np.where(mu > 0, mu, 1.0), 1.0)
    return tau1, tau2


def star_trace_matrices(lam_draws: np.ndarray, pi: float):
    """Per-draw per-cell risk matrices over the given rate draws (H x U)."""
    tau1, tau2 = per_cell_risk(lam_draws, pi)
    return tau1, tau2


def _unique_mask(table: ContingencyTable) -> np.ndarray:
    return (table.f[table.active] == 1)


def global_risk_star(draws, table: ContingencyTable):
    """Cell-independence global estimates from posterior rate draws.

    Returns (tau1_star_hat, tau2_star_hat, tau1_trace, tau2_trace); traces
    hold the per-draw sums over sample-unique cells.
    """
    lam = np.asarray(draws.lam if hasattr(draws, "lam") else draws, dtype=float)
    if lam.ndim != 2:
        raise InputError("draws must be an H x K matrix of rates")
    unique = _unique_mask(table)
    if lam.shape[1] != unique.shape[0]:
        raise InputError("draws are not aligned with the table's active cells")
    if not unique.any():
        warnings.warn("table has no sample uniques; global risks are zero")
        H = lam.shape[0]
        z = np.zeros(H)
        return 0.0, 0.0, z, z.copy()
    t1, t2 = per_cell_risk(lam[:, unique], table.pi)
    tr1 = t1.sum(axis=1)
    tr2 = t2.sum(axis=1)
    return float(tr1.mean()), float(tr2.mean()), tr1, tr2


def global_risk_sim(draws, table: ContingencyTable, seed: int):
    """Simulation-based global estimates: per draw, impute F_k = 1 +
    Poisson((1 - pi) lambda_k) for each unique cell and evaluate the exact
    risk summands. Returns (tau1_hat, tau2_hat, tau1_trace, tau2_trace)."""
    lam = np.asarray(draws.lam if hasattr(draws, "lam") else draws, dtype=float)
    if lam.ndim != 2:
        raise InputError("draws must be an H x K matrix of rates")
    unique = _unique_mask(table)
    H = lam.shape[0]
    if not unique.any():
        warnings.warn("table has no sample uniques; global risks are zero")
        z = np.zeros(H)
        return 0.0, 0.0, z, z.copy()
    rng = np.random.default_rng(seed)
    mu = (1.0 - table.pi) * lam[:, unique]
    Fk = 1 + rng.poisson(mu)
    tr1 = (Fk == 1).sum(axis=1).astype(float)
    tr2 = (1.0 / Fk).sum(axis=1)
    return float(tr1.mean()), float(tr2.mean()), tr1, tr2


def risk_quantiles(trace: np.ndarray, levels=DEFAULT_QUANTILE_LEVELS) -> dict[float, float]:
    """Empirical quantiles with linear interpolation between order statistics."""
    trace = np.asarray(trace, dtype=float)
    if trace.size == 0:
        raise InputError("cannot take quantiles of an empty trace")
    qs = np.quantile(trace, list(levels), method="linear")
    return {float(l): float(v) for l, v in zip(levels, qs)}


def se_decomposition(per_draw_per_cell: np.ndarray):
    """Split the squared s.e. of a summed risk estimator into components.

    Given the H x U matrix of per-draw per-cell contributions, the
    population variance of the per-draw sums satisfies

        se^2 = V_w + D_b + C_b

    with V_w the summed within-cell variances, D_b the between-cell
    deviance of the cell means, and C_b the summed between-cell
    codeviances. Returns (se, V_w, D_b, C_b).
    """
    x = np.asarray(per_draw_per_cell, dtype=float)
    if x.ndim != 2:
        raise InputError("expected an H x U matrix")
    H, U = x.shape
    if H < 2:
        raise InputError("need at least 2 draws for a standard error")
    cell_mean = x.mean(axis=0)                     # per-cell posterior means
    cell_sq = (x ** 2).mean(axis=0)
    S = x.sum(axis=1)                              # per-draw global sums
    total = float(S.mean())

    V_w = float(cell_sq.sum() - (cell_mean ** 2).sum())
    D_b = float((cell_mean ** 2).sum() - U * (total / U) ** 2)
    cross = float((S ** 2).mean() - cell_sq.sum())  # sum_{k != j} mean(x_k x_j)
    C_b = float(cross - U * (U - 1) * (total / U) ** 2)
    se = math.sqrt(max(V_w + D_b + C_b, 0.0))
    return se, V_w, D_b, C_b


@dataclass
class PerCellRisk:
    """Posterior summary of the risk of one sample-unique cell."""

    cell: tuple[int, ...]
    tau1_star: float
    tau2_star: float
    tau1_sd: float
    tau2_sd: float


@dataclass
class RiskReport:
    """Global risk estimates with uncertainty, plus the per-cell table."""

    tau1_star_hat: float
    tau2_star_hat: float
    tau1_star_median: float
    tau2_star_median: float
    tau1_hat: float
    tau2_hat: float
    n_uniques: int
    quantiles_star: dict[str, dict[float, float]]
    quantiles_sim: dict[str, dict[float, float]]
    se_tau1: tuple[float, float, float, float]   # (se, V_w, D_b, C_b)
    se_tau2: tuple[float, float, float, float]
    per_cell: list[PerCellRisk] = field(default_factory=list)
    true_tau1: int | None = None
    true_tau2: float | None = None

    def as_dict(self) -> dict:
        d = {
            "tau1_star_hat": self.tau1_star_hat,
            "tau2_star_hat": self.tau2_star_hat,
            "tau1_star_median": self.tau1_star_median,
            "tau2_star_median": self.tau2_star_median,
            "tau1_hat": self.tau1_hat,
            "tau2_hat": self.tau2_hat,
            "n_uniques": self.n_uniques,
            "quantiles_star": {k: {str(l): v for l, v in q.items()}
                               for k, q in self.quantiles_star.items()},
            "quantiles_sim": {k: {str(l): v for l, v in q.items()}
                              for k, q in self.quantiles_sim.items()},
            "se_tau1": {"se": self.se_tau1[0], "V_w": self.se_tau1[1],
                        "D_b": self.se_tau1[2], "C_b": self.se_tau1[3]},
            "se_tau2": {"se": self.se_tau2[0], "V_w": self.se_tau2[1],
                        "D_b": self.se_tau2[2], "C_b": self.se_tau2[3]},
        }
        if self.true_tau1 is not None:
            d["true_tau1"] = self.true_tau1
            d["true_tau2"] = self.true_tau2
            d["error_tau1_star"] = self.tau1_star_hat - self.true_tau1
            d["error_tau2_star"] = self.tau2_star_hat - self.true_tau2
            d["error_tau1_sim"] = self.tau1_hat - self.true_tau1
            d["error_tau2_sim"] = self.tau2_hat - self.true_tau2
        return d


def build_risk_report(
    draws,
    table: ContingencyTable,
    seed: int,
    levels=DEFAULT_QUANTILE_LEVELS,
) -> RiskReport:
    """Assemble the full risk report from posterior rate draws."""
    lam = np.asarray(draws.lam if hasattr(draws, "lam") else draws, dtype=float)
    unique = _unique_mask(table)
    n_uniques = int(unique.sum())
    if n_uniques == 0:
        raise DegenerateInputError("table has no sample uniques")

    t1m, t2m = per_cell_risk(lam[:, unique], table.pi)
    tr1 = t1m.sum(axis=1)
    tr2 = t2m.sum(axis=1)
    tau1_hat, tau2_hat, sr1, sr2 = global_risk_sim(draws, table, seed=seed)

    se1 = se_decomposition(t1m) if lam.shape[0] >= 2 else (math.nan,) * 4
    se2 = se_decomposition(t2m) if lam.shape[0] >= 2 else (math.nan,) * 4

    active_flats = np.nonzero(table.active)[0]
    unique_flats = active_flats[unique]
    per_cell = [
        PerCellRisk(
            cell=table.cell_index(int(flat)),
            tau1_star=float(t1m[:, i].mean()),
            tau2_star=float(t2m[:, i].mean()),
            tau1_sd=float(t1m[:, i].std()),
            tau2_sd=float(t2m[:, i].std()),
        )
        for i, flat in enumerate(unique_flats)
    ]

    true1 = true2 = None
    if table.F is not None:
        from .table import true_risks

        true1, true2 = true_risks(table)

    return RiskReport(
        tau1_star_hat=float(tr1.mean()),
        tau2_star_hat=float(tr2.mean()),
        tau1_star_median=float(np.median(tr1)),
        tau2_star_median=float(np.median(tr2)),
        tau1_hat=tau1_hat,
        tau2_hat=tau2_hat,
        n_uniques=n_uniques,
        quantiles_star={"tau1": risk_quantiles(tr1, levels),
                        "tau2": risk_quantiles(tr2, levels)},
        quantiles_sim={"tau1": risk_quantiles(sr1, levels),
                       "tau2": risk_quantiles(sr2, levels)},
        se_tau1=se1,
        se_tau2=se2,
        per_cell=per_cell,
        true_tau1=true1,
        true_tau2=true2,
    )
