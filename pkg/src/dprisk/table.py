"""Contingency tables spanned by categorical key variables.

Cells are stored dense in row-major order of the declared variables; all
per-cell vectors elsewhere in the package are aligned to that order.
Structural zeros stay in the array (so indices remain a full cross-
classification) but are excluded from every likelihood and risk sum.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import InputError, NumericalError

__all__ = [
    "KeyVariable",
    "CellRecord",
    "ContingencyTable",
    "tabulate",
    "read_microdata",
    "draw_sample",
    "true_risks",
    "generate_population",
    "save_table",
    "load_table",
]


@dataclass(frozen=True)
class KeyVariable:
    """A categorical key variable: a name and its ordered category labels."""

    name: str
    levels: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "levels", tuple(str(l) for l in self.levels))
        if len(self.levels) < 2:
            raise InputError(f"variable {self.name!r} needs at least 2 levels")
        if len(set(self.levels)) != len(self.levels):
            raise InputError(f"variable {self.name!r} has duplicate level labels")

    @property
    def n_levels(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class CellRecord:
    """One cell: per-variable level indices, sample frequency, optional
    population frequency."""

    index: tuple[int, ...]
    f: int
    F: int | None = None


class ContingencyTable:
    """Dense contingency table over the cross-classification of `variables`.

    Parameters
    ----------
    variables : sequence of KeyVariable
    f : integer array, flat length = product of level counts (row-major)
    F : optional integer array of population frequencies, same layout
    pi : sampling fraction in (0, 1]
    structural_zeros : optional boolean array marking impossible cells;
        those cells must carry f = 0 (and F = 0 when present) and are
        excluded from likelihood and risk sums.
    """

    def __init__(
        self,
        variables: Sequence[KeyVariable],
        f: np.ndarray,
        F: np.ndarray | None = None,
        pi: float = 1.0,
        structural_zeros: np.ndarray | None = None,
    ):
        self.variables = tuple(variables)
        if not self.variables:
            raise InputError("a table needs at least one key variable")
        names = [v.name for v in self.variables]
        if len(set(names)) != len(names):
            raise InputError("duplicate variable names")

        self.shape = tuple(v.n_levels for v in self.variables)
        n_cells = int(np.prod(self.shape))

        self.f = np.asarray(f, dtype=np.int64).reshape(n_cells)
        if np.any(self.f < 0):
            raise InputError("sample frequencies must be nonnegative")

        if F is None:
            self.F = None
        else:
            self.F = np.asarray(F, dtype=np.int64).reshape(n_cells)
            if np.any(self.F < 0):
                raise InputError("population frequencies must be nonnegative")
            if np.any(self.f > self.F):
                raise InputError("f_k > F_k found; sample cannot exceed population")

        if not (0.0 < pi <= 1.0):
            raise InputError(f"sampling fraction pi must be in (0, 1], got {pi}")
        self.pi = float(pi)

        if structural_zeros is None:
            self.structural_zeros = np.zeros(n_cells, dtype=bool)
        else:
            self.structural_zeros = np.asarray(structural_zeros, dtype=bool).reshape(n_cells)
            if np.any(self.f[self.structural_zeros] != 0):
                raise InputError("structural-zero cells must have f = 0")
            if self.F is not None and np.any(self.F[self.structural_zeros] != 0):
                raise InputError("structural-zero cells must have F = 0")

    # -- basic accessors ---------------------------------------------------

    @property
    def n_cells(self) -> int:
        """Total cells in the cross-classification, structural zeros included."""
        return self.f.shape[0]

    @property
    def active(self) -> np.ndarray:
        """Mask of cells that enter likelihood and risk sums."""
        return ~self.structural_zeros

    @property
    def K(self) -> int:
        """Number of non-structural-zero cells."""
        return int(self.active.sum())

    @property
    def n(self) -> int:
        return int(self.f.sum())

    @property
    def N(self) -> int | None:
        return None if self.F is None else int(self.F.sum())

    def cell_index(self, flat: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(flat, self.shape))

    def flat_index(self, multi: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(multi), self.shape))

    def index_grid(self) -> np.ndarray:
        """(n_cells, n_variables) array of per-variable level indices."""
        grids = np.unravel_index(np.arange(self.n_cells), self.shape)
        return np.stack(grids, axis=1)

    def records(self) -> Iterable[CellRecord]:
        Fv = self.F
        for flat in range(self.n_cells):
            yield CellRecord(
                index=self.cell_index(flat),
                f=int(self.f[flat]),
                F=None if Fv is None else int(Fv[flat]),
            )

    def marginalize(self, keep: Sequence[str]) -> "ContingencyTable":
        """Sum the table down to the named subset of variables.

        A marginal cell is structurally zero only when every constituent
        cell is.
        """
        name_to_axis = {v.name: i for i, v in enumerate(self.variables)}
        try:
            axes = [name_to_axis[n] for n in keep]
        except KeyError as e:
            raise InputError(f"unknown variable {e.args[0]!r}") from None
        if not axes:
            raise InputError("must keep at least one variable")
        drop = tuple(i for i in range(len(self.variables)) if i not in axes)
        order = tuple(sorted(axes))

        def reduce_counts(x: np.ndarray) -> np.ndarray:
            return x.reshape(self.shape).sum(axis=drop)

        f = reduce_counts(self.f)
        F = None if self.F is None else reduce_counts(self.F)
        sz = self.structural_zeros.reshape(self.shape).all(axis=drop)
        new_vars = [self.variables[i] for i in order]
        # reorder axes to the requested order of `keep`
        perm = [order.index(name_to_axis[n]) for n in keep]
        f = np.transpose(f, perm)
        F = None if F is None else np.transpose(F, perm)
        sz = np.transpose(sz, perm)
        new_vars = [new_vars[i] for i in perm]
        return ContingencyTable(new_vars, f.ravel(), None if F is None else F.ravel(),
                                pi=self.pi, structural_zeros=sz.ravel())

    def __repr__(self) -> str:
        return (f"ContingencyTable(variables={[v.name for v in self.variables]}, "
                f"n_cells={self.n_cells}, K={self.K}, n={self.n}, "
                f"N={self.N}, pi={self.pi})")


# -- construction ----------------------------------------------------------


def read_microdata(path: str | Path, delimiter: str | None = None) -> tuple[list[str], list[list[str]]]:
    """Read delimited microdata with a header row. Returns (header, rows).

    The delimiter is sniffed between comma and tab unless given.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        first = fh.readline()
        if not first.strip():
            raise InputError(f"{path}: empty microdata file")
        if delimiter is None:
            delimiter = "\t" if first.count("\t") >= first.count(",") else ","
        header = next(csv.reader([first], delimiter=delimiter))
        rows = [row for row in csv.reader(fh, delimiter=delimiter) if row]
    return [h.strip() for h in header], rows


def tabulate(
    records: Iterable[Sequence[str]],
    variables: Sequence[KeyVariable],
    pi: float = 1.0,
    structural_zeros: np.ndarray | None = None,
) -> ContingencyTable:
    """Cross-classify records into a contingency table.

    Each record is a sequence of level labels aligned with `variables`.
    Unknown labels are rejected with the offending 1-based record number.
    """
    variables = tuple(variables)
    if not variables:
        raise InputError("no key variables declared")
    lookups = [{lab: i for i, lab in enumerate(v.levels)} for v in variables]
    shape = tuple(v.n_levels for v in variables)
    f = np.zeros(int(np.prod(shape)), dtype=np.int64)

    n_rows = 0
    for rownum, rec in enumerate(records, start=1):
        n_rows += 1
        if len(rec) != len(variables):
            raise InputError(
                f"record {rownum}: expected {len(variables)} fields, got {len(rec)}")
        idx = []
        for v, look, val in zip(variables, lookups, rec):
            val = str(val).strip()
            if val not in look:
                raise InputError(
                    f"record {rownum}: unknown level {val!r} for variable {v.name!r}")
            idx.append(look[val])
        f[int(np.ravel_multi_index(tuple(idx), shape))] += 1
    if n_rows == 0:
        raise InputError("no records to tabulate")

    if structural_zeros is not None:
        structural_zeros = np.asarray(structural_zeros, dtype=bool).reshape(f.shape)
        bad = np.nonzero(structural_zeros & (f > 0))[0]
        if bad.size:
            raise InputError(
                f"records fall in declared structural-zero cell at flat index {int(bad[0])}")
    return ContingencyTable(variables, f, pi=pi, structural_zeros=structural_zeros)


def tabulate_file(
    path: str | Path,
    variables: Sequence[KeyVariable],
    pi: float = 1.0,
    delimiter: str | None = None,
    structural_zeros: np.ndarray | None = None,
) -> ContingencyTable:
    """Tabulate a delimited microdata file; the header must name every
    declared variable (extra columns are ignored)."""
    header, rows = read_microdata(path, delimiter)
    try:
        cols = [header.index(v.name) for v in variables]
    except ValueError:
        missing = [v.name for v in variables if v.name not in header]
        raise InputError(f"microdata header is missing variables {missing}") from None
    picked = ([row[c] for c in cols] for row in rows)
    return tabulate(picked, variables, pi=pi, structural_zeros=structural_zeros)


# -- sampling and risk -----------------------------------------------------


def draw_sample(population: ContingencyTable, pi: float, seed: int) -> ContingencyTable:
    """Simple random sample without replacement at unit level.

    Draws round(pi * N) units from the population's unit-level expansion;
    equivalently a multivariate hypergeometric draw on the cell counts.
    """
    if population.F is None:
        raise InputError("population table must carry F for every cell")
    if not (0.0 < pi <= 1.0):
        raise InputError(f"pi must be in (0, 1], got {pi}")
    N = population.N
    n_draw = int(round(pi * N))
    rng = np.random.default_rng(seed)
    if n_draw >= N:
        f = population.F.copy()
    else:
        f = rng.multivariate_hypergeometric(population.F, n_draw, method="marginals")
    return ContingencyTable(
        population.variables,
        np.asarray(f, dtype=np.int64),
        F=population.F.copy(),
        pi=pi,
        structural_zeros=population.structural_zeros.copy(),
    )


def true_risks(table: ContingencyTable) -> tuple[int, float]:
    """Actual re-identification risks of a table with known population counts.

    tau1 counts sample uniques that are population uniques; tau2 sums 1/F_k
    over sample uniques (the expected number of correct random matches).
    """
    if table.F is None:
        raise InputError("true risks require population frequencies F")
    act = table.active
    unique = act & (table.f == 1)
    F_u = table.F[unique]
    if np.any(F_u < 1):
        raise InputError("cell with f_k = 1 has missing/zero population count")
    tau1 = int(np.sum(F_u == 1))
    tau2 = float(np.sum(1.0 / F_u))
    return tau1, tau2


def generate_population(
    spec,
    beta: np.ndarray,
    N_target: int,
    seed: int,
    random_effects=None,
    mass: float | None = None,
    structural_zeros: np.ndarray | None = None,
    return_rates: bool = False,
):
    """Synthesize a population table from a log-linear model.

    Cell rates are exp(w_k' beta + phi_k), rescaled so the expected total
    equals N_target, then F_k ~ Poisson(rate) independently. `random_effects`
    is a base measure (GammaBase / GaussianBase from dprisk.dpmcmc) drawn
    i.i.d. per cell, or clustered by a Chinese-restaurant partition when
    `mass` is given; None means no random effects. The returned table is a
    census of itself (f = F, pi = 1).
    """
    from .loglinear import design_matrix  # local import, avoids cycle

    if N_target <= 0:
        raise InputError("N_target must be positive")
    rng = np.random.default_rng(seed)
    W = design_matrix(spec)
    beta = np.asarray(beta, dtype=float).reshape(-1)
    if beta.shape[0] != W.shape[1]:
        raise InputError(f"beta has length {beta.shape[0]}, design needs {W.shape[1]}")

    n_cells = W.shape[0]
    if structural_zeros is None:
        active = np.ones(n_cells, dtype=bool)
    else:
        structural_zeros = np.asarray(structural_zeros, dtype=bool).reshape(n_cells)
        active = ~structural_zeros

    phi = np.zeros(n_cells)
    if random_effects is not None:
        n_active = int(active.sum())
        if mass is None:
            phi_active = _draw_base(random_effects, n_active, rng)
        else:
            labels = _crp_partition(n_active, float(mass), rng)
            values = _draw_base(random_effects, int(labels.max()) + 1, rng)
            phi_active = values[labels]
        phi[active] = phi_active

    log_lam = W @ beta + phi
    lam = np.exp(log_lam)
    if not np.all(np.isfinite(lam[active])):
        raise NumericalError("non-finite cell rate while generating population")
    total = lam[active].sum()
    lam *= N_target / total
    F = np.zeros(n_cells, dtype=np.int64)
    F[active] = rng.poisson(lam[active])
    table = ContingencyTable(spec.variables, F.copy(), F=F, pi=1.0,
                             structural_zeros=structural_zeros)
    if return_rates:
        rates = lam.copy()
        rates[~active] = 0.0
        return table, rates
    return table


def _draw_base(base, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw log-scale random effects phi from a base measure."""
    kind = type(base).__name__
    if kind == "GammaBase":
        return np.log(rng.gamma(base.a, 1.0 / base.b, size=size))
    if kind == "GaussianBase":
        # generation uses the hyperprior means of (alpha, sigma^2)
        alpha = base.mean0
        sigma2 = base.sigma2_scale / max(base.sigma2_shape, 1e-12)
        return alpha + math.sqrt(sigma2) * rng.standard_normal(size)
    raise InputError(f"unsupported random-effect law: {base!r}")


def _crp_partition(n: int, mass: float, rng: np.random.Generator) -> np.ndarray:
    """Chinese-restaurant partition labels for n items with the given mass."""
    labels = np.zeros(n, dtype=np.int64)
    sizes: list[int] = []
    for i in range(n):
        if not sizes:
            sizes.append(1)
            labels[i] = 0
            continue
        probs = np.array(sizes + [mass], dtype=float)
        probs /= probs.sum()
        j = rng.choice(len(probs), p=probs)
        if j == len(sizes):
            sizes.append(1)
        else:
            sizes[j] += 1
        labels[i] = j
    return labels


# -- serialization ----------------------------------------------------------


def _meta_path(csv_path: Path) -> Path:
    return csv_path.with_suffix(".meta.json")


def save_table(table: ContingencyTable, path: str | Path) -> None:
    """Write a table as sparse columnar CSV plus a JSON metadata sidecar.

    Rows are emitted (in flat-index order) for cells with f > 0, F > 0, or
    a structural-zero flag; all other cells are implicit zeros.
    """
    path = Path(path)
    has_F = table.F is not None
    has_sz = bool(table.structural_zeros.any())
    keep = table.f > 0
    if has_F:
        keep |= table.F > 0
    if has_sz:
        keep |= table.structural_zeros
    idx = np.nonzero(keep)[0]
    grid = table.index_grid()

    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        header = [v.name for v in table.variables] + ["f"]
        if has_F:
            header.append("F")
        if has_sz:
            header.append("structural_zero")
        w.writerow(header)
        for flat in idx:
            row = [int(x) for x in grid[flat]] + [int(table.f[flat])]
            if has_F:
                row.append(int(table.F[flat]))
            if has_sz:
                row.append(int(table.structural_zeros[flat]))
            w.writerow(row)

    meta = {
        "format": "dprisk-table-v1",
        "pi": table.pi,
        "variables": [{"name": v.name, "levels": list(v.levels)} for v in table.variables],
        "has_population": has_F,
        "has_structural_zeros": has_sz,
        "n": table.n,
        "N": table.N,
    }
    with _meta_path(path).open("w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_table(path: str | Path) -> ContingencyTable:
    """Read a table written by save_table."""
    path = Path(path)
    meta_path = _meta_path(path)
    if not meta_path.exists():
        raise InputError(f"missing table metadata sidecar {meta_path}")
    with meta_path.open() as fh:
        meta = json.load(fh)
    variables = [KeyVariable(v["name"], tuple(v["levels"])) for v in meta["variables"]]
    shape = tuple(v.n_levels for v in variables)
    n_cells = int(np.prod(shape))
    f = np.zeros(n_cells, dtype=np.int64)
    F = np.zeros(n_cells, dtype=np.int64) if meta.get("has_population") else None
    sz = np.zeros(n_cells, dtype=bool) if meta.get("has_structural_zeros") else None

    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        var_cols = []
        for v in variables:
            if v.name not in header:
                raise InputError(f"table file missing column {v.name!r}")
            var_cols.append(header.index(v.name))
        f_col = header.index("f")
        F_col = header.index("F") if F is not None else -1
        sz_col = header.index("structural_zero") if sz is not None else -1
        for row in reader:
            if not row:
                continue
            idx = tuple(int(row[c]) for c in var_cols)
            flat = int(np.ravel_multi_index(idx, shape))
            f[flat] = int(row[f_col])
            if F is not None:
                F[flat] = int(row[F_col])
            if sz is not None:
                sz[flat] = bool(int(row[sz_col]))

    table = ContingencyTable(variables, f, F=F, pi=float(meta["pi"]), structural_zeros=sz)
    if meta.get("n") is not None and table.n != meta["n"]:
        raise InputError(f"table checksum mismatch: n={table.n} != recorded {meta['n']}")
    if F is not None and meta.get("N") is not None and table.N != meta["N"]:
        raise InputError(f"table checksum mismatch: N={table.N} != recorded {meta['N']}")
    return table
