"""Core data model: panel cells, geography, market sizes, parameters.

The in-memory panel is a pandas DataFrame with one row per
bank-county-year cell (columns in ``PANEL_COLUMNS``).  Quantities are in
thousands of currency units; populations are head counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import math

import numpy as np
import pandas as pd

from .errors import CalibrationError, InputError

DEPOSITORY = "depository"
SHADOW = "shadow"
BANK_CLASSES = (DEPOSITORY, SHADOW)

PANEL_COLUMNS = [
    "year",
    "bank_id",
    "bank_class",
    "county_id",
    "n_branches",
    "deposits",
    "loans",
    "sec_rate",
]

COUNTY_COLUMNS = [
    "county_id",
    "year",
    "population",
    "income_pc",
    "urban_share",
    "house_price_index",
    "bankruptcies",
    "share_age_le19",
    "share_age_ge50",
    "n_loan_applications",
]


@dataclass(frozen=True)
class PanelCell:
    """One bank-county-year observation."""

    bank_id: int
    county_id: int
    year: int
    n_branches: int = 0
    deposits: float = 0.0
    loans: float = 0.0
    sec_rate: float = 0.0
    bank_class: str = DEPOSITORY


@dataclass(frozen=True)
class CountyAttributes:
    county_id: int
    year: int
    population: float
    income_pc: float = 30.0
    urban_share: float = 0.5
    house_price_index: float = 100.0
    bankruptcies: float = 10.0
    share_age_le19: float = 0.27
    share_age_ge50: float = 0.33
    n_loan_applications: float = 100.0


def panel_frame(cells) -> pd.DataFrame:
    """Normalize a cell list or DataFrame into the canonical panel frame."""
    if isinstance(cells, pd.DataFrame):
        missing = [c for c in PANEL_COLUMNS if c not in cells.columns]
        if missing:
            raise InputError(f"panel missing columns: {missing}")
        return cells.reset_index(drop=True)
    rows = [
        (c.year, c.bank_id, c.bank_class, c.county_id, c.n_branches,
         c.deposits, c.loans, c.sec_rate)
        for c in cells
    ]
    return pd.DataFrame(rows, columns=PANEL_COLUMNS)


def county_frame(attrs) -> pd.DataFrame:
    if isinstance(attrs, pd.DataFrame):
        missing = [c for c in COUNTY_COLUMNS if c not in attrs.columns]
        if missing:
            raise InputError(f"county attributes missing columns: {missing}")
        return attrs.reset_index(drop=True)
    rows = [[getattr(a, c) for c in COUNTY_COLUMNS] for a in attrs]
    return pd.DataFrame(rows, columns=COUNTY_COLUMNS)


class Geography:
    """County set with a symmetric, irreflexive adjacency relation.

    The second ring of a county (neighbors of contiguous counties,
    excluding the county itself and its direct neighbors) is derived
    deterministically from adjacency.
    """

    def __init__(self, counties, edges=()):
        self.counties = frozenset(int(c) for c in counties)
        self._adj = {c: set() for c in self.counties}
        for a, b in edges:
            a, b = int(a), int(b)
            if a == b:
                raise InputError(f"self-adjacency for county {a}")
            if a not in self.counties or b not in self.counties:
                raise InputError(f"adjacency references unknown county: ({a},{b})")
            self._adj[a].add(b)
            self._adj[b].add(a)

    def neighbors(self, county) -> frozenset:
        return frozenset(self._adj.get(int(county), ()))

    def second_ring(self, county) -> frozenset:
        county = int(county)
        first = self._adj.get(county, set())
        ring = set()
        for n in first:
            ring |= self._adj[n]
        ring.discard(county)
        ring -= first
        return frozenset(ring)

    def edges(self):
        seen = []
        for a in sorted(self._adj):
            for b in sorted(self._adj[a]):
                if a < b:
                    seen.append((a, b))
        return seen

    @classmethod
    def grid(cls, n_rows, n_cols):
        """Rectangular lattice with rook adjacency; county ids are row-major."""
        counties = range(n_rows * n_cols)
        edges = []
        for r in range(n_rows):
            for c in range(n_cols):
                i = r * n_cols + c
                if c + 1 < n_cols:
                    edges.append((i, i + 1))
                if r + 1 < n_rows:
                    edges.append((i, i + n_cols))
        return cls(counties, edges)


@dataclass(frozen=True)
class MarketSizeScalars:
    """Per-capita market-size constants (currency per head)."""

    lambda_d: float
    lambda_ell: float

    def h_deposit(self, population):
        return self.lambda_d * np.asarray(population, dtype=float)

    def h_loan(self, population):
        return self.lambda_ell * np.asarray(population, dtype=float)


@dataclass
class EquationParams:
    """Coefficients of one structural equation.

    ``branch_steps`` holds the increments for the second through fifth
    branch plus the per-branch slope beyond the fifth.  ``cross`` scales
    the log of one plus the opposite side's local quantity; ``total_dep``
    scales the log of the bank's total deposits.
    """

    branch_steps: tuple = (0.0, 0.0, 0.0, 0.0, 0.0)
    sec: float = 0.0
    cross: float = 0.0
    total_dep: float = 0.0

    def as_dict(self):
        return {
            "branch_steps": list(self.branch_steps),
            "sec": self.sec,
            "cross": self.cross,
            "total_dep": self.total_dep,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            branch_steps=tuple(d.get("branch_steps", (0.0,) * 5)),
            sec=float(d.get("sec", 0.0)),
            cross=float(d.get("cross", 0.0)),
            total_dep=float(d.get("total_dep", 0.0)),
        )


@dataclass
class ParameterSet:
    """Structural coefficients for the deposit equation and the three
    loan regimes (with branches, without branches, shadow)."""

    deposit: EquationParams = field(default_factory=EquationParams)
    loan_with_branches: EquationParams = field(default_factory=EquationParams)
    loan_without_branches: EquationParams = field(default_factory=EquationParams)
    loan_shadow: EquationParams = field(default_factory=EquationParams)

    def __post_init__(self):
        # the branchless regime constrains branch and local-deposit terms to zero
        self.loan_without_branches.branch_steps = (0.0,) * 5
        self.loan_without_branches.cross = 0.0
        self.loan_shadow.branch_steps = (0.0,) * 5
        self.loan_shadow.cross = 0.0
        self.loan_shadow.total_dep = 0.0

    def copy(self) -> "ParameterSet":
        return ParameterSet(
            deposit=replace(self.deposit),
            loan_with_branches=replace(self.loan_with_branches),
            loan_without_branches=replace(self.loan_without_branches),
            loan_shadow=replace(self.loan_shadow),
        )

    def as_dict(self):
        return {
            "deposit": self.deposit.as_dict(),
            "loan_with_branches": self.loan_with_branches.as_dict(),
            "loan_without_branches": self.loan_without_branches.as_dict(),
            "loan_shadow": self.loan_shadow.as_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            deposit=EquationParams.from_dict(d.get("deposit", {})),
            loan_with_branches=EquationParams.from_dict(d.get("loan_with_branches", {})),
            loan_without_branches=EquationParams.from_dict(d.get("loan_without_branches", {})),
            loan_shadow=EquationParams.from_dict(d.get("loan_shadow", {})),
        )


@dataclass
class ValidationReport:
    ok: bool = True
    n_rows: int = 0
    errors: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def fail(self, message):
        self.ok = False
        self.errors.append(message)


def validate_panel(cells, attrs=None, geo=None) -> ValidationReport:
    """Check panel invariants plus cross-references into attributes and
    geography.  Returns a report; never raises on bad data."""
    panel = panel_frame(cells)
    report = ValidationReport(n_rows=len(panel))
    if panel.empty:
        return report

    dup = panel.duplicated(subset=["year", "bank_id", "county_id"])
    if dup.any():
        keys = panel.loc[dup, ["year", "bank_id", "county_id"]].values.tolist()
        report.fail(f"duplicate (year,bank,county) keys: {keys[:10]}")

    bad_class = ~panel["bank_class"].isin(BANK_CLASSES)
    if bad_class.any():
        report.fail(f"unknown bank_class values: {sorted(panel.loc[bad_class, 'bank_class'].unique())}")

    classes = panel.groupby("bank_id")["bank_class"].nunique()
    mixed = classes[classes > 1]
    if not mixed.empty:
        report.fail(f"banks with inconsistent class: {sorted(mixed.index.tolist())}")

    for col in ("n_branches", "deposits", "loans"):
        neg = panel[col] < 0
        if neg.any():
            report.fail(f"negative {col} in rows {panel.index[neg].tolist()[:10]}")
    bad_sec = (panel["sec_rate"] < 0) | (panel["sec_rate"] > 1)
    if bad_sec.any():
        report.fail(f"sec_rate outside [0,1] in rows {panel.index[bad_sec].tolist()[:10]}")

    shadow = panel["bank_class"] == SHADOW
    bad_shadow = shadow & ((panel["deposits"] > 0) | (panel["n_branches"] > 0))
    if bad_shadow.any():
        report.fail(
            "shadow banks with deposits or branches: "
            f"{panel.loc[bad_shadow, ['bank_id', 'county_id', 'year']].values.tolist()[:10]}"
        )

    branchless_dep = (~shadow) & (panel["deposits"] > 0) & (panel["n_branches"] < 1)
    if branchless_dep.any():
        report.fail(
            "depository cells with deposits but no branches: "
            f"{panel.loc[branchless_dep, ['bank_id', 'county_id', 'year']].values.tolist()[:10]}"
        )

    if attrs is not None:
        attrs = county_frame(attrs)
        bad_pop = attrs["population"] <= 0
        if bad_pop.any():
            report.fail(f"non-positive population for counties {attrs.loc[bad_pop, 'county_id'].tolist()[:10]}")
        have = set(zip(attrs["county_id"], attrs["year"]))
        need = set(zip(panel["county_id"], panel["year"]))
        missing = sorted(need - have)
        if missing:
            report.fail(f"county-years missing attributes: {missing[:10]}")

    if geo is not None:
        unknown = sorted(set(panel["county_id"]) - set(geo.counties))
        if unknown:
            report.fail(f"cells reference counties outside geography: {unknown[:10]}")

    return report


# Default inflation factor keeping the outside share strictly positive at the
# calibration argmax.
CALIBRATION_SLACK = 1e-9


def calibrate_market_size(cells, attrs, slack=CALIBRATION_SLACK) -> MarketSizeScalars:
    """Set per-capita market sizes from the most saturated county-year.

    lambda = max over county-years of total quantity per head, inflated by
    ``slack`` so every county keeps a strictly positive outside share.
    """
    panel = panel_frame(cells)
    attrs = county_frame(attrs)
    totals = panel.groupby(["county_id", "year"])[["deposits", "loans"]].sum().reset_index()
    merged = totals.merge(attrs[["county_id", "year", "population"]], on=["county_id", "year"], how="left")
    if merged["population"].isna().any():
        bad = merged.loc[merged["population"].isna(), ["county_id", "year"]].values.tolist()
        raise InputError(f"county-years without population: {bad[:10]}")
    if (merged["population"] <= 0).any():
        raise InputError("population must be positive wherever quantities are observed")
    if not ((merged["deposits"] > 0).any() and (merged["loans"] > 0).any()):
        raise CalibrationError("cannot calibrate market size: all deposits or all loans are zero")
    lam_d = float((merged["deposits"] / merged["population"]).max())
    lam_l = float((merged["loans"] / merged["population"]).max())
    return MarketSizeScalars(lambda_d=lam_d * (1.0 + slack), lambda_ell=lam_l * (1.0 + slack))


def build_networks(cells) -> pd.DataFrame:
    """Per-year deposit and loan networks.

    Returns the panel with boolean ``in_dep_network`` / ``in_loan_network``
    columns.  A county is in the deposit network iff the bank has a branch
    there; the loan network adds counties with positive loans, so the
    deposit network is always contained in the loan network.
    """
    panel = panel_frame(cells).copy()
    panel["in_dep_network"] = (panel["n_branches"] > 0) & (panel["bank_class"] != SHADOW)
    panel["in_loan_network"] = panel["in_dep_network"] | (panel["loans"] > 0)
    return panel


def branch_step(n, coeffs) -> float:
    """Cumulative branch-count contribution.

    ``coeffs`` are the increments for reaching 2..5 branches plus the
    per-branch slope past the fifth; zero and one branch contribute nothing.
    """
    if n < 0:
        raise InputError(f"negative branch count: {n}")
    c2, c3, c4, c5, slope = coeffs
    total = 0.0
    if n >= 2:
        total += c2
    if n >= 3:
        total += c3
    if n >= 4:
        total += c4
    if n >= 5:
        total += c5
    if n > 5:
        total += slope * (n - 5)
    return total


def branch_step_array(n, coeffs) -> np.ndarray:
    """Vectorized ``branch_step`` over an integer array."""
    n = np.asarray(n, dtype=float)
    c2, c3, c4, c5, slope = [float(c) for c in coeffs]
    out = (
        c2 * (n >= 2)
        + c3 * (n >= 3)
        + c4 * (n >= 4)
        + c5 * (n >= 5)
        + slope * np.maximum(0.0, n - 5)
    )
    return out


def states_frame(states) -> pd.DataFrame:
    """Normalize a county->state mapping into a two-column frame."""
    if isinstance(states, pd.DataFrame):
        missing = [c for c in ("county_id", "state_id") if c not in states.columns]
        if missing:
            raise InputError(f"state map missing columns: {missing}")
        return states.reset_index(drop=True)
    return pd.DataFrame(
        [(int(c), int(s)) for c, s in dict(states).items()],
        columns=["county_id", "state_id"],
    )
