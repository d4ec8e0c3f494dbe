"""Dissimilarity-style imbalance indices and adjusted deposit flows.

The bank-level index is half the L1 distance between a bank's geographic
distribution of deposits and its distribution of loans; the national index
applies the same formula to county shares of the national aggregates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .domain import DEPOSITORY, panel_frame
from .errors import InputError, UndefinedIndexError

# Clamp bounds for the bank-level loan/deposit ratio used in flow adjustment
# (5th/95th percentile truncation).
RHO_BOUNDS = (0.49, 1.28)

# Entry/exit scenarios for flow construction.
STANDARD = "standard"
EXIT = "exit"
MERGER_TAKEOVER = "merger_takeover"
WITHIN_MARKET_MERGER = "within_market_merger"
DENOVO_ENTRY = "denovo_entry"
FLOW_SCENARIOS = (STANDARD, EXIT, MERGER_TAKEOVER, WITHIN_MARKET_MERGER, DENOVO_ENTRY)


@dataclass(frozen=True)
class BankYearDistributions:
    """County weights of one bank-year's deposits and loans."""

    counties: tuple
    deposit_weights: tuple
    loan_weights: tuple

    @classmethod
    def from_quantities(cls, counties, deposits, loans):
        deposits = np.asarray(deposits, dtype=float)
        loans = np.asarray(loans, dtype=float)
        qd, ql = deposits.sum(), loans.sum()
        if qd <= 0 or ql <= 0:
            raise UndefinedIndexError(
                f"index undefined: totals deposits={qd}, loans={ql}"
            )
        return cls(tuple(counties), tuple(deposits / qd), tuple(loans / ql))


def bank_ii(dists: BankYearDistributions) -> float:
    """Home-bias index of a single bank-year, in [0, 1]."""
    w_d = np.asarray(dists.deposit_weights, dtype=float)
    w_l = np.asarray(dists.loan_weights, dtype=float)
    return 0.5 * float(np.abs(w_d - w_l).sum())


def national_ii(county_deposits, county_loans) -> float:
    """Imbalance between county shares of national deposits and loans."""
    q_d = np.asarray(county_deposits, dtype=float)
    q_l = np.asarray(county_loans, dtype=float)
    td, tl = q_d.sum(), q_l.sum()
    if td <= 0 or tl <= 0:
        raise UndefinedIndexError(f"index undefined: national totals deposits={td}, loans={tl}")
    return 0.5 * float(np.abs(q_d / td - q_l / tl).sum())


def net_position_index(county_deposits, county_loans):
    """Per-county loan-share minus deposit-share, with map cutpoints.

    Returns ``(index_vector, cutpoints)`` where cutpoints are the 10th,
    50th and 90th percentiles used to sort counties into four groups.
    The vector sums to zero by construction.
    """
    q_d = np.asarray(county_deposits, dtype=float)
    q_l = np.asarray(county_loans, dtype=float)
    td, tl = q_d.sum(), q_l.sum()
    if td <= 0 or tl <= 0:
        raise UndefinedIndexError("net position undefined with zero national totals")
    s = q_l / tl - q_d / td
    cutpoints = tuple(np.quantile(s, [0.1, 0.5, 0.9]))
    return s, cutpoints


@dataclass(frozen=True)
class FlowAdjustmentInputs:
    """Stocks and bank-level rates feeding the adjusted-flow formula."""

    deposits_t: float
    deposits_prev: float
    turnover_rate: float  # share of loans maturing within the year
    loan_deposit_ratio: float  # clamped to RHO_BOUNDS

    def __post_init__(self):
        if self.deposits_t < 0 or self.deposits_prev < 0:
            raise InputError("deposit stocks must be nonnegative")
        if not 0.0 <= self.turnover_rate <= 1.0:
            raise InputError(f"turnover rate outside [0,1]: {self.turnover_rate}")


def clamp_ratio(rho, bounds=RHO_BOUNDS):
    lo, hi = bounds
    return min(max(float(rho), lo), hi)


def adjusted_deposit_flow(inputs: FlowAdjustmentInputs, scenario: str = STANDARD):
    """Deposit flow adjusted for funds released by maturing loans.

    Standard: ``q_t - q_{t-1} + R * rho * q_{t-1}``.  Merger scenarios
    relabel the predecessor's lagged stock to the survivor before applying
    the formula (callers pass the relabeled ``deposits_prev``).  Denovo
    entry uses the current stock; exit yields a missing value.
    """
    if scenario not in FLOW_SCENARIOS:
        raise InputError(f"unknown flow scenario: {scenario}")
    if scenario == EXIT:
        return float("nan")
    if scenario == DENOVO_ENTRY:
        return inputs.deposits_t
    prev = inputs.deposits_prev
    return inputs.deposits_t - prev + inputs.turnover_rate * inputs.loan_deposit_ratio * prev


def adjusted_flow_table(panel, turnover_rate=0.3, mergers=None, rho_bounds=RHO_BOUNDS) -> pd.DataFrame:
    """Per-cell adjusted deposit flows for every year after the first.

    The loan/deposit ratio is the bank-level lagged ratio computed from the
    panel itself and clamped to ``rho_bounds``.  ``mergers`` is an optional
    mapping ``(predecessor_id, year_absorbed) -> survivor_id``; the
    predecessor's lagged stocks are relabeled to the survivor.  Cells
    appearing for the first time are treated as denovo entries.
    """
    panel = panel_frame(panel)
    work = panel[["year", "bank_id", "county_id", "deposits", "loans"]].copy()
    if mergers:
        relabel = work[["year", "bank_id"]].copy()
        for (pred, year), surv in mergers.items():
            m = (work["bank_id"] == pred) & (work["year"] == year - 1)
            relabel.loc[m, "bank_id"] = surv
        work["bank_id"] = relabel["bank_id"]
        work = (
            work.groupby(["year", "bank_id", "county_id"], as_index=False)[["deposits", "loans"]].sum()
        )

    bank_year = work.groupby(["bank_id", "year"])[["deposits", "loans"]].sum()
    rho = (bank_year["loans"] / bank_year["deposits"].where(bank_year["deposits"] > 0)).rename("rho")
    rho = rho.clip(lower=rho_bounds[0], upper=rho_bounds[1]).fillna(rho_bounds[0])

    lag = work.copy()
    lag["year"] = lag["year"] + 1
    merged = work.merge(
        lag[["year", "bank_id", "county_id", "deposits"]],
        on=["year", "bank_id", "county_id"],
        how="left",
        suffixes=("", "_prev"),
    )
    years = sorted(work["year"].unique())
    merged = merged[merged["year"] > years[0]].copy()

    prev_rho = rho.reset_index()
    prev_rho["year"] = prev_rho["year"] + 1
    merged = merged.merge(prev_rho, on=["bank_id", "year"], how="left")

    denovo = merged["deposits_prev"].isna()
    prev = merged["deposits_prev"].fillna(0.0)
    adj = merged["deposits"] - prev + turnover_rate * merged["rho"].fillna(rho_bounds[0]) * prev
    merged["flow"] = np.where(denovo, merged["deposits"], adj)
    merged["scenario"] = np.where(denovo, DENOVO_ENTRY, STANDARD)
    return merged[["year", "bank_id", "county_id", "flow", "scenario", "loans"]]


def bank_ii_table(panel, deposits_col="deposits") -> pd.DataFrame:
    """Bank-year imbalance indices; bank-years with a zero total on either
    side are skipped (the index is undefined there)."""
    panel = panel_frame(panel) if deposits_col == "deposits" else panel
    totals = panel.groupby(["bank_id", "year"])[[deposits_col, "loans"]].sum()
    valid = (totals[deposits_col] > 0) & (totals["loans"] > 0)

    sums = panel.groupby(["bank_id", "year", "county_id"])[[deposits_col, "loans"]].sum().reset_index()
    sums = sums.merge(
        totals.rename(columns={deposits_col: "tot_d", "loans": "tot_l"}),
        left_on=["bank_id", "year"],
        right_index=True,
    )
    sums = sums[sums["tot_d"].gt(0) & sums["tot_l"].gt(0)]
    diff = (sums[deposits_col] / sums["tot_d"] - sums["loans"] / sums["tot_l"]).abs()
    out = (
        diff.groupby([sums["bank_id"], sums["year"]]).sum().mul(0.5).rename("index").reset_index()
    )
    out.attrs["skipped"] = int((~valid).sum())
    return out


def national_ii_table(panel, deposits_col="deposits") -> pd.DataFrame:
    """Per-year national imbalance indices from county totals."""
    sums = panel.groupby(["year", "county_id"])[[deposits_col, "loans"]].sum().reset_index()
    rows = []
    for year, grp in sums.groupby("year"):
        rows.append((year, national_ii(grp[deposits_col].values, grp["loans"].values)))
    return pd.DataFrame(rows, columns=["year", "index"])


def median_bank_ii(panel, deposits_col="deposits") -> pd.DataFrame:
    """Per-year median of the bank-level index over depository banks."""
    dep = panel[panel["bank_class"] == DEPOSITORY] if "bank_class" in panel.columns else panel
    table = bank_ii_table(dep, deposits_col=deposits_col)
    return table.groupby("year")["index"].median().rename("index").reset_index()
