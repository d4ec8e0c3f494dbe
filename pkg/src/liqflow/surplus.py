"""Structural index evaluation, residual extraction, and surplus accounting.

The left-hand side of every structural equation is the share transform
``ln(s/s0) + 1/(1-s)``; the right-hand side is a linear index in branch
steps, securitization, the opposite side's local quantity, the bank's
total deposits, and an unobserved component.  Residual extraction inverts
observed data through these equations and splits the unobservable into
bank-county, year, county-year, bank-year, and idiosyncratic parts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .domain import (
    DEPOSITORY,
    SHADOW,
    MarketSizeScalars,
    ParameterSet,
    branch_step_array,
    county_frame,
    panel_frame,
)
from .equilibrium import YearSystem
from .errors import DomainError, InputError

REGIME_BRANCHES = "branches"
REGIME_NO_BRANCHES = "no_branches"
REGIME_SHADOW = "shadow"

FE_GROUPS = {
    "bank_county": ["bank_id", "county_id"],
    "year": ["year"],
    "county_year": ["county_id", "year"],
    "bank_year": ["bank_id", "year"],
}


def y_transform(s, s0):
    """Share transform ``ln(s/s0) + 1/(1-s)``; strictly increasing in s."""
    s_arr = np.asarray(s, dtype=float)
    s0_arr = np.asarray(s0, dtype=float)
    if np.any(s_arr <= 0) or np.any(s_arr >= 1) or np.any(s0_arr <= 0) or np.any(s0_arr >= 1):
        raise DomainError("y_transform requires shares strictly inside (0,1)")
    out = np.log(s_arr / s0_arr) + 1.0 / (1.0 - s_arr)
    return float(out) if np.isscalar(s) and np.isscalar(s0) else out


def loan_regime(panel: pd.DataFrame) -> pd.Series:
    """Regime labels for loan-side cells."""
    shadow = panel["bank_class"] == SHADOW
    branches = panel["n_branches"] >= 1
    return pd.Series(
        np.where(shadow, REGIME_SHADOW,
                 np.where(branches, REGIME_BRANCHES, REGIME_NO_BRANCHES)),
        index=panel.index,
    )


def loan_params_for(params: ParameterSet, regime):
    return {
        REGIME_BRANCHES: params.loan_with_branches,
        REGIME_NO_BRANCHES: params.loan_without_branches,
        REGIME_SHADOW: params.loan_shadow,
    }[regime]


def structural_rhs(eq, n_branches, sec, cross_quantity, total_deposits, eta=0.0) -> float:
    """Right-hand side of one structural equation at given data.

    ``cross_quantity`` is the opposite side's local quantity (currency),
    ``total_deposits`` the bank's total deposits.
    """
    from .domain import branch_step

    rhs = branch_step(n_branches, eq.branch_steps) + eq.sec * sec + eta
    if eq.cross != 0.0:
        rhs += eq.cross * np.log1p(cross_quantity)
    if eq.total_dep != 0.0:
        if total_deposits <= 0:
            raise DomainError("total deposits must be positive when its coefficient is nonzero")
        rhs += eq.total_dep * np.log(total_deposits)
    return float(rhs)


def shares_table(panel, attrs, scalars: MarketSizeScalars) -> pd.DataFrame:
    """Observed shares, outside shares, and regime labels per cell.

    Cells are the solver networks restricted to positive observed
    quantities: deposit side requires a branch and positive deposits, loan
    side positive loans.  Adds bank-year totals and per-county market sizes.
    """
    panel = panel_frame(panel).copy()
    attrs = county_frame(attrs)

    merged = panel.merge(
        attrs[["county_id", "year", "population"]], on=["county_id", "year"], how="left"
    )
    if merged["population"].isna().any():
        bad = merged.loc[merged["population"].isna(), ["county_id", "year"]].values.tolist()
        raise InputError(f"county-years missing attributes: {bad[:10]}")

    merged["h_d"] = scalars.h_deposit(merged["population"])
    merged["h_l"] = scalars.h_loan(merged["population"])
    merged["in_dep"] = (merged["bank_class"] == DEPOSITORY) & (merged["n_branches"] >= 1) & (merged["deposits"] > 0)
    merged["in_loan"] = merged["loans"] > 0
    merged["regime"] = loan_regime(merged)

    merged["s_d"] = np.where(merged["in_dep"], merged["deposits"] / merged["h_d"], 0.0)
    merged["s_l"] = np.where(merged["in_loan"], merged["loans"] / merged["h_l"], 0.0)

    sums = merged.groupby(["county_id", "year"])[["s_d", "s_l"]].transform("sum")
    merged["s0_d"] = 1.0 - sums["s_d"]
    merged["s0_l"] = 1.0 - sums["s_l"]

    totals = merged.groupby(["bank_id", "year"])["deposits"].transform("sum")
    merged["total_dep"] = totals
    return merged


@dataclass
class ResidualTable:
    """Raw residuals per cell with their five-way decomposition."""

    table: pd.DataFrame
    excluded: pd.DataFrame
    components_d: dict = field(default_factory=dict)
    components_l: dict = field(default_factory=dict)

    def eta_lookup(self, side):
        col = f"eta_{side}"
        sub = self.table.dropna(subset=[col])
        return sub.set_index(["year", "bank_id", "county_id"])[col]

    def to_frame(self) -> pd.DataFrame:
        return self.table.copy()


def _decompose(df: pd.DataFrame, value_col: str, tol=1e-13, max_sweeps=500):
    """Split a cell-level value into the five additive components.

    Alternating projections drive the idiosyncratic remainder orthogonal
    to every effect group; cross-group constants are then shifted so the
    year, county-year (within county), and bank-year (within bank)
    components average to zero, with the bank-county component absorbing
    the remainder.
    """
    work = df[["bank_id", "county_id", "year", value_col]].dropna(subset=[value_col]).copy()
    if work.empty:
        empty = {k: pd.Series(dtype=float) for k in FE_GROUPS}
        return work.assign(**{f"{value_col}_{k}": [] for k in list(FE_GROUPS) + ["idio"]}), empty

    r = work[value_col].to_numpy(dtype=float).copy()
    comps = {}
    codes = {}
    for name, keys in FE_GROUPS.items():
        codes[name] = pd.MultiIndex.from_frame(work[keys]).factorize(sort=True)
        comps[name] = np.zeros(len(codes[name][1]))

    scale = max(1.0, float(np.abs(r).max()))
    for _ in range(max_sweeps):
        worst = 0.0
        for name in FE_GROUPS:
            idx, levels = codes[name]
            sums = np.bincount(idx, weights=r, minlength=len(levels))
            counts = np.bincount(idx, minlength=len(levels))
            means = sums / counts
            comps[name] += means
            r -= means[idx]
            worst = max(worst, float(np.abs(means).max()))
        if worst <= tol * scale:
            break

    # normalization: move year averages of the county-year and bank-year
    # components—and the overall year mean—into the bank-county component
    bc_idx, bc_levels = codes["bank_county"]

    def _shift_into_bank_county(values_by_cell):
        sums = np.bincount(bc_idx, weights=values_by_cell, minlength=len(bc_levels))
        counts = np.bincount(bc_idx, minlength=len(bc_levels))
        comps["bank_county"] += sums / counts

    for name, outer in (("county_year", "county_id"), ("bank_year", "bank_id")):
        idx, levels = codes[name]
        lv = levels.to_frame(index=False)
        means = pd.Series(comps[name]).groupby(lv[outer].to_numpy()).transform("mean").to_numpy()
        comps[name] -= means
        _shift_into_bank_county(means[idx])

    y_idx, y_levels = codes["year"]
    y_mean = comps["year"].mean()
    comps["year"] -= y_mean
    _shift_into_bank_county(np.full(len(r), y_mean))

    out = work.copy()
    for name in FE_GROUPS:
        idx, _ = codes[name]
        out[f"{value_col}_{name}"] = comps[name][idx]
    out[f"{value_col}_idio"] = r
    series = {
        name: pd.Series(comps[name], index=codes[name][1])
        for name in FE_GROUPS
    }
    return out, series


def extract_residuals(panel, attrs, params: ParameterSet, scalars: MarketSizeScalars) -> ResidualTable:
    """Invert observed data through the structural equations.

    Per in-network cell with interior shares, the residual is the share
    transform minus the parametric index; boundary cells are reported as
    excluded.  The residual of each side is then decomposed into the five
    effect groups.
    """
    st = shares_table(panel, attrs, scalars)

    bad_d = st["in_dep"] & ((st["s_d"] >= 1) | (st["s0_d"] <= 0))
    bad_l = st["in_loan"] & ((st["s_l"] >= 1) | (st["s0_l"] <= 0))
    excluded = st.loc[bad_d | bad_l, ["year", "bank_id", "county_id"]].copy()

    dep = st["in_dep"] & ~bad_d
    loan = st["in_loan"] & ~bad_l

    eta_d = np.full(len(st), np.nan)
    if dep.any():
        sub = st[dep]
        y = y_transform(sub["s_d"].to_numpy(), sub["s0_d"].to_numpy())
        rhs = (
            branch_step_array(sub["n_branches"], params.deposit.branch_steps)
            + params.deposit.sec * sub["sec_rate"].to_numpy()
            + params.deposit.cross * np.log1p(sub["loans"].to_numpy())
        )
        if params.deposit.total_dep != 0.0:
            tot = sub["total_dep"].to_numpy()
            if np.any(tot <= 0):
                raise DomainError("zero total deposits in deposit equation with total-deposit term")
            rhs = rhs + params.deposit.total_dep * np.log(tot)
        eta_d[dep.to_numpy()] = y - rhs

    eta_l = np.full(len(st), np.nan)
    if loan.any():
        sub = st[loan]
        y = y_transform(sub["s_l"].to_numpy(), sub["s0_l"].to_numpy())
        rhs = np.zeros(len(sub))
        for regime in (REGIME_BRANCHES, REGIME_NO_BRANCHES, REGIME_SHADOW):
            eq = loan_params_for(params, regime)
            mask = (sub["regime"] == regime).to_numpy()
            if not mask.any():
                continue
            block = sub[mask]
            r = (
                branch_step_array(block["n_branches"], eq.branch_steps)
                + eq.sec * block["sec_rate"].to_numpy()
                + eq.cross * np.log1p(block["deposits"].to_numpy())
            )
            if eq.total_dep != 0.0:
                tot = block["total_dep"].to_numpy()
                if np.any(tot <= 0):
                    raise DomainError(
                        "zero total deposits in loan equation with total-deposit term"
                    )
                r = r + eq.total_dep * np.log(tot)
            rhs[mask] = r
        eta_l[loan.to_numpy()] = y - rhs

    table = st[["year", "bank_id", "county_id", "regime"]].copy()
    table["eta_d"] = eta_d
    table["eta_l"] = eta_l

    dec_d, comps_d = _decompose(table, "eta_d")
    dec_l, comps_l = _decompose(table, "eta_l")
    keys = ["year", "bank_id", "county_id"]
    for dec, col in ((dec_d, "eta_d"), (dec_l, "eta_l")):
        cols = [c for c in dec.columns if c.startswith(f"{col}_")]
        if cols:
            table = table.merge(dec[keys + cols], on=keys, how="left")
    return ResidualTable(table=table, excluded=excluded,
                         components_d=comps_d, components_l=comps_l)


def build_year_systems(panel, attrs, params: ParameterSet, scalars: MarketSizeScalars,
                       residuals: ResidualTable | None = None,
                       eta_override=None) -> list[YearSystem]:
    """Assemble per-year solver inputs from a panel.

    ``residuals`` supplies the unobserved component per cell (extracted
    from this panel unless given); the effective exogenous index of a cell
    is the branch step plus securitization term plus its residual.
    """
    if residuals is None and eta_override is None:
        residuals = extract_residuals(panel, attrs, params, scalars)
    st = shares_table(panel, attrs, scalars)

    if eta_override is not None:
        eta_d_lk, eta_l_lk = eta_override
    else:
        eta_d_lk = residuals.eta_lookup("d")
        eta_l_lk = residuals.eta_lookup("l")

    systems = []
    for year in sorted(st["year"].unique()):
        sub = st[st["year"] == year]
        counties = np.sort(attrs_counties(attrs, year))
        county_pos = {c: i for i, c in enumerate(counties)}

        pop = county_frame(attrs)
        pop = pop[pop["year"] == year].set_index("county_id")["population"]
        h_d = scalars.h_deposit(pop.reindex(counties).to_numpy())
        h_l = scalars.h_loan(pop.reindex(counties).to_numpy())

        dep = sub[sub["in_dep"]].copy()
        loan = sub[sub["in_loan"]].copy()
        banks = np.sort(pd.concat([dep["bank_id"], loan["bank_id"]]).unique())
        bank_pos = {b: i for i, b in enumerate(banks)}

        def _cells(df):
            df = df.copy()
            df["ci"] = df["county_id"].map(county_pos)
            df["bi"] = df["bank_id"].map(bank_pos)
            return df.sort_values(["ci", "bi"]).reset_index(drop=True)

        dep = _cells(dep)
        loan = _cells(loan)

        key = ["year", "bank_id", "county_id"]
        dep_eta = eta_d_lk.reindex(pd.MultiIndex.from_frame(dep[key])).to_numpy()
        loan_eta = eta_l_lk.reindex(pd.MultiIndex.from_frame(loan[key])).to_numpy()
        if np.isnan(dep_eta).any() or np.isnan(loan_eta).any():
            nd = dep.loc[np.isnan(dep_eta), key].values.tolist()
            nl = loan.loc[np.isnan(loan_eta), key].values.tolist()
            raise InputError(f"cells without residuals: {(nd + nl)[:10]}")

        d_e = (
            branch_step_array(dep["n_branches"], params.deposit.branch_steps)
            + params.deposit.sec * dep["sec_rate"].to_numpy()
            + dep_eta
        )
        d_cross = np.full(len(dep), params.deposit.cross)
        d_totq = np.full(len(dep), params.deposit.total_dep)
        d_own = np.zeros(len(dep))

        l_e = np.zeros(len(loan))
        l_cross = np.zeros(len(loan))
        l_totq = np.zeros(len(loan))
        for regime in (REGIME_BRANCHES, REGIME_NO_BRANCHES, REGIME_SHADOW):
            eq = loan_params_for(params, regime)
            mask = (loan["regime"] == regime).to_numpy()
            if not mask.any():
                continue
            l_e[mask] = (
                branch_step_array(loan.loc[mask, "n_branches"], eq.branch_steps)
                + eq.sec * loan.loc[mask, "sec_rate"].to_numpy()
                + loan_eta[mask]
            )
            l_cross[mask] = eq.cross
            l_totq[mask] = eq.total_dep

        loan_index = {(b, c): i for i, (b, c) in enumerate(zip(loan["bank_id"], loan["county_id"]))}
        d_loan_ix = np.array(
            [loan_index.get((b, c), -1) for b, c in zip(dep["bank_id"], dep["county_id"])],
            dtype=np.int64,
        )
        if (d_loan_ix < 0).any():
            # a branch county with zero observed loans: keep the deposit cell
            # but without a live cross term (treated as zero loans)
            pass
        dep_index = {(b, c): i for i, (b, c) in enumerate(zip(dep["bank_id"], dep["county_id"]))}
        l_dep_ix = np.array(
            [dep_index.get((b, c), -1) for b, c in zip(loan["bank_id"], loan["county_id"])],
            dtype=np.int64,
        )

        def _offsets(ci_values, n):
            counts = np.bincount(ci_values, minlength=n)
            off = np.zeros(n + 1, dtype=np.int64)
            np.cumsum(counts, out=off[1:])
            return off

        q_init = np.bincount(dep["bi"].to_numpy(), weights=dep["deposits"].to_numpy(),
                             minlength=len(banks))
        systems.append(YearSystem(
            year=int(year),
            banks=banks,
            counties=counties,
            h_d=np.asarray(h_d, dtype=float),
            h_l=np.asarray(h_l, dtype=float),
            d_bank=dep["bi"].to_numpy(dtype=np.int64),
            d_county=dep["ci"].to_numpy(dtype=np.int64),
            d_e=np.asarray(d_e, dtype=float),
            d_cross=d_cross,
            d_totq=d_totq,
            d_own=d_own,
            d_loan_ix=d_loan_ix,
            d_offsets=_offsets(dep["ci"].to_numpy(), len(counties)),
            l_bank=loan["bi"].to_numpy(dtype=np.int64),
            l_county=loan["ci"].to_numpy(dtype=np.int64),
            l_e=np.asarray(l_e, dtype=float),
            l_cross=l_cross,
            l_totq=l_totq,
            l_dep_ix=l_dep_ix,
            l_offsets=_offsets(loan["ci"].to_numpy(), len(counties)),
            q_init=q_init.astype(float),
            s_d_init=(dep["deposits"].to_numpy() / np.asarray(h_d)[dep["ci"].to_numpy()]),
        ))
    return systems


def attrs_counties(attrs, year):
    attrs = county_frame(attrs)
    return attrs.loc[attrs["year"] == year, "county_id"].unique()


def state_indices(state, side):
    """Full structural index (systematic part plus residual) per cell of a
    solved state, evaluated at the state's own shares and totals."""
    system = state.system
    ln_q = np.zeros(system.n_banks())
    pos = state.q_d > 0
    ln_q[pos] = np.log(state.q_d[pos])
    if side == "d":
        cross = np.zeros(len(system.d_e))
        has = system.d_loan_ix >= 0
        if has.any():
            cross[has] = np.log1p(
                system.h_l[system.d_county[has]] * state.s_l[system.d_loan_ix[has]]
            )
        idx = system.d_e + system.d_cross * cross + system.d_totq * ln_q[system.d_bank]
        idx = idx + system.d_own * np.log1p(system.h_d[system.d_county] * state.s_d)
        return idx
    cross = np.zeros(len(system.l_e))
    has = system.l_dep_ix >= 0
    cross[has] = np.log1p(system.h_d[system.l_county[has]] * state.s_d[system.l_dep_ix[has]])
    return system.l_e + system.l_cross * cross + system.l_totq * ln_q[system.l_bank]


def surplus_report(state) -> dict:
    """Currency volumes and util-scale surplus aggregates of one state."""
    system = state.system
    dep_q = state.deposits_by_cell()
    loan_q = state.loans_by_cell()
    idx_d = state_indices(state, "d") if len(system.d_e) else np.zeros(0)
    idx_l = state_indices(state, "l") if len(system.l_e) else np.zeros(0)

    dep_by_county = np.bincount(system.d_county, weights=dep_q * idx_d,
                                minlength=len(system.counties))
    loan_by_county = np.bincount(system.l_county, weights=loan_q * idx_l,
                                 minlength=len(system.counties))
    return {
        "deposit_value": float(dep_q.sum()),
        "loan_value": float(loan_q.sum()),
        "deposit_surplus": float((dep_q * idx_d).sum()),
        "loan_surplus": float((loan_q * idx_l).sum()),
        "deposit_surplus_by_county": dep_by_county,
        "loan_surplus_by_county": loan_by_county,
    }
