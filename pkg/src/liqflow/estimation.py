"""Panel GMM pipeline: differencing transforms, instruments, two-step GMM,
propensity-score control function, and residual diagnostics.

Identification works off two differencing schemes.  The first differences
a bank against a baseline bank within a county and then across adjacent
years, which removes year, county-year, and bank-county effects but
leaves bank-year effects (and the bank's total-deposit regressor) in
place.  The second adds a difference against a baseline county within the
bank; with a common baseline bank across the county pair it also removes
bank-year effects and wipes out the total-deposit regressor, so that
parameter is estimated afterwards from the first scheme with the other
coefficients plugged in as an offset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats

from .domain import DEPOSITORY, SHADOW, county_frame, panel_frame
from .errors import ConfigurationError, SingularDesignError
from .surplus import (
    REGIME_BRANCHES,
    REGIME_NO_BRANCHES,
    REGIME_SHADOW,
    FE_GROUPS,
    shares_table,
    y_transform,
)

DEPOSIT_COLS = ["d2", "d3", "d4", "d5", "b6", "sec", "lnql"]
LOAN_COLS_BRANCHES = ["d2", "d3", "d4", "d5", "b6", "sec", "lnqd"]
LOAN_COLS_NO_BRANCHES = ["sec"]
LOAN_COLS_SHADOW = ["sec"]
PROPENSITY_COLS = ["p1", "p2", "p3"]


# ---------------------------------------------------------------------------
# regression samples


def add_regressors(st: pd.DataFrame) -> pd.DataFrame:
    """Attach regressor columns to a shares table."""
    out = st.copy()
    n = out["n_branches"].to_numpy()
    out["d2"] = (n >= 2).astype(float)
    out["d3"] = (n >= 3).astype(float)
    out["d4"] = (n >= 4).astype(float)
    out["d5"] = (n >= 5).astype(float)
    out["b6"] = np.maximum(0.0, n - 5.0)
    out["sec"] = out["sec_rate"].astype(float)
    out["lnql"] = np.log1p(out["loans"].astype(float))
    out["lnqd"] = np.log1p(out["deposits"].astype(float))
    with np.errstate(divide="ignore"):
        out["lnQ"] = np.where(out["total_dep"] > 0, np.log(out["total_dep"]), np.nan)
    return out


def deposit_sample(st: pd.DataFrame) -> pd.DataFrame:
    sub = st[st["in_dep"] & st["s_d"].gt(0) & st["s_d"].lt(1) & st["s0_d"].gt(0)].copy()
    sub["y"] = y_transform(sub["s_d"].to_numpy(), sub["s0_d"].to_numpy())
    return sub


def loan_sample(st: pd.DataFrame, regime: str) -> pd.DataFrame:
    sub = st[st["in_loan"] & st["s_l"].gt(0) & st["s_l"].lt(1) & st["s0_l"].gt(0)]
    sub = sub[sub["regime"] == regime].copy()
    sub["y"] = y_transform(sub["s_l"].to_numpy(), sub["s0_l"].to_numpy())
    return sub


# ---------------------------------------------------------------------------
# differencing transforms


def _rank_metric(sample: pd.DataFrame):
    """Baseline preference: larger average deposits, then loans, then id."""
    g = sample.groupby(["bank_id", "county_id"])[["deposits", "loans"]].mean()
    order = g.sort_values(["deposits", "loans"], ascending=False)
    return order


def _county_bank_order(sample: pd.DataFrame) -> dict:
    order = _rank_metric(sample).reset_index()
    order = order.sort_values(["county_id", "deposits", "loans", "bank_id"],
                              ascending=[True, False, False, True])
    return {c: list(grp["bank_id"]) for c, grp in order.groupby("county_id")}


def _baseline_county(sample: pd.DataFrame) -> dict:
    g = sample.groupby(["bank_id", "county_id"])[["deposits", "loans"]].mean().reset_index()
    g = g.sort_values(["bank_id", "deposits", "loans", "county_id"],
                      ascending=[True, False, False, True])
    return {b: grp["county_id"].iloc[0] for b, grp in g.groupby("bank_id")}


@dataclass
class TransformedRows:
    """Differenced rows keyed by the focal cell."""

    frame: pd.DataFrame
    cols: list
    drops: dict = field(default_factory=dict)


def did_transform(sample: pd.DataFrame, cols) -> TransformedRows:
    """Bank-vs-baseline difference within county-year, then a first
    difference across adjacent years.  Rows in county-years with fewer
    than two banks are dropped."""
    cols = list(cols)
    pos = {}
    values = sample[cols].to_numpy(dtype=float)
    keys = list(zip(sample["bank_id"], sample["county_id"], sample["year"]))
    for i, k in enumerate(keys):
        pos[k] = i

    county_order = _county_bank_order(sample)
    by_cy = {}
    for b, c, t in keys:
        by_cy.setdefault((c, t), set()).add(b)

    rows, idx = [], []
    drops = {"single_bank": 0, "no_pair_year": 0, "no_baseline": 0}
    years = sorted(sample["year"].unique())
    for (c, t), banks in sorted(by_cy.items()):
        if t == years[0]:
            continue
        prev = by_cy.get((c, t - 1), set())
        avail = sorted(banks & prev)
        if not avail:
            drops["no_pair_year"] += len(banks)
            continue
        if len(avail) < 2:
            drops["single_bank"] += len(banks)
            continue
        ranked = [b for b in county_order.get(c, []) if b in avail]
        for j in avail:
            base = next((b for b in ranked if b != j), None)
            if base is None:
                drops["no_baseline"] += 1
                continue
            rows.append((j, c, t, base))
            idx.append((pos[(j, c, t)], pos[(base, c, t)],
                        pos[(j, c, t - 1)], pos[(base, c, t - 1)]))

    if not rows:
        frame = pd.DataFrame(columns=["bank_id", "county_id", "year", "baseline_bank"] + cols)
        return TransformedRows(frame=frame, cols=cols, drops=drops)

    idx = np.asarray(idx)
    v = values[idx[:, 0]] - values[idx[:, 1]] - values[idx[:, 2]] + values[idx[:, 3]]
    frame = pd.DataFrame(rows, columns=["bank_id", "county_id", "year", "baseline_bank"])
    frame[cols] = v
    return TransformedRows(frame=frame, cols=cols, drops=drops)


def dididi_transform(sample: pd.DataFrame, cols) -> TransformedRows:
    """Bank- and county-differenced rows, time differenced.

    Each row compares the focal cell against the same baseline bank in
    both the focal county and the bank's baseline county, which removes
    bank-year effects exactly.  Single-county banks are dropped.
    """
    cols = list(cols)
    values = sample[cols].to_numpy(dtype=float)
    keys = list(zip(sample["bank_id"], sample["county_id"], sample["year"]))
    pos = {k: i for i, k in enumerate(keys)}
    present = set(pos)

    county_order = _county_bank_order(sample)
    base_county = _baseline_county(sample)
    bank_counties = sample.groupby("bank_id")["county_id"].agg(lambda s: sorted(set(s)))

    rows, idx = [], []
    drops = {"single_county_bank": 0, "missing_cells": 0, "no_baseline": 0}
    years = sorted(sample["year"].unique())

    for j, counties in bank_counties.items():
        if len(counties) < 2:
            drops["single_county_bank"] += 1
            continue
        mstar = base_county[j]
        for m in counties:
            if m == mstar:
                continue
            for t in years[1:]:
                own = [(j, m, t), (j, m, t - 1), (j, mstar, t), (j, mstar, t - 1)]
                if any(k not in present for k in own):
                    drops["missing_cells"] += 1
                    continue
                base = None
                for b in county_order.get(m, []):
                    if b == j:
                        continue
                    need = [(b, m, t), (b, m, t - 1), (b, mstar, t), (b, mstar, t - 1)]
                    if all(k in present for k in need):
                        base = b
                        break
                if base is None:
                    drops["no_baseline"] += 1
                    continue
                rows.append((j, m, t, base, mstar))
                idx.append((
                    pos[(j, m, t)], pos[(base, m, t)],
                    pos[(j, mstar, t)], pos[(base, mstar, t)],
                    pos[(j, m, t - 1)], pos[(base, m, t - 1)],
                    pos[(j, mstar, t - 1)], pos[(base, mstar, t - 1)],
                ))

    if not rows:
        frame = pd.DataFrame(
            columns=["bank_id", "county_id", "year", "baseline_bank", "baseline_county"] + cols
        )
        return TransformedRows(frame=frame, cols=cols, drops=drops)

    idx = np.asarray(idx)
    v = (
        values[idx[:, 0]] - values[idx[:, 1]] - values[idx[:, 2]] + values[idx[:, 3]]
        - values[idx[:, 4]] + values[idx[:, 5]] + values[idx[:, 6]] - values[idx[:, 7]]
    )
    frame = pd.DataFrame(rows, columns=["bank_id", "county_id", "year",
                                        "baseline_bank", "baseline_county"])
    frame[cols] = v
    return TransformedRows(frame=frame, cols=cols, drops=drops)


# ---------------------------------------------------------------------------
# instruments


def attach_lag_instruments(sample: pd.DataFrame, panel: pd.DataFrame, side: str) -> pd.DataFrame:
    """Two-year-lagged own-cell instruments (levels, untransformed)."""
    panel = panel_frame(panel)
    lag = panel[["year", "bank_id", "county_id", "loans", "deposits", "n_branches"]].copy()
    lag["year"] = lag["year"] + 2
    lag["lag2_lnql"] = np.log1p(lag.pop("loans"))
    lag["lag2_lnqd"] = np.log1p(lag.pop("deposits"))
    lag["lag2_n"] = lag.pop("n_branches").astype(float)
    out = sample.merge(lag, on=["year", "bank_id", "county_id"], how="left")
    return out


def attach_ring_instrument(sample: pd.DataFrame, panel: pd.DataFrame, geo, quantity="loans") -> pd.DataFrame:
    """Same-bank quantity in counties two adjacency steps away (log of one
    plus the sum); missing when the second ring is empty."""
    if geo is None:
        raise ConfigurationError("geography required for spatial instruments")
    panel = panel_frame(panel)
    qty = panel.groupby(["bank_id", "year", "county_id"])[quantity].sum()

    ring_vals = np.full(len(sample), np.nan)
    cache = {}
    for i, (b, m, t) in enumerate(zip(sample["bank_id"], sample["county_id"], sample["year"])):
        ring = cache.get(m)
        if ring is None:
            ring = sorted(geo.second_ring(m))
            cache[m] = ring
        if not ring:
            continue
        total = 0.0
        for m2 in ring:
            total += qty.get((b, t, m2), 0.0)
        ring_vals[i] = np.log1p(total)
    out = sample.copy()
    out["ring2"] = ring_vals
    return out


def attach_income_instrument(sample: pd.DataFrame, panel: pd.DataFrame, attrs) -> pd.DataFrame:
    """Log of total per-capita income over the bank's other branch counties."""
    panel = panel_frame(panel)
    attrs = county_frame(attrs)
    branch = panel[(panel["n_branches"] >= 1)][["bank_id", "year", "county_id"]]
    branch = branch.merge(attrs[["county_id", "year", "income_pc"]], on=["county_id", "year"], how="left")
    totals = branch.groupby(["bank_id", "year"])["income_pc"].sum().rename("inc_total")
    own = branch.set_index(["bank_id", "year", "county_id"])["income_pc"]

    out = sample.copy()
    key = pd.MultiIndex.from_frame(sample[["bank_id", "year"]])
    tot = totals.reindex(key).to_numpy()
    own_inc = own.reindex(pd.MultiIndex.from_frame(sample[["bank_id", "year", "county_id"]])).to_numpy()
    own_inc = np.where(np.isnan(own_inc), 0.0, own_inc)
    other = tot - own_inc
    with np.errstate(invalid="ignore"):
        out["w_inc"] = np.where(other > 0, np.log(other), np.nan)
    return out


def build_instruments(transformed: TransformedRows, raw_sample: pd.DataFrame,
                      exog_cols, raw_cols) -> tuple[pd.DataFrame, dict]:
    """Instrument matrix for a set of transformed rows.

    Exogenous regressors instrument themselves (transformed); dynamic and
    spatial instruments enter as raw levels looked up at the focal cell.
    Rows lacking any instrument are dropped and counted.
    """
    frame = transformed.frame
    z = frame[["bank_id", "county_id", "year"]].copy()
    for c in exog_cols:
        z[c] = frame[c].to_numpy()
    raw = raw_sample.set_index(["bank_id", "county_id", "year"])
    key = pd.MultiIndex.from_frame(frame[["bank_id", "county_id", "year"]])
    for c in raw_cols:
        z[c] = raw[c].reindex(key).to_numpy()
    keep = ~z[exog_cols + list(raw_cols)].isna().any(axis=1)
    report = {"missing_instrument": int((~keep).sum())}
    return z[keep.to_numpy()].reset_index(drop=True), report


# ---------------------------------------------------------------------------
# GMM


@dataclass
class GMMResult:
    theta: np.ndarray
    se: np.ndarray
    vcov: np.ndarray
    names: list
    n: int
    j_stat: float | None
    j_pvalue: float | None
    j_dof: int
    n_clusters: int | None

    def conf_int(self, level=0.95):
        if self.n_clusters and self.n_clusters > 1:
            crit = stats.t.ppf(0.5 + level / 2, self.n_clusters - 1)
        else:
            crit = stats.norm.ppf(0.5 + level / 2)
        return np.column_stack([self.theta - crit * self.se, self.theta + crit * self.se])

    def by_name(self):
        return dict(zip(self.names, self.theta))

    def se_by_name(self):
        return dict(zip(self.names, self.se))


def _name_collinear(M, names):
    # report the columns whose removal restores full rank
    _, r = np.linalg.qr(M)
    diag = np.abs(np.diag(r))
    tol = diag.max() * max(M.shape) * np.finfo(float).eps * 1e3 if diag.size else 0.0
    return [names[i] for i in range(len(names)) if i < len(diag) and diag[i] <= tol]


def _cluster_meat(Z, u, clusters):
    zu = Z * u[:, None]
    if clusters is None:
        return zu.T @ zu, None
    df = pd.DataFrame(zu)
    df["_c"] = np.asarray(clusters)
    sums = df.groupby("_c").sum().to_numpy()
    return sums.T @ sums, sums.shape[0]


def gmm_linear(y, X, Z, cluster=None, weighting="two-step", names=None) -> GMMResult:
    """Linear GMM with instrument matrix Z.

    First step uses the 2SLS weight; the second re-weights with the
    inverse of the clustered moment covariance.  Standard errors are
    heteroskedasticity-robust and clustered when ``cluster`` is given;
    the overidentification statistic is reported when there are more
    instruments than parameters.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    Z = np.asarray(Z, dtype=float)
    n, k = X.shape
    q = Z.shape[1]
    names = list(names) if names is not None else [f"x{i}" for i in range(k)]
    if q < k:
        raise SingularDesignError(f"underidentified: {q} instruments for {k} parameters")

    zx = Z.T @ X
    if np.linalg.matrix_rank(zx) < k:
        raise SingularDesignError("rank-deficient moment Jacobian", columns=_name_collinear(X, names))

    zz = Z.T @ Z
    w1 = np.linalg.pinv(zz)
    a = zx.T @ w1 @ zx
    theta = np.linalg.solve(a, zx.T @ w1 @ (Z.T @ y))

    u = y - X @ theta
    meat, n_clusters = _cluster_meat(Z, u, cluster)

    exact = q == k
    if weighting == "two-step" and not exact:
        w2 = np.linalg.pinv(meat / n)
        a2 = zx.T @ w2 @ zx
        theta = np.linalg.solve(a2, zx.T @ w2 @ (Z.T @ y))
        u = y - X @ theta
        meat, n_clusters = _cluster_meat(Z, u, cluster)
        w = w2
    else:
        w = w1

    g = n_clusters if n_clusters else n
    dof_adj = (g / max(g - 1, 1)) * ((n - 1) / max(n - k, 1))

    bread = np.linalg.inv(zx.T @ w @ zx)
    middle = zx.T @ w @ meat @ w @ zx
    vcov = dof_adj * bread @ middle @ bread
    se = np.sqrt(np.maximum(np.diag(vcov), 0.0))

    j_stat = j_p = None
    j_dof = q - k
    if j_dof > 0:
        gbar = Z.T @ u
        s_inv = np.linalg.pinv(meat)
        j_stat = float(gbar @ s_inv @ gbar)
        j_p = float(stats.chi2.sf(j_stat, j_dof))

    return GMMResult(theta=theta, se=se, vcov=vcov, names=names, n=n,
                     j_stat=j_stat, j_pvalue=j_p, j_dof=j_dof, n_clusters=n_clusters)


# ---------------------------------------------------------------------------
# fixed-effect demeaning and the propensity first stage


def within_transform(df: pd.DataFrame, cols, tol=1e-12, max_sweeps=500) -> pd.DataFrame:
    """Demean columns on all effect groups by alternating projections."""
    out = df.copy()
    vals = out[cols].to_numpy(dtype=float).copy()
    codes = {}
    for name, keys in FE_GROUPS.items():
        codes[name] = pd.MultiIndex.from_frame(out[keys]).factorize(sort=True)[0]
    scale = max(1.0, float(np.abs(vals).max())) if vals.size else 1.0
    for _ in range(max_sweeps):
        worst = 0.0
        for name in FE_GROUPS:
            idx = codes[name]
            counts = np.bincount(idx)
            for c in range(vals.shape[1]):
                means = np.bincount(idx, weights=vals[:, c]) / counts
                vals[:, c] -= means[idx]
                worst = max(worst, float(np.abs(means).max()))
        if worst <= tol * scale:
            break
    out[cols] = vals
    return out


EXOG_ATTR_COLS = ["ln_income", "ln_pop", "share_age_le19", "share_age_ge50",
                  "ln_hpi", "ln_bankruptcies", "ln_apps", "urban_share"]


def _attach_attrs(sample: pd.DataFrame, attrs) -> pd.DataFrame:
    attrs = county_frame(attrs).copy()
    attrs["ln_income"] = np.log(attrs["income_pc"])
    attrs["ln_pop"] = np.log(attrs["population"])
    attrs["ln_hpi"] = np.log(attrs["house_price_index"])
    attrs["ln_bankruptcies"] = np.log1p(attrs["bankruptcies"])
    attrs["ln_apps"] = np.log1p(attrs["n_loan_applications"])
    cols = ["county_id", "year"] + EXOG_ATTR_COLS
    return sample.merge(attrs[cols], on=["county_id", "year"], how="left")


@dataclass
class PropensityResult:
    table: pd.DataFrame        # (bank_id, county_id, year, pscore)
    coefficients: dict
    se: dict
    r_squared: float


def first_stage_propensity(panel, attrs, geo, clip=(1e-6, 1 - 1e-6)) -> PropensityResult:
    """Linear probability model for branch presence among depository
    lenders, with lagged own- and neighbor-county presence as the excluded
    predictors and the full effect-group demeaning applied."""
    panel = panel_frame(panel)
    dep = panel[panel["bank_class"] == DEPOSITORY].copy()
    dep["has_branch"] = (dep["n_branches"] >= 1).astype(float)

    lag = dep[["bank_id", "county_id", "year", "has_branch"]].copy()
    lag["year"] = lag["year"] + 1
    lag = lag.rename(columns={"has_branch": "own_lag"})

    sample = dep[(dep["n_branches"] >= 1) | (dep["loans"] > 0)].copy()
    sample = sample.merge(lag, on=["bank_id", "county_id", "year"], how="left")
    sample["own_lag"] = sample["own_lag"].fillna(0.0)

    # lagged presence in any adjacent county
    branch_cells = set(zip(dep.loc[dep["has_branch"] > 0, "bank_id"],
                           dep.loc[dep["has_branch"] > 0, "county_id"],
                           dep.loc[dep["has_branch"] > 0, "year"]))
    nbr = np.zeros(len(sample))
    for i, (b, m, t) in enumerate(zip(sample["bank_id"], sample["county_id"], sample["year"])):
        for m2 in geo.neighbors(m):
            if (b, m2, t - 1) in branch_cells:
                nbr[i] = 1.0
                break
    sample["nbr_lag"] = nbr

    years = sorted(panel["year"].unique())
    sample = sample[sample["year"] > years[0]].reset_index(drop=True)
    sample = _attach_attrs(sample, attrs)
    sample["sec"] = sample["sec_rate"]

    x_cols = ["own_lag", "nbr_lag", "sec"] + EXOG_ATTR_COLS
    dm = within_transform(sample, ["has_branch"] + x_cols)
    X = dm[x_cols].to_numpy()
    yv = dm["has_branch"].to_numpy()
    XtX = X.T @ X
    coef, *_ = np.linalg.lstsq(XtX, X.T @ yv, rcond=None)
    resid = yv - X @ coef
    fitted = sample["has_branch"].to_numpy() - resid
    pscore = np.clip(fitted, clip[0], clip[1])

    # HC1 standard errors on the demeaned regression
    xtx_inv = np.linalg.pinv(XtX)
    meat = (X * resid[:, None]).T @ (X * resid[:, None])
    n, k = X.shape
    vc = n / max(n - k, 1) * xtx_inv @ meat @ xtx_inv
    se = np.sqrt(np.maximum(np.diag(vc), 0.0))
    tss = float(((yv - yv.mean()) ** 2).sum())
    r2 = 1.0 - float((resid ** 2).sum()) / tss if tss > 0 else 0.0

    table = sample[["bank_id", "county_id", "year"]].copy()
    table["pscore"] = pscore
    return PropensityResult(
        table=table,
        coefficients=dict(zip(x_cols, coef)),
        se=dict(zip(x_cols, se)),
        r_squared=r2,
    )


def attach_propensity(sample: pd.DataFrame, propensity: PropensityResult) -> pd.DataFrame:
    key = ["bank_id", "county_id", "year"]
    out = sample.merge(propensity.table, on=key, how="left")
    p = out.pop("pscore")
    out["p1"] = p
    out["p2"] = p ** 2
    out["p3"] = p ** 3
    return out


# ---------------------------------------------------------------------------
# diagnostics


def ab_m2_test(residuals: pd.DataFrame, value_col="resid"):
    """Serial-correlation test on already-differenced residuals.

    Correlates the residual at t with the one at t-2 within each
    bank-county unit; the self-normalized sum of per-unit products is
    asymptotically standard normal when shocks are serially uncorrelated.
    Returns ``(statistic, p_value)`` or ``(None, None)`` when undefined.
    """
    df = residuals.dropna(subset=[value_col])
    lag = df[["bank_id", "county_id", "year", value_col]].copy()
    lag["year"] = lag["year"] + 2
    merged = df.merge(lag, on=["bank_id", "county_id", "year"],
                      suffixes=("", "_lag2"))
    if merged.empty:
        return None, None
    merged["prod"] = merged[value_col] * merged[f"{value_col}_lag2"]
    units = merged.groupby(["bank_id", "county_id"])["prod"].sum()
    denom = float(np.sqrt((units ** 2).sum()))
    if len(units) < 2 or denom == 0 or np.ptp(merged["prod"].to_numpy()) == 0:
        return None, None
    z = float(units.sum()) / denom
    return z, float(2 * stats.norm.sf(abs(z)))


def spatial_corr_test(residuals: pd.DataFrame, geo, value_col="resid"):
    """Regression of a cell's residual on the same bank-year average
    residual over adjacent counties, with a robust t-test on the slope."""
    df = residuals.dropna(subset=[value_col]).copy()
    lookup = df.set_index(["bank_id", "county_id", "year"])[value_col]
    xs, ys = [], []
    for b, m, t, v in zip(df["bank_id"], df["county_id"], df["year"], df[value_col]):
        vals = []
        for m2 in geo.neighbors(m):
            w = lookup.get((b, m2, t))
            if w is not None and not (isinstance(w, float) and np.isnan(w)):
                vals.append(w)
        if vals:
            xs.append(float(np.mean(vals)))
            ys.append(v)
    if len(xs) < 3:
        return None, None
    x = np.column_stack([np.ones(len(xs)), xs])
    yv = np.asarray(ys)
    xtx_inv = np.linalg.pinv(x.T @ x)
    beta = xtx_inv @ x.T @ yv
    u = yv - x @ beta
    meat = (x * u[:, None]).T @ (x * u[:, None])
    vc = len(yv) / max(len(yv) - 2, 1) * xtx_inv @ meat @ xtx_inv
    se = np.sqrt(max(vc[1, 1], 0.0))
    if se == 0:
        return None, None
    z = beta[1] / se
    return float(z), float(2 * stats.norm.sf(abs(z)))


# ---------------------------------------------------------------------------
# equation-level estimators


@dataclass
class RegimeEstimate:
    theta: dict
    se: dict
    gmm: GMMResult | None
    total_dep: float | None = None
    total_dep_se: float | None = None
    n_rows: int = 0


@dataclass
class EstimationResult:
    equation: str
    regimes: dict
    first_stage: PropensityResult | None = None
    diagnostics: dict = field(default_factory=dict)
    drops: dict = field(default_factory=dict)

    def theta_flat(self):
        out = {}
        for name, reg in self.regimes.items():
            for k, v in reg.theta.items():
                out[f"{name}.{k}"] = v
            if reg.total_dep is not None:
                out[f"{name}.total_dep"] = reg.total_dep
        return out


def _estimate_total_dep(sample, did_cols, theta_offset, cluster_col="bank_id"):
    """Offset stage: identify the total-deposit coefficient from the
    bank-differenced rows with the income instrument."""
    tr = did_transform(sample, did_cols + ["lnQ", "w_inc", "y"])
    frame = tr.frame.dropna(subset=["lnQ", "w_inc"])
    if len(frame) < 5:
        return None, None, tr.drops
    offset = frame[did_cols].to_numpy() @ np.asarray([theta_offset[c] for c in did_cols])
    yv = frame["y"].to_numpy() - offset
    X = frame[["lnQ"]].to_numpy()
    Z = frame[["w_inc"]].to_numpy()
    res = gmm_linear(yv, X, Z, cluster=frame[cluster_col].to_numpy(), names=["lnQ"])
    return float(res.theta[0]), float(res.se[0]), tr.drops


def estimate_deposit_equation(panel, attrs, geo, scalars) -> EstimationResult:
    """Full pipeline for the deposit equation."""
    st = add_regressors(shares_table(panel, attrs, scalars))
    sample = deposit_sample(st)
    sample = attach_lag_instruments(sample, panel, "d")
    sample = attach_ring_instrument(sample, panel, geo, quantity="loans")
    sample = attach_income_instrument(sample, panel, attrs)

    cols = DEPOSIT_COLS
    exog = [c for c in cols if c != "lnql"]
    tr = dididi_transform(sample, cols + ["y"])
    z_frame, z_report = build_instruments(tr, sample, exog + ["lnql"], ["lag2_lnql", "ring2"])
    # align X rows with surviving instrument rows
    key = ["bank_id", "county_id", "year"]
    merged = tr.frame.merge(z_frame[key + ["lag2_lnql", "ring2"]], on=key, how="inner")

    X = merged[cols].to_numpy()
    Z = merged[exog + ["lag2_lnql", "ring2"]].to_numpy()
    res = gmm_linear(merged["y"].to_numpy(), X, Z,
                     cluster=merged["bank_id"].to_numpy(), names=cols)

    theta = res.by_name()
    tq, tq_se, did_drops = _estimate_total_dep(sample, cols, theta)

    resid = merged[key].copy()
    resid["resid"] = merged["y"].to_numpy() - X @ res.theta
    m2_z, m2_p = ab_m2_test(resid)
    sp_z, sp_p = spatial_corr_test(resid, geo)

    regime = RegimeEstimate(theta=theta, se=res.se_by_name(), gmm=res,
                            total_dep=tq, total_dep_se=tq_se, n_rows=len(merged))
    return EstimationResult(
        equation="deposit",
        regimes={"deposit": regime},
        diagnostics={
            "j_stat": res.j_stat, "j_pvalue": res.j_pvalue,
            "m2_stat": m2_z, "m2_pvalue": m2_p,
            "spatial_stat": sp_z, "spatial_pvalue": sp_p,
        },
        drops={**tr.drops, **z_report, "did": did_drops},
    )


def estimate_loan_switching(panel, attrs, geo, scalars,
                            control_function=True, min_rows=12) -> EstimationResult:
    """Loan equation as a switching regression over branch presence, with
    a separate single regime for shadow lenders."""
    st = add_regressors(shares_table(panel, attrs, scalars))
    propensity = first_stage_propensity(panel, attrs, geo) if control_function else None

    regimes = {}
    drops = {}
    diagnostics = {}

    for regime_name, cols in ((REGIME_BRANCHES, LOAN_COLS_BRANCHES),
                              (REGIME_NO_BRANCHES, LOAN_COLS_NO_BRANCHES)):
        sample = loan_sample(st, regime_name)
        if sample.empty or sample["bank_id"].nunique() < 2:
            drops[regime_name] = "too few rows"
            continue
        sample = attach_lag_instruments(sample, panel, "l")
        sample = attach_income_instrument(sample, panel, attrs)
        use_cols = list(cols)
        if control_function:
            sample = attach_propensity(sample, propensity)
            sample = sample.dropna(subset=PROPENSITY_COLS)
            use_cols = use_cols + PROPENSITY_COLS

        tr = dididi_transform(sample, use_cols + ["y"])
        if len(tr.frame) < min_rows:
            drops[regime_name] = f"only {len(tr.frame)} transformed rows"
            continue
        if regime_name == REGIME_BRANCHES:
            endog = ["lnqd"]
            raw_inst = ["lag2_lnqd", "lag2_n"]
        else:
            endog = []
            raw_inst = []
        exog = [c for c in use_cols if c not in endog]
        z_frame, z_report = build_instruments(tr, sample, exog + endog, raw_inst)
        key = ["bank_id", "county_id", "year"]
        merged = tr.frame.merge(z_frame[key + raw_inst], on=key, how="inner") if raw_inst else tr.frame

        X = merged[use_cols].to_numpy()
        Z = merged[exog + raw_inst].to_numpy()
        res = gmm_linear(merged["y"].to_numpy(), X, Z,
                         cluster=merged["bank_id"].to_numpy(), names=use_cols)
        theta = res.by_name()
        tq, tq_se, did_drops = _estimate_total_dep(sample, use_cols, theta)
        regimes[regime_name] = RegimeEstimate(
            theta=theta, se=res.se_by_name(), gmm=res,
            total_dep=tq, total_dep_se=tq_se, n_rows=len(merged),
        )
        drops[regime_name] = {**tr.drops, **z_report, "did": did_drops}

        if regime_name == REGIME_BRANCHES:
            resid = merged[key].copy()
            resid["resid"] = merged["y"].to_numpy() - X @ res.theta
            m2_z, m2_p = ab_m2_test(resid)
            sp_z, sp_p = spatial_corr_test(resid, geo)
            diagnostics.update({
                "j_stat": res.j_stat, "j_pvalue": res.j_pvalue,
                "m2_stat": m2_z, "m2_pvalue": m2_p,
                "spatial_stat": sp_z, "spatial_pvalue": sp_p,
            })

    shadow = loan_sample(st, REGIME_SHADOW)
    if not shadow.empty and shadow["bank_id"].nunique() >= 2:
        tr = dididi_transform(shadow, LOAN_COLS_SHADOW + ["y"])
        if len(tr.frame) >= min_rows:
            X = tr.frame[LOAN_COLS_SHADOW].to_numpy()
            res = gmm_linear(tr.frame["y"].to_numpy(), X, X,
                             cluster=tr.frame["bank_id"].to_numpy(),
                             names=LOAN_COLS_SHADOW)
            regimes[REGIME_SHADOW] = RegimeEstimate(
                theta=res.by_name(), se=res.se_by_name(), gmm=res, n_rows=len(tr.frame)
            )
            drops[REGIME_SHADOW] = tr.drops
        else:
            drops[REGIME_SHADOW] = f"only {len(tr.frame)} transformed rows"
    else:
        drops[REGIME_SHADOW] = "too few rows"

    return EstimationResult(
        equation="loan",
        regimes=regimes,
        first_stage=propensity,
        diagnostics=diagnostics,
        drops=drops,
    )


def results_to_parameter_set(deposit: EstimationResult | None,
                             loan: EstimationResult | None):
    """Map estimation output into the solver's parameter structure."""
    from .domain import EquationParams, ParameterSet

    def _eq(reg: RegimeEstimate | None, cross_col):
        if reg is None:
            return EquationParams()
        t = reg.theta
        return EquationParams(
            branch_steps=(t.get("d2", 0.0), t.get("d3", 0.0), t.get("d4", 0.0),
                          t.get("d5", 0.0), t.get("b6", 0.0)),
            sec=t.get("sec", 0.0),
            cross=t.get(cross_col, 0.0),
            total_dep=reg.total_dep or 0.0,
        )

    dep_reg = deposit.regimes.get("deposit") if deposit else None
    loan_b = loan.regimes.get(REGIME_BRANCHES) if loan else None
    loan_nb = loan.regimes.get(REGIME_NO_BRANCHES) if loan else None
    loan_sh = loan.regimes.get(REGIME_SHADOW) if loan else None
    return ParameterSet(
        deposit=_eq(dep_reg, "lnql"),
        loan_with_branches=_eq(loan_b, "lnqd"),
        loan_without_branches=_eq(loan_nb, "lnqd"),
        loan_shadow=_eq(loan_sh, "lnqd"),
    )
