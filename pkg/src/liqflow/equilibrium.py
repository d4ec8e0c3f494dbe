"""Nested fixed-point solver for the multimarket share system.

Per county and side, every in-network bank's share solves

    s = s0 * exp(e_eff - 1/(1-s) + own_coef*ln(1+h*s))

where ``e_eff`` collects all terms held fixed within the step and ``s0``
is the county's outside share.  The county solve finds the outside share
making shares sum to one (outer bisection on ln s0, inner per-bank
root-finding).  The year solve iterates: loans per county given deposit
shares and total deposits, then deposits per county, then aggregation of
total deposits, until totals converge or for exactly two rounds.

Bisection is the reference inner/outer method; a safeguarded Newton
fast path is available through ``SolverConfig.method``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .errors import ConvergenceError, DomainError

TWO_ROUNDS = "two-rounds"
TO_CONVERGENCE = "converge"

_LN_S0_FLOOR = -745.0  # exp underflows to 0 below this
_S_CEIL = 1.0 - 1e-14


@dataclass
class SolverConfig:
    inner_tol: float = 1e-12   # share-unit residual of the per-bank root
    outer_tol: float = 1e-10   # relative change in totals between rounds
    max_outer_iters: int = 500
    update_mode: str = TO_CONVERGENCE
    method: str = "bisect"     # "bisect" (reference) or "newton"

    def __post_init__(self):
        if self.inner_tol <= 0 or self.outer_tol <= 0:
            raise DomainError("solver tolerances must be positive")
        if self.update_mode not in (TWO_ROUNDS, TO_CONVERGENCE):
            raise DomainError(f"unknown update mode: {self.update_mode}")
        if self.method not in ("bisect", "newton"):
            raise DomainError(f"unknown method: {self.method}")

    def as_dict(self):
        return {
            "inner_tol": self.inner_tol,
            "outer_tol": self.outer_tol,
            "max_outer_iters": self.max_outer_iters,
            "update_mode": self.update_mode,
            "method": self.method,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in
                      ("inner_tol", "outer_tol", "max_outer_iters", "update_mode", "method")
                      if k in d})


@njit(cache=True, nogil=True)
def _share_gap(s, e, s0, margin, own_coef, h_own):
    # g(s) = s - s0*exp(e - margin/(1-s) + own*ln(1+h*s)); increasing through
    # its root whenever own_coef < 1.
    arg = e
    if margin:
        arg -= 1.0 / (1.0 - s)
    if own_coef != 0.0:
        arg += own_coef * np.log1p(h_own * s)
    return s - s0 * np.exp(arg)


@njit(cache=True, nogil=True)
def _inner_solve(e, s0, margin, own_coef, h_own, tol, use_newton):
    """Unique share solving the per-bank fixed point at outside share s0.

    Runs to relative precision ~1e-16 so the residual stays below ``tol``
    even for shares many orders of magnitude below one.
    """
    if s0 <= 0.0:
        return 0.0
    if not margin and own_coef == 0.0:
        return s0 * np.exp(e)

    lo = 0.0
    if margin:
        hi = _S_CEIL
    else:
        # without the markup term the share is not capped at one; grow the
        # bracket until the gap turns positive (RHS is concave in s)
        hi = 1.0
        for _ in range(200):
            if _share_gap(hi, e, s0, margin, own_coef, h_own) > 0.0:
                break
            hi *= 2.0

    if use_newton:
        s = 0.5 * (lo + hi)
        for _ in range(200):
            g = _share_gap(s, e, s0, margin, own_coef, h_own)
            if g == 0.0:
                return s
            if g > 0.0:
                hi = s
            else:
                lo = s
            rhs = s - g  # current right-hand side, always positive
            if rhs <= 0.0 or s <= 0.0:
                s = 0.5 * (lo + hi)
                continue
            # Newton in ln s on phi = ln(s/rhs); dphi/ds = 1/s + margin/(1-s)^2
            # - own*h/(1+h*s), multiplied by s for the log step
            phi = np.log(s / rhs)
            if abs(phi) <= 1e-15:
                return s
            dphi = 1.0 / s
            if margin:
                dphi += 1.0 / ((1.0 - s) * (1.0 - s))
            if own_coef != 0.0:
                dphi -= own_coef * h_own / (1.0 + h_own * s)
            cand = s * np.exp(-phi / (s * dphi))
            if cand <= lo or cand >= hi or not np.isfinite(cand):
                cand = np.sqrt(lo * hi) if lo > 0.0 else 0.5 * (lo + hi)
            if abs(cand - s) <= 1e-16 * s:
                return cand
            s = cand
        return s

    s = 0.5 * (lo + hi)
    for _ in range(300):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        s = mid
        g = _share_gap(s, e, s0, margin, own_coef, h_own)
        if g == 0.0:
            return s
        if g > 0.0:
            hi = s
        else:
            lo = s
        if hi - lo <= 1e-16 * hi:
            break
    return 0.5 * (lo + hi)


@njit(cache=True, nogil=True)
def _county_gap(x, e_eff, own_coef, h_own, margin, inner_tol, use_newton, s_buf):
    # F(x) = s0 + sum_j s_j(s0) - 1 at s0 = exp(x); increasing in x.
    s0 = np.exp(x)
    total = s0
    for j in range(e_eff.size):
        s_buf[j] = _inner_solve(e_eff[j], s0, margin, own_coef[j], h_own, inner_tol, use_newton)
        total += s_buf[j]
    return total - 1.0


@njit(cache=True, nogil=True)
def _county_solve(e_eff, own_coef, h_own, margin, inner_tol, use_newton, s_out):
    """Outside share clearing the county; fills ``s_out`` with bank shares."""
    n = e_eff.size
    if n == 0:
        return 1.0

    if not margin:
        all_zero = True
        for j in range(n):
            if own_coef[j] != 0.0:
                all_zero = False
                break
        if all_zero:
            # plain logit adding-up has a closed form
            m = 0.0
            for j in range(n):
                if e_eff[j] > m:
                    m = e_eff[j]
            denom = np.exp(-m)
            for j in range(n):
                denom += np.exp(e_eff[j] - m)
            log_den = m + np.log(denom)
            for j in range(n):
                s_out[j] = np.exp(e_eff[j] - log_den)
            return np.exp(-log_den)

    lo = _LN_S0_FLOOR
    hi = 0.0
    f_hi = _county_gap(hi, e_eff, own_coef, h_own, margin, inner_tol, use_newton, s_out)
    if f_hi <= 0.0:
        # no interior competition: outside takes (almost) everything
        return 1.0

    x = 0.5 * (lo + hi)
    if use_newton:
        for _ in range(100):
            f = _county_gap(x, e_eff, own_coef, h_own, margin, inner_tol, use_newton, s_out)
            if abs(f) <= 1e-13:
                break
            if f > 0.0:
                hi = x
            else:
                lo = x
            s0 = np.exp(x)
            dF = s0
            for j in range(n):
                s = s_out[j]
                d = 1.0
                if margin:
                    d += s / ((1.0 - s) * (1.0 - s))
                if own_coef[j] != 0.0:
                    d -= own_coef[j] * s * h_own / (1.0 + h_own * s)
                dF += s / d
            cand = x - f / dF
            if cand <= lo or cand >= hi or not np.isfinite(cand):
                cand = 0.5 * (lo + hi)
            if abs(cand - x) < 1e-16:
                x = cand
                break
            x = cand
    else:
        for _ in range(200):
            x = 0.5 * (lo + hi)
            f = _county_gap(x, e_eff, own_coef, h_own, margin, inner_tol, use_newton, s_out)
            if abs(f) <= 1e-13:
                break
            if f > 0.0:
                hi = x
            else:
                lo = x
            if hi - lo < 1e-15:
                break

    _county_gap(x, e_eff, own_coef, h_own, margin, inner_tol, use_newton, s_out)
    return np.exp(x)


@njit(cache=True, nogil=True)
def _solve_side(e_eff, own_coef, h_own, offsets, margin, inner_tol, use_newton, s_out, s0_out):
    for ci in range(offsets.size - 1):
        a, b = offsets[ci], offsets[ci + 1]
        s0_out[ci] = _county_solve(
            e_eff[a:b], own_coef[a:b], h_own[ci], margin, inner_tol, use_newton, s_out[a:b]
        )


def solve_inner_share(e, s0, inner_tol=1e-12, method="bisect", margin=True,
                      own_coef=0.0, h_own=0.0) -> float:
    """Share solving ``s = s0*exp(e - 1/(1-s))`` (plus optional own term)."""
    if not 0.0 < s0 < 1.0:
        raise DomainError(f"outside share must lie in (0,1): {s0}")
    if not np.isfinite(e):
        raise DomainError(f"index must be finite: {e}")
    return float(_inner_solve(float(e), float(s0), margin, float(own_coef),
                              float(h_own), float(inner_tol), method == "newton"))


def solve_county(e_eff, inner_tol=1e-12, method="bisect", margin=True,
                 own_coef=None, h_own=0.0):
    """Solve one county-side given effective indices for in-network banks.

    Returns ``(shares, outside_share)``; shares come back in input order
    and satisfy the adding-up condition to 1e-10 or better.
    """
    e_eff = np.asarray(e_eff, dtype=float)
    if own_coef is None:
        own_coef = np.zeros_like(e_eff)
    else:
        own_coef = np.asarray(own_coef, dtype=float)
    s = np.empty_like(e_eff)
    s0 = _county_solve(e_eff, own_coef, float(h_own), margin,
                       float(inner_tol), method == "newton", s)
    return s, float(s0)


@dataclass
class YearSystem:
    """Flat per-year arrays feeding the solver.

    Cells are sorted by (county, bank); ``*_offsets`` give the CSR slices
    per county.  ``d_loan_ix`` maps each deposit cell to its loan cell
    (deposit networks are contained in loan networks); ``l_dep_ix`` is -1
    for loan cells without a deposit cell.
    """

    year: int
    banks: np.ndarray          # bank ids, ascending
    counties: np.ndarray       # county ids, ascending
    h_d: np.ndarray            # deposit market size per county
    h_l: np.ndarray            # loan market size per county

    d_bank: np.ndarray
    d_county: np.ndarray
    d_e: np.ndarray
    d_cross: np.ndarray
    d_totq: np.ndarray
    d_own: np.ndarray
    d_loan_ix: np.ndarray
    d_offsets: np.ndarray

    l_bank: np.ndarray
    l_county: np.ndarray
    l_e: np.ndarray
    l_cross: np.ndarray
    l_totq: np.ndarray
    l_dep_ix: np.ndarray
    l_offsets: np.ndarray

    q_init: np.ndarray         # initial total deposits per bank
    s_d_init: np.ndarray       # initial deposit shares per deposit cell
    margin: bool = True

    def n_banks(self):
        return len(self.banks)

    def with_margin(self, margin):
        return replace(self, margin=margin)


@dataclass
class EquilibriumState:
    """Solved shares and totals for one year."""

    system: YearSystem
    s_d: np.ndarray
    s_l: np.ndarray
    s0_d: np.ndarray
    s0_l: np.ndarray
    q_d: np.ndarray
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)
    q_history: list = field(default_factory=list)

    def deposits_by_cell(self):
        return self.system.h_d[self.system.d_county] * self.s_d

    def loans_by_cell(self):
        return self.system.h_l[self.system.l_county] * self.s_l

    def loans_by_bank(self):
        return np.bincount(self.system.l_bank, weights=self.loans_by_cell(),
                           minlength=self.system.n_banks())

    def net_borrowing(self):
        return self.loans_by_bank() - self.q_d

    def to_frame(self):
        import pandas as pd

        sys = self.system
        dep = pd.DataFrame({
            "year": sys.year,
            "bank_id": sys.banks[sys.d_bank],
            "county_id": sys.counties[sys.d_county],
            "s_d": self.s_d,
        })
        loan = pd.DataFrame({
            "year": sys.year,
            "bank_id": sys.banks[sys.l_bank],
            "county_id": sys.counties[sys.l_county],
            "s_l": self.s_l,
        })
        out = loan.merge(dep, on=["year", "bank_id", "county_id"], how="outer")
        out["s_d"] = out["s_d"].fillna(0.0)
        out["s_l"] = out["s_l"].fillna(0.0)
        qd = pd.DataFrame({"bank_id": sys.banks, "q_d": self.q_d})
        out = out.merge(qd, on="bank_id", how="left")
        return out.sort_values(["county_id", "bank_id"]).reset_index(drop=True)


def _effective_loan_index(system, s_d, ln_q):
    e = system.l_e.copy()
    has = system.l_dep_ix >= 0
    if has.any():
        cross = np.zeros(len(system.l_e))
        cross[has] = np.log1p(
            system.h_d[system.l_county[has]] * s_d[system.l_dep_ix[has]]
        )
        e += system.l_cross * cross
    e += system.l_totq * ln_q[system.l_bank]
    return e


def _effective_deposit_index(system, s_l, ln_q):
    cross = np.zeros(len(system.d_e))
    has = system.d_loan_ix >= 0
    if has.any():
        cross[has] = np.log1p(
            system.h_l[system.d_county[has]] * s_l[system.d_loan_ix[has]]
        )
    return system.d_e + system.d_cross * cross + system.d_totq * ln_q[system.d_bank]


def _safe_ln_q(system, q):
    ln_q = np.zeros_like(q)
    pos = q > 0
    ln_q[pos] = np.log(q[pos])
    needs_q = np.zeros(len(q), dtype=bool)
    np.logical_or.at(needs_q, system.d_bank, system.d_totq != 0)
    np.logical_or.at(needs_q, system.l_bank, system.l_totq != 0)
    bad = needs_q & ~pos
    if bad.any():
        raise DomainError(
            f"total deposits are zero for banks with a total-deposit term: {system.banks[bad].tolist()}"
        )
    return ln_q


def solve_year_system(system: YearSystem, config: SolverConfig | None = None) -> EquilibriumState:
    """Run the staged fixed point on a single year."""
    config = config or SolverConfig()
    use_newton = config.method == "newton"
    margin = system.margin

    s_d = system.s_d_init.astype(float).copy()
    s_l = np.zeros(len(system.l_e))
    s0_d = np.ones(len(system.counties))
    s0_l = np.ones(len(system.counties))
    q = system.q_init.astype(float).copy()

    u_d = np.log1p(system.h_d[system.d_county] * s_d)
    u_l = np.log1p(system.h_l[system.l_county] * s_l)
    zeros_l = np.zeros(len(system.l_e))

    max_rounds = 2 if config.update_mode == TWO_ROUNDS else config.max_outer_iters
    trace = []
    q_history = []
    converged = config.update_mode == TWO_ROUNDS
    it = 0
    for it in range(1, max_rounds + 1):
        ln_q = _safe_ln_q(system, q)

        e_l = _effective_loan_index(system, s_d, ln_q)
        _solve_side(e_l, zeros_l, system.h_l, system.l_offsets, margin,
                    config.inner_tol, use_newton, s_l, s0_l)

        e_d = _effective_deposit_index(system, s_l, ln_q)
        _solve_side(e_d, system.d_own, system.h_d, system.d_offsets, margin,
                    config.inner_tol, use_newton, s_d, s0_d)

        q_new = np.bincount(system.d_bank, weights=system.h_d[system.d_county] * s_d,
                            minlength=system.n_banks())

        u_d_new = np.log1p(system.h_d[system.d_county] * s_d)
        u_l_new = np.log1p(system.h_l[system.l_county] * s_l)
        with np.errstate(divide="ignore", invalid="ignore"):
            dq = np.abs(np.log(np.where(q_new > 0, q_new, 1.0))
                        - np.log(np.where(q > 0, q, 1.0)))
        delta = max(
            float(dq.max(initial=0.0)),
            float(np.abs(u_d_new - u_d).max(initial=0.0)),
            float(np.abs(u_l_new - u_l).max(initial=0.0)),
        )
        trace.append(delta)
        q_history.append(q_new.copy())
        q, u_d, u_l = q_new, u_d_new, u_l_new

        if config.update_mode == TO_CONVERGENCE and delta <= config.outer_tol:
            converged = True
            break

    state = EquilibriumState(system=system, s_d=s_d, s_l=s_l, s0_d=s0_d, s0_l=s0_l,
                             q_d=q, iterations=it, converged=converged,
                             trace=trace, q_history=q_history)
    if config.update_mode == TO_CONVERGENCE and not converged:
        raise ConvergenceError(
            f"year {system.year}: no convergence after {max_rounds} rounds "
            f"(last change {trace[-1]:.3e})",
            state=state,
            trace=trace,
        )
    return state


def solve_equilibrium(systems, config: SolverConfig | None = None, threads: int | None = None):
    """Solve one or many year systems; returns a dict keyed by year.

    Years are independent; with ``threads`` > 1 they are solved on a thread
    pool and merged in ascending year order, so results do not depend on
    the thread count.
    """
    if isinstance(systems, YearSystem):
        return solve_year_system(systems, config)
    systems = sorted(systems, key=lambda s: s.year)
    if threads and threads > 1 and len(systems) > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            states = list(pool.map(lambda s: solve_year_system(s, config), systems))
    else:
        states = [solve_year_system(s, config) for s in systems]
    return {st.system.year: st for st in states}


def system_residual(state: EquilibriumState, system: YearSystem | None = None) -> float:
    """Max violation of the share rows (absolute, share units) and the
    aggregation row (relative to totals)."""
    system = system or state.system
    ln_q = _safe_ln_q(system, state.q_d)

    res = 0.0
    if len(system.l_e):
        e_l = _effective_loan_index(system, state.s_d, ln_q)
        arg = e_l.copy()
        if system.margin:
            arg -= 1.0 / (1.0 - state.s_l)
        rhs = state.s0_l[system.l_county] * np.exp(arg)
        res = max(res, float(np.abs(state.s_l - rhs).max()))
        res = max(res, float(np.abs(
            state.s0_l + np.bincount(system.l_county, weights=state.s_l,
                                     minlength=len(system.counties)) - 1.0
        ).max()))
    if len(system.d_e):
        e_d = _effective_deposit_index(system, state.s_l, ln_q)
        arg = e_d + system.d_own * np.log1p(system.h_d[system.d_county] * state.s_d)
        if system.margin:
            arg -= 1.0 / (1.0 - state.s_d)
        rhs = state.s0_d[system.d_county] * np.exp(arg)
        res = max(res, float(np.abs(state.s_d - rhs).max()))
        res = max(res, float(np.abs(
            state.s0_d + np.bincount(system.d_county, weights=state.s_d,
                                     minlength=len(system.counties)) - 1.0
        ).max()))

    agg = np.bincount(system.d_bank, weights=system.h_d[system.d_county] * state.s_d,
                      minlength=system.n_banks())
    denom = np.maximum(1.0, np.abs(state.q_d))
    res = max(res, float((np.abs(state.q_d - agg) / denom).max(initial=0.0)))
    return res
