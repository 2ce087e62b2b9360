"""User admission: smoothed slack minimization plus sorting and bisection.

The admission step answers "which users can offload at all" by minimizing
an lp-smoothed count of constraint violations, ranking users by their
share of the residual slack, and bisecting over prefixes of that ranking.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import model, sca, subsolver, surrogate
from .scenario import ChannelSet, SystemConfig
from .util import traces


def _subset_ids(cfg: SystemConfig, subset) -> np.ndarray:
    ids = np.asarray(subset, dtype=int).ravel()
    if ids.size == 0:
        raise ValueError("subset must be nonempty")
    if ids.size != np.unique(ids).size:
        raise ValueError("subset contains duplicate user ids")
    if np.any(ids < 0) or np.any(ids >= cfg.n_users):
        raise ValueError("subset contains out-of-range user ids")
    return ids


def _snap_slacks(cfg, ch, mode, it):
    """Reset x and y to the smallest values consistent with the other
    variables. The objective is increasing in both, so this is a descent
    step; the barrier leaves them inflated by roughly sqrt(mu)."""
    lat = model.latency_components(cfg, ch, it, mode)
    x = np.maximum(lat.total - cfg.t_max, 0.0)
    r_ul = model.uplink_rate(cfg, ch, it.q_ul)
    scaled = traces(it.q_ul) - (model.local_energy(cfg) / cfg.b_in) * r_ul
    y = np.maximum(scaled, 0.0)
    it.x = np.where(mode.active, x, 0.0)
    it.y = np.where(mode.active, y, 0.0)


def solve_p5(cfg: SystemConfig, ch: ChannelSet, subset,
             settings: Optional[sca.SCASettings] = None):
    """Minimize the smoothed violation count over the given users.

    Unit outer steps are taken: the majorizer is tight at the anchor, so
    each subproblem solution already descends the true objective. Weights
    are refreshed from the current slacks every iteration, starting from
    ones. Returns (iterate, report); the final slacks are snapped down to
    the actual violations.
    """
    ids = _subset_ids(cfg, subset)
    mode = model.mode_p5(cfg, active=ids)
    s = settings or sca.SCASettings(delta=1e-6, max_outer=150)
    t0 = time.perf_counter()
    try:
        z = sca.initial_point(cfg, ch, mode)
    except sca.InfeasibleStartError as err:
        rep = sca.RunReport(status="infeasible-start", iterations=0,
                            objective_trace=np.empty(0),
                            kkt_trace=np.empty(0),
                            feasibility_trace=np.empty(0), iterate=None,
                            wall_time=time.perf_counter() - t0,
                            reason=str(err))
        return None, rep
    omega = None
    obj = [model.true_objective(cfg, ch, z, mode)]
    kkts = []
    feas = [model.max_residual(model.constraint_residuals(cfg, ch, z, mode))]
    status = "max-outer"
    move = np.nan
    mu_hint = None
    fallbacks = 0
    for v in range(s.max_outer):
        ctx = surrogate.build_context(cfg, ch, z, mode, gamma=s.prox,
                                      omega=omega)
        try:
            sol = subsolver.solve(ctx,
                                  tol=sca.subproblem_tolerance(v, s.tol_floor),
                                  max_inner=s.max_inner, mu0=mu_hint)
        except subsolver.SubsolverError as err:
            raise subsolver.SubsolverError(
                f"admission iteration {v}: {err}") from err
        if np.isfinite(sol.barrier_mu) and sol.barrier_mu > 0.0:
            mu_hint = 25.0 * sol.barrier_mu
        move = sol.anchor_distance
        z = sol.iterate
        omega = surrogate.lp_weights(z.x, z.y, mode.lp_p, mode.lp_eps)
        obj.append(model.true_objective(cfg, ch, z, mode))
        kkts.append(sol.kkt_residual)
        feas.append(model.max_residual(
            model.constraint_residuals(cfg, ch, z, mode)))
        fallbacks = fallbacks + 1 if sol.status == "anchor-fallback" else 0
        if abs(obj[-1] - obj[-2]) <= s.delta and fallbacks != 1:
            status = "delta-met"
            break
    _snap_slacks(cfg, ch, mode, z)
    obj.append(model.true_objective(cfg, ch, z, mode))
    rep = sca.RunReport(status=status, iterations=max(len(obj) - 2, 0),
                        objective_trace=np.asarray(obj),
                        kkt_trace=np.asarray(kkts),
                        feasibility_trace=np.asarray(feas), iterate=z,
                        wall_time=time.perf_counter() - t0,
                        last_subproblem_move=move)
    return z, rep


def compute_w(x, y, subset) -> np.ndarray:
    """Relative violation shares over the subset, one entry per user id.

    Each slack block is normalized by its subset sum; a block summing to
    zero contributes nothing (all its users tie at zero violation).
    """
    ids = np.asarray(subset, dtype=int).ravel()
    xs = np.asarray(x, dtype=float)[ids]
    ys = np.asarray(y, dtype=float)[ids]
    w = np.zeros(ids.size)
    if xs.sum() > 0.0:
        w += xs / xs.sum()
    if ys.sum() > 0.0:
        w += ys / ys.sum()
    return w


def feasibility_test(cfg: SystemConfig, ch: ChannelSet, subset,
                     eta: float = 1e-5,
                     settings: Optional[sca.SCASettings] = None) -> bool:
    """True when every user in the subset can offload within budget: the
    minimized slacks all stay below eta."""
    ids = np.asarray(subset, dtype=int).ravel()
    if ids.size == 0:
        return True
    it, rep = solve_p5(cfg, ch, ids, settings=settings)
    if it is None:
        return False
    worst = max(float(np.max(it.x[ids])), float(np.max(it.y[ids])))
    return worst < eta


@dataclass
class ScheduleResult:
    selected_count: int
    selected_set: tuple
    permutation: np.ndarray
    w: np.ndarray
    probe_feasible: dict
    probe_reports: list = field(repr=False, default_factory=list)


def schedule(cfg: SystemConfig, ch: ChannelSet,
             settings: Optional[sca.SCASettings] = None,
             eta: float = 1e-5) -> ScheduleResult:
    """Admit the largest prefix of the violation-ranked user list.

    The full set is ranked once by w; candidate sets only shrink by
    dropping the worst offenders, so feasibility is monotone along
    prefixes and bisection applies. The full set is tested first to keep
    all-feasible instances at s* = K*N_c; an empty selection is a valid
    outcome. Ties in w keep user-id order.
    """
    all_ids = np.arange(cfg.n_users)
    it, rep0 = solve_p5(cfg, ch, all_ids, settings=settings)
    reports = [(cfg.n_users, rep0)]
    flags = {}
    if it is None:
        return ScheduleResult(0, (), all_ids, np.zeros(cfg.n_users),
                              {cfg.n_users: False}, reports)
    w = compute_w(it.x, it.y, all_ids)
    perm = np.argsort(w, kind="stable")
    worst = max(float(np.max(it.x)), float(np.max(it.y)))
    flags[cfg.n_users] = worst < eta
    if flags[cfg.n_users]:
        return ScheduleResult(cfg.n_users, tuple(map(int, perm)), perm, w,
                              flags, reports)
    k_low, k_up = 0, cfg.n_users
    while k_up - k_low > 1:
        mid = (k_low + k_up) // 2
        sub = perm[:mid]
        it_m, rep_m = solve_p5(cfg, ch, sub, settings=settings)
        reports.append((mid, rep_m))
        ok = (it_m is not None
              and max(float(np.max(it_m.x[sub])),
                      float(np.max(it_m.y[sub]))) < eta)
        flags[mid] = ok
        if ok:
            k_low = mid
        else:
            k_up = mid
    return ScheduleResult(k_low, tuple(map(int, perm[:k_low])), perm, w,
                          flags, reports)
