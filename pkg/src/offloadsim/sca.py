"""Outer successive convex approximation loop.

Each iteration freezes an anchor, builds the convex surrogate, solves it,
and moves by a diminishing convex combination. Because the surrogate
constraint set inner-bounds the true one and contains the anchor, every
iterate stays feasible for the original problem.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import model, subsolver, surrogate
from .model import Iterate, ModeSpec
from .scenario import ChannelSet, SystemConfig
from .util import traces, waterfill_channel


class InfeasibleStartError(RuntimeError):
    """No feasible starting point was found; the message names the failed
    sufficient condition."""


@dataclass
class SCASettings:
    gamma0: float = 1.0
    alpha: float = 1e-5
    delta: float = 1e-3          # Joules of objective change
    max_outer: int = 500
    prox: float = surrogate.DEFAULT_PROX
    max_inner: int = 1500
    tol_floor: float = 1e-6
    gamma_min: float = 1e-8

    def __post_init__(self):
        if not 0.0 < self.gamma0 <= 1.0:
            raise ValueError("gamma0 must lie in (0, 1]")
        if not 0.0 < self.alpha < 1.0 / self.gamma0:
            raise ValueError("alpha must lie in (0, 1/gamma0)")


@dataclass
class RunReport:
    status: str                  # delta-met | max-outer | step-underflow | infeasible-start
    iterations: int
    objective_trace: np.ndarray
    kkt_trace: np.ndarray
    feasibility_trace: np.ndarray
    iterate: Optional[Iterate]
    wall_time: float
    reason: Optional[str] = None
    last_subproblem_move: float = np.nan

    @property
    def converged(self) -> bool:
        return self.status == "delta-met"

    @property
    def objective(self) -> float:
        if self.objective_trace.size == 0:
            return float("inf")
        return float(self.objective_trace[-1])


def step_size(v: int, settings: Optional[SCASettings] = None) -> float:
    """Step size after v updates of the diminishing rule."""
    s = settings or SCASettings()
    g = s.gamma0
    for _ in range(v):
        g = g * (1.0 - s.alpha * g)
    return g


def subproblem_tolerance(v: int, floor: float = 1e-6) -> float:
    """Inner accuracy schedule; loose early, tightening quadratically."""
    return max(floor, 1e-2 / (v + 1) ** 2)


# ---------------------------------------------------------------------------
# initialization


_POWER_FRACTIONS = (0.99, 0.5, 0.25, 0.1)


def _strictly_interior(cfg, ch, mode, it) -> bool:
    """True when every barrier term is defined at the point: smooth rows
    negative and the point strictly inside the simple sets."""
    ctx = surrogate.build_context(cfg, ch, it, mode)
    sp = subsolver.Subproblem(ctx)
    st = sp._state(sp.anchor_z)
    g = sp.constraint_values(st)
    if not (np.all(np.isfinite(g)) and np.all(g < 0.0)):
        return False
    return bool(np.isfinite(sp.simple_log_sum(st[0])))


def _open_shares(it, mode, margin=1e-3):
    """Pull free share blocks strictly inside their simplexes."""
    s = 1.0 - margin
    if "f" not in mode.pinned:
        it.f = it.f * s
    if "c_ul" not in mode.pinned:
        it.c_ul = it.c_ul * s
    if "c_dl" not in mode.pinned:
        it.c_dl = it.c_dl * s
    if mode.hybrid and "f_cenb" not in mode.pinned and it.f_cenb is not None:
        it.f_cenb = it.f_cenb * s


def _coop_ridge(cfg, frac):
    return 0.002 * frac * float(cfg.p_dl.min()) / (cfg.n_cells * cfg.n_tx * cfg.n_users)


def _waterfill_iterate(cfg, ch, mode, frac):
    """Interference-free waterfilling covariances under the same budgets.

    Waterfilling returns boundary-trace, often rank-deficient matrices; a
    small white blend keeps them strictly inside the barrier domain.
    """
    it = model.white_iterate(cfg, mode, power_fraction=frac)
    hd = ch.h_direct(cfg.cell_index)
    eye = np.eye(cfg.n_tx)
    for j in range(cfg.n_users):
        q = waterfill_channel(hd[j], cfg.n0 * cfg.w_ul, frac * cfg.p_ul[j])
        it.q_ul[j] = 0.97 * q + 0.02 * frac * (cfg.p_ul[j] / cfg.n_tx) * eye
    gd = ch.g_direct(cfg.cell_index)
    q_small = np.zeros((cfg.n_users, cfg.n_tx, cfg.n_tx), dtype=complex)
    for j in range(cfg.n_users):
        n = cfg.cell_index[j]
        share = frac * cfg.p_dl[n] / max(len(cfg.users_of_cell(n)), 1)
        q = waterfill_channel(gd[j], cfg.n0 * cfg.w_dl, share)
        q_small[j] = 0.97 * q + 0.02 * (share / cfg.n_tx) * eye
    if mode.coop:
        it.q_dl = model.embed_cell_downlink(cfg, q_small)
        it.q_dl += _coop_ridge(cfg, frac) * np.eye(cfg.n_cells * cfg.n_tx)
    else:
        it.q_dl = q_small
    inactive = ~mode.active
    if np.any(inactive):
        it.q_ul[inactive] = 0.0
        it.q_dl[inactive] = 0.0
    return it


def _margined_deadline_vars(cfg, ch, mode, it):
    """Set the free deadline variables 1% above the current latencies."""
    lat = model.latency_components(cfg, ch, it, mode)
    act = mode.active
    if mode.name == "p2":
        worst = float(np.max(lat.total[act]))
        if not np.isfinite(worst):
            return False
        it.t = 1.01 * worst + 1e-9
    elif mode.name == "p8":
        w1 = float(np.max(lat.chain_to_cloud_out[act]))
        w2 = float(np.max(lat.radio_dl[act]))
        if not (np.isfinite(w1) and np.isfinite(w2)):
            return False
        it.t1 = 1.01 * w1 + 1e-9
        it.t2 = 1.01 * w2 + 1e-9
    return True


def _slack_vars_from_violation(cfg, ch, mode, it):
    """p5 slacks sized to absorb the current violations with a margin."""
    lat = model.latency_components(cfg, ch, it, mode)
    # the relative term keeps the margin positive when a deadline is zero
    it.x = (1.01 * np.maximum(lat.total - cfg.t_max, 0.0)
            + 0.01 * cfg.t_max + 1e-9)
    r_ul = model.uplink_rate(cfg, ch, it.q_ul)
    scaled = traces(it.q_ul) - (model.local_energy(cfg) / cfg.b_in) * r_ul
    it.y = np.maximum(scaled, 0.0) + 0.01 * np.maximum(cfg.p_ul, 1e-12)
    it.x = np.where(mode.active, it.x, 0.0)
    it.y = np.where(mode.active, it.y, 0.0)


def _fill_shares(cfg, ch, mode, it) -> Optional[str]:
    """Fill unpinned share blocks from the sufficient-condition split."""
    fc = model.check_feasibility(cfg, ch, it.q_ul, it.q_dl,
                                 active=mode.active, coop=mode.coop)
    if not fc.feasible:
        return fc.reason
    if "f" not in mode.pinned:
        it.f = fc.f
    if "c_ul" not in mode.pinned:
        it.c_ul = fc.c_ul
    if "c_dl" not in mode.pinned:
        it.c_dl = fc.c_dl
    return None


def initial_point(cfg: SystemConfig, ch: ChannelSet, mode: ModeSpec) -> Iterate:
    """Feasible starting iterate for the given mode.

    Hard-deadline modes scan white covariances over a few power levels and
    fall back to interference-free waterfilling; modes with free deadline or
    slack variables absorb any violation into those variables and cannot
    fail as long as the rates are positive.
    """
    last_reason = "condition a): radio latency exceeds a deadline"
    candidates: list[Iterate] = []
    for builder in (model.white_iterate, _waterfill_iterate):
        for frac in _POWER_FRACTIONS:
            if builder is model.white_iterate:
                it = _white_candidate(cfg, mode, frac)
            else:
                it = _waterfill_iterate(cfg, ch, mode, frac)
            ok, why = _finish_candidate(cfg, ch, mode, it)
            if ok:
                candidates.append(it)
            elif why is not None:
                last_reason = why
    if not candidates:
        raise InfeasibleStartError(last_reason)
    values = [model.true_objective(cfg, ch, c, mode) for c in candidates]
    return candidates[int(np.argmin(values))]


def _white_candidate(cfg, mode, frac):
    it = model.white_iterate(cfg, mode, power_fraction=frac)
    if mode.coop:
        # concentrate each user's power on its own cell's antennas
        small = np.zeros((cfg.n_users, cfg.n_tx, cfg.n_tx), dtype=complex)
        idx = np.arange(cfg.n_tx)
        for j in range(cfg.n_users):
            n = cfg.cell_index[j]
            k = max(len(cfg.users_of_cell(n)), 1)
            small[j, idx, idx] = frac * cfg.p_dl[n] / (k * cfg.n_tx)
        it.q_dl = model.embed_cell_downlink(cfg, small)
        it.q_dl += _coop_ridge(cfg, frac) * np.eye(cfg.n_cells * cfg.n_tx)
        it.q_dl[~mode.active] = 0.0
    return it


def _finish_candidate(cfg, ch, mode, it):
    """Fill the mode's auxiliary variables and verify strict interiority.

    Returns (ok, reason); reason is set only for a share-split failure
    worth reporting.
    """
    _open_shares(it, mode)
    if mode.name in ("p2", "p8"):
        if not _margined_deadline_vars(cfg, ch, mode, it):
            return False, None
        return _strictly_interior(cfg, ch, mode, it), None
    if mode.name == "p5":
        _slack_vars_from_violation(cfg, ch, mode, it)
        return _strictly_interior(cfg, ch, mode, it), None

    # hard deadlines: p1 and the hybrid split
    reason = _fill_shares(cfg, ch, mode, it)
    if reason is not None and not mode.pinned:
        return False, reason
    _open_shares(it, mode)
    if mode.hybrid:
        if "u_split" in mode.pinned:
            if _strictly_interior(cfg, ch, mode, it):
                return True, None
        else:
            for u0 in (0.5, 0.02, 0.98):
                it.u_split = np.where(mode.active, u0, 0.0)
                if _strictly_interior(cfg, ch, mode, it):
                    return True, None
        return False, "condition a): no pure or mixed split meets the deadlines"
    if _strictly_interior(cfg, ch, mode, it):
        return True, None
    return False, reason


def _budget_uplink(cfg, ch, it, margin=4.0, budget_share=0.4):
    """Uplink covariances sized for the rate the deadline chain needs.

    Inverts the interference-free rate for a fixed share of the deadline,
    then scales by a margin against the interference actually present.
    """
    hd = ch.h_direct(cfg.cell_index)
    gain = np.einsum("uij,uij->u", hd.conj(), hd).real / cfg.n_tx
    eye = np.eye(cfg.n_tx)
    for j in range(cfg.n_users):
        room = budget_share * cfg.t_max[j]
        if not np.isfinite(room) or room <= 0.0:
            continue
        r_need = cfg.b_in[j] / (cfg.w_ul * room)
        snr = 2.0 ** r_need - 1.0
        p = margin * snr * cfg.n0 * cfg.w_ul / max(gain[j], 1e-300)
        it.q_ul[j] = (min(p, 0.9 * cfg.p_ul[j]) / cfg.n_tx) * eye


def start_candidates(cfg: SystemConfig, ch: ChannelSet, mode: ModeSpec,
                     max_dominant: int = 4) -> list:
    """Diverse feasible starting iterates for multi-start runs.

    The true objective has several first-order points on interference-
    coupled instances; which one the outer loop reaches depends on the
    start. Beyond the default lowest-objective candidate this returns
    downlink power patterns (all high, all low, one user dominant) with
    deadline-driven uplink powers.
    """
    out = []
    try:
        out.append(initial_point(cfg, ch, mode))
    except InfeasibleStartError:
        pass
    act_users = np.flatnonzero(mode.active)
    patterns = [np.full(cfg.n_users, 0.9), np.full(cfg.n_users, 0.25)]
    if act_users.size <= max_dominant:
        for j in act_users:
            phi = np.full(cfg.n_users, 0.1)
            phi[j] = 0.95
            patterns.append(phi)
    idx = np.arange(cfg.n_tx)
    for phi in patterns:
        it = _white_candidate(cfg, mode, 0.5)
        _budget_uplink(cfg, ch, it)
        if mode.coop:
            small = np.zeros((cfg.n_users, cfg.n_tx, cfg.n_tx), dtype=complex)
            for j in range(cfg.n_users):
                n = cfg.cell_index[j]
                k = max(len(cfg.users_of_cell(n)), 1)
                small[j, idx, idx] = phi[j] * cfg.p_dl[n] / (k * cfg.n_tx)
            it.q_dl = model.embed_cell_downlink(cfg, small)
            it.q_dl += _coop_ridge(cfg, float(phi.mean())) * np.eye(cfg.n_cells * cfg.n_tx)
        else:
            per = np.array([len(cfg.users_of_cell(cfg.cell_index[j]))
                            for j in range(cfg.n_users)])
            for j in range(cfg.n_users):
                n = cfg.cell_index[j]
                it.q_dl[j] = (phi[j] * cfg.p_dl[n] / (max(per[j], 1) * cfg.n_tx)) * np.eye(cfg.n_tx)
        it.q_ul[~mode.active] = 0.0
        it.q_dl[~mode.active] = 0.0
        ok, _ = _finish_candidate(cfg, ch, mode, it)
        if ok:
            out.append(it)
    return out


def run_best(cfg: SystemConfig, ch: ChannelSet, mode: ModeSpec,
             settings: Optional[SCASettings] = None,
             explore: Optional[SCASettings] = None) -> RunReport:
    """Multi-start outer loop: explore every candidate cheaply, polish the
    winner to the requested accuracy. Intended for small instances where
    basin quality matters; large scenarios run a single start."""
    polish = settings or SCASettings(delta=1e-5, max_outer=300)
    explore = explore or SCASettings(delta=5e-4, max_outer=80, tol_floor=1e-5)
    finished: list[RunReport] = []
    for it in start_candidates(cfg, ch, mode):
        rep = run(cfg, ch, mode, settings=explore, initial=it)
        if rep.iterate is not None:
            finished.append(rep)
    if not finished:
        try:
            initial_point(cfg, ch, mode)
            reason = "no candidate start completed"
        except InfeasibleStartError as err:
            reason = str(err)
        return RunReport(status="infeasible-start", iterations=0,
                         objective_trace=np.empty(0), kkt_trace=np.empty(0),
                         feasibility_trace=np.empty(0), iterate=None,
                         wall_time=0.0, reason=reason)
    # two nearby exploration values can order differently once polished
    finished.sort(key=lambda r: r.objective)
    best: Optional[RunReport] = None
    for rep in finished[:3]:
        out = run(cfg, ch, mode, settings=polish, initial=rep.iterate)
        if out.iterate is not None and (best is None
                                        or out.objective < best.objective):
            best = out
    return best if best is not None else finished[0]


# ---------------------------------------------------------------------------
# outer loop


def run(cfg: SystemConfig, ch: ChannelSet, mode: ModeSpec,
        settings: Optional[SCASettings] = None,
        initial: Optional[Iterate] = None) -> RunReport:
    """Run the outer loop until the true objective stops moving."""
    s = settings or SCASettings()
    t0 = time.perf_counter()
    if initial is None:
        try:
            initial = initial_point(cfg, ch, mode)
        except InfeasibleStartError as err:
            return RunReport(status="infeasible-start", iterations=0,
                             objective_trace=np.empty(0), kkt_trace=np.empty(0),
                             feasibility_trace=np.empty(0), iterate=None,
                             wall_time=time.perf_counter() - t0, reason=str(err))
    z = initial
    obj = [model.true_objective(cfg, ch, z, mode)]
    kkts = []
    feas = [model.max_residual(model.constraint_residuals(cfg, ch, z, mode))]
    gamma = s.gamma0
    status = "max-outer"
    move = np.nan
    mu_hint = None
    fallbacks = 0
    for v in range(s.max_outer):
        ctx = surrogate.build_context(cfg, ch, z, mode, gamma=s.prox)
        try:
            sol = subsolver.solve(ctx, tol=subproblem_tolerance(v, s.tol_floor),
                                  max_inner=s.max_inner, mu0=mu_hint)
        except subsolver.SubsolverError as err:
            raise subsolver.SubsolverError(
                f"outer iteration {v}: {err}") from err
        # the blended anchor stays near the central path of the last solve
        if np.isfinite(sol.barrier_mu) and sol.barrier_mu > 0.0:
            mu_hint = 25.0 * sol.barrier_mu
        move = sol.anchor_distance
        z = z.blend(sol.iterate, gamma)
        obj.append(model.true_objective(cfg, ch, z, mode))
        kkts.append(sol.kkt_residual)
        feas.append(model.max_residual(model.constraint_residuals(cfg, ch, z, mode)))
        gamma = gamma * (1.0 - s.alpha * gamma)
        # a fallback iteration moved nothing; its zero delta is not evidence
        # of convergence unless it repeats
        fallbacks = fallbacks + 1 if sol.status == "anchor-fallback" else 0
        if abs(obj[-1] - obj[-2]) <= s.delta and fallbacks != 1:
            status = "delta-met"
            break
        if gamma < s.gamma_min:
            status = "step-underflow"
            break
    return RunReport(status=status, iterations=len(obj) - 1,
                     objective_trace=np.asarray(obj),
                     kkt_trace=np.asarray(kkts),
                     feasibility_trace=np.asarray(feas), iterate=z,
                     wall_time=time.perf_counter() - t0,
                     last_subproblem_move=move)
