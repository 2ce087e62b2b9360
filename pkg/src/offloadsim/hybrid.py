"""Cloudlet/cloud split offloading.

Each user's task is divided by a fraction u: the u part travels over the
backhaul to the central cloud, the rest runs on the serving node's local
CPU pool. Only uplink transmit energy is minimized; the split enters
through the deadline chain.
"""

from __future__ import annotations

import time
from typing import Optional

import numpy as np

from . import model, sca
from .scenario import ChannelSet, SystemConfig

_NUDGES = (1e-3, 1e-2, 5e-2)


def _pinned_mode(cfg: SystemConfig):
    return model.mode_p7(cfg, pinned=("u_split",))


def _pinned_start(cfg, ch, mode, u_value):
    """Feasible start with every active split held at u_value."""
    last = "condition a): radio latency exceeds a deadline"
    for builder in (0, 1):
        for frac in sca._POWER_FRACTIONS:
            if builder == 0:
                it = sca._white_candidate(cfg, mode, frac)
            else:
                it = sca._waterfill_iterate(cfg, ch, mode, frac)
            it.u_split = np.where(mode.active, float(u_value), 0.0)
            ok, why = sca._finish_candidate(cfg, ch, mode, it)
            if ok:
                return it
            if why is not None:
                last = why
    raise sca.InfeasibleStartError(last)


def _interior_from_arm(cfg, ch, mode, arm_it, u_value):
    """Pull a pinned-arm solution strictly inside the free split box.

    The split does not appear in the objective, so the nudge keeps the
    arm's energy; it only has to clear the deadline rows again.
    """
    for nudge in _NUDGES:
        it = arm_it.copy()
        u = np.clip(float(u_value), nudge, 1.0 - nudge)
        it.u_split = np.where(mode.active, u, 0.0)
        if sca._strictly_interior(cfg, ch, mode, it):
            return it
    return None


def run_hybrid(cfg: SystemConfig, ch: ChannelSet,
               settings: Optional[sca.SCASettings] = None,
               pin_u: Optional[float] = None) -> sca.RunReport:
    """Minimize uplink energy over powers, shares and the task split.

    With pin_u set, every active user's split is frozen at that value and
    the remaining variables are optimized (u=1 is the pure-cloud arm, u=0
    the pure-cloudlet arm). The free run seeds itself from both arms on
    top of the default start; descent along the outer loop then keeps the
    result no worse than either arm.
    """
    if pin_u is not None:
        mode = _pinned_mode(cfg)
        t0 = __import__("time").perf_counter()
        try:
            it0 = _pinned_start(cfg, ch, mode, pin_u)
        except sca.InfeasibleStartError as err:
            return sca.RunReport(status="infeasible-start", iterations=0,
                                 objective_trace=np.empty(0),
                                 kkt_trace=np.empty(0),
                                 feasibility_trace=np.empty(0), iterate=None,
                                 wall_time=__import__("time").perf_counter() - t0,
                                 reason=str(err))
        return sca.run(cfg, ch, mode, settings=settings, initial=it0)

    mode = model.mode_p7(cfg)
    s = settings or sca.SCASettings(delta=1e-5, max_outer=300)
    arm_settings = sca.SCASettings(delta=max(s.delta, 1e-4), max_outer=150,
                                   tol_floor=s.tol_floor)
    candidates = []
    for u_arm in (1.0, 0.0):
        rep = run_hybrid(cfg, ch, settings=arm_settings, pin_u=u_arm)
        if rep.iterate is not None:
            it = _interior_from_arm(cfg, ch, mode, rep.iterate, u_arm)
            if it is not None:
                candidates.append(it)
    try:
        candidates.append(sca.initial_point(cfg, ch, mode))
    except sca.InfeasibleStartError as err:
        if not candidates:
            return sca.RunReport(status="infeasible-start", iterations=0,
                                 objective_trace=np.empty(0),
                                 kkt_trace=np.empty(0),
                                 feasibility_trace=np.empty(0), iterate=None,
                                 wall_time=0.0, reason=str(err))
    explore = sca.SCASettings(delta=max(s.delta, 1e-4), max_outer=60,
                              tol_floor=max(s.tol_floor, 1e-5))
    probes = [sca.run(cfg, ch, mode, settings=explore, initial=c)
              for c in candidates]
    probes = [p for p in probes if p.iterate is not None]
    if not probes:
        return sca.run(cfg, ch, mode, settings=s, initial=candidates[0])
    probes.sort(key=lambda r: r.objective)
    return sca.run(cfg, ch, mode, settings=s, initial=probes[0].iterate)


def split_fractions(report: sca.RunReport) -> np.ndarray:
    """Per-user split values of a finished run, clamped onto [0, 1]."""
    if report.iterate is None or report.iterate.u_split is None:
        raise ValueError("report carries no split variables")
    u = np.asarray(report.iterate.u_split, dtype=float)
    if np.any(u < -1e-9) or np.any(u > 1.0 + 1e-9):
        raise ValueError("split values leave [0, 1] beyond tolerance")
    return np.clip(u, 0.0, 1.0)
