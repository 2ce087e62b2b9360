"""Convex models built around an anchor point for the SCA subproblems.

Rates are handled by linearizing the interference part of the log-det
difference, which yields concave lower bounds that are tight at the anchor.
The uplink energy gets the two-term reciprocal-rate split with exact
conjugate cross-gradients.  Ratio terms x/y are replaced by a convex
quadratic bound, and the slack-counting objective by a reweighted quadratic
majorizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import model
from .model import Iterate, ModeSpec
from .scenario import ChannelSet, SystemConfig
from .util import hermitize, inv_h, logdet_h, sandwich

LN2 = float(np.log(2.0))

# Uniform default for the proximal weights. Small on purpose: the term only
# certifies strong convexity, it should not bias the subproblem solution.
DEFAULT_PROX = 1e-6


class RateAnchor:
    """Concave model of a family of log-det rates with frozen-anchor interference.

    Covers uplink, per-cell downlink and stacked cooperative downlink rates
    through one layout: receiver i sees its own covariance through own_ch[i]
    and interferer m through intf_ch[i, m], where intf_idx[i, m] names the
    user owning that covariance.
    """

    def __init__(self, own_ch: np.ndarray, intf_ch: np.ndarray,
                 intf_idx: np.ndarray, q_anchor: np.ndarray, sigma2: float):
        self.own_ch = own_ch
        self.intf_ch = intf_ch
        self.intf_idx = intf_idx
        self.sigma2 = float(sigma2)
        u, m = intf_idx.shape
        nr = own_ch.shape[1]
        eye = np.eye(nr, dtype=complex)

        r_v = sigma2 * eye + self._intf_cov(q_anchor)
        s_v = r_v + sandwich(own_ch, q_anchor)
        self.r_inv = inv_h(r_v)
        self.s_inv = inv_h(s_v)
        ld_r = logdet_h(r_v)
        ld_s = logdet_h(s_v)
        self.anchor_rates = (ld_s - ld_r) / LN2

        # Gradient of the interference log-det with respect to each
        # interfering covariance, taken at the anchor.
        self.lin = np.einsum("umij,uik,umkl->umjl", intf_ch.conj(),
                             self.r_inv, intf_ch) / LN2
        lin_at_anchor = np.einsum("umij,umji->u", self.lin,
                                  q_anchor[intf_idx]).real
        self.const = ld_r / LN2 - lin_at_anchor

    def _intf_cov(self, q: np.ndarray) -> np.ndarray:
        qi = q[self.intf_idx]
        return hermitize(np.einsum("umij,umjk,umlk->uil", self.intf_ch, qi,
                                   self.intf_ch.conj()))

    def _total_cov(self, q: np.ndarray) -> np.ndarray:
        nr = self.own_ch.shape[1]
        eye = np.eye(nr, dtype=complex)
        return self.sigma2 * eye + self._intf_cov(q) + sandwich(self.own_ch, q)

    def values(self, q: np.ndarray) -> np.ndarray:
        """Surrogate rates at covariances q, bits/symbol; may go negative far
        from the anchor, callers must treat nonpositive values as infeasible."""
        r_plus = logdet_h(self._total_cov(q)) / LN2
        lin = np.einsum("umij,umji->u", self.lin, q[self.intf_idx]).real
        return r_plus - self.const - lin

    def true_rates(self, q: np.ndarray) -> np.ndarray:
        nr = self.own_ch.shape[1]
        eye = np.eye(nr, dtype=complex)
        r_minus = self.sigma2 * eye + self._intf_cov(q)
        return np.maximum(logdet_h(r_minus + sandwich(self.own_ch, q))
                          - logdet_h(r_minus), 0.0) / LN2

    def weighted_gradient(self, q: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Conjugate gradient of sum_i w[i] * surrogate_rate_i at q."""
        p = inv_h(self._total_cov(q))
        own = np.einsum("uij,uik,ukl->ujl", self.own_ch.conj(), p,
                        self.own_ch) / LN2
        out = own * w[:, None, None]
        cross = np.einsum("umij,uik,umkl->umjl", self.intf_ch.conj(), p,
                          self.intf_ch) / LN2
        cross = (cross - self.lin) * w[:, None, None, None]
        grad = np.zeros_like(q)
        np.add.at(grad, self.intf_idx, cross)
        idx = np.arange(q.shape[0])
        np.add.at(grad, idx, out)
        return hermitize(grad)


def uplink_rate_anchor(cfg: SystemConfig, ch: ChannelSet,
                       q_ul: np.ndarray) -> RateAnchor:
    intf = cfg.interferers
    own = ch.h_direct(cfg.cell_index)
    rows = np.arange(cfg.n_users)[:, None]
    intf_ch = ch.h[intf, cfg.cell_index[rows]]
    return RateAnchor(own, intf_ch, intf, q_ul, cfg.n0 * cfg.w_ul)


def downlink_rate_anchor(cfg: SystemConfig, ch: ChannelSet,
                         q_dl: np.ndarray) -> RateAnchor:
    intf = cfg.interferers
    own = ch.g_direct(cfg.cell_index)
    intf_ch = ch.g[np.arange(cfg.n_users)[:, None], cfg.cell_index[intf]]
    return RateAnchor(own, intf_ch, intf, q_dl, cfg.n0 * cfg.w_dl)


def coop_rate_anchor(cfg: SystemConfig, ch: ChannelSet,
                     q_stacked: np.ndarray) -> RateAnchor:
    # Every other user interferes, all through the receiver's stacked channel.
    u = cfg.n_users
    idx = np.arange(u)
    intf = np.stack([np.delete(idx, i) for i in range(u)])
    gs = ch.g_stacked
    intf_ch = np.broadcast_to(gs[:, None], (u, u - 1) + gs.shape[1:])
    return RateAnchor(gs, intf_ch, intf, q_stacked, cfg.sigma_w2)


class UplinkEnergyModel:
    """Convex model of the summed uplink transmit energy around an anchor.

    Each user's term keeps its own covariance inside a frozen-interference
    rate while the coupling to the other covariances enters linearly through
    the exact cross-gradients of the true energy.
    """

    def __init__(self, cfg: SystemConfig, ch: ChannelSet, q_anchor: np.ndarray,
                 active: Optional[np.ndarray] = None):
        self.cfg = cfg
        if active is None:
            active = np.ones(cfg.n_users, dtype=bool)
        self.active = active
        self.q_anchor = q_anchor
        self.own_ch = ch.h_direct(cfg.cell_index)

        r_v = model.uplink_interference_cov(cfg, ch, q_anchor)
        s_v = r_v + sandwich(self.own_ch, q_anchor)
        self.r_v = r_v
        self.r_inv = inv_h(r_v)
        s_inv = inv_h(s_v)
        self.ld_r = logdet_h(r_v)
        self.rate_anchor = (logdet_h(s_v) - self.ld_r) / LN2
        self.tr_anchor = np.trace(q_anchor, axis1=-2, axis2=-1).real

        intf = cfg.interferers
        rows = np.arange(cfg.n_users)[:, None]
        hc = ch.h[intf, cfg.cell_index[rows]]
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = cfg.b_in * self.tr_anchor / (self.rate_anchor ** 2 * LN2)
        coef = np.where(self.tr_anchor > 0, coef, 0.0)
        coef = np.where(active, coef, 0.0)
        diff = self.r_inv - s_inv
        self.cross = hermitize(np.einsum("u,umij,uik,umkl->umjl", coef,
                                         hc.conj(), diff, hc))
        self.cross_idx = intf
        agg = np.zeros_like(q_anchor)
        np.add.at(agg, intf, self.cross)
        self.agg = hermitize(agg)

    def _own_rate(self, q: np.ndarray) -> np.ndarray:
        s = self.r_v + sandwich(self.own_ch, q)
        return (logdet_h(s) - self.ld_r) / LN2

    def per_user_values(self, q: np.ndarray) -> np.ndarray:
        """Per-user surrogate energies in joules; inactive entries are zero."""
        cfg = self.cfg
        r_hat = self._own_rate(q)
        tr = np.trace(q, axis1=-2, axis2=-1).real
        own = model._ratio(self.tr_anchor * cfg.b_in, r_hat)
        own = own + model._ratio(tr * cfg.b_in, self.rate_anchor)
        dq = q - self.q_anchor
        lin = np.einsum("umij,umji->u", self.cross, dq[self.cross_idx]).real
        return np.where(self.active, own + lin, 0.0)

    def value(self, q: np.ndarray) -> float:
        return float(np.sum(self.per_user_values(q)))

    def gradient(self, q: np.ndarray) -> np.ndarray:
        """Conjugate gradient of value() at q, zero on inactive blocks."""
        cfg = self.cfg
        nt = q.shape[-1]
        r_hat = self._own_rate(q)
        p = inv_h(self.r_v + sandwich(self.own_ch, q))
        chan = np.einsum("uij,uik,ukl->ujl", self.own_ch.conj(), p,
                         self.own_ch) / LN2
        with np.errstate(divide="ignore", invalid="ignore"):
            w_own = -cfg.b_in * self.tr_anchor / r_hat ** 2
            w_tr = cfg.b_in / self.rate_anchor
        w_own = np.where(self.tr_anchor > 0, w_own, 0.0)
        grad = chan * w_own[:, None, None]
        grad += np.nan_to_num(w_tr)[:, None, None] * np.eye(nt)
        grad += self.agg
        return hermitize(np.where(self.active[:, None, None], grad, 0.0))

    def cross_gradient(self, var_user: int, energy_user: int) -> np.ndarray:
        """Exact gradient of user energy_user's energy with respect to the
        covariance of var_user, at the anchor."""
        nt = self.q_anchor.shape[-1]
        pos = np.nonzero(self.cross_idx[energy_user] == var_user)[0]
        if pos.size == 0:
            return np.zeros((nt, nt), dtype=complex)
        return self.cross[energy_user, pos[0]].copy()


@dataclass
class SurrogateContext:
    """Everything the subproblem needs that is fixed at one anchor."""

    cfg: SystemConfig
    ch: ChannelSet
    mode: ModeSpec
    anchor: Iterate
    gamma: dict
    rate_ul: RateAnchor
    rate_dl: Optional[RateAnchor]
    rate_coop: Optional[RateAnchor]
    energy: Optional[UplinkEnergyModel]
    p: float = 0.5
    eps: float = 1e-3
    omega_x: Optional[np.ndarray] = None
    omega_y: Optional[np.ndarray] = None


def build_context(cfg: SystemConfig, ch: ChannelSet, anchor: Iterate,
                  mode: ModeSpec, gamma: float = DEFAULT_PROX,
                  omega: Optional[tuple] = None) -> SurrogateContext:
    blocks = mode.blocks()
    gam = {name: float(gamma) for name in blocks}
    rate_ul = uplink_rate_anchor(cfg, ch, anchor.q_ul)
    rate_dl = None
    rate_coop = None
    if mode.coop:
        rate_coop = coop_rate_anchor(cfg, ch, anchor.q_dl)
    else:
        rate_dl = downlink_rate_anchor(cfg, ch, anchor.q_dl)
    energy = None
    if mode.objective != "lp_slack":
        energy = UplinkEnergyModel(cfg, ch, anchor.q_ul, mode.active)
    ctx = SurrogateContext(cfg=cfg, ch=ch, mode=mode, anchor=anchor, gamma=gam,
                           rate_ul=rate_ul, rate_dl=rate_dl,
                           rate_coop=rate_coop, energy=energy,
                           p=mode.lp_p, eps=mode.lp_eps)
    if mode.objective == "lp_slack":
        n = cfg.n_users
        if omega is None:
            ctx.omega_x = np.ones(n)
            ctx.omega_y = np.ones(n)
        else:
            ctx.omega_x, ctx.omega_y = omega
    return ctx


def rate_surrogate(ctx: SurrogateContext, it: Iterate,
                   direction: str = "ul") -> np.ndarray:
    if direction == "ul":
        return ctx.rate_ul.values(it.q_ul)
    if ctx.rate_coop is not None:
        return ctx.rate_coop.values(it.q_dl)
    return ctx.rate_dl.values(it.q_dl)


def uplink_energy_surrogate(ctx: SurrogateContext, it: Iterate) -> np.ndarray:
    """Per-user uplink energy surrogate; the sum over users is the convex
    objective piece, single terms are not individually gradient-consistent."""
    return ctx.energy.per_user_values(it.q_ul)


def uplink_energy_cross_gradient(ctx: SurrogateContext, var_user: int,
                                 energy_user: int) -> np.ndarray:
    return ctx.energy.cross_gradient(var_user, energy_user)


def latency_surrogate(ctx: SurrogateContext, it: Iterate) -> np.ndarray:
    """Upper bound on the two radio legs of the latency chain, seconds.

    The backhaul and execution terms are convex as written and enter the
    subproblem unchanged, so they are not part of this bound.
    """
    cfg = ctx.cfg
    r_ul = rate_surrogate(ctx, it, "ul")
    r_dl = rate_surrogate(ctx, it, "dl")
    t_ul = model._ratio(cfg.b_in / cfg.w_ul, r_ul)
    t_dl = model._ratio(cfg.b_out / cfg.w_dl, r_dl)
    return t_ul + t_dl


def energy_constraint_surrogate(ctx: SurrogateContext,
                                it: Iterate) -> np.ndarray:
    """Convex upper bound on tr(Q) - (E_local/bits) * uplink rate, joules."""
    cfg = ctx.cfg
    tr = np.trace(it.q_ul, axis1=-2, axis2=-1).real
    e_m = cfg.local_cpu_energy()
    return tr - (e_m / cfg.b_in) * rate_surrogate(ctx, it, "ul")


def lp_objective(x: np.ndarray, y: np.ndarray, p: float = 0.5,
                 eps: float = 1e-3) -> float:
    fx = np.sum((x ** 2 + eps ** 2) ** (p / 2.0))
    fy = np.sum((y ** 2 + eps ** 2) ** (p / 2.0))
    return float(fx + fy)


def lp_weights(x: np.ndarray, y: np.ndarray, p: float = 0.5,
               eps: float = 1e-3) -> tuple:
    wx = (p / 2.0) * (x ** 2 + eps ** 2) ** (p / 2.0 - 1.0)
    wy = (p / 2.0) * (y ** 2 + eps ** 2) ** (p / 2.0 - 1.0)
    return wx, wy


def lp_majorizer(ctx: SurrogateContext, x: np.ndarray,
                 y: np.ndarray) -> float:
    """Reweighted quadratic model of the smoothed slack count, tight at the
    anchor by construction of the constant offset."""
    xv = ctx.anchor.x
    yv = ctx.anchor.y
    quad = np.sum(ctx.omega_x * (x ** 2 - xv ** 2))
    quad += np.sum(ctx.omega_y * (y ** 2 - yv ** 2))
    return float(quad) + lp_objective(xv, yv, ctx.p, ctx.eps)


def ratio_upper_bound(x, y, x_v, y_v):
    """Convex bound on x/y for x >= 0, y > 0, tight at (x_v, y_v)."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    val = 0.5 * (x + 1.0 / y) ** 2 - 0.5 * (x_v ** 2 + 1.0 / y_v ** 2)
    return val - x_v * (x - x_v) + (y - y_v) / y_v ** 3


def ratio_upper_bound_grad(x, y, x_v, y_v):
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    s = x + 1.0 / y
    return s - x_v, -s / y ** 2 + 1.0 / y_v ** 3


def _hybrid_ratios(cfg: SystemConfig, it: Iterate):
    """Numerator/denominator pairs of the four split-execution ratio terms.

    Numerators are scaled by the constant capacities so that both bound
    coordinates live near unity; the raw cycle counts would put curvature
    of order V**2 on the split variable and stall the subproblem solver.
    """
    cell = cfg.cell_index
    v = cfg.v_cycles
    u = it.u_split
    xs = ((1.0 - u) * v / cfg.f_cenb[cell],
          u * v / cfg.f_cloud,
          u * cfg.b_in / cfg.c_ul[cell],
          u * cfg.b_out / cfg.c_dl[cell])
    ys = (it.f_cenb, it.f, it.c_ul, it.c_dl)
    return xs, ys


def hybrid_latency_surrogate(ctx: SurrogateContext, it: Iterate) -> np.ndarray:
    """Full convex model of the split-execution latency chain, seconds."""
    xv, yv = _hybrid_ratios(ctx.cfg, ctx.anchor)
    xs, ys = _hybrid_ratios(ctx.cfg, it)
    total = latency_surrogate(ctx, it)
    for x, y, x_a, y_a in zip(xs, ys, xv, yv):
        ok = (y > 0) & (y_a > 0)
        term = ratio_upper_bound(np.clip(x, 0.0, None), np.where(ok, y, 1.0),
                                 np.clip(x_a, 0.0, None),
                                 np.where(ok, y_a, 1.0))
        total = total + np.where(ok, term, np.inf)
    return total


def proximal_value(ctx: SurrogateContext, it: Iterate) -> float:
    """Quadratic distance to the anchor over the mode's free blocks."""
    av = ctx.anchor
    total = 0.0
    for name in ctx.mode.blocks():
        d = getattr(it, name) - getattr(av, name)
        total += 0.5 * ctx.gamma[name] * float(np.sum(np.abs(d) ** 2))
    return total


def objective_surrogate(ctx: SurrogateContext, it: Iterate) -> float:
    """Strongly convex model of the mode's objective at the anchor."""
    cfg = ctx.cfg
    mode = ctx.mode
    kind = mode.objective
    if kind == "lp_slack":
        return lp_majorizer(ctx, it.x, it.y) + proximal_value(ctx, it)
    act = mode.active
    total = float(np.sum(ctx.energy.per_user_values(it.q_ul)))
    if kind in ("energy_total", "energy_total_t"):
        r_dl = rate_surrogate(ctx, it, "dl")
        e_dl = model._ratio(cfg.d_rx * cfg.b_out, r_dl)
        total += float(np.sum(np.where(act, e_dl, 0.0)))
    if kind == "energy_total_t":
        total += mode.lam * float(it.t)
    elif kind == "energy_ul_t12":
        total += mode.lam * float(it.t1 + it.t2)
    return total + proximal_value(ctx, it)
