"""Problem state and exact system quantities.

An Iterate collects every decision variable of the allocation problem:
per-user uplink and downlink transmit covariances, backhaul shares,
cloud compute shares, and the extras used by individual problem modes
(latency/energy slacks, edge/cloud split fractions, deadline variables).
The functions here evaluate the true (non-surrogate) rates, latencies,
energies and constraint residuals of such a state.
"""

from dataclasses import dataclass, replace as dc_replace
from typing import Optional

import numpy as np

from .util import eye_like, logdet_h, min_eig_h, sandwich, traces

LN2 = np.log(2.0)

# canonical variable blocks per problem mode; pinned blocks are excluded
_MODE_BLOCKS = {
    "p1": ("q_ul", "q_dl", "f", "c_ul", "c_dl"),
    "p2": ("q_ul", "q_dl", "f", "c_ul", "c_dl", "t"),
    "p5": ("q_ul", "q_dl", "f", "c_ul", "c_dl", "x", "y"),
    "p7": ("q_ul", "q_dl", "u_split", "f_cenb", "f", "c_ul", "c_dl"),
    "p8": ("q_ul", "q_dl", "f", "c_ul", "c_dl", "t1", "t2"),
}


@dataclass(frozen=True)
class ModeSpec:
    """Which problem variant is being solved and over which users.

    objective selects the true objective recorded along a run:
    energy_total, energy_ul, energy_total_t (adds lambda * t),
    energy_ul_t12 (adds lambda * (t1 + t2)) or lp_slack.
    """

    name: str
    objective: str
    active: np.ndarray
    pinned: tuple = ()
    coop: bool = False
    block_diag_dl: bool = False
    lam: float = 0.0
    lp_p: float = 0.5
    lp_eps: float = 1e-3

    def blocks(self):
        return tuple(b for b in _MODE_BLOCKS[self.name] if b not in self.pinned)

    @property
    def hybrid(self):
        return self.name == "p7"


def _full_active(config, active):
    if active is None:
        return np.ones(config.n_users, dtype=bool)
    active = np.asarray(active)
    if active.dtype != bool:
        mask = np.zeros(config.n_users, dtype=bool)
        mask[active] = True
        return mask
    return active.copy()


def mode_p1(config, active=None, uplink_only=False, pinned=()):
    obj = "energy_ul" if uplink_only else "energy_total"
    return ModeSpec("p1", obj, _full_active(config, active), tuple(pinned))


def mode_p2(config, lam, active=None, pinned=()):
    return ModeSpec("p2", "energy_total_t", _full_active(config, active), tuple(pinned), lam=lam)


def mode_p5(config, active=None):
    return ModeSpec("p5", "lp_slack", _full_active(config, active))


def mode_p7(config, active=None, pinned=()):
    return ModeSpec("p7", "energy_ul", _full_active(config, active), tuple(pinned))


def mode_p8(config, lam, coop=True, active=None, block_diag_dl=False):
    return ModeSpec("p8", "energy_ul_t12", _full_active(config, active),
                    coop=coop, block_diag_dl=block_diag_dl, lam=lam)


@dataclass
class Iterate:
    """One point of the joint allocation space.

    q_ul: (U, n_tx, n_tx) complex Hermitian PSD, J/symbol scale.
    q_dl: (U, n, n) with n = n_tx per-cell or n_cells * n_tx in coop mode.
    f, c_ul, c_dl: compute and backhaul shares in [0, 1]; c_dl has shape
    (U, n_cells) in coop mode, (U,) otherwise. Remaining fields belong to
    specific modes and stay None elsewhere.
    """

    q_ul: np.ndarray
    q_dl: np.ndarray
    f: np.ndarray
    c_ul: np.ndarray
    c_dl: np.ndarray
    x: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None
    u_split: Optional[np.ndarray] = None
    f_cenb: Optional[np.ndarray] = None
    t: Optional[float] = None
    t1: Optional[float] = None
    t2: Optional[float] = None

    def copy(self):
        kw = {}
        for name in self.__dataclass_fields__:
            val = getattr(self, name)
            kw[name] = val.copy() if isinstance(val, np.ndarray) else val
        return Iterate(**kw)

    def blend(self, other, gamma):
        """Convex combination self + gamma * (other - self), fieldwise."""
        kw = {}
        for name in self.__dataclass_fields__:
            a, b = getattr(self, name), getattr(other, name)
            if a is None:
                kw[name] = None
            elif isinstance(a, np.ndarray):
                kw[name] = a + gamma * (b - a)
            else:
                kw[name] = a + gamma * (b - a)
        return Iterate(**kw)


def white_iterate(config, mode, power_fraction=1.0):
    """Full-power white-covariance state with equal shares."""
    u, nt, nc, k = config.n_users, config.n_tx, config.n_cells, config.users_per_cell
    q_ul = np.zeros((u, nt, nt), dtype=complex)
    idx = np.arange(nt)
    q_ul[:, idx, idx] = (power_fraction * config.p_ul / nt)[:, None]
    if mode.coop:
        nd = nc * nt
        q_dl = np.zeros((u, nd, nd), dtype=complex)
        jdx = np.arange(nd)
        # every user may draw from every base station's budget in coop mode
        per = power_fraction * np.repeat(config.p_dl, nt) / u / nt  # (nd,)
        q_dl[:, jdx, jdx] = per[None, :]
        c_dl = np.full((u, nc), 1.0 / u)
    else:
        q_dl = np.zeros((u, nt, nt), dtype=complex)
        q_dl[:, idx, idx] = (power_fraction * config.p_dl[config.cell_index] / (k * nt))[:, None]
        c_dl = np.full(u, 1.0 / k)
    it = Iterate(
        q_ul=q_ul,
        q_dl=q_dl,
        f=np.full(u, 1.0 / u),
        c_ul=np.full(u, 1.0 / k),
        c_dl=c_dl,
    )
    inactive = ~mode.active
    if np.any(inactive):
        it.q_ul[inactive] = 0.0
        it.q_dl[inactive] = 0.0
        it.f[inactive] = 0.0
        it.c_ul[inactive] = 0.0
        it.c_dl[inactive] = 0.0
    if mode.name == "p5":
        it.x = np.zeros(u)
        it.y = np.zeros(u)
    if mode.hybrid:
        it.u_split = np.where(mode.active, 0.5, 0.0)
        it.f_cenb = np.where(mode.active, 1.0 / k, 0.0)
    return it


# ---------------------------------------------------------------------------
# rates


def uplink_interference_cov(config, channels, q_ul):
    """Per-user uplink interference-plus-noise covariance at the serving cell.

    Only same-slot users of other cells contribute. Shape (U, n_rx, n_rx).
    """
    sigma = config.n0 * config.w_ul
    cells = config.cell_index
    intf = config.interferers
    r = sigma * eye_like(config.n_rx, (config.n_users,))
    if intf.shape[1]:
        hi = channels.h[intf, cells[:, None]]          # (U, nc-1, nr, nt)
        qi = q_ul[intf]                                # (U, nc-1, nt, nt)
        r = r + np.einsum("ukrt,ukts,ukqs->urq", hi, qi, np.conj(hi), optimize=True)
    return r


def _dl_interference_cov(config, channels, q_dl):
    sigma = config.n0 * config.w_dl
    cells = config.cell_index
    intf = config.interferers
    r = sigma * eye_like(config.n_rx, (config.n_users,))
    if intf.shape[1]:
        gi = channels.g[np.arange(config.n_users)[:, None], cells[intf]]
        qi = q_dl[intf]
        r = r + np.einsum("ukrt,ukts,ukqs->urq", gi, qi, np.conj(gi), optimize=True)
    return r


def _coop_interference_cov(config, channels, q_dl):
    gs = channels.g_stacked                            # (U, nr, nc*nt)
    total = q_dl.sum(axis=0)
    r = config.sigma_w2 * eye_like(config.n_rx, (config.n_users,))
    all_int = np.stack([total - q_dl[j] for j in range(config.n_users)])
    return r + sandwich(gs, all_int)


def embed_cell_downlink(config, q_dl):
    """Lift per-cell covariances (u, nt, nt) onto the stacked transmit space.

    Each user keeps its own base station's diagonal block; cross blocks are
    zero, so only the own-cell antennas carry power.
    """
    u, nt = config.n_users, config.n_tx
    nd = config.n_cells * nt
    out = np.zeros((u, nd, nd), dtype=complex)
    for j in range(u):
        n = config.cell_index[j]
        out[j, n * nt:(n + 1) * nt, n * nt:(n + 1) * nt] = q_dl[j]
    return out


def uplink_rate(config, channels, q_ul):
    """Achievable uplink rate per user, bits/symbol."""
    r_cov = uplink_interference_cov(config, channels, q_ul)
    hd = channels.h_direct(config.cell_index)
    s_cov = r_cov + sandwich(hd, q_ul)
    return np.maximum(logdet_h(s_cov) - logdet_h(r_cov), 0.0) / LN2


def downlink_rate(config, channels, q_dl, coop=False):
    """Achievable downlink rate per user, bits/symbol.

    In coop mode every base station transmits jointly through the stacked
    channel and all other users' stacked covariances interfere.
    """
    if coop:
        r_cov = _coop_interference_cov(config, channels, q_dl)
        gd = channels.g_stacked
    else:
        r_cov = _dl_interference_cov(config, channels, q_dl)
        gd = channels.g_direct(config.cell_index)
    s_cov = r_cov + sandwich(gd, q_dl)
    return np.maximum(logdet_h(s_cov) - logdet_h(r_cov), 0.0) / LN2


# ---------------------------------------------------------------------------
# latency and energy


def _ratio(num, den):
    """num / den with 0 where num == 0 and +inf where den <= 0 < num."""
    num = np.asarray(num, dtype=float)
    den = np.asarray(den, dtype=float)
    shape = np.broadcast_shapes(num.shape, den.shape)
    num = np.broadcast_to(num, shape)
    den = np.broadcast_to(den, shape)
    out = np.zeros(shape)
    pos = num > 0.0
    ok = pos & (den > 0.0)
    np.divide(num, den, out=out, where=ok)
    out[pos & ~ok] = np.inf
    return out


@dataclass
class LatencyBreakdown:
    radio_ul: np.ndarray
    bh_ul: np.ndarray
    exe_edge: np.ndarray
    exe_cloud: np.ndarray
    bh_dl: np.ndarray
    radio_dl: np.ndarray

    @property
    def chain_to_cloud_out(self):
        """Everything up to and including the downlink backhaul."""
        return self.radio_ul + self.bh_ul + self.exe_edge + self.exe_cloud + self.bh_dl

    @property
    def total(self):
        return self.chain_to_cloud_out + self.radio_dl


def latency_components(config, channels, it, mode):
    """Per-user latency terms of the offloading chain for the given mode.

    Degenerate users (zero input or output bits) contribute nothing on the
    corresponding legs; a positive workload over a zero share yields +inf.
    """
    r_ul = uplink_rate(config, channels, it.q_ul)
    r_dl = downlink_rate(config, channels, it.q_dl, coop=mode.coop)
    cells = config.cell_index
    radio_ul = _ratio(config.b_in, config.w_ul * r_ul)
    radio_dl = _ratio(config.b_out, config.w_dl * r_dl)
    cap_ul = config.c_ul[cells]
    cap_dl = config.c_dl[cells]
    if mode.hybrid:
        u = it.u_split
        bh_ul = _ratio(u * config.b_in, it.c_ul * cap_ul)
        bh_dl = _ratio(u * config.b_out, it.c_dl * cap_dl)
        exe_edge = _ratio((1.0 - u) * config.v_cycles, it.f_cenb * config.f_cenb[cells])
        exe_cloud = _ratio(u * config.v_cycles, it.f * config.f_cloud)
    else:
        bh_ul = _ratio(config.b_in, it.c_ul * cap_ul)
        if mode.coop:
            # output bits are pushed over every base station's backhaul
            bh_dl = _ratio(config.b_out[:, None], it.c_dl * config.c_dl[None, :]).sum(axis=1)
        else:
            bh_dl = _ratio(config.b_out, it.c_dl * cap_dl)
        exe_edge = np.zeros(config.n_users)
        exe_cloud = _ratio(config.v_cycles, it.f * config.f_cloud)
    return LatencyBreakdown(radio_ul, bh_ul, exe_edge, exe_cloud, bh_dl, radio_dl)


def offload_energy(config, channels, it, mode=None):
    """Per-user transmit and receive energies (J) of the offload chain."""
    coop = bool(mode and mode.coop)
    r_ul = uplink_rate(config, channels, it.q_ul)
    r_dl = downlink_rate(config, channels, it.q_dl, coop=coop)
    e_ul = _ratio(config.b_in * traces(it.q_ul), r_ul)
    # guard: zero covariance with positive bits is an unserved user
    e_ul = np.where((config.b_in > 0) & (traces(it.q_ul) <= 0), np.inf, e_ul)
    e_dl = _ratio(config.b_out * config.d_rx, r_dl)
    return e_ul, e_dl


def local_energy(config):
    """Energy of purely local execution at the minimum adequate CPU speed."""
    return config.local_cpu_energy()


def offloading_advantageous(config, channels, it):
    """True where finishing locally costs at least as much as uplink transmission."""
    e_ul, _ = offload_energy(config, channels, it)
    return local_energy(config) >= e_ul


def true_objective(config, channels, it, mode):
    """The objective value tracked by the outer loop, in the mode's units."""
    act = mode.active
    if mode.objective == "lp_slack":
        p, eps = mode.lp_p, mode.lp_eps
        fx = np.sum((it.x[act] ** 2 + eps**2) ** (p / 2.0))
        fy = np.sum((it.y[act] ** 2 + eps**2) ** (p / 2.0))
        return float(fx + fy)
    e_ul, e_dl = offload_energy(config, channels, it, mode)
    val = float(np.sum(e_ul[act]))
    if mode.objective in ("energy_total", "energy_total_t"):
        val += float(np.sum(e_dl[act]))
    if mode.objective == "energy_total_t":
        val += mode.lam * it.t
    if mode.objective == "energy_ul_t12":
        val += mode.lam * (it.t1 + it.t2)
    return val


# ---------------------------------------------------------------------------
# feasibility


@dataclass
class FeasibilityCheck:
    feasible: bool
    reason: Optional[str]
    split: Optional[tuple]
    f: Optional[np.ndarray]
    c_ul: Optional[np.ndarray]
    c_dl: Optional[np.ndarray]
    slack: Optional[np.ndarray]


def check_feasibility(config, channels, q_ul, q_dl, active=None, shrink=0.01,
                      coop=False):
    """Sufficient feasibility test for fixed covariances.

    Checks that deadlines leave positive slack after the radio legs and
    that a three-way split of each user's slack across cloud compute,
    uplink backhaul and downlink backhaul fits the shared budgets. On
    success returns share allocations built from the split closed form,
    then rescaled upward to exhaust each budget. shrink reserves a margin
    of the slack so the returned point is strictly interior. With coop
    the downlink shares are per link and every user draws equally from
    every link, so the backhaul condition pools all users.
    """
    act = _full_active(config, active)
    r_ul = uplink_rate(config, channels, q_ul)
    r_dl = downlink_rate(config, channels, q_dl, coop=coop)
    radio_ul = _ratio(config.b_in, config.w_ul * r_ul)
    radio_dl = _ratio(config.b_out, config.w_dl * r_dl)
    slack = config.t_max - radio_ul - radio_dl
    if np.any(~np.isfinite(slack[act])) or np.any(slack[act] <= 0.0):
        return FeasibilityCheck(False, "condition a): radio latency exceeds a deadline", None, None, None, None, slack)
    eff = (1.0 - shrink) * slack
    cells = config.cell_index
    u = config.n_users

    def _load(numer):
        per_user = np.where(act, _ratio(numer, eff), 0.0)
        return per_user

    load_f = _load(config.v_cycles / config.f_cloud)
    load_cu = _load(config.b_in / config.c_ul[cells])
    if coop:
        load_cd = _load(config.b_out * float(np.sum(1.0 / config.c_dl)))
    else:
        load_cd = _load(config.b_out / config.c_dl[cells])
    beta1 = float(np.sum(load_f))
    beta2 = max((float(np.sum(load_cu[config.users_of_cell(n)])) for n in range(config.n_cells)), default=0.0)
    if coop:
        beta3 = float(np.sum(load_cd))
    else:
        beta3 = max((float(np.sum(load_cd[config.users_of_cell(n)])) for n in range(config.n_cells)), default=0.0)
    betas = np.array([beta1, beta2, beta3])
    total = float(betas.sum())
    if total > 1.0:
        labels = ["b) cloud compute", "c) uplink backhaul", "d) downlink backhaul"]
        worst = labels[int(np.argmax(betas))]
        return FeasibilityCheck(False, f"conditions b)-d): slack split infeasible (sum {total:.3f} > 1, worst {worst})",
                                None, None, None, None, slack)
    nz = betas > 0.0
    alphas = np.where(nz, betas + (1.0 - total) / max(int(nz.sum()), 1), 0.0)
    f = np.where(alphas[0] > 0, load_f / max(alphas[0], 1e-300), 0.0)
    c_ul = np.where(alphas[1] > 0, load_cu / max(alphas[1], 1e-300), 0.0)
    c_dl = np.where(alphas[2] > 0, load_cd / max(alphas[2], 1e-300), 0.0)
    # scale every block up to its full budget; latencies only shrink
    s = f.sum()
    if s > 0:
        f = f / s
    for n in range(config.n_cells):
        users = config.users_of_cell(n)
        s = c_ul[users].sum()
        if s > 0:
            c_ul[users] = c_ul[users] / s
    if coop:
        s = c_dl.sum()
        if s > 0:
            c_dl = c_dl / s
        c_dl = np.repeat(c_dl[:, None], config.n_cells, axis=1)
    else:
        for n in range(config.n_cells):
            users = config.users_of_cell(n)
            s = c_dl[users].sum()
            if s > 0:
                c_dl[users] = c_dl[users] / s
    return FeasibilityCheck(True, None, tuple(alphas), f, c_ul, c_dl, slack)


# ---------------------------------------------------------------------------
# constraint residuals


def constraint_residuals(config, channels, it, mode):
    """Named residuals of every constraint of the mode; <= 0 means satisfied.

    Entries for users outside the mode's active set are -inf. Values are in
    natural units (seconds, joules, shares, eigenvalue scale).
    """
    act = mode.active
    na = ~act
    cells = config.cell_index
    lat = latency_components(config, channels, it, mode)
    res = {}

    def _mask(arr):
        arr = np.array(arr, dtype=float)
        arr[na] = -np.inf
        return arr

    if mode.name == "p5":
        res["latency"] = _mask(lat.total - config.t_max - it.x)
        # energy slack lives in trace units: tr(Q) - (E_M / bits) * rate <= y
        r_ul = uplink_rate(config, channels, it.q_ul)
        scaled = traces(it.q_ul) - (local_energy(config) / config.b_in) * r_ul
        res["energy_slack"] = _mask(scaled - it.y)
        res["x_nonneg"] = _mask(-it.x)
        res["y_nonneg"] = _mask(-it.y)
    elif mode.name == "p2":
        res["latency"] = _mask(lat.total - it.t)
    elif mode.name == "p8":
        res["latency"] = _mask(lat.chain_to_cloud_out - it.t1)
        res["latency_dl"] = _mask(lat.radio_dl - it.t2)
    else:
        res["latency"] = _mask(lat.total - config.t_max)

    res["psd_ul"] = _mask(-min_eig_h(it.q_ul))
    res["trace_ul"] = _mask(traces(it.q_ul) - config.p_ul)
    res["psd_dl"] = _mask(-min_eig_h(it.q_dl))
    if mode.coop:
        nt = config.n_tx
        per_cell = np.array([
            sum(traces(it.q_dl[j, n * nt:(n + 1) * nt, n * nt:(n + 1) * nt]) for j in np.flatnonzero(act))
            for n in range(config.n_cells)
        ])
        res["trace_dl_cell"] = per_cell - config.p_dl
        res["bh_dl_sum"] = it.c_dl[act].sum(axis=0) - 1.0
        res["c_dl_nonneg"] = _mask(np.min(-it.c_dl, axis=1))
    else:
        per_cell = np.array([traces(it.q_dl[config.users_of_cell(n)]).sum() for n in range(config.n_cells)])
        # inactive users hold zero covariances, so the sums above are unaffected
        res["trace_dl_cell"] = per_cell - config.p_dl
        res["bh_dl_sum"] = np.array([it.c_dl[config.users_of_cell(n)][act[config.users_of_cell(n)]].sum()
                                     for n in range(config.n_cells)]) - 1.0
        res["c_dl_nonneg"] = _mask(-it.c_dl)

    res["cloud_sum"] = np.array([it.f[act].sum() - 1.0])
    res["f_nonneg"] = _mask(-it.f)
    res["bh_ul_sum"] = np.array([it.c_ul[config.users_of_cell(n)][act[config.users_of_cell(n)]].sum()
                                 for n in range(config.n_cells)]) - 1.0
    res["c_ul_nonneg"] = _mask(-it.c_ul)

    if mode.hybrid:
        res["u_upper"] = _mask(it.u_split - 1.0)
        res["u_lower"] = _mask(-it.u_split)
        res["fcenb_sum"] = np.array([it.f_cenb[config.users_of_cell(n)][act[config.users_of_cell(n)]].sum()
                                     for n in range(config.n_cells)]) - 1.0
        res["fcenb_nonneg"] = _mask(-it.f_cenb)
    return res


def max_residual(residuals, scale_psd=None):
    """Largest residual across all constraint families."""
    worst = -np.inf
    for arr in residuals.values():
        finite = arr[np.isfinite(arr)] if isinstance(arr, np.ndarray) else [arr]
        if len(finite):
            worst = max(worst, float(np.max(finite)))
    return worst
