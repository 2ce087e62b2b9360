"""Solver for the strongly convex inner problems of the outer loop.

Interior-point path following: the coupled smooth constraints (latency
chains, energy caps) and the simple sets (PSD cones, trace caps, share
simplexes, boxes, sign constraints) all enter one logarithmic barrier whose
weight shrinks geometrically; each barrier stage is minimized by L-BFGS
with an Armijo line search, warm started from the previous stage. Exact
Euclidean projections onto the simple sets are kept as standalone
operations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from . import model, surrogate
from .model import Iterate
from .util import (hermitize, inv_h, logdet_h, pack_hermitian,
                   unpack_hermitian, traces)


class SubsolverError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# projections


def project_simplex_cap(x, cap=1.0):
    """Euclidean projection onto {x >= 0, sum(x) <= cap}."""
    y = np.maximum(x, 0.0)
    if y.sum() <= cap:
        return y
    z = np.sort(x)[::-1]
    css = np.cumsum(z) - cap
    k = np.arange(1, x.size + 1)
    nz = np.nonzero(z - css / k > 0)[0]
    rho = nz[-1] if nz.size else 0
    theta = css[rho] / (rho + 1.0)
    return np.maximum(x - theta, 0.0)


def _eig_rows_cap(w, caps):
    """Row-wise projection of eigenvalue vectors onto {w >= 0, sum <= cap}."""
    out = np.maximum(w, 0.0)
    for i in np.nonzero(out.sum(axis=-1) > caps)[0]:
        out[i] = project_simplex_cap(w[i], caps[i])
    return out


def project_psd_trace(q, cap):
    """Projection onto {Q psd, tr Q <= cap}; batched over leading axes."""
    q = hermitize(np.asarray(q, dtype=complex))
    single = q.ndim == 2
    if single:
        q = q[None]
    w, v = np.linalg.eigh(q)
    caps = np.broadcast_to(np.asarray(cap, dtype=float), w.shape[:-1]).reshape(-1)
    w = _eig_rows_cap(w.reshape(len(caps), -1), caps).reshape(w.shape)
    out = np.matmul(v * w[..., None, :], np.conj(np.swapaxes(v, -1, -2)))
    return out[0] if single else out


def project_psd_trace_pool(q, cap):
    """Projection of a group of matrices onto {each psd, total trace <= cap}."""
    w, v = np.linalg.eigh(hermitize(q))
    flat = project_simplex_cap(w.reshape(-1), cap).reshape(w.shape)
    return np.matmul(v * flat[..., None, :], np.conj(np.swapaxes(v, -1, -2)))


def _psd_part(q):
    w, v = np.linalg.eigh(hermitize(q))
    w = np.maximum(w, 0.0)
    return np.matmul(v * w[..., None, :], np.conj(np.swapaxes(v, -1, -2)))


def project_block_trace(q, caps, n_tx, lam0=None):
    """Projection onto {each q[j] psd} over per-block trace caps.

    The caps couple the diagonal blocks across all matrices:
    sum_j tr(q[j] block m) <= caps[m]. The projection is
    psd_part(q - diag(lam)) with one multiplier per block; the concave dual
    over lam >= 0 is maximized numerically, then a congruence by a
    block-diagonal scaling closes any residual cap violation exactly while
    keeping the result psd. Returns (projection, lam) for warm starts.
    """
    x = hermitize(np.asarray(q, dtype=complex))
    caps = np.asarray(caps, dtype=float)
    n_blocks = caps.size
    d = x.shape[-1]
    diag = np.arange(d)
    blk = diag // n_tx

    def block_traces(y):
        return np.bincount(blk, weights=y[:, diag, diag].real.sum(axis=0),
                           minlength=n_blocks)

    if np.all(block_traces(_psd_part(x)) <= caps):
        lam = np.zeros(n_blocks)
        y = _psd_part(x)
    else:
        def neg_dual(lam):
            shift = lam[blk]
            y = _psd_part(x - np.diag(shift))
            t = block_traces(y)
            val = 0.5 * np.sum(np.abs(y - x) ** 2) + float(lam @ (t - caps))
            return -val, -(t - caps)

        start = np.zeros(n_blocks) if lam0 is None else np.maximum(lam0, 0.0)
        res = minimize(neg_dual, start, jac=True, method="L-BFGS-B",
                       bounds=[(0.0, None)] * n_blocks,
                       options={"maxiter": 80, "ftol": 1e-14, "gtol": 1e-10})
        lam = np.maximum(res.x, 0.0)
        y = _psd_part(x - np.diag(lam[blk]))
    t = block_traces(y)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(t > caps, np.sqrt(caps / np.maximum(t, 1e-300)), 1.0)
    if np.any(s < 1.0):
        sc = s[blk]
        y = y * sc[None, :, None] * sc[None, None, :]
    return hermitize(y), lam


# ---------------------------------------------------------------------------
# flat layout


class Layout:
    """Bijection between the free blocks of an Iterate and one real vector."""

    def __init__(self, cfg, mode):
        self.cfg = cfg
        self.mode = mode
        self.active = np.flatnonzero(mode.active)
        a = self.active.size
        nt = cfg.n_tx
        nd = cfg.n_cells * nt if mode.coop else nt
        sizes = {
            "q_ul": (a * nt * nt, nt),
            "q_dl": (a * nd * nd, nd),
            "f": (a, None),
            "c_ul": (a, None),
            "c_dl": (a * cfg.n_cells if mode.coop else a, None),
            "u_split": (a, None),
            "f_cenb": (a, None),
            "x": (a, None),
            "y": (a, None),
            "t": (1, None),
            "t1": (1, None),
            "t2": (1, None),
        }
        self.segments = {}
        pos = 0
        for name in mode.blocks():
            size, dim = sizes[name]
            self.segments[name] = (slice(pos, pos + size), dim)
            pos += size
        self.n = pos

    def pack(self, it: Iterate) -> np.ndarray:
        z = np.empty(self.n)
        act = self.active
        for name, (sl, dim) in self.segments.items():
            val = getattr(it, name)
            if dim is not None:
                z[sl] = pack_hermitian(val[act]).reshape(-1)
            elif name in ("t", "t1", "t2"):
                z[sl] = float(val)
            else:
                z[sl] = np.asarray(val)[act].reshape(-1)
        return z

    def unpack(self, z: np.ndarray, template: Iterate) -> Iterate:
        it = template.copy()
        act = self.active
        for name, (sl, dim) in self.segments.items():
            if dim is not None:
                mats = unpack_hermitian(z[sl].reshape(act.size, dim * dim), dim)
                getattr(it, name)[act] = mats
            elif name in ("t", "t1", "t2"):
                setattr(it, name, float(z[sl][0]))
            else:
                field = getattr(it, name)
                field[act] = z[sl].reshape(field[act].shape)
        return it

    def scatter_mats(self, z_out: np.ndarray, name: str, grads: np.ndarray):
        """Accumulate per-user Hermitian gradients into the flat vector.

        Pinned blocks have no coordinates, their gradients are discarded.
        """
        if name not in self.segments:
            return
        sl, dim = self.segments[name]
        z_out[sl] += pack_hermitian(grads[self.active]).reshape(-1)

    def scatter_vec(self, z_out: np.ndarray, name: str, grads: np.ndarray):
        if name not in self.segments:
            return
        sl, _ = self.segments[name]
        z_out[sl] += np.asarray(grads)[self.active].reshape(-1)

    def scatter_scalar(self, z_out: np.ndarray, name: str, val: float):
        if name not in self.segments:
            return
        sl, _ = self.segments[name]
        z_out[sl] += val


def variable_count(cfg, mode) -> int:
    return Layout(cfg, mode).n


def constraint_count(cfg, mode) -> int:
    """Number of scalar constraints of the mode, counted from the named
    residual families on a reference state (inactive entries excluded)."""
    from .scenario import generate_channels
    it = model.white_iterate(cfg, mode)
    if mode.name == "p2":
        it.t = float(cfg.t_max if np.isscalar(cfg.t_max) else np.max(cfg.t_max))
    if mode.name == "p8":
        it.t1 = it.t2 = 1.0
    res = model.constraint_residuals(cfg, generate_channels(cfg, seed=0), it, mode)
    return int(sum(np.sum(arr != -np.inf) for arr in res.values()))


# ---------------------------------------------------------------------------
# subproblem


@dataclass
class SubSolution:
    iterate: Iterate
    z: np.ndarray
    objective: float
    kkt_residual: float
    inner_iterations: int
    status: str
    anchor_distance: float = np.nan
    barrier_mu: float = np.nan


class Subproblem:
    """One strongly convex inner problem, fixed at a surrogate context."""

    def __init__(self, ctx: surrogate.SurrogateContext):
        self.ctx = ctx
        cfg, mode = ctx.cfg, ctx.mode
        self.cfg = cfg
        self.mode = mode
        self.layout = Layout(cfg, mode)
        self.anchor_z = self.layout.pack(ctx.anchor)
        act = self.layout.active
        pos = np.full(cfg.n_users, -1)
        pos[act] = np.arange(act.size)
        # active-relative index groups for the shared-budget projections
        self.cell_groups = [pos[[u for u in cfg.users_of_cell(n) if pos[u] >= 0]]
                            for n in range(cfg.n_cells)]
        self.gamma_flat = self._gamma_vector()
        self._act = act
        self._cells_act = cfg.cell_index[act]
        self._lam_dl = None
        self.simple_complexity = self._simple_complexity()

    def _gamma_vector(self):
        g = np.empty(self.layout.n)
        for name, (sl, _) in self.layout.segments.items():
            g[sl] = self.ctx.gamma[name]
        return g

    # -- state ------------------------------------------------------------

    def _state(self, z):
        it = self.layout.unpack(z, self.ctx.anchor)
        r_ul = self.ctx.rate_ul.values(it.q_ul)
        if self.ctx.rate_coop is not None:
            r_dl = self.ctx.rate_coop.values(it.q_dl)
        else:
            r_dl = self.ctx.rate_dl.values(it.q_dl)
        return it, r_ul, r_dl

    # -- objective ---------------------------------------------------------

    def objective_value(self, state) -> float:
        return surrogate.objective_surrogate(self.ctx, state[0])

    def objective_grad(self, z, state) -> np.ndarray:
        ctx = self.ctx
        cfg = self.cfg
        it, r_ul, r_dl = state
        out = self.gamma_flat * (z - self.anchor_z)
        kind = self.mode.objective
        if kind == "lp_slack":
            self.layout.scatter_vec(out, "x", 2.0 * ctx.omega_x * it.x)
            self.layout.scatter_vec(out, "y", 2.0 * ctx.omega_y * it.y)
            return out
        self.layout.scatter_mats(out, "q_ul", ctx.energy.gradient(it.q_ul))
        if kind in ("energy_total", "energy_total_t"):
            w = np.where(self.mode.active & (r_dl > 0),
                         -cfg.d_rx * cfg.b_out / np.where(r_dl > 0, r_dl, 1.0) ** 2,
                         0.0)
            anchor = ctx.rate_coop if ctx.rate_coop is not None else ctx.rate_dl
            self.layout.scatter_mats(out, "q_dl", anchor.weighted_gradient(it.q_dl, w))
        if kind == "energy_total_t":
            self.layout.scatter_scalar(out, "t", self.mode.lam)
        elif kind == "energy_ul_t12":
            self.layout.scatter_scalar(out, "t1", self.mode.lam)
            self.layout.scatter_scalar(out, "t2", self.mode.lam)
        return out

    # -- smooth constraints ------------------------------------------------

    def constraint_values(self, state) -> np.ndarray:
        """Barrier-handled constraint values, negative when satisfied."""
        cfg = self.cfg
        mode = self.mode
        it, r_ul, r_dl = state
        act = self._act
        cells = self._cells_act
        b_in = cfg.b_in[act]
        b_out = cfg.b_out[act]
        rad_ul = model._ratio(b_in, cfg.w_ul * r_ul[act])
        rad_dl = model._ratio(b_out, cfg.w_dl * r_dl[act])
        if mode.hybrid:
            lat = surrogate.hybrid_latency_surrogate(self.ctx, it)[act]
            return lat - cfg.t_max[act]
        bh_ul = model._ratio(b_in, it.c_ul[act] * cfg.c_ul[cells])
        exe = model._ratio(cfg.v_cycles[act], it.f[act] * cfg.f_cloud)
        if mode.coop:
            bh_dl = model._ratio(b_out[:, None], it.c_dl[act] * cfg.c_dl[None, :]).sum(axis=1)
        else:
            bh_dl = model._ratio(b_out, it.c_dl[act] * cfg.c_dl[cells])
        chain = rad_ul + bh_ul + exe + bh_dl
        if mode.name == "p5":
            lat = chain + rad_dl - cfg.t_max[act] - it.x[act]
            tr = traces(it.q_ul[act])
            e_m = cfg.local_cpu_energy()[act]
            energy = tr - (e_m / b_in) * r_ul[act] - it.y[act]
            return np.concatenate([lat, energy])
        if mode.name == "p2":
            return chain + rad_dl - it.t
        if mode.name == "p8":
            return np.concatenate([chain - it.t1, rad_dl - it.t2])
        return chain + rad_dl - cfg.t_max[act]

    def constraint_grad_weighted(self, z, state, w) -> np.ndarray:
        """Flat gradient of sum_j w[j] * g_j at the state."""
        cfg = self.cfg
        mode = self.mode
        it, r_ul, r_dl = state
        act = self._act
        cells = self._cells_act
        a = act.size
        out = np.zeros(self.layout.n)
        b_in = cfg.b_in[act]
        b_out = cfg.b_out[act]

        def safe_inv_sq(num, den):
            with np.errstate(divide="ignore", invalid="ignore"):
                val = num / den ** 2
            return np.where(den > 0, val, 0.0)

        if mode.hybrid:
            w_lat = w
            self._hybrid_grad(out, it, w_lat)
            w_ul_full = np.zeros(cfg.n_users)
            w_ul_full[act] = -w_lat * safe_inv_sq(b_in / cfg.w_ul, r_ul[act])
            out_mat = self.ctx.rate_ul.weighted_gradient(it.q_ul, w_ul_full)
            self.layout.scatter_mats(out, "q_ul", out_mat)
            w_dl_full = np.zeros(cfg.n_users)
            w_dl_full[act] = -w_lat * safe_inv_sq(b_out / cfg.w_dl, r_dl[act])
            anchor = self.ctx.rate_dl
            self.layout.scatter_mats(out, "q_dl", anchor.weighted_gradient(it.q_dl, w_dl_full))
            return out

        if mode.name == "p5":
            w_lat, w_en = w[:a], w[a:]
        elif mode.name == "p8":
            w_lat, w_t2 = w[:a], w[a:]
        else:
            w_lat = w

        # uplink radio leg appears in the chain family of every mode
        w_ul_full = np.zeros(cfg.n_users)
        w_ul_full[act] = -w_lat * safe_inv_sq(b_in / cfg.w_ul, r_ul[act])
        if mode.name == "p5":
            e_m = cfg.local_cpu_energy()[act]
            w_ul_full[act] += -w_en * (e_m / b_in)
        mats_ul = self.ctx.rate_ul.weighted_gradient(it.q_ul, w_ul_full)
        if mode.name == "p5":
            # trace part of the offload-power rows
            mats_ul[act] += w_en[:, None, None] * np.eye(cfg.n_tx)
        self.layout.scatter_mats(out, "q_ul", mats_ul)

        # downlink radio leg
        w_rad_dl = w_t2 if mode.name == "p8" else w_lat
        w_dl_full = np.zeros(cfg.n_users)
        w_dl_full[act] = -w_rad_dl * safe_inv_sq(b_out / cfg.w_dl, r_dl[act])
        anchor = self.ctx.rate_coop if self.ctx.rate_coop is not None else self.ctx.rate_dl
        self.layout.scatter_mats(out, "q_dl", anchor.weighted_gradient(it.q_dl, w_dl_full))

        # share legs, elementwise
        self.layout.scatter_vec(out, "c_ul", self._full(
            -w_lat * safe_inv_sq(b_in / cfg.c_ul[cells], it.c_ul[act])))
        self.layout.scatter_vec(out, "f", self._full(
            -w_lat * safe_inv_sq(cfg.v_cycles[act] / cfg.f_cloud, it.f[act])))
        if mode.coop:
            g_cdl = np.zeros((cfg.n_users, cfg.n_cells))
            g_cdl[act] = -w_lat[:, None] * safe_inv_sq(
                b_out[:, None] / cfg.c_dl[None, :], it.c_dl[act])
            self.layout.scatter_vec(out, "c_dl", g_cdl)
        else:
            self.layout.scatter_vec(out, "c_dl", self._full(
                -w_lat * safe_inv_sq(b_out / cfg.c_dl[cells], it.c_dl[act])))

        if mode.name == "p5":
            self.layout.scatter_vec(out, "x", self._full(-w_lat))
            self.layout.scatter_vec(out, "y", self._full(-w_en))
        elif mode.name == "p2":
            self.layout.scatter_scalar(out, "t", -float(np.sum(w_lat)))
        elif mode.name == "p8":
            self.layout.scatter_scalar(out, "t1", -float(np.sum(w_lat)))
            self.layout.scatter_scalar(out, "t2", -float(np.sum(w_t2)))
        return out

    def _full(self, vals_act):
        full = np.zeros((self.cfg.n_users,) + np.shape(vals_act)[1:])
        full[self._act] = vals_act
        return full

    def _hybrid_grad(self, out, it, w_lat):
        """Share, split and backhaul gradients of the ratio-bound chain."""
        cfg = self.cfg
        act = self._act
        cells = self._cells_act
        xs, ys = surrogate._hybrid_ratios(cfg, it)
        xv, yv = surrogate._hybrid_ratios(cfg, self.ctx.anchor)
        v = cfg.v_cycles[act]
        du = (-v / cfg.f_cenb[cells], v / cfg.f_cloud,
              cfg.b_in[act] / cfg.c_ul[cells], cfg.b_out[act] / cfg.c_dl[cells])
        y_names = ("f_cenb", "f", "c_ul", "c_dl")
        g_u = np.zeros(act.size)
        for k, name in enumerate(y_names):
            gx, gy = surrogate.ratio_upper_bound_grad(
                xs[k][act], ys[k][act], xv[k][act], yv[k][act])
            g_u += w_lat * gx * du[k]
            self.layout.scatter_vec(out, name, self._full(w_lat * gy))
        self.layout.scatter_vec(out, "u_split", self._full(g_u))

    # -- simple-set barrier ------------------------------------------------

    def _simple_complexity(self):
        """Barrier parameter of the simple sets; log det of an n x n block
        counts n, every scalar log counts 1."""
        cfg, mode = self.cfg, self.mode
        seg = self.layout.segments
        a = self._act.size
        cells = sum(1 for grp in self.cell_groups if grp.size)
        nu = 0
        if "q_ul" in seg:
            nu += a * (cfg.n_tx + 1)
        if "q_dl" in seg:
            if mode.coop:
                nu += a * cfg.n_cells * cfg.n_tx + cfg.n_cells
            else:
                nu += a * cfg.n_tx + cells
        if "f" in seg:
            nu += a + 1
        if "c_ul" in seg:
            nu += a + cells
        if "c_dl" in seg:
            nu += (a * cfg.n_cells + cfg.n_cells) if mode.coop else (a + cells)
        if "f_cenb" in seg:
            nu += a + cells
        if "u_split" in seg:
            nu += 2 * a
        if "x" in seg:
            nu += a
        if "y" in seg:
            nu += a
        return nu

    def simple_log_sum(self, it) -> float:
        """Sum of the simple-set barrier logs, -inf outside the open domain."""
        cfg, mode = self.cfg, self.mode
        seg = self.layout.segments
        act = self._act
        total = 0.0

        def simplex_logs(vals):
            v = np.asarray(vals, dtype=float).ravel()
            s = float(v.sum())
            if np.any(v <= 0.0) or s >= 1.0:
                return -np.inf
            return float(np.log(v).sum()) + math.log1p(-s)

        if "q_ul" in seg:
            q = it.q_ul[act]
            ld = logdet_h(q)
            marg = cfg.p_ul[act] - traces(q)
            if not np.all(np.isfinite(ld)) or np.any(marg <= 0.0):
                return -np.inf
            total += float(ld.sum() + np.log(marg).sum())
        if "q_dl" in seg:
            q = it.q_dl[act]
            ld = logdet_h(q)
            if not np.all(np.isfinite(ld)):
                return -np.inf
            total += float(ld.sum())
            if mode.coop:
                d = np.arange(q.shape[-1])
                per_cell = np.bincount(d // cfg.n_tx,
                                       weights=q[:, d, d].real.sum(axis=0),
                                       minlength=cfg.n_cells)
                marg = cfg.p_dl - per_cell
                if np.any(marg <= 0.0):
                    return -np.inf
                total += float(np.log(marg).sum())
            else:
                tr = traces(q)
                for n, grp in enumerate(self.cell_groups):
                    if grp.size == 0:
                        continue
                    marg = cfg.p_dl[n] - float(tr[grp].sum())
                    if marg <= 0.0:
                        return -np.inf
                    total += math.log(marg)
        if "f" in seg:
            total += simplex_logs(it.f[act])
        for name, arr in (("c_ul", it.c_ul), ("f_cenb", it.f_cenb)):
            if name in seg:
                for grp in self.cell_groups:
                    if grp.size:
                        total += simplex_logs(arr[act[grp]])
        if "c_dl" in seg:
            if mode.coop:
                for m in range(cfg.n_cells):
                    total += simplex_logs(it.c_dl[act, m])
            else:
                for grp in self.cell_groups:
                    if grp.size:
                        total += simplex_logs(it.c_dl[act[grp]])
        if "u_split" in seg:
            u = it.u_split[act]
            if np.any(u <= 0.0) or np.any(u >= 1.0):
                return -np.inf
            total += float(np.log(u).sum() + np.log1p(-u).sum())
        if "x" in seg:
            if np.any(it.x[act] <= 0.0):
                return -np.inf
            total += float(np.log(it.x[act]).sum())
        if "y" in seg:
            if np.any(it.y[act] <= 0.0):
                return -np.inf
            total += float(np.log(it.y[act]).sum())
        return total if np.isfinite(total) else -np.inf

    def simple_grad(self, out, it, mu):
        """Accumulate the gradient of -mu * simple_log_sum onto the flat out."""
        cfg, mode = self.cfg, self.mode
        seg = self.layout.segments
        act = self._act
        nt = cfg.n_tx

        def simplex_grad(vals):
            v = np.asarray(vals, dtype=float)
            return -mu / v + mu / (1.0 - float(v.sum()))

        if "q_ul" in seg:
            q = it.q_ul[act]
            marg = cfg.p_ul[act] - traces(q)
            mats = -mu * inv_h(q)
            d = np.arange(nt)
            mats[:, d, d] += (mu / marg)[:, None]
            full = np.zeros_like(it.q_ul)
            full[act] = hermitize(mats)
            self.layout.scatter_mats(out, "q_ul", full)
        if "q_dl" in seg:
            q = it.q_dl[act]
            d = np.arange(q.shape[-1])
            mats = -mu * inv_h(q)
            if mode.coop:
                per_cell = np.bincount(d // nt,
                                       weights=q[:, d, d].real.sum(axis=0),
                                       minlength=cfg.n_cells)
                add = (mu / (cfg.p_dl - per_cell))[d // nt]
                mats[:, d, d] += add[None, :]
            else:
                tr = traces(q)
                add = np.zeros(act.size)
                for n, grp in enumerate(self.cell_groups):
                    if grp.size:
                        add[grp] = mu / (cfg.p_dl[n] - float(tr[grp].sum()))
                mats[:, d, d] += add[:, None]
            full = np.zeros_like(it.q_dl)
            full[act] = hermitize(mats)
            self.layout.scatter_mats(out, "q_dl", full)
        if "f" in seg:
            self.layout.scatter_vec(out, "f", self._full(simplex_grad(it.f[act])))
        for name, arr in (("c_ul", it.c_ul), ("f_cenb", it.f_cenb)):
            if name in seg:
                g = np.zeros(cfg.n_users)
                for grp in self.cell_groups:
                    if grp.size:
                        g[act[grp]] = simplex_grad(arr[act[grp]])
                self.layout.scatter_vec(out, name, g)
        if "c_dl" in seg:
            if mode.coop:
                g = np.zeros((cfg.n_users, cfg.n_cells))
                for m in range(cfg.n_cells):
                    g[act, m] = simplex_grad(it.c_dl[act, m])
                self.layout.scatter_vec(out, "c_dl", g)
            else:
                g = np.zeros(cfg.n_users)
                for grp in self.cell_groups:
                    if grp.size:
                        g[act[grp]] = simplex_grad(it.c_dl[act[grp]])
                self.layout.scatter_vec(out, "c_dl", g)
        if "u_split" in seg:
            u = it.u_split[act]
            self.layout.scatter_vec(out, "u_split",
                                    self._full(-mu / u + mu / (1.0 - u)))
        if "x" in seg:
            self.layout.scatter_vec(out, "x", self._full(-mu / it.x[act]))
        if "y" in seg:
            self.layout.scatter_vec(out, "y", self._full(-mu / it.y[act]))

    # -- barrier -----------------------------------------------------------

    def barrier_value(self, z, mu):
        state = self._state(z)
        val = self.objective_value(state)
        if not np.isfinite(val):
            return np.inf, state, None
        g = self.constraint_values(state)
        if np.any(~np.isfinite(g)) or np.any(g >= 0.0):
            return np.inf, state, g
        if mu > 0.0:
            logs = self.simple_log_sum(state[0])
            if not np.isfinite(logs):
                return np.inf, state, g
            val += mu * float(np.sum(-np.log(-g))) - mu * logs
        return val, state, g

    def barrier_grad(self, z, mu, state, g):
        w = mu / (-g)
        out = self.objective_grad(z, state) + self.constraint_grad_weighted(z, state, w)
        if mu > 0.0:
            self.simple_grad(out, state[0], mu)
        return out

    # -- projection --------------------------------------------------------

    def project(self, z):
        cfg = self.cfg
        mode = self.mode
        it = self.layout.unpack(z, self.ctx.anchor)
        act = self._act
        it.q_ul[act] = project_psd_trace(it.q_ul[act], cfg.p_ul[act])
        if mode.coop:
            it.q_dl[act], self._lam_dl = project_block_trace(
                it.q_dl[act], cfg.p_dl, cfg.n_tx, lam0=self._lam_dl)
            if "c_dl" in self.layout.segments:
                for m in range(cfg.n_cells):
                    it.c_dl[act, m] = project_simplex_cap(it.c_dl[act, m])
        else:
            for n, grp in enumerate(self.cell_groups):
                if grp.size == 0:
                    continue
                users = act[grp]
                it.q_dl[users] = project_psd_trace_pool(it.q_dl[users], cfg.p_dl[n])
                if "c_dl" in self.layout.segments:
                    it.c_dl[users] = project_simplex_cap(it.c_dl[users])
        if "f" in self.layout.segments:
            it.f[act] = project_simplex_cap(it.f[act])
        for n, grp in enumerate(self.cell_groups):
            if grp.size == 0:
                continue
            users = act[grp]
            if "c_ul" in self.layout.segments:
                it.c_ul[users] = project_simplex_cap(it.c_ul[users])
            if mode.hybrid:
                it.f_cenb[users] = project_simplex_cap(it.f_cenb[users])
        if mode.hybrid:
            it.u_split[act] = np.clip(it.u_split[act], 0.0, 1.0)
        if mode.name == "p5":
            it.x[act] = np.maximum(it.x[act], 0.0)
            it.y[act] = np.maximum(it.y[act], 0.0)
        if mode.name == "p2":
            it.t = max(it.t, 0.0)
        if mode.name == "p8":
            it.t1 = max(it.t1, 0.0)
            it.t2 = max(it.t2, 0.0)
        return self.layout.pack(it)


# ---------------------------------------------------------------------------
# driver


def _probe_precond(sp, z, mu, grad):
    """Per-block curvature estimates turned into a diagonal seed metric.

    The blocks of the layout live on wildly different scales (covariance
    entries versus shares versus split fractions), so an unscaled first
    quasi-Newton step moves some blocks and freezes others. One finite
    difference along a random direction per block equalizes them.
    """
    p = np.ones(sp.layout.n)
    rng = np.random.default_rng(0)
    evals = 0
    for name, (sl, _) in sp.layout.segments.items():
        v = rng.standard_normal(sl.stop - sl.start)
        d = np.zeros(sp.layout.n)
        d[sl] = v / np.linalg.norm(v)
        h = 1e-5 * (1.0 + float(np.linalg.norm(z[sl])))
        for trial in (h, -h):
            f2, s2, g2 = sp.barrier_value(z + trial * d, mu)
            evals += 1
            if np.isfinite(f2):
                grad2 = sp.barrier_grad(z + trial * d, mu, s2, g2)
                curv = float(np.linalg.norm((grad2 - grad)[sl])) / abs(trial)
                if np.isfinite(curv) and curv > 0.0:
                    p[sl] = 1.0 / curv
                break
    p /= p.max()
    return p, evals


def _lbfgs(sp, z, mu, max_iter, diag0, dec_tol, ftol, memory=12):
    """Limited-memory BFGS on one barrier stage, Armijo backtracking.

    Infinite trial values (outside the barrier domain) just shorten the
    step. Stops when the predicted decrease of a full quasi-Newton step
    drops below dec_tol, or after several accepted decreases below ftol.
    Returns (z, f, state, g, grad, iterations, reason).
    """
    f, state, g = sp.barrier_value(z, mu)
    if not np.isfinite(f):
        raise SubsolverError("barrier stage started outside the domain")
    grad = sp.barrier_grad(z, mu, state, g)
    s_list, y_list, rho = [], [], []
    flat = 0
    reason = "max-iter"
    it_count = 0
    for _ in range(max_iter):
        q = grad.copy()
        alphas = []
        for s_v, y_v, r in zip(reversed(s_list), reversed(y_list), reversed(rho)):
            a = r * float(s_v @ q)
            alphas.append(a)
            q -= a * y_v
        if s_list:
            y_last = y_list[-1]
            denom = float(y_last @ (diag0 * y_last))
            gamma_h = float(s_list[-1] @ y_last) / denom if denom > 0.0 else 1.0
        else:
            gamma_h = 1.0
        q *= max(gamma_h, 1e-300) * diag0
        for (s_v, y_v, r), a in zip(zip(s_list, y_list, rho), reversed(alphas)):
            b = r * float(y_v @ q)
            q += (a - b) * s_v
        d = -q
        gd = float(grad @ d)
        if not np.isfinite(gd) or gd >= 0.0:
            s_list.clear()
            y_list.clear()
            rho.clear()
            d = -diag0 * grad
            gd = float(grad @ d)
            if not np.isfinite(gd) or gd >= 0.0:
                reason = "stall"
                break
        if -gd <= dec_tol:
            reason = "decrement"
            break
        step = 1.0
        accepted = False
        while step >= 1e-20:
            z_try = z + step * d
            f_try, state_try, g_try = sp.barrier_value(z_try, mu)
            if np.isfinite(f_try) and f_try <= f + 1e-4 * step * gd:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            reason = "stall"
            break
        it_count += 1
        grad_try = sp.barrier_grad(z_try, mu, state_try, g_try)
        s_v = z_try - z
        y_v = grad_try - grad
        sy = float(s_v @ y_v)
        if sy > 1e-10 * float(np.linalg.norm(s_v) * np.linalg.norm(y_v)):
            s_list.append(s_v)
            y_list.append(y_v)
            rho.append(1.0 / sy)
            if len(s_list) > memory:
                s_list.pop(0)
                y_list.pop(0)
                rho.pop(0)
        df = f - f_try
        z, f, state, g, grad = z_try, f_try, state_try, g_try, grad_try
        flat = flat + 1 if df <= ftol else 0
        if flat >= 6:
            reason = "plateau"
            break
    return z, f, state, g, grad, it_count, reason


def _fd_hessian(sp, z, mu, grad):
    """Dense barrier Hessian from one-sided column differences of the
    gradient (the matrix only steers steps, so first-order accuracy is
    enough). Probes that leave the barrier domain flip direction, shrink,
    then give up as an identity column.
    """
    n = z.size
    h_cols = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        done = False
        base = 1e-6 * (1.0 + abs(z[i]))
        for h in (base, -base, 1e-3 * base, -1e-3 * base):
            fp, stp, gp = sp.barrier_value(z + h * e, mu)
            if np.isfinite(fp):
                gv = sp.barrier_grad(z + h * e, mu, stp, gp)
                h_cols[:, i] = (gv - grad) / h
                done = True
                break
        if not done:
            h_cols[:, i] = 0.0
            h_cols[i, i] = 1.0
    return 0.5 * (h_cols + h_cols.T)


def _newton_stage(sp, z, mu, max_iter, dec_tol):
    """Damped Newton on one barrier stage.

    Barrier Hessians near active rows are too ill conditioned for the
    quasi-Newton stage (condition numbers beyond 1e10 stall its line
    search), so small problems take exact Newton steps with a
    backtracking search that first re-enters the barrier domain.
    Returns the same tuple as _lbfgs.
    """
    f, state, g = sp.barrier_value(z, mu)
    if not np.isfinite(f):
        raise SubsolverError("barrier stage started outside the domain")
    grad = sp.barrier_grad(z, mu, state, g)
    reason = "max-iter"
    it_count = 0
    c_f = None
    for _ in range(max_iter):
        d = None
        if c_f is not None:
            # previous factor took a clean full step: try it on the new
            # gradient before paying for a fresh Hessian
            cand = -np.linalg.solve(c_f.T, np.linalg.solve(c_f, grad))
            if np.isfinite(cand).all() and float(grad @ cand) < 0.0:
                d = cand
        if d is None:
            h_mat = _fd_hessian(sp, z, mu, grad)
            ridge = 0.0
            base = max(1e-12, 1e-10 * float(np.trace(h_mat)) / z.size)
            for _try in range(12):
                try:
                    c_f = np.linalg.cholesky(h_mat + ridge * np.eye(z.size))
                except np.linalg.LinAlgError:
                    c_f = None
                    ridge = base if ridge == 0.0 else ridge * 100.0
                    continue
                cand = -np.linalg.solve(c_f.T, np.linalg.solve(c_f, grad))
                if np.isfinite(cand).all() and float(grad @ cand) < 0.0:
                    d = cand
                    break
                c_f = None
                ridge = base if ridge == 0.0 else ridge * 100.0
            if d is None:
                reason = "singular"
                break
        gd = float(grad @ d)
        if -gd <= dec_tol:
            reason = "decrement"
            break
        step = 1.0
        while step >= 1e-20:
            f_try, state_try, g_try = sp.barrier_value(z + step * d, mu)
            if np.isfinite(f_try) and f_try <= f + 1e-4 * step * gd:
                break
            step *= 0.5
        else:
            reason = "stall"
            break
        achieved = f - f_try
        if step < 0.1 or achieved < 0.3 * step * (-gd):
            c_f = None
        z = z + step * d
        f, state, g = f_try, state_try, g_try
        grad = sp.barrier_grad(z, mu, state, g)
        it_count += 1
    return z, f, state, g, grad, it_count, reason


NEWTON_CUTOFF = 64


def solve(ctx: surrogate.SurrogateContext, tol: float = 1e-6,
          max_inner: int = 1500, mu0: Optional[float] = None) -> SubSolution:
    """Minimize the surrogate model; result never exceeds the anchor value.

    Interior-point path following. Every constraint, the simple covariance
    and share sets included, enters a log barrier whose weight is lowered
    until the implied duality gap falls below tol relative to the anchor
    objective magnitude, so the returned iterate is strictly feasible.
    mu0 overrides the starting barrier weight; an anchor near the central
    path (a warm start from a previous solve) can begin much lower.
    """
    sp = Subproblem(ctx)
    z0 = sp.anchor_z.copy()
    f0_bar, state0, g0 = sp.barrier_value(z0, 0.0)
    if not np.isfinite(f0_bar) or g0 is None or np.any(g0 >= 0.0):
        raise SubsolverError("anchor is not strictly feasible for the smooth constraints")
    if not np.isfinite(sp.simple_log_sum(state0[0])):
        raise SubsolverError("anchor is not strictly inside the simple sets")
    f0 = sp.objective_value(state0)
    scale = max(1.0, abs(f0))

    grad0 = sp.objective_grad(z0, state0)
    if float(np.linalg.norm(grad0)) <= 1e-14 * (1.0 + scale):
        return SubSolution(iterate=state0[0], z=z0, objective=f0, kkt_residual=0.0,
                           inner_iterations=0, status="stationary-anchor",
                           anchor_distance=0.0, barrier_mu=0.0)

    nu = g0.size + sp.simple_complexity
    mu_end = 0.5 * tol * scale / nu
    mu_start = max(mu_end, 0.02 * scale / nu if mu0 is None else mu0)
    n_stages = 1 + (max(0, math.ceil(math.log(mu_start / mu_end) / math.log(5.0)))
                    if mu_start > mu_end else 0)
    per_stage = max(40, max_inner // n_stages)

    z = z0
    mu = mu_start
    total_iters = 0
    reason = "decrement"
    state = state0
    diag0 = None
    newton = z0.size <= NEWTON_CUTOFF
    for stage in range(n_stages):
        last = mu <= mu_end * (1.0 + 1e-12)
        if newton:
            cap = min(per_stage, 60 if last else 30)
            dec_tol = (1e-3 if last else 5e-2) * mu * nu
            z, fb, state, g, grad, iters, reason = _newton_stage(
                sp, z, mu, cap, dec_tol)
        else:
            fb, st, g = sp.barrier_value(z, mu)
            grad = sp.barrier_grad(z, mu, st, g)
            if diag0 is None:
                diag0, _ = _probe_precond(sp, z, mu, grad)
            dec_tol = (1e-3 if last else 5e-3) * mu * nu
            z, fb, state, g, grad, iters, reason = _lbfgs(
                sp, z, mu, per_stage, diag0, dec_tol, ftol=dec_tol)
        total_iters += iters
        if last:
            break
        mu = max(mu * 0.2, mu_end)

    raw = sp.objective_value(state)
    mu_final = mu_end
    # a schedule that ends while the raw value still sits above the anchor
    # has not resolved the subproblem (an anchor hugging a constraint wall
    # keeps the early central path above f0): extend it downward
    extra = 0
    while raw > f0 and extra < 8 and total_iters < max_inner:
        mu_final *= 0.2
        if newton:
            dec_tol = 1e-3 * mu_final * nu
            z, fb, state, g, grad, iters, reason = _newton_stage(
                sp, z, mu_final, 60, dec_tol)
        else:
            if diag0 is None:
                fb, st, gg = sp.barrier_value(z, mu_final)
                grad = sp.barrier_grad(z, mu_final, st, gg)
                diag0, _ = _probe_precond(sp, z, mu_final, grad)
            dec_tol = 1e-3 * mu_final * nu
            z, fb, state, g, grad, iters, reason = _lbfgs(
                sp, z, mu_final, per_stage, diag0, dec_tol, ftol=dec_tol)
        total_iters += iters
        raw = sp.objective_value(state)
        extra += 1

    kkt = nu * mu_final / scale
    status = "converged" if reason != "max-iter" else "max-inner"
    z_out = z
    if raw > f0:
        z_out = z0
        state = state0
        raw = f0
        status = "anchor-fallback"
    return SubSolution(iterate=state[0], z=z_out, objective=raw, kkt_residual=kkt,
                       inner_iterations=total_iters, status=status,
                       anchor_distance=float(np.linalg.norm(z_out - z0)),
                       barrier_mu=mu_final)
