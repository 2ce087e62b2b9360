"""System configuration, channel generation and scenario files.

A scenario couples a static parameter set (cells, users, bandwidths,
backhaul and compute capacities, per-user task sizes and deadlines)
with a seed-keyed random channel realization. Users are indexed flat
in cell-major order: user u lives in cell u // K and occupies spectral
slot u % K of its cell. Only users sharing a spectral slot interfere.
"""

import json
from dataclasses import dataclass, field, fields
from functools import cached_property

import numpy as np

from .util import crandn


class ScenarioError(ValueError):
    """Raised for malformed scenario files or inconsistent configurations."""


def _as_array(value, length, name, dtype=float):
    arr = np.asarray(value, dtype=dtype)
    if arr.ndim == 0:
        arr = np.full(length, float(arr), dtype=dtype)
    if arr.shape != (length,):
        raise ScenarioError(f"{name}: expected scalar or length-{length} list, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class SystemConfig:
    """Static scenario parameters. Immutable after construction.

    Arrays are flat per-user (length n_cells * users_per_cell, cell-major)
    or per-cell (length n_cells) as noted. All units are SI: Hz, W/Hz,
    J/symbol, bits, bits/s, CPU cycles, cycles/s, seconds.
    """

    n_cells: int = 3
    users_per_cell: int = 5
    n_tx: int = 2
    n_rx: int = 2
    w_ul: float = 1e7            # uplink bandwidth per spectral slot, Hz
    w_dl: float = 1e7            # downlink bandwidth per spectral slot, Hz
    n0: float = 1e-20            # noise spectral density, W/Hz
    p_ul: np.ndarray = 0.01      # per-user uplink energy budget, J/symbol
    p_dl: np.ndarray = 0.01      # per-cell downlink energy budget, J/symbol
    c_ul: np.ndarray = 1e8       # per-cell uplink backhaul capacity, bits/s
    c_dl: np.ndarray = 1e8       # per-cell downlink backhaul capacity, bits/s
    f_cloud: float = 1e11        # cloud compute rate, cycles/s
    f_cenb: np.ndarray = 1e10    # per-cell edge compute rate, cycles/s
    b_in: np.ndarray = 3e5     # per-user input bits
    b_out: np.ndarray = 3e5    # per-user output bits
    v_cycles: np.ndarray = None  # per-user CPU cycles; default 330 * b_in
    t_max: np.ndarray = 0.1      # per-user latency deadline, s
    d_rx: float = 1e-5           # receive energy per downlink symbol, J
    kappa: float = 1e-26         # local CPU energy coefficient, J s^2 / cycle^3
    lambda_weight: float = 0.0   # latency weight for deadline-optimizing modes, J/s
    pathloss_direct_db: float = 70.0
    pathloss_cross_db: float = 80.0
    sigma_w2: float = None       # coop downlink noise variance, W; default n0 * w_dl

    def __post_init__(self):
        if self.n_cells < 1 or self.users_per_cell < 1:
            raise ScenarioError("n_cells and users_per_cell must be positive")
        if self.n_tx < 1 or self.n_rx < 1:
            raise ScenarioError("antenna counts must be positive")
        u = self.n_cells * self.users_per_cell
        upd = {
            "p_ul": _as_array(self.p_ul, u, "p_ul"),
            "p_dl": _as_array(self.p_dl, self.n_cells, "p_dl"),
            "c_ul": _as_array(self.c_ul, self.n_cells, "c_ul"),
            "c_dl": _as_array(self.c_dl, self.n_cells, "c_dl"),
            "f_cenb": _as_array(self.f_cenb, self.n_cells, "f_cenb"),
            "b_in": _as_array(self.b_in, u, "b_in"),
            "b_out": _as_array(self.b_out, u, "b_out"),
            "t_max": _as_array(self.t_max, u, "t_max"),
        }
        v = self.v_cycles if self.v_cycles is not None else 330.0 * upd["b_in"]
        upd["v_cycles"] = _as_array(v, u, "v_cycles")
        if self.sigma_w2 is None:
            upd["sigma_w2"] = float(self.n0) * float(self.w_dl)
        for key, arr in upd.items():
            if isinstance(arr, np.ndarray):
                arr.setflags(write=False)
            object.__setattr__(self, key, arr)
        for name, val in (("w_ul", self.w_ul), ("w_dl", self.w_dl), ("n0", self.n0),
                          ("f_cloud", self.f_cloud), ("d_rx", self.d_rx), ("kappa", self.kappa)):
            if val <= 0:
                raise ScenarioError(f"{name} must be positive")
        for name in ("p_ul", "p_dl", "c_ul", "c_dl", "f_cenb", "t_max"):
            if np.any(getattr(self, name) <= 0):
                raise ScenarioError(f"{name} entries must be positive")
        for name in ("b_in", "b_out", "v_cycles"):
            if np.any(getattr(self, name) < 0):
                raise ScenarioError(f"{name} entries must be nonnegative")

    @property
    def n_users(self):
        return self.n_cells * self.users_per_cell

    @cached_property
    def cell_index(self):
        """Cell of each flat user index."""
        idx = np.repeat(np.arange(self.n_cells), self.users_per_cell)
        idx.setflags(write=False)
        return idx

    @cached_property
    def spectral_slot(self):
        """Spectral slot of each flat user index."""
        idx = np.tile(np.arange(self.users_per_cell), self.n_cells)
        idx.setflags(write=False)
        return idx

    @cached_property
    def interferers(self):
        """(U, n_cells - 1) array: same-slot users in the other cells."""
        u = self.n_users
        k = self.users_per_cell
        out = np.empty((u, self.n_cells - 1), dtype=int)
        for user in range(u):
            slot = user % k
            others = [m * k + slot for m in range(self.n_cells) if m != user // k]
            out[user] = others
        out.setflags(write=False)
        return out

    def users_of_cell(self, n):
        k = self.users_per_cell
        return np.arange(n * k, (n + 1) * k)

    def local_cpu_energy(self):
        """Energy of executing each task locally within its deadline."""
        return self.kappa * self.v_cycles**3 / self.t_max**2

    def replace(self, **kw):
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        # sizes or bits changing invalidates stored per-user arrays unless overridden
        if ("b_in" in kw or "n_cells" in kw or "users_per_cell" in kw) and "v_cycles" not in kw:
            vals["v_cycles"] = None
        resized = "n_cells" in kw or "users_per_cell" in kw
        vals.update(kw)
        if resized:
            nc = vals["n_cells"]
            u = nc * vals["users_per_cell"]
            for name, length in (("p_ul", u), ("b_in", u), ("b_out", u), ("t_max", u),
                                 ("p_dl", nc), ("c_ul", nc), ("c_dl", nc), ("f_cenb", nc)):
                if name not in kw and np.asarray(vals[name]).shape != (length,):
                    vals[name] = float(np.asarray(vals[name]).flat[0])
        return SystemConfig(**vals)


@dataclass(frozen=True)
class ChannelSet:
    """One channel realization.

    h[u, m]: uplink channel from user u to the base station of cell m,
    shape (n_rx, n_tx). g[u, m]: downlink channel from the base station
    of cell m to user u. Direct links are the m == cell(u) slices.
    """

    h: np.ndarray
    g: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.h.setflags(write=False)
        self.g.setflags(write=False)

    @property
    def n_users(self):
        return self.h.shape[0]

    @property
    def n_cells(self):
        return self.h.shape[1]

    def h_direct(self, cell_index):
        u = np.arange(self.n_users)
        return self.h[u, cell_index]

    def g_direct(self, cell_index):
        u = np.arange(self.n_users)
        return self.g[u, cell_index]

    @cached_property
    def g_stacked(self):
        """Per-user downlink channel from all base stations jointly.

        Shape (U, n_rx, n_cells * n_tx); block m along the last axis is
        g[u, m], so a block-diagonal stacked covariance reproduces the
        per-cell links exactly.
        """
        u, nc, nr, nt = self.g.shape
        out = np.transpose(self.g, (0, 2, 1, 3)).reshape(u, nr, nc * nt)
        out.setflags(write=False)
        return out


def generate_channels(config, seed):
    """Draw the i.i.d. Rayleigh channel realization for a seed.

    Entries are circularly-symmetric complex Gaussian with variance
    10^(-pathloss/10); the direct pathloss applies to own-cell links and
    the cross pathloss to all others. Deterministic in (config, seed).
    """
    rng = np.random.default_rng(seed)
    u, nc = config.n_users, config.n_cells
    var_direct = 10.0 ** (-config.pathloss_direct_db / 10.0)
    var_cross = 10.0 ** (-config.pathloss_cross_db / 10.0)
    var = np.full((u, nc), var_cross)
    var[np.arange(u), config.cell_index] = var_direct
    scale = np.sqrt(var)[:, :, None, None]
    h = crandn(rng, (u, nc, config.n_rx, config.n_tx)) * scale
    g = crandn(rng, (u, nc, config.n_rx, config.n_tx)) * scale
    return ChannelSet(h=h, g=g, seed=seed)


# scenario file schema: JSON object, keys below, scalars broadcast to arrays
_SCHEMA = {
    "n_cells": ("n_cells", int),
    "users_per_cell": ("users_per_cell", int),
    "n_tx": ("n_tx", int),
    "n_rx": ("n_rx", int),
    "w_ul_hz": ("w_ul", float),
    "w_dl_hz": ("w_dl", float),
    "n0_w_per_hz": ("n0", float),
    "p_ul_j_per_sym": ("p_ul", None),
    "p_dl_j_per_sym": ("p_dl", None),
    "c_ul_bit_per_s": ("c_ul", None),
    "c_dl_bit_per_s": ("c_dl", None),
    "f_cloud_cyc_per_s": ("f_cloud", float),
    "f_cenb_cyc_per_s": ("f_cenb", None),
    "b_in_bit": ("b_in", None),
    "b_out_bit": ("b_out", None),
    "v_cyc": ("v_cycles", None),
    "t_max_s": ("t_max", None),
    "d_rx_j_per_sym": ("d_rx", float),
    "kappa_j_s2": ("kappa", float),
    "lambda_j_per_s": ("lambda_weight", float),
    "pathloss_direct_db": ("pathloss_direct_db", float),
    "pathloss_cross_db": ("pathloss_cross_db", float),
    "sigma_w2_w": ("sigma_w2", float),
}
_FIELD_TO_KEY = {f: k for k, (f, _) in _SCHEMA.items()}


def load_scenario(path):
    """Read a scenario file into a SystemConfig.

    The format is a flat JSON object; unknown keys and malformed values
    raise ScenarioError naming the offending field. An empty object
    yields the all-default configuration.
    """
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ScenarioError(f"{path}: top level must be a JSON object")
    kwargs = {}
    for key, value in raw.items():
        if key not in _SCHEMA:
            raise ScenarioError(f"{path}: unknown field {key!r}")
        name, caster = _SCHEMA[key]
        try:
            kwargs[name] = caster(value) if caster is not None else value
        except (TypeError, ValueError) as exc:
            raise ScenarioError(f"{path}: field {key!r}: {exc}") from exc
    try:
        return SystemConfig(**kwargs)
    except ScenarioError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc


def save_scenario(config, path):
    """Write a SystemConfig as a scenario file (full float precision)."""
    out = {}
    for f in fields(SystemConfig):
        key = _FIELD_TO_KEY.get(f.name)
        if key is None:
            continue
        val = getattr(config, f.name)
        if isinstance(val, np.ndarray):
            out[key] = [float(x) for x in val]
        elif isinstance(val, (np.integer, int)):
            out[key] = int(val)
        else:
            out[key] = float(val)
    with open(path, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")


def default_config(**overrides):
    """The baseline three-cell scenario with stated defaults applied."""
    return SystemConfig(**overrides)
