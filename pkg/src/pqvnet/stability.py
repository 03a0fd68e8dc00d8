"""Small-signal security oracle.

Classical machine model: each generator is a constant EMF behind its
transient reactance, loads are converted to constant shunt admittances at the
solved voltages, and the network is Kron-reduced onto the machine internal
nodes.  The swing equations are linearized around the solved equilibrium and
screened through the damping ratios of the oscillatory eigenvalue pairs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .grid import (
    GridModel,
    IslandingError,
    PowerFlowError,
    Snapshot,
    apply_contingency,
    build_ybus,
    contingency_candidates,
    solve_power_flow,
)

DEFAULT_OMEGA_S = 2.0 * np.pi * 50.0
DAMPING_THRESHOLD = 0.03
ZERO_MODE_TOL = 1e-8


class StabilityOracleError(Exception):
    """The eigen-analysis chain failed (singular reduction, non-finite data)."""


@dataclass(frozen=True)
class DynamicParams:
    """Per-machine swing parameters plus the synchronous speed in rad/s."""

    h: np.ndarray
    d: np.ndarray
    xd_prime: np.ndarray
    omega_s: float = DEFAULT_OMEGA_S

    def __post_init__(self):
        for name in ("h", "d", "xd_prime"):
            arr = getattr(self, name)
            if arr.ndim != 1 or arr.shape != self.h.shape:
                raise StabilityOracleError("dynamic parameter arrays must be 1-D and aligned")
        if not (np.all(self.h > 0) and np.all(self.d >= 0) and np.all(self.xd_prime > 0)):
            raise StabilityOracleError("require h > 0, d >= 0, xd_prime > 0")
        if not self.omega_s > 0:
            raise StabilityOracleError("omega_s must be positive")

    @classmethod
    def from_grid(cls, grid: GridModel, omega_s: float = DEFAULT_OMEGA_S) -> "DynamicParams":
        return cls(
            h=np.array([g.h for g in grid.generators], dtype=float),
            d=np.array([g.d for g in grid.generators], dtype=float),
            xd_prime=np.array([g.xd_prime for g in grid.generators], dtype=float),
            omega_s=float(omega_s),
        )


@dataclass(frozen=True)
class ReducedNetwork:
    """Kron-reduced admittance over machine internal nodes plus the equilibrium."""

    y_red: np.ndarray  # (m, m) complex
    e_mag: np.ndarray  # internal EMF magnitudes
    delta: np.ndarray  # internal angles (rad)
    p_mech: np.ndarray  # mechanical power = electrical power at the equilibrium


@dataclass(frozen=True)
class ModeSet:
    eigenvalues: np.ndarray  # all eigenvalues of the state matrix
    zeta: np.ndarray  # one damping ratio per oscillatory conjugate pair
    unstable_real: bool  # any real eigenvalue beyond the zero-mode tolerance

    def damping_score(self) -> float:
        """Scalar used for screening: -1 under aperiodic instability, the
        minimum oscillatory damping ratio otherwise (1.0 when nothing
        oscillates)."""
        if self.unstable_real:
            return -1.0
        if self.zeta.size == 0:
            return 1.0
        return float(self.zeta.min())


@dataclass(frozen=True)
class SecurityLabel:
    is_safe: bool
    min_damping: float
    worst_contingency: int | str  # line id, or "base"


def reduce_network(grid: GridModel, snapshot: Snapshot, dyn: DynamicParams) -> ReducedNetwork:
    """Collapse the solved network onto the machine internal nodes.

    Loads become constant admittances (P - jQ)/V^2 at the solved voltages;
    each machine couples through 1/(j xd') to an added internal node holding
    E = V + j xd' I.  The bus block is then eliminated:
    Y_red = Y_gg - Y_gl Y_ll^-1 Y_lg.
    """
    m = len(grid.generators)
    if m == 0:
        raise StabilityOracleError("grid has no generators to screen")
    if dyn.h.shape != (m,):
        raise StabilityOracleError("dynamic parameters not aligned with generators")
    n = grid.n_buses
    v = snapshot.v * np.exp(1j * snapshot.theta)
    if np.any(snapshot.v <= 0):
        raise StabilityOracleError("snapshot has non-positive voltage magnitudes")

    ybus = build_ybus(grid)
    y_load = (snapshot.p_load - 1j * snapshot.q_load) / snapshot.v**2

    gen_bus = np.array(grid.gen_buses, dtype=int)
    s_inj = v * np.conj(ybus @ v)
    s_load = snapshot.p_load + 1j * snapshot.q_load
    s_gen = s_inj[gen_bus] + s_load[gen_bus]
    i_gen = np.conj(s_gen / v[gen_bus])
    e = v[gen_bus] + 1j * dyn.xd_prime * i_gen

    y_aug = np.zeros((n + m, n + m), dtype=complex)
    y_aug[:n, :n] = ybus + np.diag(y_load)
    for k, b in enumerate(gen_bus):
        yg = 1.0 / (1j * dyn.xd_prime[k])
        y_aug[b, b] += yg
        y_aug[n + k, n + k] += yg
        y_aug[b, n + k] -= yg
        y_aug[n + k, b] -= yg

    y_ll = y_aug[:n, :n]
    y_lg = y_aug[:n, n:]
    y_gl = y_aug[n:, :n]
    y_gg = y_aug[n:, n:]
    try:
        elim = np.linalg.solve(y_ll, y_lg)
    except np.linalg.LinAlgError as exc:
        raise StabilityOracleError("singular elimination block in Kron reduction") from exc
    y_red = y_gg - y_gl @ elim

    p_mech = (e * np.conj(y_red @ e)).real
    return ReducedNetwork(y_red=y_red, e_mag=np.abs(e), delta=np.angle(e), p_mech=p_mech)


def linearize_swing(red: ReducedNetwork, dyn: DynamicParams) -> np.ndarray:
    """State matrix of the linearized swing dynamics around the equilibrium.

    States are (rotor angles, rotor speeds):
        A = [[0, I], [-M^-1 K, -M^-1 D]]
    with M_ii = 2 H_i / omega_s, D_ii = d_i / omega_s (damping power is d_i
    times per-unit speed deviation), and K = dP_e/d(delta) of
        P_ei = sum_j E_i E_j (G_ij cos d_ij + B_ij sin d_ij).
    """
    m = red.e_mag.size
    if dyn.h.shape != (m,):
        raise StabilityOracleError("dynamic parameters not aligned with reduced network")
    g = red.y_red.real
    b = red.y_red.imag
    dd = red.delta[:, None] - red.delta[None, :]
    ee = red.e_mag[:, None] * red.e_mag[None, :]
    k = ee * (g * np.sin(dd) - b * np.cos(dd))
    np.fill_diagonal(k, 0.0)
    np.fill_diagonal(k, -k.sum(axis=1))
    m_diag = 2.0 * dyn.h / dyn.omega_s
    d_diag = dyn.d / dyn.omega_s
    a = np.zeros((2 * m, 2 * m))
    a[:m, m:] = np.eye(m)
    a[m:, :m] = -k / m_diag[:, None]
    a[m:, m:] = -np.diag(d_diag / m_diag)
    return a


def eigenvalues(a: np.ndarray) -> np.ndarray:
    """Eigenvalues of a real state matrix, sorted by (real, imag) for determinism."""
    a = np.asarray(a, dtype=float)
    if not np.all(np.isfinite(a)):
        raise StabilityOracleError("state matrix contains non-finite entries")
    eig = np.linalg.eigvals(a)
    order = np.lexsort((eig.imag, eig.real))
    return eig[order]


def damping_ratios(eigs: np.ndarray, osc_tol: float = ZERO_MODE_TOL) -> np.ndarray:
    """Damping ratio -sigma/sqrt(sigma^2 + omega^2), one per conjugate pair.

    Purely real eigenvalues carry no oscillation and are excluded; they are
    screened separately through the aperiodic-instability check.
    """
    pos = eigs[eigs.imag > osc_tol]
    if pos.size == 0:
        return np.zeros(0)
    return -pos.real / np.abs(pos)


def mode_set(a: np.ndarray, zero_tol: float = ZERO_MODE_TOL) -> ModeSet:
    eigs = eigenvalues(a)
    zeta = damping_ratios(eigs, osc_tol=zero_tol)
    real_mask = np.abs(eigs.imag) <= zero_tol
    unstable = bool(np.any(eigs.real[real_mask] > zero_tol))
    return ModeSet(eigenvalues=eigs, zeta=zeta, unstable_real=unstable)


def _damping_score(grid: GridModel, snapshot: Snapshot, dyn: DynamicParams) -> float:
    red = reduce_network(grid, snapshot, dyn)
    return mode_set(linearize_swing(red, dyn)).damping_score()


def assess_security(
    grid: GridModel,
    snapshot: Snapshot,
    dyn: DynamicParams,
    contingencies: Sequence[int] | None = None,
    threshold: float = DAMPING_THRESHOLD,
) -> SecurityLabel:
    """N-1 small-signal screening of one solved base-case operating point.

    The base case and every listed single-line outage are screened; a
    post-contingency power flow that fails to converge counts as unsafe for
    that outage.  ``is_safe`` holds iff the worst damping score clears the
    threshold.
    """
    if contingencies is None:
        contingencies = contingency_candidates(grid)
    runs: list[tuple[int | str, float]] = []
    try:
        runs.append(("base", _damping_score(grid, snapshot, dyn)))
    except StabilityOracleError as exc:
        raise StabilityOracleError(f"base case: {exc}") from exc
    inj = snapshot.injections()
    for cid in contingencies:
        cgrid = apply_contingency(grid, int(cid))
        try:
            snap_c = solve_power_flow(cgrid, injections=inj)
        except PowerFlowError:
            runs.append((int(cid), -1.0))
            continue
        try:
            runs.append((int(cid), _damping_score(cgrid, snap_c, dyn)))
        except StabilityOracleError as exc:
            raise StabilityOracleError(f"contingency {cid}: {exc}") from exc
    worst, score = min(runs, key=lambda t: t[1])
    return SecurityLabel(is_safe=bool(score >= threshold), min_damping=float(score), worst_contingency=worst)


__all__ = [
    "DAMPING_THRESHOLD",
    "DEFAULT_OMEGA_S",
    "ZERO_MODE_TOL",
    "DynamicParams",
    "IslandingError",
    "ModeSet",
    "ReducedNetwork",
    "SecurityLabel",
    "StabilityOracleError",
    "assess_security",
    "damping_ratios",
    "eigenvalues",
    "linearize_swing",
    "mode_set",
    "reduce_network",
]
