"""Static grid model, AC power flow, contingency handling, and operating-point sampling.

Everything is in per-unit on the system MVA base.  The power-flow solver is a
plain Newton-Raphson in polar coordinates with a flat start; there is no
PV->PQ switching (reactive limits are not modelled), so a solved case keeps
the bus types it was given.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

BUS_TYPES = ("slack", "PV", "PQ")


class GridError(Exception):
    """Base class for grid-model failures."""


class GridFormatError(GridError):
    """A grid file could not be parsed against the schema."""


class GridValidationError(GridError):
    """A parsed grid violates a structural invariant."""


class PowerFlowError(GridError):
    """Newton-Raphson failed to converge; the operating point is treated as infeasible."""


class IslandingError(GridError):
    """A line outage would split the grid into islands."""


# ---------------------------------------------------------------------------
# model types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Bus:
    index: int
    type: str  # one of BUS_TYPES
    p_load: float = 0.0
    q_load: float = 0.0
    g_shunt: float = 0.0
    b_shunt: float = 0.0
    v_set: float = 1.0


@dataclass(frozen=True)
class Line:
    """A pi-model branch: series r + jx, total line-charging susceptance b."""

    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float = 0.0
    in_service: bool = True


@dataclass(frozen=True)
class Generator:
    """A dispatchable machine.  h (s), d (pu torque per pu speed) and xd_prime
    (pu transient reactance) feed the dynamic screening; p_gen is the base
    active dispatch in pu."""

    bus: int
    p_gen: float = 0.0
    h: float = 5.0
    d: float = 0.0
    xd_prime: float = 0.2


@dataclass(frozen=True)
class GridModel:
    buses: tuple[Bus, ...]
    lines: tuple[Line, ...]
    generators: tuple[Generator, ...]
    base_mva: float = 100.0
    slack_bus: int = 0

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def gen_buses(self) -> tuple[int, ...]:
        return tuple(g.bus for g in self.generators)


@dataclass(frozen=True)
class InjectionSet:
    """One sampled operating point: per-bus loads plus per-generator dispatch."""

    p_load: np.ndarray
    q_load: np.ndarray
    p_gen: np.ndarray  # aligned with GridModel.generators


@dataclass(frozen=True)
class Snapshot:
    """A solved operating point.

    ``p_net``/``q_net`` are net demands (consumption positive, generation
    negative); line flow arrays are aligned with ``GridModel.lines`` and hold
    the directed injections into each line end, zero for out-of-service
    lines.  ``v_drop`` is the magnitude of the complex voltage difference
    across each line.  The scheduled loads and dispatch that produced the
    solution are kept so the point can be re-assessed later.
    """

    v: np.ndarray
    theta: np.ndarray
    p_net: np.ndarray
    q_net: np.ndarray
    p_from: np.ndarray
    p_to: np.ndarray
    q_from: np.ndarray
    q_to: np.ndarray
    v_drop: np.ndarray
    p_load: np.ndarray
    q_load: np.ndarray
    p_gen: np.ndarray
    iterations: int

    def injections(self) -> InjectionSet:
        return InjectionSet(self.p_load.copy(), self.q_load.copy(), self.p_gen.copy())


# ---------------------------------------------------------------------------
# loading / validation
# ---------------------------------------------------------------------------


def _require(rec: dict, key: str, where: str):
    if key not in rec:
        raise GridFormatError(f"missing field {key!r} in {where}")
    return rec[key]


def _known(rec: dict, allowed: set[str], where: str) -> None:
    extra = set(rec) - allowed
    if extra:
        raise GridFormatError(f"unknown field(s) {sorted(extra)} in {where}")


def load_grid(path: str | Path) -> GridModel:
    """Parse a JSON grid file and return a validated :class:`GridModel`.

    Top-level keys: ``base_mva``, ``buses``, ``lines``, ``generators``.
    Parallel lines between the same bus pair are merged into a single
    equivalent branch (series admittances and charging summed).
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise GridFormatError(f"cannot read grid file {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise GridFormatError("grid file must contain a JSON object")
    _known(raw, {"base_mva", "buses", "lines", "generators"}, "grid file")

    buses = []
    for k, rec in enumerate(_require(raw, "buses", "grid file")):
        _known(rec, {"index", "type", "p_load", "q_load", "g_shunt", "b_shunt", "v_set"}, f"buses[{k}]")
        buses.append(
            Bus(
                index=int(_require(rec, "index", f"buses[{k}]")),
                type=str(_require(rec, "type", f"buses[{k}]")),
                p_load=float(rec.get("p_load", 0.0)),
                q_load=float(rec.get("q_load", 0.0)),
                g_shunt=float(rec.get("g_shunt", 0.0)),
                b_shunt=float(rec.get("b_shunt", 0.0)),
                v_set=float(rec.get("v_set", 1.0)),
            )
        )

    lines = []
    for k, rec in enumerate(_require(raw, "lines", "grid file")):
        _known(rec, {"from_bus", "to_bus", "r", "x", "b", "in_service"}, f"lines[{k}]")
        lines.append(
            Line(
                from_bus=int(_require(rec, "from_bus", f"lines[{k}]")),
                to_bus=int(_require(rec, "to_bus", f"lines[{k}]")),
                r=float(_require(rec, "r", f"lines[{k}]")),
                x=float(_require(rec, "x", f"lines[{k}]")),
                b=float(rec.get("b", 0.0)),
                in_service=bool(rec.get("in_service", True)),
            )
        )

    gens = []
    for k, rec in enumerate(_require(raw, "generators", "grid file")):
        _known(rec, {"bus", "p_gen", "h", "d", "xd_prime"}, f"generators[{k}]")
        gens.append(
            Generator(
                bus=int(_require(rec, "bus", f"generators[{k}]")),
                p_gen=float(rec.get("p_gen", 0.0)),
                h=float(_require(rec, "h", f"generators[{k}]")),
                d=float(_require(rec, "d", f"generators[{k}]")),
                xd_prime=float(_require(rec, "xd_prime", f"generators[{k}]")),
            )
        )

    slack = [b.index for b in buses if b.type == "slack"]
    if len(slack) != 1:
        raise GridValidationError(f"expected exactly one slack bus, found {len(slack)}")

    grid = GridModel(
        buses=tuple(buses),
        lines=_merge_parallel(tuple(lines)),
        generators=tuple(gens),
        base_mva=float(raw.get("base_mva", 100.0)),
        slack_bus=slack[0],
    )
    validate_grid(grid)
    return grid


def _merge_parallel(lines: tuple[Line, ...]) -> tuple[Line, ...]:
    groups: dict[tuple[int, int], list[Line]] = defaultdict(list)
    order: list[tuple[int, int]] = []
    for ln in lines:
        key = (min(ln.from_bus, ln.to_bus), max(ln.from_bus, ln.to_bus))
        if key not in groups:
            order.append(key)
        groups[key].append(ln)
    merged = []
    for key in order:
        grp = groups[key]
        if len(grp) == 1:
            merged.append(grp[0])
            continue
        flags = {ln.in_service for ln in grp}
        if len(flags) > 1:
            raise GridValidationError(f"parallel lines between buses {key} disagree on in_service")
        y = sum(1.0 / complex(ln.r, ln.x) for ln in grp)
        z = 1.0 / y
        first = grp[0]
        merged.append(
            Line(
                from_bus=first.from_bus,
                to_bus=first.to_bus,
                r=z.real,
                x=z.imag,
                b=sum(ln.b for ln in grp),
                in_service=first.in_service,
            )
        )
    return tuple(merged)


def validate_grid(grid: GridModel) -> None:
    """Raise :class:`GridValidationError` on any structural violation."""
    n = grid.n_buses
    if n == 0:
        raise GridValidationError("grid has no buses")
    if sorted(b.index for b in grid.buses) != list(range(n)):
        raise GridValidationError("bus indices must be exactly 0..N-1")
    slack = [b.index for b in grid.buses if b.type == "slack"]
    if len(slack) != 1 or slack[0] != grid.slack_bus:
        raise GridValidationError("grid must have exactly one slack bus matching slack_bus")
    for b in grid.buses:
        if b.type not in BUS_TYPES:
            raise GridValidationError(f"bus {b.index}: unknown type {b.type!r}")
        if b.type in ("slack", "PV") and not b.v_set > 0:
            raise GridValidationError(f"bus {b.index}: v_set must be positive")
        for name in ("p_load", "q_load", "g_shunt", "b_shunt", "v_set"):
            if not np.isfinite(getattr(b, name)):
                raise GridValidationError(f"bus {b.index}: {name} is not finite")
    seen_pairs = set()
    for k, ln in enumerate(grid.lines):
        if ln.from_bus == ln.to_bus:
            raise GridValidationError(f"line {k}: from_bus == to_bus")
        if not (0 <= ln.from_bus < n and 0 <= ln.to_bus < n):
            raise GridValidationError(f"line {k}: endpoint out of range")
        if ln.x == 0.0:
            raise GridValidationError(f"line {k}: series reactance must be nonzero")
        if not all(np.isfinite(v) for v in (ln.r, ln.x, ln.b)):
            raise GridValidationError(f"line {k}: parameters not finite")
        pair = (min(ln.from_bus, ln.to_bus), max(ln.from_bus, ln.to_bus))
        if pair in seen_pairs:
            raise GridValidationError(f"line {k}: unmerged parallel line {pair}")
        seen_pairs.add(pair)
    gen_buses = [g.bus for g in grid.generators]
    if len(set(gen_buses)) != len(gen_buses):
        raise GridValidationError("at most one generator per bus")
    controlled = {b.index for b in grid.buses if b.type in ("slack", "PV")}
    if set(gen_buses) != controlled:
        raise GridValidationError("generator buses must be exactly the slack and PV buses")
    for k, g in enumerate(grid.generators):
        if not g.h > 0:
            raise GridValidationError(f"generator {k}: h must be positive")
        if g.d < 0:
            raise GridValidationError(f"generator {k}: d must be non-negative")
        if not g.xd_prime > 0:
            raise GridValidationError(f"generator {k}: xd_prime must be positive")
    if not _connected(n, grid.lines):
        raise GridValidationError("in-service line graph is not connected")


def _connected(n_buses: int, lines: Sequence[Line]) -> bool:
    adj: dict[int, list[int]] = defaultdict(list)
    for ln in lines:
        if ln.in_service:
            adj[ln.from_bus].append(ln.to_bus)
            adj[ln.to_bus].append(ln.from_bus)
    seen = {0}
    stack = [0]
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                stack.append(v)
    return len(seen) == n_buses


# ---------------------------------------------------------------------------
# admittance matrix
# ---------------------------------------------------------------------------


def build_ybus(grid: GridModel) -> np.ndarray:
    """Dense complex bus admittance matrix.

    Off-diagonals carry -y_series for each in-service line; diagonals carry
    incident series admittances plus bus shunts plus half line charging per
    incident end.
    """
    n = grid.n_buses
    y = np.zeros((n, n), dtype=complex)
    for ln in grid.lines:
        if not ln.in_service:
            continue
        ys = 1.0 / complex(ln.r, ln.x)
        ysh = 0.5j * ln.b
        i, j = ln.from_bus, ln.to_bus
        y[i, j] -= ys
        y[j, i] -= ys
        y[i, i] += ys + ysh
        y[j, j] += ys + ysh
    for b in grid.buses:
        y[b.index, b.index] += complex(b.g_shunt, b.b_shunt)
    return y


# ---------------------------------------------------------------------------
# power flow
# ---------------------------------------------------------------------------


def base_injections(grid: GridModel) -> InjectionSet:
    """Injection set for the base case: file loads and file dispatch."""
    p_load = np.array([b.p_load for b in grid.buses], dtype=float)
    q_load = np.array([b.q_load for b in grid.buses], dtype=float)
    p_gen = np.array([g.p_gen for g in grid.generators], dtype=float)
    return InjectionSet(p_load, q_load, p_gen)


def _jacobian(ybus: np.ndarray, v: np.ndarray, vm: np.ndarray, pvpq: np.ndarray, pq: np.ndarray) -> np.ndarray:
    ibus = ybus @ v
    diagv = np.diag(v)
    diagi = np.diag(ibus)
    diagnorm = np.diag(v / vm)
    ds_dva = 1j * diagv @ np.conj(diagi - ybus @ diagv)
    ds_dvm = diagv @ np.conj(ybus @ diagnorm) + np.conj(diagi) @ diagnorm
    j11 = ds_dva[np.ix_(pvpq, pvpq)].real
    j12 = ds_dvm[np.ix_(pvpq, pq)].real
    j21 = ds_dva[np.ix_(pq, pvpq)].imag
    j22 = ds_dvm[np.ix_(pq, pq)].imag
    return np.block([[j11, j12], [j21, j22]])


def solve_power_flow(
    grid: GridModel,
    injections: InjectionSet | None = None,
    tol: float = 1e-8,
    max_iter: int = 30,
) -> Snapshot:
    """Solve the AC power flow with Newton-Raphson from a flat start.

    Convergence is max-abs complex power mismatch below ``tol`` (pu) over the
    scheduled equations (P at PV+PQ buses, Q at PQ buses).  Raises
    :class:`PowerFlowError` after ``max_iter`` corrections or on numerical
    blow-up; non-convergence is how an infeasible operating point manifests.
    """
    inj = injections if injections is not None else base_injections(grid)
    n = grid.n_buses
    if inj.p_load.shape != (n,) or inj.q_load.shape != (n,):
        raise GridValidationError("injection load arrays must have one entry per bus")
    if inj.p_gen.shape != (len(grid.generators),):
        raise GridValidationError("injection dispatch must have one entry per generator")
    if not (np.all(np.isfinite(inj.p_load)) and np.all(np.isfinite(inj.q_load)) and np.all(np.isfinite(inj.p_gen))):
        raise GridValidationError("injections must be finite")

    ybus = build_ybus(grid)
    slack = grid.slack_bus
    pv = np.array([b.index for b in grid.buses if b.type == "PV"], dtype=int)
    pq = np.array([b.index for b in grid.buses if b.type == "PQ"], dtype=int)
    pvpq = np.array(sorted([*pv, *pq]), dtype=int)

    p_gen_bus = np.zeros(n)
    for g, pg in zip(grid.generators, inj.p_gen):
        p_gen_bus[g.bus] += pg
    s_sched = (p_gen_bus - inj.p_load) + 1j * (-inj.q_load)

    vm = np.array([b.v_set if b.type in ("slack", "PV") else 1.0 for b in grid.buses], dtype=float)
    va = np.zeros(n)

    iterations = 0
    for it in range(max_iter + 1):
        v = vm * np.exp(1j * va)
        s_inj = v * np.conj(ybus @ v)
        mis = np.concatenate([(s_inj - s_sched).real[pvpq], (s_inj - s_sched).imag[pq]])
        if mis.size and not np.all(np.isfinite(mis)):
            raise PowerFlowError("power flow diverged (non-finite mismatch)")
        if mis.size == 0 or np.max(np.abs(mis)) < tol:
            iterations = it
            break
        if it == max_iter:
            raise PowerFlowError(f"power flow did not converge within {max_iter} iterations")
        jac = _jacobian(ybus, v, vm, pvpq, pq)
        try:
            dx = np.linalg.solve(jac, mis)
        except np.linalg.LinAlgError as exc:
            raise PowerFlowError(f"singular Jacobian at iteration {it}") from exc
        va[pvpq] -= dx[: pvpq.size]
        vm[pq] -= dx[pvpq.size :]

    v = vm * np.exp(1j * va)
    s_inj = v * np.conj(ybus @ v)
    nl = len(grid.lines)
    p_from = np.zeros(nl)
    p_to = np.zeros(nl)
    q_from = np.zeros(nl)
    q_to = np.zeros(nl)
    v_drop = np.zeros(nl)
    for k, ln in enumerate(grid.lines):
        if not ln.in_service:
            continue
        ys = 1.0 / complex(ln.r, ln.x)
        ysh = 0.5j * ln.b
        vi, vj = v[ln.from_bus], v[ln.to_bus]
        s_ij = vi * np.conj(ys * (vi - vj) + ysh * vi)
        s_ji = vj * np.conj(ys * (vj - vi) + ysh * vj)
        p_from[k], q_from[k] = s_ij.real, s_ij.imag
        p_to[k], q_to[k] = s_ji.real, s_ji.imag
        v_drop[k] = abs(vi - vj)

    return Snapshot(
        v=vm.copy(),
        theta=va.copy(),
        p_net=-s_inj.real,
        q_net=-s_inj.imag,
        p_from=p_from,
        p_to=p_to,
        q_from=q_from,
        q_to=q_to,
        v_drop=v_drop,
        p_load=inj.p_load.copy(),
        q_load=inj.q_load.copy(),
        p_gen=inj.p_gen.copy(),
        iterations=iterations,
    )


# ---------------------------------------------------------------------------
# sampling and contingencies
# ---------------------------------------------------------------------------


def sample_operating_points(grid: GridModel, spread: float, count: int, seed: int) -> list[InjectionSet]:
    """Draw ``count`` load/dispatch scenarios around the base case.

    Each bus load component is scaled by an independent uniform factor in
    [1-spread, 1+spread]; generator dispatch is rescaled proportionally so
    total scheduled generation tracks total sampled active load (the slack
    machine still absorbs losses).  Deterministic for a given seed.
    """
    if not 0.0 <= spread < 1.0:
        raise GridValidationError("spread must lie in [0, 1)")
    if count < 1:
        raise GridValidationError("count must be positive")
    rng = np.random.default_rng(seed)
    base = base_injections(grid)
    base_total = base.p_load.sum()
    gen_total = base.p_gen.sum()
    fp = rng.uniform(1.0 - spread, 1.0 + spread, size=(count, grid.n_buses))
    fq = rng.uniform(1.0 - spread, 1.0 + spread, size=(count, grid.n_buses))
    out = []
    for k in range(count):
        p_load = base.p_load * fp[k]
        q_load = base.q_load * fq[k]
        if base_total > 0 and gen_total > 0:
            scale = p_load.sum() / base_total
        else:
            scale = 1.0
        out.append(InjectionSet(p_load, q_load, base.p_gen * scale))
    return out


def apply_contingency(grid: GridModel, line_id: int) -> GridModel:
    """Return a copy of the grid with one line switched out.

    Raises :class:`IslandingError` if the outage would disconnect the grid,
    and :class:`GridValidationError` for an invalid or already-out line.
    """
    if not 0 <= line_id < len(grid.lines):
        raise GridValidationError(f"no line with id {line_id}")
    if not grid.lines[line_id].in_service:
        raise GridValidationError(f"line {line_id} is already out of service")
    lines = list(grid.lines)
    lines[line_id] = replace(lines[line_id], in_service=False)
    if not _connected(grid.n_buses, lines):
        raise IslandingError(f"outage of line {line_id} would island the grid")
    return replace(grid, lines=tuple(lines))


def contingency_candidates(grid: GridModel) -> list[int]:
    """All in-service lines whose outage keeps the grid connected (non-bridges)."""
    out = []
    for k, ln in enumerate(grid.lines):
        if not ln.in_service:
            continue
        lines = list(grid.lines)
        lines[k] = replace(ln, in_service=False)
        if _connected(grid.n_buses, lines):
            out.append(k)
    return out
