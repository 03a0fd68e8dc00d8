"""Small-signal oracle tests.

The heart of this file is an exact closed-form cross-check: a two-machine
system over a lossless reactance chain with proportional damping
(d1/h1 == d2/h2) decouples into a drift mode and one oscillatory relative
mode whose damping ratio follows the scalar second-order formula
zeta = (lam/2) * sqrt(M_r / kappa).  Everything the production chain does
(power flow -> EMF -> network reduction -> linearization -> eigenvalues) is
therefore checkable against pencil-and-paper algebra.
"""

import dataclasses

import numpy as np
import pytest

from pqvnet.grid import (
    Bus,
    Generator,
    GridModel,
    InjectionSet,
    Line,
    base_injections,
    build_ybus,
    solve_power_flow,
)
from pqvnet.stability import (
    DynamicParams,
    ModeSet,
    StabilityOracleError,
    assess_security,
    damping_ratios,
    eigenvalues,
    linearize_swing,
    mode_set,
    reduce_network,
)

OMEGA = 2.0 * np.pi * 60.0


def _two_machine_grid(x_line, p_transfer, h=(4.0, 3.0), lam=0.5, xdp=(0.15, 0.2)):
    """Lossless two-machine system with proportional damping d_i = lam * 2 h_i."""
    d = (lam * 2.0 * h[0], lam * 2.0 * h[1])
    return GridModel(
        buses=(
            Bus(index=0, type="slack", v_set=1.0),
            Bus(index=1, type="PV", v_set=1.0),
        ),
        lines=(Line(from_bus=0, to_bus=1, r=0.0, x=x_line, b=0.0),),
        generators=(
            Generator(bus=0, h=h[0], d=d[0], xd_prime=xdp[0]),
            Generator(bus=1, p_gen=p_transfer, h=h[1], d=d[1], xd_prime=xdp[1]),
        ),
    )


def analytic_two_machine_zeta(grid, snap, dyn):
    """Relative-mode damping ratio from the scalar swing equation.

    EMFs are recomputed here from raw line current (no shared code with
    reduce_network): E = V + j xd' I, kappa = E1 E2 cos(d12) / x_total,
    M_r = M1 M2 / (M1 + M2), and zeta = (lam/2) sqrt(M_r / kappa).
    """
    line = grid.lines[0]
    v1 = snap.v[0] * np.exp(1j * snap.theta[0])
    v2 = snap.v[1] * np.exp(1j * snap.theta[1])
    i12 = (v1 - v2) / complex(0.0, line.x)  # current bus0 -> bus1
    e1 = v1 + 1j * dyn.xd_prime[0] * i12
    e2 = v2 + 1j * dyn.xd_prime[1] * (-i12)
    x_total = dyn.xd_prime[0] + line.x + dyn.xd_prime[1]
    kappa = abs(e1) * abs(e2) * np.cos(np.angle(e1) - np.angle(e2)) / x_total
    m = 2.0 * dyn.h / dyn.omega_s
    lam = dyn.d[0] / (2.0 * dyn.h[0])
    m_r = m[0] * m[1] / (m[0] + m[1])
    return 0.5 * lam * np.sqrt(m_r / kappa)


@pytest.mark.parametrize("p_transfer,lam", [(0.4, 0.5), (0.8, 0.3), (0.1, 1.2)])
def test_two_machine_damping_matches_closed_form(p_transfer, lam):
    grid = _two_machine_grid(x_line=0.3, p_transfer=p_transfer, lam=lam)
    dyn = DynamicParams.from_grid(grid, omega_s=OMEGA)
    snap = solve_power_flow(grid)
    red = reduce_network(grid, snap, dyn)
    modes = mode_set(linearize_swing(red, dyn))
    assert modes.zeta.size == 1  # drift pair is real, one oscillatory pair
    zeta_ref = analytic_two_machine_zeta(grid, snap, dyn)
    assert abs(modes.zeta[0] - zeta_ref) < 1e-6


def test_two_machine_drift_pair():
    """Zero row sums of the stiffness leave a zero eigenvalue and -lam."""
    grid = _two_machine_grid(x_line=0.3, p_transfer=0.5, lam=0.4)
    dyn = DynamicParams.from_grid(grid, omega_s=OMEGA)
    red = reduce_network(grid, solve_power_flow(grid), dyn)
    eigs = mode_set(linearize_swing(red, dyn)).eigenvalues
    reals = np.sort(eigs[np.abs(eigs.imag) <= 1e-8].real)
    assert reals.size == 2
    assert abs(reals[1]) < 1e-8          # drift mode
    assert abs(reals[0] + 0.4) < 1e-8    # uniform-damping decay mode


def test_two_machine_reduction_is_series_reactance():
    """With no loads or shunts the reduction must collapse to the exact
    series combination xd1' + x_line + xd2' between the internal nodes."""
    grid = _two_machine_grid(x_line=0.3, p_transfer=0.4)
    dyn = DynamicParams.from_grid(grid, omega_s=OMEGA)
    red = reduce_network(grid, solve_power_flow(grid), dyn)
    y = 1.0 / complex(0.0, 0.15 + 0.3 + 0.2)
    want = np.array([[y, -y], [-y, y]])
    assert np.max(np.abs(red.y_red - want)) < 1e-12


# ---------------------------------------------------------------------------
# network reduction on a meshed, lossy system
# ---------------------------------------------------------------------------


def _augmented_blocks(grid, snap, dyn):
    """Independently rebuilt (bus, machine) admittance blocks."""
    n, m = grid.n_buses, len(grid.generators)
    y_load = (snap.p_load - 1j * snap.q_load) / snap.v**2
    y_ll = build_ybus(grid) + np.diag(y_load)
    y_lg = np.zeros((n, m), dtype=complex)
    y_gg = np.zeros((m, m), dtype=complex)
    for k, g in enumerate(grid.generators):
        yg = 1.0 / (1j * dyn.xd_prime[k])
        y_ll[g.bus, g.bus] += yg
        y_lg[g.bus, k] = -yg
        y_gg[k, k] = yg
    return y_ll, y_lg, y_gg


def test_reduced_network_is_port_equivalent(ring3):
    """Driving the reduced matrix with the EMFs must reproduce the full
    augmented network's machine currents (Schur-complement property)."""
    dyn = DynamicParams.from_grid(ring3, omega_s=OMEGA)
    snap = solve_power_flow(ring3)
    red = reduce_network(ring3, snap, dyn)
    e = red.e_mag * np.exp(1j * red.delta)

    y_ll, y_lg, y_gg = _augmented_blocks(ring3, snap, dyn)
    v_bus = np.linalg.solve(y_ll, -y_lg @ e)
    i_full = y_lg.T @ v_bus + y_gg @ e
    i_red = red.y_red @ e
    assert np.max(np.abs(i_full - i_red)) < 1e-10


def test_reduction_recovers_bus_voltages(ring3):
    """The eliminated bus voltages implied by the EMFs are the solved ones."""
    dyn = DynamicParams.from_grid(ring3, omega_s=OMEGA)
    snap = solve_power_flow(ring3)
    red = reduce_network(ring3, snap, dyn)
    e = red.e_mag * np.exp(1j * red.delta)

    y_ll, y_lg, _ = _augmented_blocks(ring3, snap, dyn)
    v_bus = np.linalg.solve(y_ll, -y_lg @ e)
    assert np.max(np.abs(v_bus - snap.v * np.exp(1j * snap.theta))) < 1e-8


def test_equilibrium_power_matches_solved_output(wscc9, wscc9_dyn):
    """The transient reactance is lossless, so each machine's power at its
    internal node equals its terminal output from the solved flow (which for
    the slack machine is schedule plus network losses)."""
    snap = solve_power_flow(wscc9)
    red = reduce_network(wscc9, snap, wscc9_dyn)
    gen_bus = np.array(wscc9.gen_buses)
    terminal = snap.p_load[gen_bus] - snap.p_net[gen_bus]
    assert np.max(np.abs(red.p_mech - terminal)) < 1e-8


# ---------------------------------------------------------------------------
# eigenvalue machinery
# ---------------------------------------------------------------------------


def test_eigenvalues_construct_and_recover():
    """Plant known modes as 2x2 rotation blocks, hide them behind an
    orthogonal similarity transform, and demand exact recovery."""
    rng = np.random.default_rng(5)
    targets = []
    blocks = []
    for sigma, omega in [(-0.3, 7.0), (-0.05, 2.5), (-1.2, 0.9)]:
        targets += [complex(sigma, omega), complex(sigma, -omega)]
        blocks.append(np.array([[sigma, omega], [-omega, sigma]]))
    targets += [-2.0, 0.0]
    blocks.append(np.diag([-2.0, 0.0]))
    a_canon = np.zeros((8, 8))
    pos = 0
    for blk in blocks:
        a_canon[pos : pos + blk.shape[0], pos : pos + blk.shape[0]] = blk
        pos += blk.shape[0]
    q, _ = np.linalg.qr(rng.standard_normal((8, 8)))
    a = q @ a_canon @ q.T
    got = eigenvalues(a)
    want = np.array(sorted(targets, key=lambda z: (z.real, z.imag)))
    assert np.max(np.abs(got - want)) < 1e-8


def test_eigenvalues_sorted_and_finite_checked():
    got = eigenvalues(np.diag([3.0, -1.0, 0.5]))
    assert np.all(np.diff(got.real) >= 0)
    with pytest.raises(StabilityOracleError):
        eigenvalues(np.array([[np.nan, 0.0], [0.0, 1.0]]))


def test_damping_ratio_formula():
    eigs = np.array([-0.5 + 2.0j, -0.5 - 2.0j, -1.0 + 0.0j, 0.3 + 4.0j, 0.3 - 4.0j])
    z = damping_ratios(eigs)
    assert z.shape == (2,)
    assert z[0] == pytest.approx(0.5 / np.hypot(0.5, 2.0))
    assert z[1] == pytest.approx(-0.3 / np.hypot(0.3, 4.0))


def test_damping_score_rules():
    # aperiodic instability dominates everything
    assert mode_set(np.diag([0.1, -5.0])).damping_score() == -1.0
    # no oscillation at all -> perfect score
    assert mode_set(np.diag([-1.0, -2.0])).damping_score() == 1.0
    # otherwise the worst oscillatory ratio: s^2 + 0.4 s + 4 has zeta = 0.1
    a = np.array([[0.0, 1.0], [-4.0, -0.4]])
    assert mode_set(a).damping_score() == pytest.approx(0.2 / 2.0, abs=1e-12)
    # the score is the minimum across pairs
    ms = ModeSet(np.zeros(0, dtype=complex), np.array([0.2, 0.05]), False)
    assert ms.damping_score() == pytest.approx(0.05)


def test_dynamic_params_validation():
    with pytest.raises(StabilityOracleError):
        DynamicParams(h=np.array([1.0, -1.0]), d=np.zeros(2), xd_prime=np.ones(2))
    with pytest.raises(StabilityOracleError):
        DynamicParams(h=np.ones(2), d=np.zeros(2), xd_prime=np.ones(2), omega_s=0.0)
    with pytest.raises(StabilityOracleError):
        DynamicParams(h=np.ones(2), d=np.zeros(3), xd_prime=np.ones(2))


# ---------------------------------------------------------------------------
# end-to-end screening
# ---------------------------------------------------------------------------


def test_light_loading_is_safe(wscc9, wscc9_dyn):
    inj = base_injections(wscc9)
    light = InjectionSet(inj.p_load * 0.8, inj.q_load * 0.8, inj.p_gen * 0.8)
    snap = solve_power_flow(wscc9, light)
    label = assess_security(wscc9, snap, wscc9_dyn)
    assert label.is_safe
    assert 0.03 < label.min_damping < 0.05


def test_fixture_base_loading_is_unsafe(wscc9, wscc9_dyn):
    """The stressed base case fails the outage screen: one feeder outage has
    no solvable post-contingency flow, which is reported as the worst case."""
    snap = solve_power_flow(wscc9)
    label = assess_security(wscc9, snap, wscc9_dyn)
    assert not label.is_safe
    assert label.min_damping == -1.0
    assert label.worst_contingency == 3


def test_assessment_respects_contingency_list(wscc9, wscc9_dyn):
    snap = solve_power_flow(wscc9)
    label = assess_security(wscc9, snap, wscc9_dyn, contingencies=[4, 5])
    assert label.worst_contingency in ("base", 4, 5)
    full = assess_security(wscc9, snap, wscc9_dyn)
    assert full.min_damping <= label.min_damping + 1e-15


def test_threshold_shifts_the_verdict(wscc9, wscc9_dyn):
    inj = base_injections(wscc9)
    light = InjectionSet(inj.p_load * 0.8, inj.q_load * 0.8, inj.p_gen * 0.8)
    snap = solve_power_flow(wscc9, light)
    assert assess_security(wscc9, snap, wscc9_dyn, threshold=0.001).is_safe
    assert not assess_security(wscc9, snap, wscc9_dyn, threshold=0.5).is_safe


def test_labels_match_fixture_snapshots(wscc9, wscc9_dyn, wscc9_snapshots, wscc9_labels):
    """Labels are a pure function of the snapshot: re-assessment reproduces
    them bit for bit."""
    for snap, label in zip(wscc9_snapshots[:25], wscc9_labels[:25]):
        again = assess_security(wscc9, snap, wscc9_dyn)
        assert again.is_safe == label.is_safe
        assert again.min_damping == label.min_damping
        assert again.worst_contingency == label.worst_contingency


def test_degenerate_snapshot_rejected(wscc9, wscc9_dyn):
    snap = solve_power_flow(wscc9)
    bad = dataclasses.replace(snap, v=snap.v * 0.0)
    with pytest.raises(StabilityOracleError):
        reduce_network(wscc9, bad, wscc9_dyn)
