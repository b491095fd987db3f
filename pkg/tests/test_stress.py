"""Thermoelastic equilibrium: von Mises reduction, recovery, linearity."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from rampopt import heat, linsolve, stress
from rampopt.fem import MaterialProperties
from rampopt.mesh import (
    PatchLabel,
    boundary_nodes,
    generate_annular_sector,
    generate_box,
    promote_to_p2,
    retag,
)


@dataclass
class Sched:
    t_e: np.ndarray
    omega: np.ndarray
    dt: float


def box_p2(n=2, lx=0.1, ly=0.1, lz=0.1):
    return promote_to_p2(generate_box(lx, ly, lz, n, n, n))


def pins_on(mesh, component, predicate):
    xyz = mesh.nodes
    nodes = np.flatnonzero(predicate(xyz))
    return 3 * nodes + component


# ---------------------------------------------------------------------------
# von Mises reduction
# ---------------------------------------------------------------------------


def test_von_mises_uniaxial():
    s = 137.5e6
    assert stress.von_mises(np.diag([s, 0.0, 0.0])) == pytest.approx(s)


def test_von_mises_hydrostatic_is_zero():
    assert stress.von_mises(-3.2e8 * np.eye(3)) == pytest.approx(0.0, abs=1e-3)


def test_von_mises_pure_shear():
    tau = 5.0e7
    sig = np.zeros((3, 3))
    sig[0, 1] = sig[1, 0] = tau
    assert stress.von_mises(sig) == pytest.approx(np.sqrt(3.0) * tau)


def test_von_mises_rejects_asymmetric():
    sig = np.zeros((3, 3))
    sig[0, 1] = 1.0
    with pytest.raises(ValueError):
        stress.von_mises(sig)


def test_von_mises_field_matches_scalar():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 3, 3))
    sym = 0.5 * (a + np.swapaxes(a, -1, -2))
    batch = stress.von_mises_field(sym)
    for i in range(5):
        assert batch[i] == pytest.approx(stress.von_mises(sym[i]), rel=1e-12)


# ---------------------------------------------------------------------------
# Stress recovery on manufactured displacement fields
# ---------------------------------------------------------------------------


def test_recovery_exact_for_linear_displacement():
    mesh = box_p2(2)
    mat = MaterialProperties()
    solver = stress.ElasticSolver(mesh, mat, extra_pins=stress.rigid_body_pins(mesh))
    A = np.array([[3.0e-4, 1.0e-4, 0.0], [1.0e-4, -2.0e-4, 5.0e-5],
                  [0.0, 5.0e-5, 1.0e-4]])
    u = (mesh.nodes @ A.T).ravel()
    T0 = np.full(mesh.num_p1_nodes, mat.T0)
    snap = solver._recover(u, T0)

    eps = 0.5 * (A + A.T)
    sig = 2 * mat.mu * eps + mat.lam * np.trace(eps) * np.eye(3)
    expect = stress.von_mises(sig) / 1.0e6
    assert np.allclose(snap.sigma_v, expect, rtol=1e-8)


def test_free_thermal_expansion_is_stress_free():
    mesh = box_p2(2)
    mat = MaterialProperties()
    dT = 100.0
    snap = stress.solve_step(
        mesh, mat, np.full(mesh.num_p1_nodes, mat.T0 + dT), 0.0,
        extra_pins=stress.rigid_body_pins(mesh),
    )
    # scale: a fully blocked bar at the same temperature rise
    blocked = mat.alpha * mat.E * dT / 1.0e6
    assert snap.max_value < 1e-6 * blocked
    # the body really moved: corner-to-corner stretch close to alpha*dT
    span = snap.displacement.max(axis=0) - snap.displacement.min(axis=0)
    assert np.allclose(span, mat.alpha * dT * 0.1, rtol=1e-6)


def test_clamped_uniform_heating_is_hydrostatic():
    mesh = box_p2(2)
    mat = MaterialProperties()
    clamped = boundary_nodes(mesh)
    pins = (3 * clamped[:, None] + np.arange(3)).ravel()
    snap = stress.solve_step(
        mesh, mat, np.full(mesh.num_p1_nodes, mat.T0 + 80.0), 0.0,
        extra_pins=pins,
    )
    assert np.abs(snap.displacement).max() < 1e-12
    assert snap.max_value < 1e-6 * (mat.alpha * mat.E * 80.0 / 1.0e6)


def test_axially_blocked_bar_reaches_alpha_e_delta_t():
    mesh = box_p2(3, lx=0.3)
    mat = MaterialProperties()
    tol = 1e-9
    pins = np.concatenate([
        pins_on(mesh, 0, lambda x: np.abs(x[:, 0]) < tol),
        pins_on(mesh, 0, lambda x: np.abs(x[:, 0] - 0.3) < tol),
        pins_on(mesh, 1, lambda x: np.abs(x[:, 1]) < tol),
        pins_on(mesh, 2, lambda x: np.abs(x[:, 2]) < tol),
    ])
    dT = 100.0
    snap = stress.solve_step(
        mesh, mat, np.full(mesh.num_p1_nodes, mat.T0 + dT), 0.0,
        extra_pins=pins,
    )
    expect = mat.alpha * mat.E * dT / 1.0e6   # uniaxial sigma_xx = -E alpha dT
    assert np.allclose(snap.sigma_v, expect, rtol=1e-8)


# ---------------------------------------------------------------------------
# Linearity of the coupled response
# ---------------------------------------------------------------------------


def sector_solver(method="auto"):
    mesh = promote_to_p2(generate_annular_sector(
        0.15, 0.55, 0.12, np.pi / 2, resolution="smoke"))
    mat = MaterialProperties()
    settings = linsolve.SolverSettings(method=method)
    return mesh, mat, stress.ElasticSolver(mesh, mat, settings=settings)


def test_superposition_of_thermal_loads():
    mesh, mat, solver = sector_solver()
    rng = np.random.default_rng(11)
    T1 = mat.T0 + 50.0 + 10.0 * rng.random(mesh.num_p1_nodes)
    T2 = mat.T0 + 200.0 * mesh.nodes[: mesh.num_p1_nodes, 0]
    u1 = solver.solve_step(T1, 0.0).displacement
    u2 = solver.solve_step(T2, 0.0).displacement
    u12 = solver.solve_step(T1 + T2 - mat.T0, 0.0).displacement
    scale = np.abs(u12).max()
    assert np.abs(u1 + u2 - u12).max() < 1e-9 * scale


def test_rotation_scales_with_omega_squared():
    mesh, mat, solver = sector_solver()
    T0 = np.full(mesh.num_p1_nodes, mat.T0)
    u1 = solver.solve_step(T0, 40.0).displacement
    u2 = solver.solve_step(T0, 80.0).displacement
    scale = np.abs(u2).max()
    assert scale > 0.0
    assert np.abs(4.0 * u1 - u2).max() < 1e-9 * scale


def test_combined_load_superposes():
    mesh, mat, solver = sector_solver()
    T = mat.T0 + 300.0 * mesh.nodes[: mesh.num_p1_nodes, 0]
    u_th = solver.solve_step(T, 0.0).displacement
    u_rot = solver.solve_step(np.full(mesh.num_p1_nodes, mat.T0), 250.0).displacement
    u_both = solver.solve_step(T, 250.0).displacement
    scale = np.abs(u_both).max()
    assert np.abs(u_th + u_rot - u_both).max() < 1e-9 * scale


def test_cg_and_direct_paths_agree():
    mesh, mat, _ = sector_solver()
    T = mat.T0 + 100.0 * mesh.nodes[: mesh.num_p1_nodes, 0]
    direct = stress.ElasticSolver(mesh, mat).solve_step(T, 120.0)
    cg = stress.ElasticSolver(
        mesh, mat, settings=linsolve.SolverSettings(method="cg", rel_tol=1e-12)
    ).solve_step(T, 120.0)
    scale = np.abs(direct.displacement).max()
    assert np.abs(direct.displacement - cg.displacement).max() < 1e-6 * scale
    assert cg.max_value == pytest.approx(direct.max_value, rel=1e-6)


# ---------------------------------------------------------------------------
# Constraints and rigid modes
# ---------------------------------------------------------------------------


def test_unpinned_body_raises_rigid_body_mode():
    mesh = box_p2(2)
    mat = MaterialProperties()
    with pytest.raises(stress.RigidBodyMode):
        stress.solve_step(
            mesh, mat, np.full(mesh.num_p1_nodes, mat.T0 + 50.0), 0.0
        )


def test_sector_auto_pin_closes_axial_translation():
    mesh = promote_to_p2(generate_annular_sector(
        0.15, 0.55, 0.12, np.pi / 2, resolution="smoke"))
    mat = MaterialProperties()
    from rampopt.fem import symmetry_dofs

    sym = set(symmetry_dofs(mesh).tolist())
    solver = stress.ElasticSolver(mesh, mat)
    added = set(solver.constrained.tolist()) - sym
    assert len(added) == 1
    assert next(iter(added)) % 3 == 2
    snap = solver.solve_step(np.full(mesh.num_p1_nodes, mat.T0), 60.0)
    assert np.isfinite(snap.displacement).all()
    assert snap.max_value > 0.0


def test_rigid_body_pins_block_exactly_six_dofs():
    mesh = box_p2(2)
    pins = stress.rigid_body_pins(mesh)
    assert len(pins) == 6
    assert len(set(pins.tolist())) == 6


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------


def test_run_tracks_peak_over_time():
    mesh = promote_to_p2(generate_annular_sector(
        0.15, 0.55, 0.12, np.pi / 2, resolution="smoke"))
    mat = MaterialProperties()
    n = 5
    sched = Sched(
        t_e=np.full(n, mat.T0),
        omega=np.linspace(10.0, 50.0, n),
        dt=90.0,
    )
    thermal = heat.HeatSolver(mesh, mat).run(sched)
    traj = stress.run(mesh, mat, sched, thermal)
    assert len(traj.snapshots) == n + 1
    assert traj.snapshots[0].max_value == pytest.approx(0.0, abs=1e-12)
    peaks = [s.max_value for s in traj.snapshots]
    assert peaks == sorted(peaks)          # pure spin-up: monotone in omega
    assert traj.argmax_step == n
    assert traj.max_over_time == pytest.approx(peaks[-1])


def test_run_is_deterministic():
    mesh = promote_to_p2(generate_annular_sector(
        0.15, 0.55, 0.12, np.pi / 2, resolution="smoke"))
    mat = MaterialProperties()
    sched = Sched(
        t_e=np.array([400.0, 800.0]), omega=np.array([20.0, 60.0]), dt=90.0
    )
    thermal = heat.HeatSolver(mesh, mat, lumped=True).run(sched)
    a = stress.run(mesh, mat, sched, thermal)
    b = stress.run(mesh, mat, sched, thermal)
    assert a.argmax_step == b.argmax_step
    for sa, sb in zip(a.snapshots, b.snapshots):
        assert sa.max_node == sb.max_node
        assert np.array_equal(sa.sigma_v, sb.sigma_v)


def test_snapshot_argmax_is_lowest_tied_node():
    mesh = box_p2(1)
    mat = MaterialProperties()
    solver = stress.ElasticSolver(mesh, mat, extra_pins=stress.rigid_body_pins(mesh))
    # uniform uniaxial stretch: every element vertex carries the same stress
    u = np.zeros((len(mesh.nodes), 3))
    u[:, 0] = 1e-4 * mesh.nodes[:, 0]
    snap = solver._recover(u.ravel(), np.full(mesh.num_p1_nodes, mat.T0))
    assert snap.sigma_v.std() < 1e-9 * snap.sigma_v.mean()
    assert snap.max_node == int(mesh.tets.min())


def test_nodal_average_of_uniform_field_is_uniform():
    mesh = box_p2(2)
    mat = MaterialProperties()
    solver = stress.ElasticSolver(mesh, mat, extra_pins=stress.rigid_body_pins(mesh))
    u = np.zeros((len(mesh.nodes), 3))
    u[:, 0] = 1e-4 * mesh.nodes[:, 0]
    snap = solver._recover(u.ravel(), np.full(mesh.num_p1_nodes, mat.T0))
    avg = snap.nodal_average(mesh.tets, mesh.num_p1_nodes)
    assert np.allclose(avg, snap.sigma_v.mean(), rtol=1e-9)


def test_mismatched_trajectory_rejected():
    mesh = promote_to_p2(generate_annular_sector(
        0.15, 0.55, 0.12, np.pi / 2, resolution="smoke"))
    mat = MaterialProperties()
    sched = Sched(t_e=np.array([500.0]), omega=np.array([30.0]), dt=60.0)
    thermal = heat.HeatSolver(mesh, mat, lumped=True).run(sched)
    bad = Sched(t_e=np.array([500.0, 500.0]), omega=np.array([30.0, 30.0]), dt=60.0)
    with pytest.raises(ValueError):
        stress.run(mesh, mat, bad, thermal)
