import numpy as np
import pytest
import scipy.sparse as sp

from fabtrack.energy import TERMS, DeformState, EnergyInputs, EnergyWeights, evaluate_terms
from fabtrack.mesh import build_template
from fabtrack.solver import (ENERGY_LOG_FIELDS, SolverError, SolverOptions, SparseNormalSystem,
                             assemble_normal_equations, gauss_newton, solve_normal_equations,
                             write_energy_log)
from fabtrack.synth import make_grid_mesh, rotate_about

from fdcheck import jacobian_scene


def only(**lams):
    base = {f"lambda_{t}": 0.0 for t in TERMS}
    base.update({f"lambda_{k}": v for k, v in lams.items()})
    return EnergyWeights(**base)


def ten_vertex_mesh():
    tex = np.full((8, 8, 3), 50.0)
    m = make_grid_mesh(5, 2, 400, 100, 2000.0, tex)
    assert m.n_vertices == 10
    return m


def dense_normal_equations(terms, weights, n):
    JtJ = np.zeros((6 * n, 6 * n))
    g = np.zeros(6 * n)
    for name, t in terms.items():
        J = t.dense_jacobian(n)
        r = t.residuals.ravel()
        lam = weights.weight(name)
        JtJ += lam * J.T @ J
        g += lam * J.T @ r
    return JtJ, g


def test_dense_oracle_ten_vertices(rng):
    m = ten_vertex_mesh()
    V = m.vertices + rng.normal(0, 5, m.vertices.shape)
    s = DeformState(V=V, Phi=rng.normal(0, 0.2, (10, 3)), V_prev=m.vertices,
                    V_prev2=m.vertices - 1.0)
    w = EnergyWeights(lambda_photo=0, lambda_tex=0, lambda_vel=0.3, lambda_acc=0.2)
    terms, _ = evaluate_terms(s, m, EnergyInputs(K=None), w)
    sysm = assemble_normal_equations(terms, w, 10)
    JtJ, g = dense_normal_equations(terms, w, 10)
    scale = max(1.0, np.abs(JtJ).max())
    assert np.abs(sysm.JtJ.toarray() - JtJ).max() <= 1e-10 * scale
    np.testing.assert_allclose(sysm.gradient, g, atol=1e-10 * max(1.0, np.abs(g).max()))


def test_dense_oracle_with_image_terms():
    sc = jacobian_scene(2)
    w = EnergyWeights(lambda_tex=3.0)
    inp = EnergyInputs(K=sc["K"], frame_smoothed=sc["frame"], field=sc["field"],
                       table=sc["table"])
    terms, _ = evaluate_terms(sc["state"], sc["mesh"], inp, w)
    n = sc["mesh"].n_vertices
    sysm = assemble_normal_equations(terms, w, n)
    JtJ, g = dense_normal_equations(terms, w, n)
    assert np.abs(sysm.JtJ.toarray() - JtJ).max() <= 1e-10 * np.abs(JtJ).max()


def test_velocity_only_is_scaled_identity(small_grid):
    s = DeformState(V=small_grid.vertices + 1.0, Phi=np.zeros((36, 3)), V_prev=small_grid.vertices)
    w = only(vel=0.7)
    terms, _ = evaluate_terms(s, small_grid, EnergyInputs(K=None), w)
    A = assemble_normal_equations(terms, w, 36).JtJ.toarray()
    expected = np.kron(np.eye(36), np.diag([0.7, 0.7, 0.7, 0, 0, 0]))
    np.testing.assert_array_equal(A, expected)


def test_disconnected_components_no_cross_blocks():
    tex = np.full((8, 8, 3), 50.0)
    V = [[0, 0, 1], [1, 0, 1], [0, 1, 1], [5, 0, 1], [6, 0, 1], [5, 1, 1]]
    m = build_template(V, [[0, 1, 2], [3, 4, 5]], [[0, 0], [4, 0], [0, 4]] * 2, tex)
    s = DeformState(V=m.vertices + 0.1, Phi=np.zeros((6, 3)), V_prev=m.vertices)
    w = EnergyWeights(lambda_photo=0, lambda_tex=0)
    terms, _ = evaluate_terms(s, m, EnergyInputs(K=None, use_acceleration=False), w)
    pattern = assemble_normal_equations(terms, w, 6).block_pattern()
    assert all((a < 3) == (b < 3) for a, b in pattern)


def test_assembly_rejects_non_finite(small_grid):
    s = DeformState(V=small_grid.vertices.copy(), Phi=np.zeros((36, 3)), V_prev=small_grid.vertices)
    s.V[0, 0] = np.nan
    w = only(vel=1.0)
    terms, _ = evaluate_terms(s, small_grid, EnergyInputs(K=None), w)
    with pytest.raises(SolverError, match="vel"):
        assemble_normal_equations(terms, w, 36)


def _system(A, b):
    n = A.shape[0] // 6
    return SparseNormalSystem(sp.bsr_matrix(A, blocksize=(6, 6)), -b, n)


def test_block_diagonal_system_one_iteration(rng):
    blocks = []
    for _ in range(5):
        M = rng.normal(size=(6, 6))
        blocks.append(M @ M.T + 6 * np.eye(6))
    A = sp.block_diag(blocks).toarray()
    b = rng.normal(size=30)
    res = solve_normal_equations(_system(A, b), pcg_tol=1e-12)
    assert res.iterations == 1
    np.testing.assert_allclose(res.step, np.linalg.solve(A, b), rtol=1e-10)


def test_random_spd_against_dense_solve(rng):
    M = rng.normal(size=(60, 60))
    A = M @ M.T + 60 * np.eye(60)
    b = rng.normal(size=60)
    res = solve_normal_equations(_system(A, b), pcg_iters=500, pcg_tol=1e-12)
    np.testing.assert_allclose(res.step, np.linalg.solve(A, b), atol=1e-6)


def test_zero_gradient_zero_step():
    res = solve_normal_equations(_system(np.eye(12), np.zeros(12)))
    assert not res.step.any() and res.iterations == 0


def test_untouched_unknowns_pinned(small_grid):
    # velocity alone leaves the rotation unknowns free
    s = DeformState(V=small_grid.vertices + 2.0, Phi=np.zeros((36, 3)), V_prev=small_grid.vertices)
    w = only(vel=1.0)
    terms, _ = evaluate_terms(s, small_grid, EnergyInputs(K=None), w)
    res = solve_normal_equations(assemble_normal_equations(terms, w, 36))
    step = res.step.reshape(36, 6)
    np.testing.assert_allclose(step[:, :3], -2.0, atol=1e-9)
    assert not step[:, 3:].any()


def test_singular_preconditioner_damps_then_recovers():
    A = np.zeros((6, 6))
    A[0, 0] = 1.0
    b = np.ones(6)
    res = solve_normal_equations(_system(A, b))
    assert res.mu >= 1e-8 and np.isfinite(res.step).all()


def test_velocity_only_converges_in_one_step(small_grid, rng):
    Vp = small_grid.vertices
    s = DeformState(V=Vp + rng.normal(0, 3, Vp.shape), Phi=np.zeros((36, 3)), V_prev=Vp)
    gn = gauss_newton(s, small_grid, EnergyInputs(K=None), only(vel=1.0),
                      SolverOptions(mu0=0.0, pcg_tol=1e-12))
    accepted = [r for r in gn.log if r.accepted]
    assert accepted[1].iteration == 1
    np.testing.assert_allclose(gn.state.V, Vp, atol=1e-8)
    assert gn.converged


def test_monotone_energy_on_noisy_rigid_shape(small_grid, rng):
    V = rotate_about(small_grid.vertices, small_grid.vertices.mean(0), (1, 1, 0), 15.0)
    s = DeformState(V=V + rng.normal(0, 10, V.shape), Phi=np.zeros((36, 3)), V_prev=V)
    gn = gauss_newton(s, small_grid, EnergyInputs(K=None), only(edge=10.0, smooth=2.0),
                      SolverOptions(max_iters=15))
    acc = gn.accepted_energies()
    assert len(acc) > 2
    assert all(b < a for a, b in zip(acc, acc[1:]))
    assert gn.log[0].iteration == 0


def test_optimal_state_immediate_convergence(small_grid):
    V = small_grid.vertices
    s = DeformState(V=V.copy(), Phi=np.zeros((36, 3)), V_prev=V.copy(), V_prev2=V.copy())
    gn = gauss_newton(s, small_grid, EnergyInputs(K=None), EnergyWeights(lambda_photo=0,
                                                                         lambda_tex=0))
    assert gn.converged and gn.iterations == 1
    np.testing.assert_array_equal(gn.state.V, V)


def test_non_finite_initial_energy(small_grid):
    V = small_grid.vertices.copy()
    V[3, 2] = np.inf
    s = DeformState(V=V, Phi=np.zeros((36, 3)), V_prev=small_grid.vertices)
    with pytest.raises(SolverError, match="non-finite"):
        gauss_newton(s, small_grid, EnergyInputs(K=None), only(vel=1.0))


def test_options_validation():
    with pytest.raises(ValueError):
        SolverOptions(max_iters=0)
    with pytest.raises(ValueError):
        SolverOptions(mu_shrink=1.5)


def test_energy_log_csv(tmp_path, small_grid, rng):
    Vp = small_grid.vertices
    s = DeformState(V=Vp + rng.normal(0, 3, Vp.shape), Phi=np.zeros((36, 3)), V_prev=Vp)
    gn = gauss_newton(s, small_grid, EnergyInputs(K=None), only(vel=1.0, edge=1.0))
    p = tmp_path / "energy.csv"
    write_energy_log(p, gn.log)
    write_energy_log(p, gn.log, append=True)
    lines = p.read_text().splitlines()
    assert lines[0].split(",") == ENERGY_LOG_FIELDS
    assert len(lines) == 1 + 2 * len(gn.log)
