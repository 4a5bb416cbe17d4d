"""Forward/adjoint solves, electrode currents, cost, and noise."""

import numpy as np
import pytest

from eitrecon.fem import (
    CemSystem,
    ExcitationScheme,
    add_noise,
    assemble_and_solve_forward,
    cost,
    electrode_currents,
    load_measurements,
    residual_weights,
    rotate_pattern,
    save_measurements,
    simulate_measurements,
    solve_adjoint,
)
from eitrecon.geometry import build_disc_mesh, place_electrodes

# frozen from this implementation: uniform sigma = 0.2, default pattern,
# 2,000-element target mesh, row 0 of the measurement matrix
GOLDEN_ROW0 = np.array([
    -0.27481757962100684, 0.22167576026346245, 0.32205667740220162, -0.78087798640583206,
    0.68796829545841964, -0.12495353272006765, -0.46646749057497827, 0.18245986447284715,
    0.43154538521651176, 0.28362265002259762, -0.56004437990351985, 0.35726947127028602,
    0.32727429829171301, -0.57275523645210469, 0.27287637091073541, -0.30683256763126193,
])


def test_rotate_pattern_identity_and_period(scheme):
    base = scheme.base_pattern
    assert np.array_equal(rotate_pattern(base, 0), base)
    assert np.array_equal(rotate_pattern(base, scheme.m), base)
    once = rotate_pattern(base, 1)
    assert once[0] == base[1]
    assert abs(once.sum()) < 1e-12


def test_scheme_validates_ground_condition(scheme):
    assert abs(scheme.base_pattern.sum()) < 1e-12
    with pytest.raises(ValueError):
        ExcitationScheme(np.array([1.0, 2.0, 3.0]))
    rotations = scheme.rotations
    assert rotations.shape == (16, 16)
    for k in range(16):
        assert np.array_equal(rotations[k], np.roll(scheme.base_pattern, -k))


def test_forward_zero_pattern_gives_zero_potential(mesh_small, layout_small):
    sigma = np.full(mesh_small.n_elements, 0.2)
    u = assemble_and_solve_forward(mesh_small, layout_small, sigma, np.zeros(16))
    assert np.max(np.abs(u)) < 1e-14


def test_forward_linearity_in_pattern(mesh_small, layout_small, scheme):
    sigma = np.full(mesh_small.n_elements, 0.3)
    u1 = assemble_and_solve_forward(mesh_small, layout_small, sigma, scheme.base_pattern)
    rng = np.random.default_rng(4)
    for _ in range(3):
        a = rng.standard_normal()
        ua = assemble_and_solve_forward(mesh_small, layout_small, sigma,
                                        a * scheme.base_pattern)
        assert np.allclose(ua, a * u1, rtol=1e-10, atol=1e-14)


def test_forward_rejects_bad_sigma(mesh_small, layout_small, scheme):
    with pytest.raises(ValueError):
        assemble_and_solve_forward(mesh_small, layout_small,
                                   np.zeros(mesh_small.n_elements), scheme.base_pattern)
    with pytest.raises(ValueError):
        assemble_and_solve_forward(mesh_small, layout_small,
                                   np.full(3, 0.2), scheme.base_pattern)


def test_golden_currents_uniform_sigma(mesh, layout, scheme):
    sigma = np.full(mesh.n_elements, 0.2)
    measured = simulate_measurements(mesh, layout, sigma, scheme)
    assert np.allclose(measured[0], GOLDEN_ROW0, rtol=1e-12, atol=1e-14)


def test_golden_currents_cross_resolution(scheme):
    # electrode arcs quantize to whole boundary edges, so refinement moves
    # the covered arc by a few percent; 10% brackets that honestly
    fine = build_disc_mesh(0.1, 3456)
    lay = place_electrodes(fine, 16, 0.12, 0.1)
    measured = simulate_measurements(fine, lay, np.full(fine.n_elements, 0.2), scheme)
    rel = np.max(np.abs(measured[0] - GOLDEN_ROW0)) / np.max(np.abs(GOLDEN_ROW0))
    assert rel < 0.10


def test_currents_zero_cases(mesh_small, layout_small):
    zeros = np.zeros(mesh_small.n_vertices)
    assert np.all(electrode_currents(mesh_small, layout_small, zeros, np.zeros(16)) == 0.0)
    # potential equal to the applied voltage everywhere: no current flows
    level = 0.7
    matched = electrode_currents(mesh_small, layout_small,
                                 np.full(mesh_small.n_vertices, level),
                                 np.full(16, level))
    assert np.max(np.abs(matched)) < 1e-12


def test_current_conservation_random_fields(mesh_small, layout_small, scheme):
    rng = np.random.default_rng(6)
    for _ in range(4):
        sigma = 0.2 + 0.3 * rng.random(mesh_small.n_elements)
        measured = simulate_measurements(mesh_small, layout_small, sigma, scheme)
        scale = np.max(np.abs(measured), axis=1)
        assert np.all(np.abs(measured.sum(axis=1)) <= 1e-8 * scale)


def test_rotation_symmetry_on_balanced_mesh(scheme):
    # angular subdivision divisible by 16, so the discrete problem is
    # rotation equivariant up to mesh asymmetry
    mesh = build_disc_mesh(0.1, 3456)
    layout = place_electrodes(mesh, 16, 0.12, 0.1)
    measured = simulate_measurements(mesh, layout, np.full(mesh.n_elements, 0.2), scheme)
    scale = np.max(np.abs(measured[0]))
    for k in range(16):
        assert np.max(np.abs(measured[k] - np.roll(measured[0], -k))) <= 1e-3 * scale


def test_run_scheme_matches_single_solves(mesh_small, layout_small, scheme):
    sigma = np.full(mesh_small.n_elements, 0.25)
    system = CemSystem(mesh_small, layout_small)
    potentials, currents, _ = system.run_scheme(sigma, scheme)
    for k in (0, 5, 11):
        pattern = rotate_pattern(scheme.base_pattern, k)
        u = assemble_and_solve_forward(mesh_small, layout_small, sigma, pattern)
        assert np.allclose(potentials[:, k], u, rtol=1e-12, atol=1e-15)
        assert np.allclose(currents[k],
                           electrode_currents(mesh_small, layout_small, u, pattern),
                           rtol=1e-12, atol=1e-15)


def test_run_scheme_rejects_mismatched_sizes(mesh_small, layout_small):
    other = ExcitationScheme(np.array([1.0, -1.0]))
    with pytest.raises(ValueError):
        CemSystem(mesh_small, layout_small).run_scheme(
            np.full(mesh_small.n_elements, 0.2), other)


def test_cost_basics():
    rng = np.random.default_rng(13)
    d = rng.standard_normal((16, 16))
    assert cost(d, d) == 0.0
    assert cost(d, d + 1.0) == pytest.approx(256.0, rel=1e-12)
    with pytest.raises(ValueError):
        cost(d, np.zeros((4, 4)))


def test_cost_matches_double_loop_oracle():
    rng = np.random.default_rng(14)
    d = rng.standard_normal((16, 16))
    t = rng.standard_normal((16, 16))
    oracle = 0.0
    for k in range(16):
        for ell in range(16):
            oracle += (d[k, ell] - t[k, ell]) ** 2
    assert cost(d, t) == pytest.approx(oracle, rel=1e-12)


def test_cost_permutation_invariant():
    rng = np.random.default_rng(15)
    d = rng.standard_normal((16, 16))
    t = rng.standard_normal((16, 16))
    rows = rng.permutation(16)
    cols = rng.permutation(16)
    assert cost(d, t) == pytest.approx(cost(d[rows][:, cols], t[rows][:, cols]), rel=1e-12)


def test_adjoint_zero_when_data_matched(mesh_small, layout_small, scheme):
    sigma = np.full(mesh_small.n_elements, 0.2)
    pattern = scheme.base_pattern
    u = assemble_and_solve_forward(mesh_small, layout_small, sigma, pattern)
    matched = electrode_currents(mesh_small, layout_small, u, pattern)
    psi = solve_adjoint(mesh_small, layout_small, sigma, u, pattern, matched)
    assert np.max(np.abs(psi)) < 1e-12


def test_adjoint_linear_in_residual(mesh_small, layout_small, scheme):
    sigma = np.full(mesh_small.n_elements, 0.2)
    pattern = scheme.base_pattern
    u = assemble_and_solve_forward(mesh_small, layout_small, sigma, pattern)
    currents = electrode_currents(mesh_small, layout_small, u, pattern)
    psi1 = solve_adjoint(mesh_small, layout_small, sigma, u, pattern, currents + 0.1)
    psi2 = solve_adjoint(mesh_small, layout_small, sigma, u, pattern, currents + 0.2)
    assert np.allclose(psi2, 2.0 * psi1, rtol=1e-10, atol=1e-15)


def test_residual_weights_sign_and_scale():
    currents = np.array([[1.0, 2.0]])
    target = np.array([[0.5, 3.0]])
    assert np.array_equal(residual_weights(currents, target), [[-1.0, 2.0]])


def test_system_matrix_symmetric(mesh_small, layout_small):
    rng = np.random.default_rng(16)
    sigma = 0.2 + 0.2 * rng.random(mesh_small.n_elements)
    matrix = CemSystem(mesh_small, layout_small).assemble(sigma)
    gap = np.abs((matrix - matrix.T).data)
    scale = np.max(np.abs(matrix.data))
    assert gap.size == 0 or np.max(gap) <= 1e-12 * scale


def test_currents_continuous_in_sigma(mesh_small, layout_small, scheme):
    sigma = np.full(mesh_small.n_elements, 0.2)
    base = simulate_measurements(mesh_small, layout_small, sigma, scheme)
    bumped = simulate_measurements(mesh_small, layout_small, sigma * (1 + 1e-6), scheme)
    assert np.linalg.norm(bumped - base) <= 1e-4 * np.linalg.norm(base)


def test_add_noise_contract(d_star):
    rng = np.random.default_rng(17)
    assert np.array_equal(add_noise(d_star, 0.0, rng), d_star)
    a = add_noise(d_star, 0.005, np.random.default_rng(99))
    b = add_noise(d_star, 0.005, np.random.default_rng(99))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        add_noise(d_star, -0.1, rng)


def test_add_noise_empirical_level(d_star):
    rng = np.random.default_rng(18)
    deviations = []
    for _ in range(40):
        noisy = add_noise(d_star, 0.005, rng)
        deviations.append((noisy / d_star - 1.0).ravel())
    std = np.std(np.concatenate(deviations))
    assert std == pytest.approx(0.005, rel=0.05)


def test_measurements_roundtrip(tmp_path, d_star):
    path = tmp_path / "d.txt"
    save_measurements(d_star, path)
    assert np.array_equal(load_measurements(path), d_star)
    bad = tmp_path / "bad.txt"
    bad.write_text("1.0,oops\n")
    with pytest.raises(ValueError):
        load_measurements(bad)
