"""Conductivity fields: samples, rasterization, blends, errors, persistence."""

import math

import numpy as np
import pytest

from eitrecon.field import (
    BlendControl,
    SampleCollection,
    SampleParam,
    blend,
    l2_error,
    load_collection,
    load_mask_field,
    make_true_model,
    rasterize_sample,
    sample_random,
    save_collection,
)

SIGMA_C = 0.4
SIGMA_H = 0.2


def full_disc_sample(mesh):
    return SampleParam(np.array([[0.0, 0.0, 2.0 * mesh.radius]]))


def outside_sample(mesh):
    # touches the domain circle but covers no centroid
    return SampleParam(np.array([[mesh.radius + 0.01, 0.0, 0.0109]]))


def test_sample_param_rejects_bad_circles():
    with pytest.raises(ValueError):
        SampleParam(np.array([[0.0, 0.0, -0.01]]))
    with pytest.raises(ValueError):
        SampleParam(np.zeros((1, 4)))
    sample = SampleParam(np.array([[0.5, 0.0, 0.01]]))
    with pytest.raises(ValueError):
        sample.validate(radius=0.1)  # center beyond R + r
    with pytest.raises(ValueError):
        SampleParam(np.tile([0.0, 0.0, 0.01], (9, 1))).validate(0.1, n_c_max=8)


def test_sample_random_respects_restrictions():
    rng = np.random.default_rng(1)
    for _ in range(200):
        s = sample_random(rng, 0.1, 8, 0.3)
        assert 1 <= s.n_circles <= 8
        assert np.all(s.circles[:, 2] > 0.0)
        assert np.all(s.circles[:, 2] <= 0.3 * 0.1)
        s.validate(0.1, n_c_max=8)


def test_sample_random_single_circle_degenerate():
    rng = np.random.default_rng(2)
    for _ in range(20):
        assert sample_random(rng, 0.1, 1, 0.3).n_circles == 1


def test_sample_random_count_distribution_uniform():
    rng = np.random.default_rng(5)
    draws = 10_000
    counts = np.bincount(
        [sample_random(rng, 0.1, 8, 0.3).n_circles for _ in range(draws)],
        minlength=9)[1:]
    expected = draws / 8.0
    three_sigma = 3.0 * math.sqrt(draws * (1 / 8) * (7 / 8))
    assert np.all(np.abs(counts - expected) <= three_sigma)


def test_rasterize_full_disc_and_outside(mesh):
    assert np.all(rasterize_sample(mesh, full_disc_sample(mesh), SIGMA_C, SIGMA_H)
                  == SIGMA_C)
    assert np.all(rasterize_sample(mesh, outside_sample(mesh), SIGMA_C, SIGMA_H)
                  == SIGMA_H)


def test_rasterize_small_circle_area_fraction(mesh):
    sample = SampleParam(np.array([[0.0, 0.0, 0.03]]))
    field = rasterize_sample(mesh, sample, SIGMA_C, SIGMA_H)
    covered = mesh.element_areas[field == SIGMA_C].sum()
    fraction = covered / mesh.element_areas.sum()
    assert abs(fraction - 0.09) <= 0.02


def test_rasterize_deterministic(mesh):
    sample = SampleParam(np.array([[0.02, -0.01, 0.025], [-0.03, 0.0, 0.015]]))
    a = rasterize_sample(mesh, sample, SIGMA_C, SIGMA_H)
    b = rasterize_sample(mesh, sample, SIGMA_C, SIGMA_H)
    assert np.array_equal(a, b)


def test_blend_one_hot_matches_rasterize(mesh):
    rng = np.random.default_rng(7)
    samples = [sample_random(rng, 0.1, 4) for _ in range(3)]
    for i in range(3):
        weights = np.zeros(3)
        weights[i] = 1.0
        mixed = blend(mesh, BlendControl(samples, weights), SIGMA_C, SIGMA_H)
        assert np.array_equal(mixed, rasterize_sample(mesh, samples[i], SIGMA_C, SIGMA_H))


def test_blend_of_identical_samples(mesh):
    rng = np.random.default_rng(8)
    sample = sample_random(rng, 0.1, 4)
    control = BlendControl([sample] * 4, np.array([0.1, 0.2, 0.3, 0.4]))
    mixed = blend(mesh, control, SIGMA_C, SIGMA_H)
    expected = rasterize_sample(mesh, sample, SIGMA_C, SIGMA_H)
    assert np.allclose(mixed, expected, rtol=1e-12)


def test_blend_midpoint_of_full_and_empty(mesh):
    control = BlendControl([full_disc_sample(mesh), outside_sample(mesh)],
                           np.array([0.5, 0.5]))
    mixed = blend(mesh, control, SIGMA_C, SIGMA_H)
    assert np.allclose(mixed, 0.5 * (SIGMA_C + SIGMA_H), rtol=1e-12)


def test_blend_affine_in_weights(mesh):
    # underwrites the exactness of the weight gradient
    rng = np.random.default_rng(9)
    samples = [sample_random(rng, 0.1, 5) for _ in range(6)]
    fields = np.array([rasterize_sample(mesh, s, SIGMA_C, SIGMA_H) for s in samples])
    for _ in range(5):
        a = rng.dirichlet(np.ones(6))
        b = rng.dirichlet(np.ones(6))
        lhs = (blend(mesh, BlendControl(samples, a), SIGMA_C, SIGMA_H)
               - blend(mesh, BlendControl(samples, b), SIGMA_C, SIGMA_H))
        rhs = fields.T @ (a - b)
        assert np.allclose(lhs, rhs, atol=1e-12)


def test_blend_stays_between_values(mesh):
    rng = np.random.default_rng(10)
    samples = [sample_random(rng, 0.1, 8) for _ in range(5)]
    mixed = blend(mesh, BlendControl(samples, rng.dirichlet(np.ones(5))),
                  SIGMA_C, SIGMA_H)
    assert np.all(mixed >= SIGMA_H - 1e-12)
    assert np.all(mixed <= SIGMA_C + 1e-12)


def test_blend_rejects_off_simplex_weights(mesh):
    control = BlendControl([full_disc_sample(mesh), outside_sample(mesh)],
                           np.array([0.7, 0.7]))
    with pytest.raises(ValueError):
        blend(mesh, control, SIGMA_C, SIGMA_H)


def test_true_model_binary_and_uniform(mesh):
    regions = [(0.0, 0.05, 0.036), (-0.0433, -0.025, 0.030)]
    field = make_true_model(mesh, regions, SIGMA_C, SIGMA_H)
    assert set(np.unique(field)) == {SIGMA_H, SIGMA_C}
    assert np.all(make_true_model(mesh, [], SIGMA_C, SIGMA_H) == SIGMA_H)


def test_true_model_per_region_values(mesh):
    regions = [(0.0, 0.05, 0.036, 0.3),
               (-0.0433, -0.025, 0.030, 0.4),
               (0.0433, -0.025, 0.022, 0.35)]
    field = make_true_model(mesh, regions, SIGMA_C, SIGMA_H)
    assert set(np.unique(field)) == {SIGMA_H, 0.3, 0.4, 0.35}


def test_l2_error_basics(mesh):
    a = np.full(mesh.n_elements, 0.3)
    assert l2_error(mesh, a, a) == 0.0
    b = a + 0.05
    total_area = mesh.element_areas.sum()
    assert l2_error(mesh, a, b) == pytest.approx(0.05 * math.sqrt(total_area), rel=1e-12)
    with pytest.raises(ValueError):
        l2_error(mesh, a, np.ones(3))


def test_l2_error_matches_extended_precision_sum(mesh):
    rng = np.random.default_rng(11)
    a = rng.random(mesh.n_elements) + 0.1
    b = rng.random(mesh.n_elements) + 0.1
    terms = [float(w) * (float(x) - float(y)) ** 2
             for w, x, y in zip(mesh.element_areas, a, b)]
    oracle = math.sqrt(math.fsum(terms))
    assert l2_error(mesh, a, b) == pytest.approx(oracle, rel=1e-12)


def test_collection_roundtrip(tmp_path):
    rng = np.random.default_rng(12)
    samples = [sample_random(rng, 0.1, 8) for _ in range(7)]
    data = [rng.standard_normal((16, 16)) for _ in range(7)]
    coll = SampleCollection(samples=samples, sigma_pair=(SIGMA_C, SIGMA_H), data=data)
    spath, dpath = tmp_path / "samples.txt", tmp_path / "data.txt"
    save_collection(coll, spath, dpath)
    again = load_collection(spath, (SIGMA_C, SIGMA_H), dpath, m=16)
    assert len(again) == 7
    for s0, s1 in zip(coll.samples, again.samples):
        assert np.array_equal(s0.circles, s1.circles)
    for d0, d1 in zip(coll.data, again.data):
        assert np.array_equal(d0, d1)


def test_collection_load_rejects_malformed(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("2 0.0 0.0 0.01\n")  # promises 2 circles, provides 1
    with pytest.raises(ValueError):
        load_collection(bad, (SIGMA_C, SIGMA_H))
    data = tmp_path / "data.txt"
    data.write_text("1.0,2.0\n")
    good = tmp_path / "good.txt"
    good.write_text("1 0.0 0.0 0.01\n")
    with pytest.raises(ValueError):
        load_collection(good, (SIGMA_C, SIGMA_H), data, m=16)


def test_mask_field_halves_and_errors(mesh, tmp_path):
    size = 64
    grid = np.zeros((size, size), dtype=int)
    grid[: size // 2, :] = 1  # top half of the bounding square
    path = tmp_path / "mask.txt"
    np.savetxt(path, grid, fmt="%d")
    field = load_mask_field(mesh, path, SIGMA_C, SIGMA_H)
    pixel = 2.0 * mesh.radius / size
    clear = np.abs(mesh.centroids[:, 1]) > pixel
    top = mesh.centroids[:, 1] > 0.0
    assert np.all(field[clear & top] == SIGMA_C)
    assert np.all(field[clear & ~top] == SIGMA_H)

    coarse = tmp_path / "coarse.txt"
    np.savetxt(coarse, np.ones((4, 4), dtype=int), fmt="%d")
    with pytest.raises(ValueError):
        load_mask_field(mesh, coarse, SIGMA_C, SIGMA_H)
    nonbinary = tmp_path / "nb.txt"
    np.savetxt(nonbinary, np.full((size, size), 2, dtype=int), fmt="%d")
    with pytest.raises(ValueError):
        load_mask_field(mesh, nonbinary, SIGMA_C, SIGMA_H)
