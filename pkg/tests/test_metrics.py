import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tpsence import metrics as Mx


def gaussian_sets(seed, shift, n=100, d=4):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, d)), rng.normal(size=(n, d)) + shift


def brute_mmd2(a, b, sigma):
    def k(u, v):
        return math.exp(-sum((p - q) ** 2 for p, q in zip(u, v)) / (2 * sigma * sigma))
    kaa = sum(k(u, v) for u in a for v in a) / len(a) ** 2
    kbb = sum(k(u, v) for u in b for v in b) / len(b) ** 2
    kab = sum(k(u, v) for u in a for v in b) / (len(a) * len(b))
    return kaa + kbb - 2 * kab


def brute_ed(a, b):
    def d(u, v):
        return math.dist(u, v)
    ab = sum(d(u, v) for u in a for v in b) / (len(a) * len(b))
    aa = sum(d(u, v) for u in a for v in a) / len(a) ** 2
    bb = sum(d(u, v) for u in b for v in b) / len(b) ** 2
    return 2 * ab - aa - bb


def test_identical_sets_zero():
    a = np.random.default_rng(0).normal(size=(30, 5))
    assert Mx.mmd2(a, a) == 0.0
    assert Mx.energy_distance(a, a) == 0.0
    assert Mx.energy_distance([[1.0, 2.0]], [[1.0, 2.0]]) == 0.0


def test_singleton_closed_forms():
    assert Mx.mmd2([[0.0, 0.0]], [[1.0, 0.0]]) == pytest.approx(2 - 2 * math.exp(-0.5), abs=1e-15)
    assert Mx.mmd2([[0.0, 0.0]], [[1.0, 0.0]], bandwidth=1.0) == pytest.approx(0.7869386805747332, abs=1e-15)
    assert Mx.energy_distance([[0.0]], [[1.0]]) == 2.0


def test_against_brute_force():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(7, 3)), rng.normal(size=(5, 3)) + 0.3
    sigma = Mx.median_bandwidth(a, b)
    assert Mx.mmd2(a, b) == pytest.approx(brute_mmd2(a.tolist(), b.tolist(), sigma), abs=1e-12)
    assert Mx.energy_distance(a, b) == pytest.approx(brute_ed(a.tolist(), b.tolist()), abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_shift_monotonic(seed):
    vals_m, vals_e = [], []
    for shift in (0.0, 0.5, 1.0):
        a, b = gaussian_sets(seed, shift)
        vals_m.append(Mx.mmd2(a, b))
        vals_e.append(Mx.energy_distance(a, b))
    assert vals_m[0] < vals_m[1] < vals_m[2]
    assert vals_e[0] < vals_e[1] < vals_e[2]


def test_symmetry_and_permutation():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(20, 3)), rng.normal(size=(15, 3)) + 0.5
    assert Mx.mmd2(a, b) == pytest.approx(Mx.mmd2(b, a), abs=1e-14)
    assert Mx.energy_distance(a, b) == pytest.approx(Mx.energy_distance(b, a), abs=1e-14)
    pa, pb = a[rng.permutation(20)], b[rng.permutation(15)]
    assert Mx.mmd2(pa, pb) == pytest.approx(Mx.mmd2(a, b), abs=1e-14)
    assert Mx.energy_distance(pa, pb) == pytest.approx(Mx.energy_distance(a, b), abs=1e-14)


def test_errors():
    with pytest.raises(ValueError):
        Mx.mmd2([], [[1.0]])
    with pytest.raises(ValueError):
        Mx.mmd2([[1.0, 2.0]], [[1.0]])
    with pytest.raises(ValueError):
        Mx.energy_distance([[1.0]], [])
    with pytest.raises(ValueError):
        Mx.point_to_segment(np.zeros(2), np.zeros(2), np.zeros(3))


def test_point_to_segment_examples():
    assert Mx.point_to_segment([0, 0], [1, 0], [0.5, 1]) == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    assert Mx.point_to_segment([0, 0], [1, 0], [2, 0]) * math.sqrt(2) == pytest.approx(1.0, abs=1e-15)
    assert Mx.point_to_segment([0, 0], [1, 0], [0.5, 0]) == 0.0
    assert Mx.point_to_segment([1, 1], [1, 1], [1, 2]) == pytest.approx(1 / math.sqrt(2), abs=1e-15)


@settings(max_examples=300, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=9, max_size=9))
def test_segment_distance_bounds_line_distance(vals):
    x, y, z = np.array(vals[:3]), np.array(vals[3:6]), np.array(vals[6:])
    if np.linalg.norm(x - y) < 1e-6:
        return
    assert Mx.point_to_segment(x, y, z) >= Mx.point_to_line(x, y, z) - 1e-12


def test_featurize():
    img = np.random.default_rng(3).uniform(size=(64, 64, 3))
    f = Mx.featurize(img)
    assert f.shape == (256,)
    assert f[0] == pytest.approx(img[:4, :4].mean(), abs=1e-14)
    np.testing.assert_allclose(Mx.featurize(img.transpose(2, 0, 1)), f)
    assert Mx.featurize(np.zeros((40, 40, 3))).shape == (256,)


def test_domain_report_cases():
    rng = np.random.default_rng(4)
    clear = [rng.uniform(size=(32, 32, 3)) for _ in range(6)]
    rainy = [rng.uniform(size=(32, 32, 3)) * 0.6 for _ in range(5)]
    maps = [tuple(rng.uniform(size=(3, 2, 2))) for _ in range(4)]
    same = Mx.domain_report(clear, rainy, rainy)
    assert same.mmd2 == 0.0 and same.energy_distance == 0.0
    base = Mx.domain_report(clear, rainy, clear, maps)
    assert base.mmd2 == base.baseline_mmd2
    assert base.energy_distance == base.baseline_energy_distance
    fc = np.stack([Mx.featurize(i) for i in clear])
    fr = np.stack([Mx.featurize(i) for i in rainy])
    sigma = Mx.median_bandwidth(fc, fr)
    assert base.bandwidth == sigma
    assert base.baseline_mmd2 == pytest.approx(brute_mmd2(fc.tolist(), fr.tolist(), sigma), abs=1e-12)
    assert base.mean_segment_distance == pytest.approx(np.mean([Mx.point_to_segment(*m) for m in maps]))
    assert (base.n_clear, base.n_rainy, base.n_generated, base.n_triples) == (6, 5, 6, 4)
    assert Mx.DomainReport.from_json(base.to_json()) == base
