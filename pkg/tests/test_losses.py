import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from tpsence import losses as L
from tpsence import substrate as S
from tpsence.harness.gradcheck import LOSS_CASES, check_case


def patchset(rng, n=8, d=16, orientation="clear"):
    a = rng.normal(size=(n, d))
    p = rng.normal(size=(n, d))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    p /= np.linalg.norm(p, axis=1, keepdims=True)
    return L.PatchSet(S.Tensor(a), S.Tensor(p), orientation)


# ---------------------------------------------------------------- TPS / PTL

def test_tps_scalar_examples():
    assert L.tps_loss([0.2], [0.8], [0.5]).item() == 0.0
    assert L.tps_loss([0.2], [0.8], [0.99]).item() == pytest.approx(0.38, abs=1e-12)
    maps = np.random.default_rng(0).uniform(size=(2, 3, 3))
    assert L.tps_loss(maps[0], maps[1], maps[0]).item() == 0.0


def test_tps_matches_literal_abs_form():
    rng = np.random.default_rng(1)
    for _ in range(200):
        dx, dy, dz = rng.uniform(size=(3, 4, 4))
        assert L.tps_loss(dx, dy, dz).item() == pytest.approx(
            L.tps_loss_abs(dx, dy, dz).item(), abs=1e-14)


def test_tps_zero_iff_between():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        dx, dy, dz = rng.uniform(size=(3, 2, 2))
        mask = rng.uniform(size=(2, 2)) < 0.7
        lo, hi = np.minimum(dx, dy), np.maximum(dx, dy)
        dz = np.where(mask, lo + (hi - lo) * rng.uniform(size=(2, 2)), dz)
        between = bool(np.all((dz >= lo) & (dz <= hi)))
        value = L.tps_loss(dx, dy, dz).item()
        assert value >= 0.0
        assert (value == 0.0) == between


def test_tps_boundary_cases():
    assert L.tps_loss([0.3], [0.7], [0.3]).item() == 0.0
    assert L.tps_loss([0.3], [0.7], [0.7]).item() == 0.0
    assert L.tps_loss([0.3], [0.7], [np.nextafter(0.7, 1.0)]).item() > 0.0
    assert L.tps_loss([0.5], [0.5], [0.5]).item() == 0.0


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3), st.floats(-5, 5), st.floats(0.1, 10))
def test_tps_translation_and_scale(vals, shift, scale):
    dx, dy, dz = (np.array([v]) for v in vals)
    base = L.tps_loss(dx, dy, dz).item()
    assert L.tps_loss(dx + shift, dy + shift, dz + shift).item() == pytest.approx(base, abs=1e-9)
    assert L.tps_loss(dx * scale, dy * scale, dz * scale).item() == pytest.approx(base * scale, rel=1e-9, abs=1e-12)


def test_tps_shape_mismatch():
    with pytest.raises(S.ShapeError):
        L.tps_loss(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((3, 3)))


def test_ptl_examples():
    assert L.ptl_loss([0, 0], [1, 0], [0.5, 1]).item() == pytest.approx(1 / math.sqrt(2), abs=1e-15)
    x, y = np.array([0.1, 0.2, 0.3, 0.4]), np.array([0.5, 0.1, 0.2, 0.9])
    assert L.ptl_loss(x, y, x + 2 * (y - x)).item() == pytest.approx(0.0, abs=1e-12)
    assert L.ptl_loss(x, y, x).item() == 0.0
    with pytest.raises(ValueError):
        L.ptl_loss(x, x, y)


def test_collinear_extension_separates_ptl_from_tps():
    x, y = np.array([0.2, 0.3]), np.array([0.4, 0.6])
    z = x + 2.0 * (y - x)
    assert L.ptl_loss(x, y, z).item() == pytest.approx(0.0, abs=1e-12)
    assert L.tps_loss(x, y, z).item() > 0.0


# ---------------------------------------------------------------- GAN

def test_gan_examples():
    ld, lg = L.gan_losses(np.full(4, 0.9), np.full(4, 0.1))
    assert ld.item() == pytest.approx(-2 * math.log(0.9), abs=1e-12)
    assert lg.item() == pytest.approx(-math.log(0.1), abs=1e-12)
    ld, _ = L.gan_losses(np.full(4, 0.5), np.full(4, 0.5))
    assert ld.item() == pytest.approx(2 * math.log(2), abs=1e-12)


def test_gan_monotone_in_real_and_clamped():
    a, _ = L.gan_losses(np.full(3, 0.6), np.full(3, 0.3))
    b, _ = L.gan_losses(np.full(3, 0.7), np.full(3, 0.3))
    assert b.item() < a.item()
    ld, lg = L.gan_losses(np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    assert math.isfinite(ld.item()) and math.isfinite(lg.item())
    assert lg.item() == pytest.approx(-0.5 * (math.log(1e-7) + math.log(1 - 1e-7)), rel=1e-12)


def test_generator_gradient_flows_only_through_fake():
    real = S.Tensor(np.full((2, 2), 0.7), requires_grad=True)
    fake = S.Tensor(np.full((2, 2), 0.4), requires_grad=True)
    _, lg = L.gan_losses(real, fake)
    assert id(real) not in S.Graph.from_output(lg).ids()
    (g_fake,) = S.gradients(lg, [fake])
    assert np.all(g_fake < 0)


# ---------------------------------------------------------------- NCE

def test_patch_nce_two_patch_closed_form():
    ps = L.PatchSet(S.Tensor(np.eye(2)), S.Tensor(np.eye(2)))
    assert L.patch_nce(ps, 1.0).item() == pytest.approx(2 * math.log(1 + math.exp(-1)), abs=1e-14)


def test_patch_nce_equal_similarities():
    n = 5
    ps = L.PatchSet(S.Tensor(np.tile([[1.0, 0.0]], (n, 1))), S.Tensor(np.tile([[1.0, 0.0]], (n, 1))))
    assert L.patch_nce(ps, 0.07).item() == pytest.approx(n * math.log(n), rel=1e-12)
    big_tau = L.patch_nce(patchset(np.random.default_rng(0), n), 1e6).item()
    assert big_tau == pytest.approx(n * math.log(n), rel=1e-5)


def test_patch_nce_positive_and_needs_two():
    assert L.patch_nce(patchset(np.random.default_rng(1)), 0.07).item() > 0
    with pytest.raises(ValueError):
        L.patch_nce(L.PatchSet(S.Tensor([[1.0, 0.0]]), S.Tensor([[1.0, 0.0]])), 0.07)


def test_monce_weight_examples():
    sims = S.Tensor([[0.5, 1.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]])
    hard = L.monce_weights(sims, "hard", 1.0).data[0]
    easy = L.monce_weights(sims, "easy", 1.0).data[0]
    np.testing.assert_allclose(hard, [math.e / (math.e + 1), 1 / (math.e + 1)], atol=1e-15)
    np.testing.assert_allclose(easy, [1 / (math.e + 1), math.e / (math.e + 1)], atol=1e-15)
    np.testing.assert_allclose(L.monce_weights(S.Tensor(np.full((4, 4), 0.3)), "hard", 0.5).data,
                               np.full((4, 3), 1 / 3), atol=1e-15)


def test_weight_rows_positive_and_normalised():
    rng = np.random.default_rng(3)
    for _ in range(50):
        sims = S.Tensor(rng.uniform(-1, 1, size=(6, 6)))
        for w in (L.monce_weights(sims, "hard", 0.3), L.monce_weights(sims, "easy", 2.0),
                  L.sence_weights(sims, rng.uniform(), 0.7)):
            assert np.all(w.data > 0)
            np.testing.assert_allclose(w.data.sum(axis=1), 1.0, atol=1e-12)


def test_monce_reductions():
    rng = np.random.default_rng(4)
    flat = L.PatchSet(S.Tensor(np.tile([[0.6, 0.8]], (4, 1))), S.Tensor(np.tile([[0.6, 0.8]], (4, 1))))
    assert L.monce_loss(flat, 0.07, 1.0, 1.0, "hard").item() == pytest.approx(
        L.patch_nce(flat, 0.07).item(), abs=1e-12)
    ps = patchset(rng, 4)
    assert L.monce_loss(ps, 0.07, 1.0, 0.0, "hard").item() == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("orientation", ["clear", "generated"])
def test_nce_family_matches_brute_force(orientation):
    rng = np.random.default_rng(5)
    for _ in range(10):
        ps = patchset(rng, 4, 5, orientation)
        a, p = ps.anchors.data.tolist(), ps.positives.data.tolist()
        if orientation == "generated":
            a, p = p, a
        tau, beta, q = rng.uniform(0.05, 1.0), rng.uniform(0.2, 2.0), rng.uniform(0.5, 2.0)
        assert L.patch_nce(ps, tau).item() == pytest.approx(oracles.patch_nce(a, p, tau), rel=1e-12)
        for mode in ("hard", "easy"):
            assert L.monce_loss(ps, tau, beta, q, mode).item() == pytest.approx(
                oracles.monce(a, p, tau, beta, q, mode), rel=1e-12)
        assert L.sence_loss(ps, 0.75, tau, beta, q).item() == pytest.approx(
            oracles.sence(a, p, 0.75, tau, beta, q), rel=1e-12)


def test_sence_force_examples():
    assert L.sence_force(0.3, 0.0) == 0.3
    assert L.sence_force(0.3, 1.0) == pytest.approx(0.7, abs=1e-15)
    assert L.sence_force(0.8, 0.592) == pytest.approx(0.4448, abs=1e-12)


def test_sence_identities():
    rng = np.random.default_rng(6)
    for _ in range(20):
        ps = patchset(rng)
        tau, beta, q = 0.07, rng.uniform(0.2, 2), rng.uniform(0.5, 2)
        assert L.sence_loss(ps, 0.5, tau, beta, 1.0).item() == pytest.approx(
            L.patch_nce(ps, tau).item(), abs=1e-12)
        assert L.sence_loss(ps, 0.0, tau, beta, q).item() == pytest.approx(
            L.monce_loss(ps, tau, beta, q, "hard").item(), abs=1e-12)
        assert L.sence_loss(ps, 1.0, tau, beta, q).item() == pytest.approx(
            L.monce_loss(ps, tau, beta, q, "easy").item(), abs=1e-12)
    with pytest.raises(ValueError):
        L.sence_loss(patchset(rng), 1.5, 0.07, 1.0, 1.0)


def test_sence_weight_regimes():
    rng = np.random.default_rng(7)
    for _ in range(100):
        sims = S.Tensor(rng.uniform(-1, 1, size=(5, 5)))
        neg = L.offdiagonal(sims).data
        for mpa, sign in ((rng.uniform(0, 0.49), 1), (rng.uniform(0.51, 1.0), -1)):
            w = L.sence_weights(sims, mpa, 1.0).data
            for i in range(5):
                hi, lo = np.argmax(neg[i]), np.argmin(neg[i])
                assert sign * (w[i, hi] - w[i, lo]) > 0


@pytest.mark.parametrize("name", sorted(LOSS_CASES))
def test_loss_gradients_match_finite_differences(name):
    result = check_case(name, LOSS_CASES[name], seeds=20)
    assert result.max_rel_error <= 1e-4, result.line()


# ---------------------------------------------------------------- composite

def test_variant_table_matches_ablation_rows():
    assert L.ABLATION_VARIANTS == {
        "M1": ("none", "patchnce"), "M2": ("ptl", "patchnce"), "M3": ("tps", "patchnce"),
        "M4": ("none", "monce_hard"), "M5": ("none", "sence_mpa"), "M6": ("tps", "sence_miou"),
        "M7": ("tps", "sence_mpa"),
    }
    cfg = L.LossConfig.for_variant("M1")
    assert (cfg.geom_variant, cfg.nce_variant) == ("none", "patchnce")
    with pytest.raises(L.LossConfigError):
        L.LossConfig.for_variant("M8")


def test_composite_objective_arithmetic():
    cfg = L.LossConfig()
    assert (cfg.lambda1, cfg.lambda2, cfg.lambda3) == (1.0, 1.0, 0.1)
    total = L.composite_objective({"gan": 0.0, "nce": 0.0, "geom": 2.0}, cfg)
    assert total.item() == pytest.approx(0.2, abs=1e-15)
    zero = L.LossConfig(lambda1=0, lambda2=0, lambda3=0)
    assert L.composite_objective({"gan": 3.0, "nce": 4.0, "geom": 5.0}, zero).item() == 0.0
    m1 = L.LossConfig.for_variant("M1")
    assert L.composite_objective({"gan": 1.0, "nce": 2.0, "geom": 100.0}, m1).item() == 3.0
    with pytest.raises(KeyError):
        L.composite_objective({"gan": 1.0, "nce": 2.0}, cfg)
    with pytest.raises(KeyError):
        L.composite_objective({"gan": 1.0}, m1)


def test_loss_config_validation():
    for bad in ({"tau": 0}, {"beta": -1}, {"lambda3": -0.1}, {"nce_variant": "x"}, {"geom_variant": "y"}):
        with pytest.raises(L.LossConfigError):
            L.LossConfig(**bad)


def test_nce_dispatch_requires_semantic_score():
    ps = patchset(np.random.default_rng(8))
    cfg = L.LossConfig.for_variant("M7")
    with pytest.raises(ValueError, match="mpa"):
        L.nce_loss(ps, cfg, None)
    mean = L.nce_loss(ps, cfg, {"mpa": 0.4}).item()
    total = L.nce_loss(ps, L.LossConfig.for_variant("M7", nce_reduction="sum"), {"mpa": 0.4}).item()
    assert mean == pytest.approx(total / ps.n, rel=1e-14)
