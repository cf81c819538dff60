import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sgrlab.attacks import (AttackConfig, PerturbationSource, deepfool, deepfool_rho, fgm, fgsm, lrc_covariance,
                            lrc_factor, lrc_sample, perturbations_for_cov, pgd, rand_noise, rho_from_norms,
                            run_attack, worst_of_k)
from sgrlab.data import standardize
from sgrlab.errors import ConfigError, ContractError
from sgrlab.models import MLP, LinearSoftmax, per_sample_loss, predict

GEOM = (6, 6, 1)


def _model(seed=0):
    return MLP([36, 12, 4], input_shape=GEOM, seed=seed)


def _batch(seed, n=5):
    r = np.random.default_rng(seed)
    pix = r.uniform(0, 1, size=(n,) + GEOM)
    return standardize(pix)


@settings(max_examples=60)
@given(st.integers(0, 10_000), st.floats(0.0, 0.5), st.sampled_from(["rand", "fgsm", "pgd", "fgm"]))
def test_outputs_stay_in_budget_and_pixel_range(seed, eps, kind):
    z, space = _batch(seed)
    model = _model(seed % 7)
    rng = np.random.default_rng(seed)
    if kind == "rand":
        adv = rand_noise(z, eps, rng, space)
    elif kind == "fgsm":
        adv = fgsm(model, z, eps, space)
    elif kind == "pgd":
        adv = pgd(model, z, eps, 3, eps / 4, rng, space)
    else:
        adv = fgm(model, z, eps, space)
    p0, p = space.to_pixel(z), space.to_pixel(adv)
    delta = (p - p0).reshape(len(z), -1)
    if kind == "fgm":
        assert np.all(np.linalg.norm(delta, axis=1) <= eps + 1e-9)
    else:
        assert np.all(np.abs(delta) <= eps + 1e-9)
    assert p.min() >= -1e-9 and p.max() <= 1 + 1e-9


def test_eps_zero_is_identity_and_attacks_raise_loss():
    z, space = _batch(3, n=20)
    model = _model(1)
    np.testing.assert_allclose(fgsm(model, z, 0.0, space), z, atol=1e-12)
    labels = predict(model, z)
    base = per_sample_loss(model, z, labels)
    adv = fgsm(model, z, 0.01, space)
    assert per_sample_loss(model, adv, labels).mean() > base.mean()
    strong = pgd(model, z, 0.1, 10, 0.02, np.random.default_rng(0), space)
    assert per_sample_loss(model, strong, labels).mean() >= per_sample_loss(model, fgsm(model, z, 0.1, space), labels).mean() - 1e-9


def test_fgm_leaves_zero_gradient_samples_alone():
    lin = LinearSoftmax(3, 2, weights=np.zeros((2, 3)))
    x = np.random.default_rng(0).normal(size=(2, 3))
    np.testing.assert_array_equal(fgm(lin, x, 1.0), x)


def test_pgd_requires_rng_for_random_start():
    z, space = _batch(0)
    with pytest.raises(ContractError):
        pgd(_model(), z, 0.1, 2, None, None, space, rand_init=True)


def test_deepfool_flips_a_linear_model_with_near_minimal_step():
    W = np.array([[1.0, 0.0], [0.0, 1.0]])
    lin = LinearSoftmax(2, 2, weights=W)
    x = np.array([[1.0, 0.0]])
    res = deepfool(lin, x, overshoot=0.02)
    assert res.flipped.all()
    # the boundary x0 = x1 is at distance 1/sqrt(2)
    assert np.linalg.norm(res.perturbation) == pytest.approx((1 + 0.02) / np.sqrt(2), rel=1e-9)
    assert deepfool_rho(lin, x) == pytest.approx((1 + 0.02) / np.sqrt(2), rel=1e-9)


def test_deepfool_on_mlp_batch():
    z, space = _batch(4, n=8)
    model = _model(2)
    res = deepfool(model, z, space=space)
    assert res.flipped.mean() > 0.5
    flipped = res.flipped
    assert np.all(predict(model, res.x_adv)[flipped] != predict(model, z)[flipped])


def test_rho_helpers():
    assert rho_from_norms([1.0, 2.0, 5.0], [2.0, 4.0, 0.0]) == pytest.approx(0.5)
    with pytest.raises(ContractError):
        deepfool_rho(_model(), np.zeros((0,) + GEOM))


def test_lrc_factor_reproduces_covariance():
    L = lrc_factor((5, 5, 2), 3.0)
    S = lrc_covariance((5, 5, 2), 3.0)
    # rounded distances make the kernel slightly indefinite; the factor is the PSD projection
    vals, vecs = np.linalg.eigh(S)
    np.testing.assert_allclose(L @ L.T, (vecs * np.clip(vals, 0, None)) @ vecs.T, atol=1e-10)
    assert np.linalg.norm(L @ L.T - S) / np.linalg.norm(S) < 0.03
    assert not L.flags.writeable
    with pytest.raises(ContractError):
        lrc_factor((5, 5, 1), 0.0)


def test_lrc_sample_statistics_small():
    r = np.random.default_rng(0)
    s = lrc_sample((6, 6, 1), 2.0, r, 20_000).reshape(20_000, -1)
    emp = s.T @ s / len(s)
    S = lrc_covariance((6, 6, 1), 2.0)
    assert np.linalg.norm(emp - S) / np.linalg.norm(S) < 0.05


def test_worst_of_k_keeps_the_highest_loss():
    z, space = _batch(5, n=6)
    model = _model(3)
    y = predict(model, z)
    sampler = lambda r, n: r.normal(size=(n,) + GEOM)  # noqa: E731
    adv, losses = worst_of_k(model, z, y, sampler, 6, 0.2, np.random.default_rng(1), space)
    np.testing.assert_allclose(per_sample_loss(model, adv, y), losses, rtol=1e-12)
    # replay the draws: the maximum over them must equal the reported loss
    r = np.random.default_rng(1)
    p0 = space.to_pixel(z)
    draws = [per_sample_loss(model, space.to_model(np.clip(p0 + 0.2 * sampler(r, 6), 0, 1)), y) for _ in range(6)]
    np.testing.assert_allclose(np.max(draws, axis=0), losses, rtol=1e-12)
    with pytest.raises(ContractError):
        worst_of_k(model, z, y, sampler, 0, 0.2, r, space)


def test_run_attack_dispatch_and_config_validation():
    z, space = _batch(6)
    model = _model()
    y = predict(model, z)
    for kind in ("rand", "fgm", "fgsm", "pgd", "deepfool"):
        out = run_attack(model, z, y, AttackConfig(kind, eps=8), np.random.default_rng(0), space)
        assert out.shape == z.shape
    out = run_attack(model, z, y, AttackConfig("lrc", eps=0.1, zeta=2, k=3), np.random.default_rng(0), space)
    assert out.shape == z.shape
    assert AttackConfig("pgd", eps=32).eps_iter_pixel == pytest.approx(32 / 255 / 5)
    assert AttackConfig("lrc", eps=0.3).eps_pixel == 0.3
    with pytest.raises(ConfigError):
        AttackConfig("cw")
    with pytest.raises(ConfigError):
        AttackConfig("lrc", zeta=0)
    with pytest.raises(ConfigError):
        AttackConfig("fgsm", eps=-1)


def test_perturbation_sources():
    z, space = _batch(7, n=4)
    model = _model()
    assert PerturbationSource.parse("sign") is PerturbationSource.LOSS_GRAD_SIGN
    for src in ("loss_grad", "sign", "fgsm", "pgd"):
        xi = perturbations_for_cov(model, z, src, np.random.default_rng(0), space)
        assert xi.shape == (4, 36)
    xi = perturbations_for_cov(model, z, "sign", None, space)
    assert set(np.unique(xi)) <= {-1.0, 0.0, 1.0}
    lrc = perturbations_for_cov(model, z, "lrc", np.random.default_rng(0), space, AttackConfig("lrc", eps=1.0, zeta=2))
    assert lrc.shape == (4, 36)
    mean = z.mean(axis=0)
    np.testing.assert_allclose(perturbations_for_cov(model, z, "dataset", dataset_mean=mean), (z - mean).reshape(4, -1))
    with pytest.raises(ConfigError):
        perturbations_for_cov(model, z, "dataset")
    with pytest.raises(ConfigError):
        PerturbationSource.parse("bogus")
