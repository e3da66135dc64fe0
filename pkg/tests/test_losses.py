import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cvad import losses
from cvad.errors import ConfigError, DimensionError
from cvad.gradcheck import numerical_gradient, rel_error
from cvad.models import GeneratorOutput, LatentSample
from cvad.nn import bce_with_logits_grad


def fake_output(rng, n=3, shape=(1, 4, 4), k=2, branch=True):
    x1 = rng.standard_normal((n,) + shape)
    x2 = rng.standard_normal((n,) + shape) if branch else np.zeros((n,) + shape)
    lat = lambda d: LatentSample(rng.standard_normal((n, d)), rng.standard_normal((n, d)), rng.standard_normal((n, d)))
    return GeneratorOutput(x1, x2, 1 / (1 + np.exp(-(x1 + x2))), lat(k), lat(4 * k) if branch else None)


def test_kl_spot_values():
    assert losses.kl_divergence(np.zeros((1, 3)), np.zeros((1, 3)))[0] == 0.0
    assert losses.kl_divergence(np.ones((1, 1)), np.zeros((1, 1)))[0] == 0.5
    val = losses.kl_divergence(np.zeros((1, 1)), np.full((1, 1), math.log(4)))[0]
    assert val == pytest.approx(0.5 * (4 - 1 - math.log(4)), abs=1e-15)
    assert val == pytest.approx(0.8069, abs=1e-4)


# values below 1e-3 in magnitude make mu^2 or exp(lv) - 1 - lv vanish in float64
LATENT = st.floats(-10, 10).filter(lambda v: v == 0 or abs(v) > 1e-3)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (4, 3), elements=LATENT), arrays(np.float64, (4, 3), elements=LATENT))
def test_kl_non_negative(mu, logvar):
    kl = losses.kl_divergence(mu, logvar)
    assert np.all(kl >= -1e-12)
    zero = np.all((mu == 0) & (logvar == 0), axis=1)
    assert np.all(kl[zero] == 0)
    assert np.all(kl[~zero] > 0)


def test_kl_gradient():
    rng = np.random.default_rng(0)
    mu, lv = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    dmu, dlv = losses.kl_divergence_grad(mu, lv)
    assert rel_error(dmu, numerical_gradient(lambda: losses.kl_divergence(mu, lv).sum(), mu)) <= 1e-5
    assert rel_error(dlv, numerical_gradient(lambda: losses.kl_divergence(mu, lv).sum(), lv)) <= 1e-5


def test_reconstruction_spot_values():
    assert losses.reconstruction_nll(np.zeros((1, 1)), np.full((1, 1), 0.5))[0] == pytest.approx(math.log(2), abs=1e-15)
    target = np.array([[[[0.0, 1.0], [1.0, 0.0]]]])
    perfect = np.where(target > 0.5, 100.0, -100.0)
    assert losses.reconstruction_nll(perfect, target)[0] < 1e-40
    with np.errstate(over="raise"):
        v = losses.reconstruction_nll(np.array([[100.0, -100.0]]), np.array([[0.0, 1.0]]))
    assert np.isfinite(v[0]) and v[0] == pytest.approx(200.0)


def test_reconstruction_errors():
    with pytest.raises(ValueError):
        losses.reconstruction_nll(np.zeros((1, 2)), np.array([[0.5, 1.2]]))
    with pytest.raises(DimensionError):
        losses.reconstruction_nll(np.zeros((1, 2)), np.zeros((1, 3)))


def test_reconstruction_entropy_lower_bound():
    # scanning logits per pixel, the minimum cross entropy is the target's entropy
    x = np.array([[0.1, 0.5, 0.9, 0.0, 1.0, 0.3]])
    grid = np.linspace(-40, 40, 160001)
    scan = [min(losses.reconstruction_nll(grid[:, None], np.full((grid.size, 1), t))) for t in x[0]]
    with np.errstate(divide="ignore", invalid="ignore"):
        ent = -(x * np.log(x) + (1 - x) * np.log1p(-x))
    ent = np.nan_to_num(ent)[0]
    np.testing.assert_allclose(scan, ent, atol=1e-6)
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert losses.reconstruction_nll(rng.standard_normal((1, 6)) * 5, x)[0] >= ent.sum() - 1e-12


def test_reconstruction_gradient():
    rng = np.random.default_rng(1)
    z, x = rng.standard_normal((2, 1, 3, 3)) * 2, rng.random((2, 1, 3, 3))
    num = numerical_gradient(lambda: losses.reconstruction_nll(z, x).sum(), z)
    assert rel_error(bce_with_logits_grad(z, x), num) <= 1e-5


def test_generator_loss_total_consistency():
    rng = np.random.default_rng(2)
    out = fake_output(rng)
    x = rng.random((3, 1, 4, 4))
    w = losses.LossWeights(0.3, 1.7)
    loss = losses.generator_loss(out, x, w)
    assert loss.total.tobytes() == (w.alpha1 * (loss.recon1 + loss.kl1) + w.alpha2 * (loss.recon2 + loss.kl2)).tobytes()
    assert np.all(losses.generator_loss(out, x, losses.LossWeights(0, 0)).total == 0)


def test_generator_loss_branch_disabled():
    rng = np.random.default_rng(3)
    out = fake_output(rng, branch=False)
    x = rng.random((3, 1, 4, 4))
    loss = losses.generator_loss(out, x, losses.LossWeights(2.0, 123.0))
    np.testing.assert_array_equal(loss.recon2, 0)
    np.testing.assert_array_equal(loss.kl2, 0)
    np.testing.assert_array_equal(loss.total, 2.0 * (loss.recon1 + loss.kl1))


def test_generator_loss_additive_in_weights():
    rng = np.random.default_rng(4)
    out = fake_output(rng)
    x = rng.random((3, 1, 4, 4))
    a = losses.generator_loss(out, x, losses.LossWeights(0.4, 1.1)).total
    b = losses.generator_loss(out, x, losses.LossWeights(0.6, 0.9)).total
    ab = losses.generator_loss(out, x, losses.LossWeights(1.0, 2.0)).total
    np.testing.assert_allclose(ab, a + b, rtol=1e-14)


def test_generator_loss_grad_matches_fd():
    rng = np.random.default_rng(5)
    out = fake_output(rng)
    x = rng.random((3, 1, 4, 4))
    w = losses.LossWeights(0.8, 1.3)
    up = losses.generator_loss_grad(out, x, w)
    f = lambda: losses.generator_loss(out, x, w).total.mean()
    fields = {"x1_logits": out.x1_logits, "x2_logits": out.x2_logits, "mu1": out.latent1.mu,
              "logvar1": out.latent1.logvar, "mu2": out.latent2.mu, "logvar2": out.latent2.logvar}
    for key, arr in fields.items():
        assert rel_error(up[key], numerical_gradient(f, arr)) <= 1e-5


def test_loss_weights_validation():
    with pytest.raises(ConfigError):
        losses.LossWeights(-1, 1)
    with pytest.raises(ConfigError):
        losses.LossWeights(1, float("inf"))
    assert losses.LossWeights() == losses.LossWeights(1.0, 1.0)


def test_discriminator_loss_values():
    assert losses.discriminator_loss([0.5], [0.5]) == pytest.approx(math.log(2), abs=1e-15)
    assert losses.discriminator_loss([1e-12], [1 - 1e-12]) < 1e-11
    rng = np.random.default_rng(6)
    pr, pf = rng.uniform(0.01, 0.99, 7), rng.uniform(0.01, 0.99, 7)
    assert losses.discriminator_loss(pr, pf) == pytest.approx(losses.discriminator_loss(1 - pf, 1 - pr), rel=1e-14)
    for bad in ([0.0], [1.0], [1.5]):
        with pytest.raises(ValueError):
            losses.discriminator_loss(bad, [0.5])


def test_discriminator_loss_logits_agree():
    rng = np.random.default_rng(7)
    lr, lf = rng.standard_normal((4, 1)), rng.standard_normal((4, 1))
    loss, dr, df = losses.discriminator_loss_logits(lr, lf)
    sig = lambda z: 1 / (1 + np.exp(-z))
    assert loss == pytest.approx(losses.discriminator_loss(sig(lr), sig(lf)), rel=1e-12)
    assert rel_error(dr, numerical_gradient(lambda: losses.discriminator_loss_logits(lr, lf)[0], lr)) <= 1e-5
    assert rel_error(df, numerical_gradient(lambda: losses.discriminator_loss_logits(lr, lf)[0], lf)) <= 1e-5
