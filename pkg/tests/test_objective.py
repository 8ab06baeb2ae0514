import math

import numpy as np
import pytest

from discover import autodiff as ad
from discover.distributions import DiagGaussian, reparam_sample
from discover.model import PriorMeans, build_model, estimate_class_means
from discover.objective import (
    LinearGaussianProblem,
    LossWeights,
    adversarial_ce,
    loss_w,
    loss_z,
    total_loss,
    verify_elbo_gap,
)

LOG2PI = math.log(2 * math.pi)


def np_mlp(mlp, x, act=lambda v: np.maximum(v, 0)):
    """Float64 forward pass from the raw weights — independent of the tape."""
    h = np.asarray(x, dtype=np.float64)
    layers = mlp.layers
    for layer in layers[:-1]:
        h = act(h @ layer.weight.data.astype(np.float64) + layer.bias.data)
    return h @ layers[-1].weight.data.astype(np.float64) + layers[-1].bias.data


def np_encoder(enc, x):
    out = np_mlp(enc.net, x)
    d = enc.d_latent
    return out[:, :d], np.logaddexp(0, out[:, d:]) + 1e-6


def gauss_ll(x, m):
    return np.sum(-0.5 * ((x - m) ** 2 + LOG2PI), axis=1)


def kl_np(m, v, mp=0.0):
    return 0.5 * np.sum(v + (m - mp) ** 2 - np.log(v) - 1, axis=1)


@pytest.fixture
def tiny(rng):
    model = build_model("discover", 3, 2, 2, 1, 5, np.random.default_rng(1))
    x = rng.standard_normal((6, 3)).astype(np.float32)
    y = np.array([0, 1, 0, 1, 1, 0])
    eps_z = rng.standard_normal((6, 2)).astype(np.float32)
    eps_w = rng.standard_normal((6, 2)).astype(np.float32)
    return model, x, y, eps_z, eps_w


def test_loss_z_matches_independent_oracle(tiny):
    model, x, y, ez, _ = tiny
    q = model.encode_z(x)
    rec, kl = loss_z(q, reparam_sample(q, ez), x, model)
    m, v = np_encoder(model.enc_z, x)
    z = m + np.sqrt(v) * ez
    assert rec.item() == pytest.approx(gauss_ll(x, np_mlp(model.dec_z, z)).mean(), abs=1e-5)
    assert kl.item() == pytest.approx(kl_np(m, v).mean(), abs=1e-5)


def test_loss_w_matches_independent_oracle(tiny):
    model, x, y, ez, ew = tiny
    qz = model.encode_z(x)
    qw = model.encode_w(x, y)
    z, w = reparam_sample(qz, ez), reparam_sample(qw, ew)
    prior = estimate_class_means(z, y, 2)
    rec, klz, klw = loss_w(qz, qw, z, w, x, y, model, prior)

    mz, vz = np_encoder(model.enc_z, x)
    mw, vw = np_encoder(model.enc_w, np.hstack([x, np.eye(2)[y]]))
    zs, ws = mz + np.sqrt(vz) * ez, mw + np.sqrt(vw) * ew
    mu_k = np.stack([zs[y == k].mean(axis=0) for k in range(2)])
    xt = np_mlp(model.dec_zw, np.hstack([zs, ws]))
    assert rec.item() == pytest.approx(gauss_ll(x, xt).mean(), abs=1e-5)
    assert klz.item() == pytest.approx(kl_np(mz, vz).mean(), abs=1e-5)
    assert klw.item() == pytest.approx(kl_np(mw, vw, mu_k[y]).mean(), abs=1e-5)


def test_perfect_autoencoder_maximises_reconstruction():
    model = build_model("plain_vae", 1, 2, 1, 0, 1, np.random.default_rng(0))
    model.dec_z.layers[0].weight.data[...] = 1.0
    model.dec_z.layers[0].bias.data[...] = 0.0
    x = np.array([[0.3], [-1.2]], np.float32)
    q = DiagGaussian(x, np.full_like(x, 1e-12))
    rec, _ = loss_z(q, ad.tensor(x), x, model)
    assert rec.item() == pytest.approx(-0.5 * LOG2PI, abs=1e-6)


def test_prior_matching_kls_are_zero(tiny):
    model, x, y, ez, ew = tiny
    n = x.shape[0]
    q0 = DiagGaussian(np.zeros((n, 2)), np.ones((n, 2)))
    _, kl = loss_z(q0, reparam_sample(q0, ez), x, model)
    assert kl.item() == pytest.approx(0.0, abs=1e-7)
    mu_k = np.array([[0.5, -1.0], [2.0, 0.0]], np.float32)
    qw = DiagGaussian(mu_k[y], np.ones((n, 2)))
    prior = PriorMeans(ad.tensor(mu_k), np.array([3, 3]))
    _, _, klw = loss_w(q0, qw, ad.tensor(ez), ad.tensor(ew), x, y, model, prior)
    assert klw.item() == pytest.approx(0.0, abs=1e-6)


def test_label_blind_kl_w_symmetric():
    r = np.random.default_rng(3)
    n = 40_000
    z = r.standard_normal((n, 1))
    y = r.integers(0, 2, n)
    prior = estimate_class_means(ad.tensor(z), y, 2)
    mw = r.standard_normal((n, 1))
    klw = 0.5 * (1 + (mw - prior.mu_k.data[y]) ** 2 - 1)[:, 0]
    se = math.sqrt(klw[y == 0].var() / (y == 0).sum() + klw[y == 1].var() / (y == 1).sum())
    assert abs(klw[y == 0].mean() - klw[y == 1].mean()) < 3 * se


def test_adversarial_ce_zero_weights_is_ln_k():
    model = build_model("discover", 4, 3, 1, 1, 2, np.random.default_rng(0))
    for p in model.adversary.parameters():
        p.data[...] = 0
    ce = adversarial_ce(model, np.random.default_rng(1).standard_normal((9, 4)), np.arange(9) % 3)
    assert ce.item() == pytest.approx(math.log(3), abs=1e-6)


def test_adversarial_ce_separable_goes_to_zero():
    model = build_model("discover", 1, 2, 1, 1, 2, np.random.default_rng(0))
    x_hat = np.array([[-2.0], [-1.0], [1.0], [2.0]], np.float32)
    y = np.array([0, 0, 1, 1])
    model.adversary.weight.data[...] = [[-20.0, 20.0]]
    model.adversary.bias.data[...] = 0
    assert adversarial_ce(model, x_hat, y).item() < 1e-6


def test_adversarial_ce_optimum_under_independence():
    # With x_hat independent of y the best the adversary can do is the label entropy.
    r = np.random.default_rng(0)
    y = (r.uniform(size=50_000) < 0.3).astype(int)
    model = build_model("discover", 1, 2, 1, 1, 2, np.random.default_rng(0))
    model.adversary.weight.data[...] = 0
    model.adversary.bias.data[...] = [math.log(0.7), math.log(0.3)]
    ce = adversarial_ce(model, r.standard_normal((50_000, 1)), y).item()
    p = y.mean()
    assert ce == pytest.approx(-(p * math.log(0.3) + (1 - p) * math.log(0.7)), abs=1e-5)
    assert ce == pytest.approx(-(0.3 * math.log(0.3) + 0.7 * math.log(0.7)), abs=5e-3)


# -- weighted objective ---------------------------------------------------------------

def test_all_zero_weights_give_zero():
    comps = {k: ad.tensor(v) for k, v in dict(rec=-3.0, rec_z=-2.0, kl_z=1.0, kl_w=0.5, adv=0.7).items()}
    assert total_loss(comps, LossWeights(0, 0, 0, 0, 0)).item() == 0.0


def test_total_loss_decomposition():
    comps = dict(rec=-1.7, rec_z=-2.1, kl_z=0.3, kl_w=0.9, adv=0.69)
    w = LossWeights(rec=0.7, kl_z=0.7, kl_w=0.2, adv=0.8, rec_z=0.3)
    expect = -(0.3 * -2.1 + 0.7 * -1.7 - 0.7 * 0.3 - 0.2 * 0.9 + 0.8 * 0.69)
    assert total_loss({k: ad.tensor(v) for k, v in comps.items()}, w).item() == pytest.approx(expect, abs=1e-6)


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(kl_z=-0.1)


# -- linear-Gaussian gap identity ------------------------------------------------------

def exact_q(problem):
    """q_w = p(w|x,y) and q_z = N(E p(z|x,y), Var p(z|x,y)) — z marginalises w analytically."""
    s = problem.obs_var
    mw, vw = problem.w_posterior()
    # z | x, y: prior N(0,1), x - mu_y | z ~ N(z, 1 + s)
    vz = 1.0 / (1.0 + 1.0 / (1.0 + s))
    mz = vz * (problem.x - problem.mu_y) / (1.0 + s)
    return (mz, np.full_like(mz, vz)), (mw, vw)


def test_gap_identity_on_twenty_random_draws():
    r = np.random.default_rng(11)
    d = 2
    problem = LinearGaussianProblem(x=np.array([0.7, -1.3]), mu_y=np.array([0.5, -0.2]))
    for _ in range(20):
        q_z = (r.normal(0, 1, d), r.uniform(0.1, 1.5, d))
        q_w = (r.normal(0, 1, d), r.uniform(0.1, 1.5, d))
        res = verify_elbo_gap(problem, q_z, q_w, 100_000, r)
        assert res.abs_diff < 3 * res.se, res


def test_gap_with_exact_conditional():
    # q_z equal to p(z | w, x, y) is impossible for every w simultaneously, but
    # with q_w a point mass the conditional is a single Gaussian.
    problem = LinearGaussianProblem(x=np.array([1.0]), mu_y=np.array([0.0]))
    w0 = np.array([0.3])
    mz, vz = problem.z_posterior(w0[None, :])
    res = verify_elbo_gap(problem, (mz[0], vz[0]), (w0, np.array([1e-10])), 50_000,
                          np.random.default_rng(0))
    assert res.rhs == pytest.approx(0.0, abs=1e-6)
    assert res.abs_diff < max(3 * res.se, 1e-4)


def test_gap_grows_with_q_variance():
    problem = LinearGaussianProblem(x=np.array([0.4]), mu_y=np.array([0.0]))
    q_z, q_w = exact_q(problem)
    gaps = []
    for scale in (1.0, 2.0, 4.0, 8.0):
        res = verify_elbo_gap(problem, (q_z[0], q_z[1] * scale), q_w, 20_000, np.random.default_rng(0))
        gaps.append(res.rhs)
    assert all(a < b for a, b in zip(gaps, gaps[1:]))


def test_log_evidence_matches_scipy():
    from scipy import stats
    problem = LinearGaussianProblem(x=np.array([0.4, 2.0]), mu_y=np.array([1.0, 0.0]))
    assert problem.log_evidence() == pytest.approx(
        stats.norm(problem.mu_y, math.sqrt(2.5)).logpdf(problem.x).sum(), abs=1e-12)
