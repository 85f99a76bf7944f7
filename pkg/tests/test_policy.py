import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import gammaln, softmax
from scipy.stats import dirichlet

from drtsc.policy import (
    CATEGORICAL,
    DIRICHLET,
    Adam,
    CheckpointError,
    DensePolicy,
    apply_update,
    clipped_surrogate_grad,
    entropy_grad,
    forward,
    grad_logprob,
    init_policy,
    load_policy,
    logprob,
    mixture_policy,
    n_params,
    normalize_rewards,
    phase_policy,
    sample_phase,
    sample_weights,
    save_policy,
    weighted_grad_logprob,
)


def _const_logits(logits):
    """One-layer categorical policy emitting ``logits`` for any input."""
    k = len(logits)
    return DensePolicy([(1, k)], np.r_[np.zeros(k), logits], CATEGORICAL)


def _const_alpha(alpha):
    # softplus^-1(alpha - floor)
    z = np.log(np.expm1(np.asarray(alpha, dtype=float) - 1e-3))
    return DensePolicy([(1, 8)], np.r_[np.zeros(8), z], DIRICHLET)


def _fd_check(pol, x, target, coords, h=1e-5):
    g = grad_logprob(pol, x, target)
    for k in coords:
        up, dn = pol.copy(), pol.copy()
        up.params[k] += h
        dn.params[k] -= h
        fd = (logprob(up, x, [target])[0] - logprob(dn, x, [target])[0]) / (2 * h)
        assert abs(fd - g[k]) <= 1e-4 * max(1.0, abs(fd)), (k, fd, g[k])


def test_param_count_and_architectures():
    pt = phase_policy(np.random.default_rng(0))
    ps = mixture_policy(np.random.default_rng(0))
    assert pt.layer_shapes == [(79, 64), (64, 64), (64, 8)]
    assert ps.layer_shapes == [(18, 64), (64, 8)]
    assert pt.params.size == n_params(pt.layer_shapes) == 79 * 64 + 64 + 64 * 64 + 64 + 64 * 8 + 8
    with pytest.raises(ValueError):
        DensePolicy([(3, 4)], np.zeros(5))
    with pytest.raises(ValueError):
        DensePolicy([(3, 4), (5, 2)], np.zeros(n_params([(3, 4), (5, 2)])))


def test_init_bounds():
    pol = init_policy([10, 20, 8], rng=np.random.default_rng(1))
    (W1, b1), (W2, b2) = pol.layers()
    assert np.abs(W1).max() <= 1 / np.sqrt(10) and np.abs(b1).max() <= 1 / np.sqrt(10)
    assert np.abs(W2).max() <= 1 / np.sqrt(20)


def test_forward_examples():
    zero = DensePolicy([(5, 6), (6, 8)], np.zeros(n_params([(5, 6), (6, 8)])))
    assert (forward(zero, np.ones(5)) == 0).all()
    ident = DensePolicy([(8, 8)], np.r_[np.eye(8).ravel(), np.zeros(8)])
    x = np.linspace(-1, 1, 8)
    assert (forward(ident, x) == x).all()
    pol = phase_policy(np.random.default_rng(3))
    x = np.random.default_rng(4).random(79)
    assert forward(pol, x).tobytes() == forward(pol, x).tobytes()
    with pytest.raises(ValueError):
        forward(pol, np.ones(78))


def test_dirichlet_head_positive():
    pol = mixture_policy(np.random.default_rng(0), scale=50.0)
    alpha = forward(pol, np.random.default_rng(1).random((100, 18)) * 100)
    assert (alpha >= 1e-3).all()


def test_uniform_sampling():
    pol = _const_logits(np.zeros(8))
    rng = np.random.default_rng(0)
    obs = np.zeros((100_000, 1))
    a, lp = sample_phase(pol, obs, rng)
    freq = np.bincount(a, minlength=8) / len(a)
    assert np.abs(freq - 1 / 8).max() <= 0.01
    assert np.allclose(lp, -np.log(8))


def test_peaked_sampling():
    pol = _const_logits(np.r_[10.0, np.zeros(7)])
    a, lp = sample_phase(pol, np.zeros((100_000, 1)), np.random.default_rng(1))
    # exact softmax mass on action 0 is 1 / (1 + 7 e^-10) = 0.99968
    p0 = 1 / (1 + 7 * np.exp(-10.0))
    assert abs((a == 0).mean() - p0) <= 3 * np.sqrt(p0 * (1 - p0) / len(a))
    assert (a == 0).mean() >= 0.999
    assert (np.exp(lp) > 0).all() and (np.exp(lp) <= 1).all()


def test_single_sample_types():
    a, lp = sample_phase(_const_logits(np.zeros(8)), np.zeros(1), np.random.default_rng(0))
    assert isinstance(a, int) and lp == pytest.approx(-np.log(8))


def test_uniform_dirichlet_logprob():
    pol = _const_alpha(np.ones(8))
    rng = np.random.default_rng(0)
    for _ in range(50):
        w, lp = sample_weights(pol, np.zeros(1), rng)
        assert lp == pytest.approx(np.log(5040.0), abs=1e-9)
        assert abs(w.sum() - 1) <= 1e-9 and (w >= 0).all()


def test_dirichlet_logprob_matches_scipy():
    rng = np.random.default_rng(2)
    alpha = rng.uniform(0.5, 5, 8)
    pol = _const_alpha(alpha)
    for _ in range(10):
        w = rng.dirichlet(alpha)
        assert logprob(pol, np.zeros(1), [w])[0] == pytest.approx(
            dirichlet.logpdf(w, np.ravel(forward(pol, np.zeros(1)))), rel=1e-10)


def test_dirichlet_mean():
    pol = _const_alpha(np.r_[100.0, np.ones(7)])
    rng = np.random.default_rng(3)
    w0 = [sample_weights(pol, np.zeros(1), rng)[0][0] for _ in range(10_000)]
    assert abs(np.mean(w0) - 100 / 107) <= 0.01


def test_categorical_logprob_formula():
    logits = np.array([0.3, -1.0, 2.0, 0.0, 0.5, 0.1, -0.2, 1.5])
    pol = _const_logits(logits)
    lp = logprob(pol, np.zeros((8, 1)), np.arange(8))
    assert np.allclose(np.exp(lp), softmax(logits), rtol=1e-12)
    assert abs(np.exp(lp).sum() - 1) <= 1e-9


@pytest.mark.parametrize("head", [CATEGORICAL, DIRICHLET])
@pytest.mark.parametrize("seed", range(5))
def test_gradient_finite_differences(head, seed):
    rng = np.random.default_rng(seed)
    sizes = [7, 6, 8] if head == CATEGORICAL else [5, 6, 8]
    pol = init_policy(sizes, head, rng)
    x = rng.random(sizes[0])
    target = int(rng.integers(8)) if head == CATEGORICAL else rng.dirichlet(np.ones(8))
    _fd_check(pol, x, target, rng.choice(pol.params.size, 20, replace=False))


def test_score_function_zero_mean():
    pol = _const_logits(np.zeros(8))
    rng = np.random.default_rng(0)
    a, _ = sample_phase(pol, np.zeros((100_000, 1)), rng)
    per = np.stack([grad_logprob(pol, np.zeros(1), k) for k in range(8)])
    # exact expectation under the uniform policy
    assert np.abs(per.mean(axis=0)).max() < 1e-12
    g = per[a]
    mean, sd = g.mean(axis=0), g.std(axis=0) / np.sqrt(len(a))
    assert (np.abs(mean) <= 3 * sd + 1e-12).all()


def test_gradient_deterministic_and_batched():
    rng = np.random.default_rng(5)
    pol = phase_policy(rng)
    x = rng.random((4, 79))
    a = rng.integers(8, size=4)
    g1 = grad_logprob(pol, x[0], a[0])
    assert g1.tobytes() == grad_logprob(pol, x[0], a[0]).tobytes()
    coef = np.array([0.5, -1.0, 2.0, 0.0])
    batched = weighted_grad_logprob(pol, x, a, coef)
    summed = sum(c * grad_logprob(pol, xi, ai) for c, xi, ai in zip(coef, x, a))
    assert np.allclose(batched, summed, atol=1e-12)


def test_entropy_gradient_fd():
    rng = np.random.default_rng(6)
    pol = init_policy([5, 4, 8], CATEGORICAL, rng)
    x = rng.random((3, 5))
    h, g = entropy_grad(pol, x)
    p = softmax(forward(pol, x), axis=1)
    assert h == pytest.approx(-(p * np.log(p)).sum(axis=1).mean())
    for k in rng.choice(pol.params.size, 10, replace=False):
        up, dn = pol.copy(), pol.copy()
        up.params[k] += 1e-5
        dn.params[k] -= 1e-5
        fd = (entropy_grad(up, x)[0] - entropy_grad(dn, x)[0]) / 2e-5
        assert abs(fd - g[k]) <= 1e-6


def test_clipped_surrogate_matches_plain_on_policy():
    rng = np.random.default_rng(7)
    pol = init_policy([5, 4, 8], CATEGORICAL, rng)
    x = rng.random((16, 5))
    a = rng.integers(8, size=16)
    adv = rng.normal(size=16)
    old = logprob(pol, x, a)
    g = clipped_surrogate_grad(pol, x, a, adv, old, 0.2)
    assert np.allclose(g, weighted_grad_logprob(pol, x, a, adv / 16), atol=1e-12)
    # ratios far outside the clip range in the favoured direction contribute nothing
    g0 = clipped_surrogate_grad(pol, x, a, np.abs(adv), old - 5.0, 0.2)
    assert (g0 == 0).all()


def test_apply_update_examples():
    pol = phase_policy(np.random.default_rng(0))
    assert (apply_update(pol, np.zeros_like(pol.params), 0.5).params == pol.params).all()
    assert (apply_update(pol, np.ones_like(pol.params), 0.0).params == pol.params).all()
    up = apply_update(pol, np.ones_like(pol.params), 0.1)
    assert np.allclose(up.params - pol.params, 0.1)
    with pytest.raises(ValueError):
        apply_update(pol, np.ones(3), 0.1)


def test_adam_moves_along_gradient_sign():
    pol = _const_logits(np.zeros(8))
    g = np.linspace(-1, 1, pol.params.size)
    new = Adam(0.01).step(pol, g)
    assert np.allclose(new.params - pol.params, 0.01 * np.sign(g), atol=1e-6)


def test_normalize_rewards():
    r = normalize_rewards([1.0, 2.0, 3.0])
    assert r.mean() == pytest.approx(0.0) and r.std() == pytest.approx(1.0, rel=1e-6)
    assert (normalize_rewards(np.full(5, 3.0)) == 0).all()


@pytest.mark.parametrize("make", [phase_policy, mixture_policy])
def test_checkpoint_roundtrip(tmp_path, make):
    pol = make(np.random.default_rng(9))
    save_policy(pol, tmp_path / "p.bin")
    back = load_policy(tmp_path / "p.bin")
    assert back.head == pol.head and back.layer_shapes == pol.layer_shapes
    x = np.random.default_rng(1).random((3, pol.in_dim))
    assert forward(back, x).tobytes() == forward(pol, x).tobytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        load_policy(tmp_path / "missing.bin")
    (tmp_path / "junk.bin").write_bytes(b"not a policy")
    with pytest.raises(CheckpointError):
        load_policy(tmp_path / "junk.bin")
    pol = phase_policy(np.random.default_rng(0))
    save_policy(pol, tmp_path / "p.bin")
    blob = (tmp_path / "p.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(blob[:-16])
    with pytest.raises(CheckpointError):
        load_policy(tmp_path / "cut.bin")


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_property_softmax_normalization(seed):
    rng = np.random.default_rng(seed)
    pol = init_policy([6, 5, 8], CATEGORICAL, rng, scale=10.0)
    x = rng.normal(size=6)
    lp = logprob(pol, np.tile(x, (8, 1)), np.arange(8))
    assert abs(np.exp(lp).sum() - 1) <= 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_property_dirichlet_samples_on_simplex(seed):
    rng = np.random.default_rng(seed)
    pol = init_policy([4, 8], DIRICHLET, rng, scale=20.0)
    w, lp = sample_weights(pol, rng.normal(size=4), rng)
    assert (w >= 0).all() and abs(w.sum() - 1) <= 1e-9 and np.isfinite(lp)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([CATEGORICAL, DIRICHLET]))
def test_property_gradient_check(seed, head):
    rng = np.random.default_rng(seed)
    pol = init_policy([4, 5, 8], head, rng)
    x = rng.random(4)
    target = int(rng.integers(8)) if head == CATEGORICAL else rng.dirichlet(np.ones(8) * 2)
    _fd_check(pol, x, target, rng.choice(pol.params.size, 5, replace=False))


def test_uniform_logprob_constant():
    assert np.log(5040.0) == pytest.approx(gammaln(8.0))
