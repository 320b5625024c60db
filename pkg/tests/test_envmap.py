import math

import numpy as np
import pytest
import torch

from emitrecon.envmap import EnvMap, envmap_grad, eval_envmap, fibonacci_sphere


def make_env(mu, lam, xi):
    env = EnvMap(len(mu), dtype=torch.float64)
    with torch.no_grad():
        env.mu.copy_(torch.as_tensor(np.asarray(mu, dtype=np.float64).reshape(-1, 3)))
        env.lam.copy_(torch.as_tensor(np.asarray(lam, dtype=np.float64)))
        env.xi.copy_(torch.as_tensor(np.asarray(xi, dtype=np.float64).reshape(-1, 3)))
    return env


def random_env(k=5, seed=0):
    rng = np.random.default_rng(seed)
    xi = rng.normal(size=(k, 3))
    xi /= np.linalg.norm(xi, axis=1, keepdims=True)
    return make_env(rng.normal(size=(k, 3)), rng.uniform(0.5, 8.0, k), xi)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def test_vanishing_sharpness():
    env = make_env([[1, 1, 1]], [1e-12], [[0, 0, 1]])
    for d in ([1, 0, 0], [0, -1, 0], unit([1, 2, -3])):
        np.testing.assert_allclose(eval_envmap(env, unit(d)), 1.313262, atol=1e-6)


def test_no_lobes():
    env = EnvMap(0, dtype=torch.float64)
    np.testing.assert_allclose(eval_envmap(env, [0, 0, 1]), math.log(2), atol=1e-15)


def test_on_axis():
    env = make_env([[2, 2, 2]], [4.0], [unit([1, 1, 0])])
    np.testing.assert_allclose(eval_envmap(env, unit([1, 1, 0])), 2.126928, atol=1e-6)


def test_rejects_non_unit():
    with pytest.raises(ValueError):
        eval_envmap(EnvMap(2), [0, 0, 2])


def test_nonnegative_everywhere():
    env = make_env(np.full((4, 3), -50.0), [1.0] * 4, fibonacci_sphere(4))
    d = torch.as_tensor(fibonacci_sphere(2000))
    assert (env(d) >= 0).all()


def test_rotation_equivariance():
    env = random_env(6, seed=3)
    rng = np.random.default_rng(4)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    rot = make_env(env.mu.detach().numpy(), env.lam.detach().numpy(), env.xi.detach().numpy() @ q.T)
    for _ in range(20):
        d = unit(rng.normal(size=3))
        np.testing.assert_allclose(eval_envmap(rot, q @ d), eval_envmap(env, d), atol=1e-6)


def test_grad_zero_sharpness_lobe():
    env = make_env([[0.3, -0.2, 1.0]], [0.0], [[0, 0, 1]])
    up = np.array([1.0, 2.0, -0.5])
    g = envmap_grad(env, unit([1, 0, 1]), up)
    pre = np.array([0.3, -0.2, 1.0])
    np.testing.assert_allclose(g.mu[0], up / (1 + np.exp(-pre)), atol=1e-15)


def test_grad_lambda_zero_on_axis():
    env = random_env(3)
    d = env.xi.detach().numpy()[1]
    g = envmap_grad(env, d, np.ones(3))
    assert abs(g.lam[1]) < 1e-15


def fd_envmap(env, d, up, name, idx, h=1e-5):
    p = getattr(env, name)
    flat = p.data.reshape(-1)
    orig = float(flat[idx])
    flat[idx] = orig + h
    fp = float(up @ eval_envmap(env, d))
    flat[idx] = orig - h
    fm = float(up @ eval_envmap(env, d))
    flat[idx] = orig
    return (fp - fm) / (2 * h)


def test_grad_matches_finite_differences():
    env = random_env(4, seed=7)
    d = unit([0.3, -0.4, 0.8])
    up = np.array([0.7, -1.1, 0.4])
    g = envmap_grad(env, d, up)
    for i in range(12):
        assert abs(g.mu.reshape(-1)[i] - fd_envmap(env, d, up, "mu", i)) <= 1e-5 * max(1, abs(g.mu.reshape(-1)[i]))
    for i in range(4):
        fd = fd_envmap(env, d, up, "lam", i)
        assert abs(g.lam[i] - fd) <= 1e-5 * max(1e-3, abs(fd))
    # the axis gradient is tangent: compare along tangent directions
    xi = env.xi.detach().numpy().copy()
    rng = np.random.default_rng(0)
    for k in range(4):
        t = rng.normal(size=3)
        t -= (t @ xi[k]) * xi[k]
        t /= np.linalg.norm(t)
        h = 1e-5
        vals = []
        for s in (h, -h):
            xs = xi.copy()
            xs[k] = xi[k] + s * t
            vals.append(up @ eval_envmap(make_env(env.mu.detach().numpy(), env.lam.detach().numpy(), xs), d))
        fd = (vals[0] - vals[1]) / (2 * h)
        an = g.xi[k] @ t
        assert abs(an - fd) <= 1e-5 * max(1e-3, abs(fd))
        assert abs(g.xi[k] @ xi[k]) < 1e-12


def test_autograd_agrees_with_handwritten_rule():
    env = random_env(5, seed=11)
    d = unit([-0.2, 0.9, 0.1])
    up = np.array([1.0, 0.5, -2.0])
    g = envmap_grad(env, d, up)
    out = env(torch.as_tensor(d)) @ torch.as_tensor(up)
    out.backward()
    np.testing.assert_allclose(env.mu.grad.numpy(), g.mu, rtol=1e-10, atol=1e-14)
    np.testing.assert_allclose(env.lam.grad.numpy(), g.lam, rtol=1e-10, atol=1e-14)
    xi = env.xi.detach().numpy()
    tang = env.xi.grad.numpy() - np.sum(env.xi.grad.numpy() * xi, -1, keepdims=True) * xi
    np.testing.assert_allclose(tang, g.xi, rtol=1e-10, atol=1e-14)


def test_project_renormalizes():
    env = EnvMap(8, dtype=torch.float64)
    with torch.no_grad():
        env.xi.mul_(3.0)
        env.lam.fill_(-1.0)
    env.project()
    np.testing.assert_allclose(env.xi.norm(dim=-1).detach().numpy(), 1.0, atol=1e-12)
    assert (env.lam > 0).all()


def test_default_initialisation():
    env = EnvMap()
    assert env.n_lobes == 48
    assert torch.all(env.lam == 10.0)
    assert float(env.mu.detach().min()) >= 0 and float(env.mu.detach().max()) <= 0.01
    np.testing.assert_allclose(env.xi.norm(dim=-1).detach().numpy(), 1.0, atol=1e-6)
