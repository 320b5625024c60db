import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from emitrecon.brdf import BrdfParams, brdf_grad, disney_brdf, eval_brdf


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


Z = np.array([0.0, 0.0, 1.0])


def test_grazing_incidence_is_black():
    wi = unit([1, 0, 0])
    out = eval_brdf(Z, unit([0.3, 0.2, 1]), wi, BrdfParams([0.8, 0.5, 0.2], 0.4, 0.3))
    np.testing.assert_array_equal(out, np.zeros(3))


def test_metallic_kills_diffuse():
    # with m = 1 the result does not depend on the diffuse lobe: F0 = b and no b/pi term
    wo, wi = unit([0.2, 0.1, 1]), unit([-0.4, 0.3, 1])
    p = BrdfParams([0.3, 0.6, 0.9], 0.5, 1.0)
    spec_only = eval_brdf(Z, wo, wi, p)
    h = unit(wo + wi)
    d = math.exp(2 * (Z @ h - 1) / 0.5 ** 4) / (math.pi * 0.5 ** 4)
    f = p.base_color + (1 - p.base_color) * (1 - (wo @ h) ** 5)
    k = 0.125
    g = (Z @ wo) * (Z @ wi) / (((Z @ wo) * (1 - k) + k) * ((Z @ wi) * (1 - k) + k))
    np.testing.assert_allclose(spec_only, d * f * g / (4 * (Z @ wo)), rtol=1e-12)
    g_ = brdf_grad(Z, wo, wi, p, np.ones(3))
    # no diffuse contribution to d/db: only the F0 = b path remains
    dspec_db = d * g / (4 * (Z @ wo)) * (1 - (1 - (wo @ h) ** 5))
    np.testing.assert_allclose(g_.base_color, dspec_db, rtol=1e-10)


def test_normal_incidence_reference():
    p = BrdfParams([1.0, 1.0, 1.0], 0.5, 0.0)
    out = eval_brdf(Z, Z, Z, p)
    # D = 1/(pi r^4), F = 0.04 + 0.96 (1 - 1) = 0.04, G = 1
    expected = 1 / (math.pi * 0.0625) * 0.04 / 4 + 1 / math.pi
    np.testing.assert_allclose(out, expected, atol=1e-12)
    np.testing.assert_allclose(out, 0.369240, atol=1e-5)


def test_opposite_directions_flagged():
    # wi = -wo leaves the half vector undefined: the specular term is dropped and flagged
    n = torch.tensor([[0.0, 0.0, 1.0]], dtype=torch.float64)
    wo_t = torch.tensor([[1.0, 0.0, 0.0]], dtype=torch.float64)
    out, deg = disney_brdf(n, wo_t, -wo_t, torch.full((1, 3), 0.5, dtype=torch.float64),
                           torch.tensor([0.5], dtype=torch.float64), torch.tensor([0.0], dtype=torch.float64),
                           return_degenerate=True)
    assert bool(deg[0])
    assert torch.isfinite(out).all()


def test_rejects_back_facing_view():
    with pytest.raises(ValueError):
        eval_brdf(Z, unit([0, 0, -1]), Z, BrdfParams([0.5] * 3, 0.5, 0.0))


def test_params_validated():
    with pytest.raises(ValueError):
        BrdfParams([1.2, 0, 0], 0.5, 0.5)
    with pytest.raises(ValueError):
        BrdfParams([0.2, 0, 0], 1.5, 0.5)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1),
       st.floats(-1, 1))
def test_nonnegative(r, m, ox, oy, ix, iy):
    wo = unit([ox, oy, 1.0])
    wi = unit([ix, iy, 0.5])
    out = eval_brdf(Z, wo, wi, BrdfParams([0.2, 0.7, 1.0], r, m))
    assert (out >= 0).all() and np.isfinite(out).all()


def test_diffuse_energy_integrates_to_albedo():
    rng = np.random.default_rng(0)
    m = 100_000
    u1, u2 = rng.random(m), rng.random(m)
    z = u1
    rr = np.sqrt(1 - z * z)
    wi = np.stack([rr * np.cos(2 * np.pi * u2), rr * np.sin(2 * np.pi * u2), z], -1)
    base = np.array([0.3, 0.6, 0.9])
    # diffuse lobe alone: (n.wi) b / pi, estimated with pdf 1/(2 pi)
    t = lambda a: torch.as_tensor(a, dtype=torch.float64)  # noqa: E731
    full = disney_brdf(t(np.tile(Z, (m, 1))), t(np.tile(Z, (m, 1))), t(wi), t(np.tile(base, (m, 1))),
                       t(np.full(m, 0.6)), t(np.zeros(m))).numpy()
    diffuse = wi[:, 2:3] * base / np.pi
    spec = full - diffuse
    assert (spec >= -1e-15).all()
    est = (diffuse * 2 * np.pi).mean(0)
    assert np.all(np.abs(est - base) / base < 0.01)


def fd_brdf(n, wo, wi, base, r, m, up, which, h=1e-6):
    def f(base_, r_, m_, n_):
        return float(up @ eval_brdf(unit(n_), wo, wi, BrdfParams(base_, r_, m_)))

    if which == "roughness":
        return (f(base, r + h, m, n) - f(base, r - h, m, n)) / (2 * h)
    if which == "metallic":
        return (f(base, r, m + h, n) - f(base, r, m - h, n)) / (2 * h)
    raise ValueError(which)


@pytest.mark.parametrize("schlick", [False, True])
@pytest.mark.parametrize("seed", range(6))
def test_grad_matches_finite_differences(seed, schlick):
    rng = np.random.default_rng(seed)
    wo = unit([*rng.uniform(-0.6, 0.6, 2), 1.0])
    wi = unit([*rng.uniform(-0.6, 0.6, 2), 1.0])
    base = rng.uniform(0.1, 0.9, 3)
    r, m = rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)
    up = rng.normal(size=3)
    p = BrdfParams(base, r, m)
    g = brdf_grad(Z, wo, wi, p, up, schlick=schlick)

    def val(base_=base, r_=r, m_=m, n_=Z):
        return float(up @ eval_brdf(n_, wo, wi, BrdfParams(base_, r_, m_), schlick=schlick))

    h = 1e-6
    for c in range(3):
        e = np.eye(3)[c] * h
        fd = (val(base_=base + e) - val(base_=base - e)) / (2 * h)
        assert abs(g.base_color[c] - fd) <= 1e-4 * max(abs(fd), 1e-6)
    fd = (val(r_=r + h) - val(r_=r - h)) / (2 * h)
    assert abs(g.roughness - fd) <= 1e-4 * max(abs(fd), 1e-6)
    fd = (val(m_=m + h) - val(m_=m - h)) / (2 * h)
    assert abs(g.metallic - fd) <= 1e-4 * max(abs(fd), 1e-6)
    # the raw-normal gradient, compared along directions that keep the normal valid
    t = lambda a: torch.as_tensor(a, dtype=torch.float64)  # noqa: E731
    for c in range(3):
        e = np.eye(3)[c] * h

        def raw(nv):
            with torch.no_grad():
                return float(t(up) @ disney_brdf(t(nv), t(wo), t(wi), t(base), t(r), t(m), schlick=schlick))

        fd = (raw(Z + e) - raw(Z - e)) / (2 * h)
        assert abs(g.normal[c] - fd) <= 1e-4 * max(abs(fd), 1e-6)


def test_handwritten_grad_agrees_with_autograd():
    rng = np.random.default_rng(42)
    t = lambda a: torch.as_tensor(a, dtype=torch.float64)  # noqa: E731
    wo, wi = unit([0.2, -0.3, 1]), unit([-0.5, 0.1, 1])
    base, r, m, up = rng.uniform(0.1, 0.9, 3), 0.45, 0.3, rng.normal(size=3)
    tb, tr, tm, tn = (t(v).requires_grad_(True) for v in (base, r, m, Z))
    (t(up) @ disney_brdf(tn, t(wo), t(wi), tb, tr, tm)).backward()
    g = brdf_grad(Z, wo, wi, BrdfParams(base, r, m), up)
    np.testing.assert_allclose(tb.grad.numpy(), g.base_color, rtol=1e-10)
    np.testing.assert_allclose(float(tr.grad), g.roughness, rtol=1e-10)
    np.testing.assert_allclose(float(tm.grad), g.metallic, rtol=1e-10)
    np.testing.assert_allclose(tn.grad.numpy(), g.normal, rtol=1e-10, atol=1e-14)
