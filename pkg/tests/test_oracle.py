import math
import sys
from pathlib import Path

import numpy as np
import pytest

from emitrecon.camera import Camera, look_at
from emitrecon.colorspace import srgb_to_linear
from emitrecon.io import load_dataset
from emitrecon.oracle import (AnalyticScene, PathTraceConfig, box_env, make_box_scene, make_two_surface_scene,
                              path_trace, point_radiance, render_view)
from emitrecon.synth import ldr_from_hdr, synthesize_dataset

sys.path.insert(0, str(Path(__file__).parent))
from test_renderer import hemisphere_integral_of_brdf  # noqa: E402


def floor_scene(env=1.0, albedo=0.5, rough=0.8):
    mu, lam, xi = box_env(env)
    return AnalyticScene(boxes=[(0.0, 0.0, -0.8, 1.2, 1.2, 0.2)], default_material=(albedo, albedo, albedo, rough, 0.0),
                         env_mu=mu, env_lam=lam, env_xi=xi)


def down_rays(n, x=0.0):
    o = np.zeros((n, 3))
    o[:, 0] = x
    o[:, 2] = 3.0
    toward = np.tile([0.0, 0.0, 1.0], (n, 1))
    return o, toward


def test_empty_scene_returns_environment():
    mu, lam, xi = box_env(0.3)
    scene = AnalyticScene(env_mu=mu, env_lam=lam, env_xi=xi)
    o, d = down_rays(5)
    out = path_trace(scene, o, d, PathTraceConfig(bounces=2, spp=4))
    np.testing.assert_allclose(out, 0.3, rtol=1e-12)


def test_config_rejects_negative_bounces():
    with pytest.raises(ValueError):
        PathTraceConfig(bounces=-1)


def test_zero_bounce_emitter_is_deterministic():
    scene = AnalyticScene(spheres=[(0.0, 0.0, 0.0, 0.5)],
                          emission_regions=[((0.0, 0.0, 0.0, 0.6, 0.6, 0.6), (2.0, 1.0, 0.5))])
    o, d = down_rays(3)
    o[:, 0] = [-0.2, 0.0, 0.2]
    a = path_trace(scene, o, d, PathTraceConfig(bounces=0, spp=1, seed=1, jitter=False), env=False)
    b = path_trace(scene, o, d, PathTraceConfig(bounces=0, spp=8, seed=9, jitter=False), env=False)
    np.testing.assert_allclose(a, b, rtol=1e-12)
    # an opaque hit composites the full emission
    np.testing.assert_allclose(a, np.tile([2.0, 1.0, 0.5], (3, 1)), rtol=1e-6)


def test_diffuse_floor_under_constant_environment():
    level, rough = 0.7, 0.8
    scene = floor_scene(level, 0.5, rough)
    o, d = down_rays(4)
    o[:, 1] = [-0.3, -0.1, 0.1, 0.3]
    out = path_trace(scene, o, d, PathTraceConfig(bounces=1, spp=4096, n_secondary=64))
    expected = level * hemisphere_integral_of_brdf(np.array([0.0, 0.0, 1.0]), [0.5, 0.5, 0.5, rough, 0.0], 200, 400)
    np.testing.assert_allclose(out, np.tile(expected, (4, 1)), rtol=0.02)


def test_variance_falls_as_inverse_spp():
    scene = floor_scene(0.7)
    n = 64
    o, d = down_rays(n)
    spps = np.array([64, 256, 1024, 4096])
    var = []
    for spp in spps:
        est = path_trace(scene, o, d, PathTraceConfig(bounces=1, spp=int(spp), n_secondary=32),
                         ids=np.arange(n) + 1000 * spp)
        var.append(est[:, 0].var(ddof=1))
    slope = np.polyfit(np.log(spps), np.log(var), 1)[0]
    assert abs(slope + 1) < 0.15, slope


def test_point_radiance_zero_bounces_is_emission():
    scene = make_two_surface_scene(3.0)
    pts = np.array([[0.0, 0.0, 0.55], [0.0, 0.0, -0.6]])
    wo = np.array([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0]])
    out = point_radiance(scene, pts, wo, bounces=0)
    np.testing.assert_allclose(out, [[3.0] * 3, [0.0] * 3])


# --- box scene ---------------------------------------------------------------

def patch_camera(res=48):
    c2w = look_at((-1.5, 0.0, -0.3), (0.6, 0.0, -0.3))
    return Camera.from_fov(c2w, res, res, 0.6)


def test_box_scene_patch_strength():
    scene = make_box_scene(5.0)
    assert scene.emission(np.array([[0.6, 0.0, -0.3]])).max() == 5.0
    assert scene.emission(np.array([[0.0, 0.0, -0.6]])).max() == 0.0
    img = render_view(scene, patch_camera(), PathTraceConfig(bounces=0, spp=1, jitter=False), env=False,
                      background=False)
    assert abs(img.max() - 5.0) < 0.05


def test_box_scene_strength_zero_is_dark():
    scene = make_box_scene(0.0)
    assert scene.emission_regions == []
    img = render_view(scene, patch_camera(16), PathTraceConfig(bounces=1, spp=4), env=False)
    assert img.max() == 0.0


@pytest.fixture(scope="module")
def small_box_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("box")
    ds = synthesize_dataset(make_box_scene(5.0), 2, 48, out, cfg=PathTraceConfig(spp=16, bounces=2),
                            emission_spp=64)
    return ds, out


def test_on_off_contrast_ordering_inverts(small_box_dataset):
    """Reflections show more on/off contrast than the emitter once the patch clips."""
    ds, _ = small_box_dataset
    inverted_at = {}
    for v in ds.views:
        on = next(f.hdr for f in ds.frames if f.view == v and f.on)
        off = next(f.hdr for f in ds.frames if f.view == v and not f.on)
        m = ds.masks[v]
        assert m.any()
        for e in (0.25, 0.5, 1.0, 2.0, 4.0):
            c = (ldr_from_hdr(e * on) - ldr_from_hdr(e * off)).max(-1)
            if c[~m].max() > np.median(c[m]):
                inverted_at[v] = e
                break
        c_dim = (ldr_from_hdr(0.25 * on) - ldr_from_hdr(0.25 * off)).max(-1)
        assert c_dim[~m].max() < np.median(c_dim[m])
    assert len(inverted_at) == len(ds.views)


def test_synthesized_files(small_box_dataset):
    ds, out = small_box_dataset
    assert len(list((out / "images").glob("*.png"))) == 4
    assert len(list((out / "hdr").glob("*.pfm"))) == 4
    assert len(list((out / "masks").glob("*.png"))) == 2
    assert sum(f.on for f in ds.frames) == 2


def test_ldr_hdr_consistency(small_box_dataset):
    _, out = small_box_dataset
    ds = load_dataset(out)
    for f in ds.frames:
        lin = srgb_to_linear(f.image.astype(np.float64))
        ref = np.clip(f.hdr.astype(np.float64), 0, 1)
        # one 8-bit step in sRGB is at most ~1/255 * 2.4 in linear near 1 after decoding
        assert np.abs(lin - ref).max() < 2.5 / 255
        np.testing.assert_allclose(f.image, np.round(ldr_from_hdr(f.hdr) * 255) / 255, atol=1e-6)


def test_env_free_off_images_are_black(tmp_path):
    scene = make_box_scene(5.0, env_level=0.0)
    ds = synthesize_dataset(scene, 1, 12, cfg=PathTraceConfig(spp=2, bounces=1), emission_spp=2)
    off = [f for f in ds.frames if not f.on]
    assert all(float(f.image.max()) == 0.0 for f in off)
    on = [f for f in ds.frames if f.on]
    assert all(float(f.image.max()) > 0.0 for f in on)
