import io
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

import corpus
import oracles
from bodycomp import render
from bodycomp.errors import FewerThanTwoCenters, PathOutOfBounds
from bodycomp.phantoms import Pocket, SlicePhantomSpec, generate_slice_phantom, generate_spine_phantom
from bodycomp.spine import analyze_spine
from bodycomp.tissue import process_slice
from bodycomp.volume_io import CTVolume


def test_resample_identity():
    rng = np.random.default_rng(0)
    v = rng.normal(size=(6, 7, 8))
    out = render.resample_isotropic(CTVolume(v, (1.2, 1.2, 1.2)))
    assert np.max(np.abs(out.voxels - v)) < 1e-6


def test_resample_constant_exact():
    out = render.resample_isotropic(CTVolume(np.full((5, 6, 7), -123.25), (0.5, 0.8, 2.0)))
    assert np.all(out.voxels == -123.25)


def test_resample_z_ramp():
    z = np.arange(10, dtype=float)
    v = np.broadcast_to(7.0 * z - 3.0, (4, 4, 10)).copy()
    out = render.resample_isotropic(CTVolume(v, (1.0, 1.0, 2.0)))
    assert out.shape == (4, 4, 19)
    expected = 7.0 * (np.arange(19) * 0.5) - 3.0
    assert np.max(np.abs(out.voxels[2, 2] - expected)) < 1e-6


def test_resample_cubic_reproduced():
    z = np.arange(8, dtype=float)
    v = np.broadcast_to(0.1 * z ** 3 - z ** 2 + 2, (2, 2, 8)).copy()
    out = render.resample_isotropic(CTVolume(v, (1.0, 1.0, 3.0)))
    pos = np.arange(out.shape[2]) / 3.0
    assert np.max(np.abs(out.voxels[0, 0] - (0.1 * pos ** 3 - pos ** 2 + 2))) < 1e-6


def test_resample_mean_on_smooth_phantom():
    # the end-sample weighting of a discrete mean shifts it by O(1/nz); 40 slices keeps that small
    g = np.meshgrid(*[np.linspace(-1, 1, n) for n in (20, 20, 40)], indexing="ij")
    v = 40.0 + 100.0 * np.exp(-(g[0] ** 2 + g[1] ** 2 + g[2] ** 2) * 2)
    out = render.resample_isotropic(CTVolume(v, (1.0, 1.0, 2.5)))
    assert abs(out.voxels.mean() - v.mean()) < 0.5


def test_window():
    hu = np.array([-1000.0, -150.0, 50.0, 250.0, 3000.0])
    assert list(render.window(hu, 50.0, 400.0)) == [0, 0, 128, 255, 255]


# ------------------------------------------------------------------ CPR path

def test_path_needs_two_centers():
    with pytest.raises(FewerThanTwoCenters):
        render.build_cpr_path([(1, 2, 3)], 10)


def test_colinear_path():
    centers = [(10, 20, 40), (14, 26, 20), (12, 23, 30)]
    p = render.build_cpr_path(centers, 60)
    s = p.samples
    inside = (s[:, 2] >= 20) & (s[:, 2] <= 40)
    t = (s[inside, 2] - 20) / 20
    assert np.max(np.abs(s[inside, 0] - (14 - 4 * t))) < 1e-9
    assert np.max(np.abs(s[inside, 1] - (26 - 6 * t))) < 1e-9
    assert np.all(s[s[:, 2] < 20, :2] == (14, 26)) and np.all(s[s[:, 2] > 40, :2] == (10, 20))


def test_y_only_path():
    p = render.build_cpr_path([(5, 10, 0), (5, 30, 20)], 21)
    assert np.all(p.samples[:, 0] == 5)
    assert np.allclose(p.samples[:, 1], 10 + np.arange(21))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 50), st.floats(0, 50)), min_size=2, max_size=6), st.data())
def test_zigzag_segment_membership(xy, data):
    zs = sorted(data.draw(st.sets(st.integers(0, 79), min_size=len(xy), max_size=len(xy))))
    centers = [(x, y, z) for (x, y), z in zip(xy, zs)]
    p = render.build_cpr_path(centers, 80)
    assert np.all(np.diff(p.samples[:, 2]) > 0)
    for x, y, z in p.samples:
        ox, oy = oracles.path_point(centers, z)
        assert abs(x - ox) < 1e-9 and abs(y - oy) < 1e-9
    for cx, cy, cz in centers:
        sx, sy, _ = p.samples[int(cz)]
        assert abs(sx - cx) <= 0.5 and abs(sy - cy) <= 0.5


def test_path_out_of_bounds():
    vol = CTVolume(np.zeros((10, 10, 10)), (1, 1, 1))
    p = render.build_cpr_path([(5, 5, 0), (12, 5, 9)], 10)
    with pytest.raises(PathOutOfBounds):
        render.extract_cpr(vol, p)


def test_cpr_row_order_superior_first():
    v = np.broadcast_to(np.arange(10, dtype=float), (4, 4, 10)).copy()
    p = render.build_cpr_path([(1, 1, 0), (1, 1, 9)], 10)
    img = render.extract_cpr(CTVolume(v, (1, 1, 1)), p, "sagittal")
    assert img.shape == (10, 4)
    assert list(img[:, 0]) == list(range(9, -1, -1))


@pytest.fixture(scope="module")
def spine_case():
    vol, mask, _ = generate_spine_phantom(corpus.small_spine_spec())
    return vol, mask, analyze_spine(vol, mask).results


def test_render_cpr_deterministic(spine_case):
    vol, mask, results = spine_case
    path = render.build_cpr_path(render.cpr_centers(results), vol.shape[2])
    a = render.render_cpr(vol, path, results, mask)
    b = render.render_cpr(vol, path, results, mask)
    assert a.dtype == np.uint8 and a.shape[2] == 3
    assert np.array_equal(a, b)
    # 1.5 mm slices shown at 1 mm pixels
    assert a.shape[0] == int((vol.shape[2] - 1) * 1.5) + 1


def test_render_cpr_sagittal_width(spine_case):
    vol, mask, results = spine_case
    path = render.build_cpr_path(render.cpr_centers(results), vol.shape[2])
    img = render.render_cpr(vol, path, results, mask, plane="sagittal", roi_shape="cube")
    assert img.shape[1] == vol.shape[1]


# ------------------------------------------------------------------ axial overlay

def _rendered(masks, metrics=(), level=None, hu=None, style=None):
    hu = np.linspace(-200, 300, 40 * 30).reshape(40, 30) if hu is None else hu
    return hu, render.render_axial_overlay(hu, masks, metrics, level, style)


def test_overlay_empty_masks_gray_with_border():
    hu, img = _rendered({}, level="L3")
    gray = render.window(hu.T, *render.SOFT_TISSUE_WINDOW)
    b = render.OverlayStyle().border_px
    inner = img[b:-b, b:-b]
    assert np.array_equal(inner[16:, :, 0], gray[b:-b, b:-b][16:])
    assert np.all(img[0, :] == render.LEVEL_COLORS["L3"])
    assert np.all(img[:, -1] == render.LEVEL_COLORS["L3"])


def test_overlay_full_muscle_blend():
    hu = np.linspace(-200, 300, 40 * 30).reshape(40, 30)
    masks = {"muscle": np.ones_like(hu, bool)}
    _, img = _rendered(masks, hu=hu)
    gray = render.window(hu.T, *render.SOFT_TISSUE_WINDOW).astype(float)
    a = render.OverlayStyle().alpha
    expected = np.stack([np.round((1 - a) * gray + a * c) for c in (255, 0, 0)], axis=-1)
    assert np.array_equal(img, expected.astype(np.uint8))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_overlay_only_touches_masked_pixels(seed):
    rng = np.random.default_rng(seed)
    hu = rng.uniform(-300, 300, (24, 20))
    labels = rng.integers(0, 5, (24, 20))
    masks = {t: labels == i + 1 for i, t in enumerate(("muscle", "imat", "vat", "sat"))}
    img = render.render_axial_overlay(hu, masks)
    gray = render.window(hu.T, *render.SOFT_TISSUE_WINDOW)
    outside = (labels == 0).T
    assert np.all(img[outside] == gray[outside][:, None])


def test_overlay_text_follows_metrics():
    spec = SlicePhantomSpec(pockets=[Pocket((19, 60), 16, -100.0)])
    hu, raw, _ = generate_slice_phantom(spec)
    final, mets = process_slice(hu, raw, spacing=spec.spacing)
    assert render.metrics_lines(mets) == [m.summary() for m in mets]
    plain = render.render_axial_overlay(hu, final)
    annotated = render.render_axial_overlay(hu, final, mets)
    assert not np.array_equal(plain, annotated)
    changed = np.argwhere(np.any(plain != annotated, axis=2))
    assert changed[:, 0].max() < 12 * len(mets) + 3  # text stays in its block
    mets[0] = replace(mets[0], area_cm2=mets[0].area_cm2 + 1.0)
    assert not np.array_equal(annotated, render.render_axial_overlay(hu, final, mets))


def test_png_bytes_deterministic(tmp_path):
    hu, img = _rendered({"sat": np.eye(40, 30, dtype=bool)}, level="T12")
    a = render.save_png(img, tmp_path / "a.png").read_bytes()
    b = render.save_png(img, tmp_path / "b.png").read_bytes()
    assert a == b
    back = np.asarray(Image.open(io.BytesIO(a)))
    assert np.array_equal(back, img)


def test_style_validation():
    with pytest.raises(ValueError):
        render.OverlayStyle(alpha=0.0)
    with pytest.raises(ValueError):
        render.OverlayStyle(tissue_colors={"muscle": (1, 1, 1), "sat": (1, 1, 1)})
