import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from bodycomp.errors import MasksOverlap, ShapeMismatch
from bodycomp.phantoms import Hole, Pocket, SlicePhantomSpec, generate_slice_phantom
from bodycomp.tissue import (
    TISSUES,
    PostProcessConfig,
    TissueMetrics,
    compute_metrics,
    fill_holes,
    filter_small_components,
    postprocess_masks,
    process_slice,
    relabel_imat,
)


def _ring_with_hole(n):
    """Solid square with an enclosed hole of exactly ``n`` pixels."""
    m = np.ones((40, 40), bool)
    m[0], m[-1], m[:, 0], m[:, -1] = False, False, False, False
    w = int(np.ceil(np.sqrt(n)))
    k = np.arange(n)
    m[5 + k % w, 5 + k // w] = False
    return m


@pytest.mark.parametrize("tissue,size,filled", [
    ("sat", 100, True), ("sat", 199, True), ("sat", 200, False), ("sat", 250, False),
    ("muscle", 19, True), ("muscle", 20, False), ("vat", 4, True), ("imat", 25, False),
])
def test_hole_thresholds(tissue, size, filled):
    m = _ring_with_hole(size)
    out = fill_holes(m, tissue)
    assert int((out & ~m).sum()) == (size if filled else 0)
    assert not out[0].any()


def test_border_background_untouched():
    m = np.zeros((10, 10), bool)
    m[3:7, 0:5] = True
    m[4:6, 0:2] = False  # pocket open to the border
    assert np.array_equal(fill_holes(m, "muscle"), m)


@settings(max_examples=60, deadline=None)
@given(m=arrays(bool, (16, 16)), tissue=st.sampled_from(TISSUES))
def test_fill_holes_properties(m, tissue):
    once = fill_holes(m, tissue)
    assert np.all(once[m])
    assert np.array_equal(fill_holes(once, tissue), once)
    assert np.array_equal(once, np.array(oracles.fill_holes(m.tolist(), PostProcessConfig().hole_threshold(tissue))))
    border_bg = [comp for comp in oracles.components((~m).tolist(), conn=4)
                 if any(a in (0, 15) or b in (0, 15) for a, b in comp)]
    for comp in border_bg:
        assert not any(once[a, b] for a, b in comp)


def test_imat_blob_relabelled():
    muscle = np.zeros((20, 20), bool)
    muscle[2:18, 2:18] = True
    hu = np.full((20, 20), 40.0)
    hu[5:8, 5:9] = -100.0  # 12 px
    m2, imat = relabel_imat(muscle, hu)
    assert imat.sum() == 12 and not (m2 & imat).any()


def test_small_island_reverts():
    muscle = np.ones((20, 20), bool)
    hu = np.full((20, 20), -20.0)
    hu[5, 5:10] = -100.0  # 5 px
    m2, imat = relabel_imat(muscle, hu)
    assert not imat.any() and m2.all()


def test_strict_bounds():
    muscle = np.ones((6, 6), bool)
    for v, expect in ((-30.0, 0), (-190.0, 0), (-30.0001, 36), (-189.9999, 36)):
        _, imat = relabel_imat(muscle, np.full((6, 6), v))
        assert imat.sum() == expect


@settings(max_examples=60, deadline=None)
@given(muscle=arrays(bool, (16, 16)),
       hu=arrays(np.float64, (16, 16), elements=st.sampled_from([-250.0, -190.0, -120.0, -30.0, -29.0, 40.0])))
def test_relabel_partition(muscle, hu):
    m2, imat = relabel_imat(muscle, hu)
    assert not (m2 & imat).any()
    assert np.array_equal(m2 | imat, muscle)
    assert np.all((hu[imat] > -190) & (hu[imat] < -30))
    for comp in oracles.components(imat.tolist(), conn=8):
        assert len(comp) >= 10


def test_filter_small_components_diagonal():
    m = np.zeros((12, 12), bool)
    for i in range(10):
        m[i, i] = True  # 8-connected chain of 10
    assert filter_small_components(m, 10).sum() == 10
    assert filter_small_components(m, 11).sum() == 0


def test_area_formula():
    m = np.zeros((20, 20), bool)
    m.flat[:250] = True
    (met,) = compute_metrics({"muscle": m}, np.full((20, 20), 40.0), (0.8, 0.8))
    assert met.pixel_count == 250
    assert met.area_cm2 == pytest.approx(1.60, abs=1e-12)
    assert met.mean_hu == 40.0


def test_empty_tissue():
    z = np.zeros((5, 5), bool)
    mets = {m.tissue: m for m in compute_metrics({t: z for t in TISSUES}, np.zeros((5, 5)), (1, 1))}
    assert all(m.area_cm2 == 0 and m.mean_hu is None for m in mets.values())
    assert mets["imat"].summary() == "IMAT: 0.0 mm2, --"


def test_overlap_and_shape():
    a = np.ones((3, 3), bool)
    with pytest.raises(MasksOverlap):
        compute_metrics({"muscle": a, "sat": a}, np.zeros((3, 3)), (1, 1))
    with pytest.raises(ShapeMismatch):
        compute_metrics({"muscle": a}, np.zeros((4, 3)), (1, 1))


@settings(max_examples=40, deadline=None)
@given(m=arrays(bool, (10, 10)), sx=st.floats(0.3, 2.0), sy=st.floats(0.3, 2.0))
def test_area_integrality(m, sx, sy):
    (met,) = compute_metrics({"sat": m}, np.zeros((10, 10)), (sx, sy))
    back = met.area_cm2 * 100 / (sx * sy)
    assert abs(back - round(back)) < 1e-9 and round(back) == met.pixel_count


def test_phantom_full_chain():
    spec = SlicePhantomSpec(sat_thickness_px=20.0, pockets=[Pocket((27, 60), 30, -100.0)],
                            holes=[Hole("sat", (57, 22), 150)])
    hu, raw, truth = generate_slice_phantom(spec)
    final, mets = process_slice(hu, raw, spacing=spec.spacing)
    assert final["imat"].sum() == 30
    assert final["sat"][57:70, 22:34].all()
    for m in mets:
        assert m.pixel_count == truth.pixel_count[m.tissue]
        assert abs(m.mean_hu - truth.mean_hu[m.tissue]) <= 1e-6


def test_large_sat_hole_survives():
    spec = SlicePhantomSpec(sat_thickness_px=20.0, holes=[Hole("sat", (56, 20), 250)])
    hu, raw, truth = generate_slice_phantom(spec)
    final = postprocess_masks(hu, raw)
    assert np.array_equal(final["sat"], raw["sat"])
    assert final["sat"].sum() == truth.pixel_count["sat"]


def test_no_muscle():
    hu = np.zeros((8, 8))
    sat = np.zeros((8, 8), bool)
    sat[2:5, 2:5] = True
    final, mets = process_slice(hu, {"sat": sat})
    by = {m.tissue: m for m in mets}
    assert not final["imat"].any() and by["muscle"].area_cm2 == 0


def test_native_imat_skips_relabel():
    hu = np.full((30, 30), -100.0)  # fat HU everywhere
    muscle = np.zeros((30, 30), bool)
    muscle[2:28, 2:15] = True
    imat = np.zeros((30, 30), bool)
    imat[5:10, 20:25] = True  # 25 px native IMAT
    imat[26, 26] = True       # 1 px island -> muscle
    final = postprocess_masks(hu, {"muscle": muscle, "imat": imat, "vat": np.zeros_like(muscle),
                                   "sat": np.zeros_like(muscle)})
    assert final["imat"].sum() == 25
    assert final["muscle"].sum() == muscle.sum() + 1
    # without the native flag the fat-HU muscle would have become IMAT
    relabelled = postprocess_masks(hu, {"muscle": muscle}, native_imat=False)
    assert relabelled["imat"].sum() == muscle.sum()


def test_identity_without_pockets_or_holes():
    hu, raw, truth = generate_slice_phantom(SlicePhantomSpec())
    final = postprocess_masks(hu, raw)
    for t in ("muscle", "vat", "sat"):
        assert np.array_equal(final[t], raw[t])
    assert not final["imat"].any()


def test_determinism():
    hu, raw, _ = generate_slice_phantom(SlicePhantomSpec(pockets=[Pocket((19, 60), 16)]))
    a = postprocess_masks(hu, raw)
    b = postprocess_masks(hu, raw)
    assert all(np.array_equal(a[t], b[t]) for t in TISSUES)


def test_summary_format():
    assert TissueMetrics("sat", 1.234, -100.04, 5).summary() == "SAT: 123.4 mm2, -100.0 HU"
