import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import pair_aware_error, random_network_joints
from quadpose.camera import CameraModel, DepthImage
from quadpose.heatmap import (HEATMAP_SIZE, HeatmapError, HeatmapStack, NormalizedJoints,
                              crop_for_network, crop_transform_for_bbox, decode_heatmaps,
                              decode_to_network, denormalize_depth, denormalize_joints,
                              encode_heatmaps, find_modes, from_grid, mask_bbox, normalize_depth,
                              normalize_joints, quarter_offset, read_heatmaps, to_grid,
                              write_heatmaps)

CAM = CameraModel(365.0, 365.0, 256.0, 212.0, 512, 424)


def test_centred_square_mask_occupies_256_of_293():
    mask = np.zeros((424, 512), bool)
    mask[162:262, 206:306] = True
    depth = DepthImage(np.where(mask, 2000.0, 0.0), CAM)
    out, crop = crop_for_network(depth, mask)
    assert out.shape == (256, 256)
    assert np.isclose(crop.scale * 100, 256 * 256 / 293)
    cols = np.flatnonzero((out > 0).any(axis=0))
    assert abs((cols[-1] - cols[0] + 1) - 256 * 256 / 293) <= 1.0


def test_border_mask_still_square():
    mask = np.zeros((424, 512), bool)
    mask[0:50, 0:200] = True
    out, crop = crop_for_network(DepthImage(np.where(mask, 1500.0, 0.0), CAM), mask)
    assert out.shape == (256, 256)
    assert crop.pad["side"] == 200 and crop.pad["pad_top"] + crop.pad["pad_bottom"] == 150


@settings(max_examples=50)
@given(st.integers(0, 400), st.integers(0, 300), st.integers(1, 111), st.integers(1, 123))
def test_crop_inverse_recovers_bbox(c0, r0, w, h):
    crop = crop_transform_for_bbox(c0, r0, c0 + w - 1, r0 + h - 1)
    corners = np.array([[c0, r0], [c0 + w - 1, r0 + h - 1]], float)
    assert np.allclose(crop.invert(crop.apply(corners)), corners, atol=1e-9)
    # the long side spans 256/293 of the output, centred up to the odd 18/19 padding split
    edges = crop.apply(np.array([[c0 - 0.5, r0 - 0.5], [c0 + w - 0.5, r0 + h - 0.5]]))
    long_ax = 0 if w >= h else 1
    assert np.isclose(edges[1, long_ax] - edges[0, long_ax], 256 * 256 / 293)
    assert np.isclose(edges[0, long_ax] + edges[1, long_ax], 255.0, atol=1.0)


def test_empty_mask_rejected():
    with pytest.raises(HeatmapError):
        mask_bbox(np.zeros((4, 4), bool))


def test_depth_codes_at_reference_points():
    z = np.array([8000.0, 3000.0, 3000.0, 4000.0])
    out = normalize_depth(z)
    assert out[0] == 255
    z = np.array([3000.0, 3000.0, 4000.0])
    assert np.allclose(normalize_depth(z), [3000 / 8000 * 255, 127.5, 191.25])
    assert np.allclose(denormalize_depth(np.array([255.0, 127.5, 191.25])), [8000, 8000, 9000])


@settings(max_examples=200)
@given(st.floats(1.0, 8000.0), st.lists(st.floats(-2000.0, 2000.0), min_size=1, max_size=10))
def test_depth_normalization_is_inverse(root, offsets):
    z = np.concatenate([[root], root + np.array(offsets)])
    assert np.abs(denormalize_depth(normalize_depth(z)) - z).max() <= 1e-9


def test_depth_clamping():
    out = normalize_depth(np.array([9000.0, 9000.0 + 5000, 9000.0 - 5000]))
    assert np.allclose(out, [255, 255, 0])


def test_grid_formula():
    assert np.array_equal(to_grid(np.array([[100.0, 60.0, 200.0]]))[0] + 1, [26, 16, 51])
    assert np.allclose(from_grid([25, 15, 50]), [102, 62, 202])


def test_unimodal_and_bimodal_planes(skel):
    rng = np.random.default_rng(0)
    j = random_network_joints(skel, rng)
    st_ = encode_heatmaps(NormalizedJoints(j), skel)
    assert st_.planes.shape == (129, 64, 64)
    modes = find_modes(st_.planes)
    g = to_grid(j)
    single = next(i for i in range(43) if skel.pairs[i] == i)
    assert modes[3 * single][0][1:] == (g[single, 0], g[single, 1])
    paired = next(i for i in range(43) if skel.pairs[i] != i)
    assert len([m for m in modes[3 * paired] if m[0] > 0.5]) == 2


def test_quarter_offset_direction():
    p = np.zeros((64, 64))
    p[10, 10], p[10, 11], p[11, 10] = 1.0, 0.5, 0.2
    assert quarter_offset(p, 10, 10) == (0.25, 0.25)
    assert quarter_offset(p, 0, 0) == (0.0, 0.0)


def test_decode_nonpaired_exact_on_grid(skel):
    rng = np.random.default_rng(1)
    j = random_network_joints(skel, rng)
    d, conf, pred = decode_to_network(encode_heatmaps(NormalizedJoints(j), skel), skel)
    single = skel.pairs == np.arange(43)
    assert pred.all()
    # the cell index is exact; the quarter offset then moves at most 0.25 cell
    assert np.array_equal(np.floor((d[single] + 1.0) / 4.0), to_grid(j)[single])
    err = np.abs(d[single] - from_grid(to_grid(j)[single]))
    assert err.max() <= 1.0 + 1e-9


def test_decode_to_full_image_within_two_px(skel):
    rng = np.random.default_rng(2)
    mask = np.zeros((424, 512), bool)
    mask[100:300, 150:350] = True
    crop = crop_transform_for_bbox(*mask_bbox(mask))
    uv = crop.invert(rng.uniform(20, 235, (43, 2)))
    j3d = np.column_stack([(uv - [CAM.cx, CAM.cy]) * 2500 / 365, np.full(43, 2500.0)])
    j3d[1:, 2] += rng.uniform(-300, 300, 42)
    j3d[1:, :2] *= (j3d[1:, 2:] / 2500)
    norm = normalize_joints(j3d, CAM, crop)
    dec = decode_heatmaps(encode_heatmaps(norm, skel), skel, crop, CAM)
    single = skel.pairs == np.arange(43)
    gt2d = crop.invert(norm.j3d256[:, :2])
    err = np.linalg.norm(dec.j2d_full[single] - gt2d[single], axis=1)
    assert err.mean() <= 2.0
    # per joint: half a 4-px cell plus the quarter offset, per axis, in 256-space
    assert err.max() <= 3.0 * np.sqrt(2) / crop.scale


def test_paired_joints_recovered_up_to_swap(skel):
    rng = np.random.default_rng(3)
    for _ in range(20):
        j = random_network_joints(skel, rng)
        d, _, _ = decode_to_network(encode_heatmaps(NormalizedJoints(j), skel), skel)
        err = pair_aware_error(d, j, skel)
        assert np.abs(err).max() <= 3.0


def test_collision_rule(skel):
    rng = np.random.default_rng(4)
    j = random_network_joints(skel, rng)
    a = next(i for i in range(43) if skel.pairs[i] > i)
    b = skel.pairs[a]
    j[b, :2] = j[a, :2]                     # same image position, depths 3+ cells apart
    d, conf, pred = decode_to_network(encode_heatmaps(NormalizedJoints(j), skel), skel,
                                      chain=False)
    assert pred[a] and pred[b]
    winner, loser = (a, b) if conf[a] >= conf[b] else (b, a)
    assert np.array_equal(to_grid(d[winner])[:2], to_grid(j[a])[:2])
    assert sorted(to_grid(d[[a, b]])[:, 2]) == sorted(to_grid(j[[a, b]])[:, 2])


def test_identical_pair_both_located(skel):
    j = random_network_joints(skel, np.random.default_rng(8))
    a = next(i for i in range(43) if skel.pairs[i] > i)
    j[skel.pairs[a]] = j[a]
    d, conf, pred = decode_to_network(encode_heatmaps(NormalizedJoints(j), skel), skel)
    assert pred[a] and pred[skel.pairs[a]]
    assert np.array_equal(to_grid(d[a]), to_grid(j[a]))


def test_heatmap_file_round_trip(tmp_path, skel):
    st_ = encode_heatmaps(NormalizedJoints(random_network_joints(skel, np.random.default_rng(5))), skel)
    write_heatmaps(st_, tmp_path / "h.qphm")
    assert np.array_equal(read_heatmaps(tmp_path / "h.qphm").planes, st_.planes)
    (tmp_path / "bad.qphm").write_bytes(b"nope")
    with pytest.raises(HeatmapError):
        read_heatmaps(tmp_path / "bad.qphm")


def test_bad_stacks():
    with pytest.raises(HeatmapError):
        HeatmapStack(np.zeros((4, HEATMAP_SIZE, HEATMAP_SIZE)))
    with pytest.raises(HeatmapError):
        HeatmapStack(-np.ones((3, HEATMAP_SIZE, HEATMAP_SIZE)))


def test_out_of_range_joints_not_encoded(skel):
    j = np.full((43, 3), 100.0)
    j[3, 0] = 300.0
    with pytest.raises(HeatmapError):
        encode_heatmaps(NormalizedJoints(j), skel)


def test_unpredicted_root_gives_nan_3d(skel):
    j = random_network_joints(skel, np.random.default_rng(6))
    planes = encode_heatmaps(NormalizedJoints(j), skel).planes.copy()
    planes[0:3] = 0.0
    crop = crop_transform_for_bbox(100, 100, 300, 300)
    dec = decode_heatmaps(HeatmapStack(planes), skel, crop, CAM)
    assert not dec.predicted[0] and dec.confidence[0] == 0
    assert np.isnan(dec.j3d_cam).all()


def test_denormalize_joints_inverts_normalize():
    crop = crop_transform_for_bbox(100, 80, 299, 250)
    rng = np.random.default_rng(7)
    j3d = np.column_stack([rng.uniform(-300, 300, (10, 2)), rng.uniform(2000, 3000, 10)])
    norm = normalize_joints(j3d, CAM, crop)
    _, back = denormalize_joints(norm.j3d256, CAM, crop)
    assert np.allclose(back, j3d, atol=1e-6)
