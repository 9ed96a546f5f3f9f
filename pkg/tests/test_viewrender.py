import numpy as np
import pytest

from graspvoc.geometry import PointCloud
from graspvoc.viewrender import (
    Mask2D,
    backproject,
    compute_view,
    masks_from_dict,
    masks_to_dict,
    pgm_bytes,
    read_pgm,
    render,
    rle_decode,
    rle_encode,
    write_pgm,
)

from conftest import random_rotation


def grid_plane(nx=60, ny=30, z=0.0):
    xs, ys = np.meshgrid(np.linspace(-1, 1, nx), np.linspace(-0.5, 0.5, ny))
    return np.column_stack([xs.ravel(), ys.ravel(), np.full(xs.size, z)])


def box_corners(ext):
    return PointCloud(np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]) * np.asarray(ext) / 2)


def test_box_view_axes():
    view = compute_view(box_corners((4, 2, 1)), (512, 512), 0.05)
    assert np.allclose(view.u_axis, [1, 0, 0])
    assert np.allclose(view.v_axis, [0, 1, 0])
    assert np.allclose(view.view_axis, [0, 0, 1])
    assert np.linalg.det(np.vstack([view.u_axis, view.v_axis, view.view_axis])) == pytest.approx(1.0)


def test_zero_margin_spans_full_width():
    cloud = box_corners((4, 2, 1))
    view = compute_view(cloud, (512, 512), 0.0)
    cols, rows, _ = view.pixels(cloud.points)
    assert cols.min() == 0 and cols.max() == 511
    x, _, _ = view.project(cloud.points)
    assert x.max() - x.min() == pytest.approx(511.0, abs=1e-9)


def test_random_clouds_respect_margin():
    rng = np.random.default_rng(9)
    m = 0.05
    for _ in range(50):
        pts = rng.normal(size=(rng.integers(10, 400), 3)) * rng.uniform(0.01, 3, size=3)
        pts = pts @ random_rotation(rng).T + rng.normal(size=3)
        cloud = PointCloud(pts)
        w, h = int(rng.integers(16, 600)), int(rng.integers(16, 600))
        view = compute_view(cloud, (w, h), m)
        x, y, _ = view.project(cloud.points)
        fx, fy = x / (w - 1), y / (h - 1)
        assert fx.min() >= m - 1e-9 and fx.max() <= 1 - m + 1e-9
        assert fy.min() >= m - 1e-9 and fy.max() <= 1 - m + 1e-9


def test_view_rejects_tiny_resolution():
    with pytest.raises(ValueError):
        compute_view(box_corners((4, 2, 1)), (8, 8), 0.05)


def test_planar_cloud_all_visible(backend):
    rng = np.random.default_rng(1)
    pts = grid_plane() @ random_rotation(rng).T + [0.3, -2.0, 5.0]
    cloud = PointCloud(pts)
    rr = render(cloud, compute_view(cloud))
    assert rr.visible.size == cloud.n_points
    assert sum(len(v) for v in rr.pixel_points.values()) == cloud.n_points


def test_two_planes_front_wins(backend):
    front = grid_plane(z=0.0)
    back = grid_plane(z=0.1)
    cloud = PointCloud(np.vstack([front, back]))
    view = compute_view(cloud)
    rr = render(cloud, view, 2, 0.6)
    depth = view.project(cloud.points)[2]
    near = depth < np.median(depth)
    assert np.array_equal(np.sort(rr.visible), np.flatnonzero(near))


def test_visibility_round_trip(backend, knife_cloud, mug_cloud):
    for cloud in (knife_cloud, mug_cloud):
        rr = render(cloud, compute_view(cloud))
        assert 0 < rr.visible.size < cloud.n_points
        for i in rr.visible.tolist():
            assert i in rr.pixel_points[rr.pixel_of(i)]
        listed = sorted(i for v in rr.pixel_points.values() for i in v)
        assert listed == rr.visible.tolist()
        assert all(0 <= c < rr.width and 0 <= r < rr.height for c, r in rr.pixel_points)


def test_backends_render_identically(knife_cloud, monkeypatch):
    from conftest import BACKENDS
    from graspvoc import _kernels

    outs = []
    for impl in BACKENDS:
        monkeypatch.setattr(_kernels, "active", impl)
        rr = render(knife_cloud, compute_view(knife_cloud))
        outs.append((rr.image.tobytes(), rr.point_pixel.tobytes()))
    assert all(o == outs[0] for o in outs)


def test_image_encoding(knife_cloud):
    rr = render(knife_cloud, compute_view(knife_cloud))
    assert rr.image.dtype == np.uint8 and rr.image.shape == (512, 512)
    assert rr.image.min() == 0
    assert rr.image[0, 0] == 255  # margin is empty


def test_backproject_whole_and_empty(knife_cloud):
    rr = render(knife_cloud, compute_view(knife_cloud))
    whole = np.ones((rr.height, rr.width), dtype=bool)
    assert np.array_equal(backproject(Mask2D(0, whole), rr), rr.visible)
    corner = np.zeros_like(whole)
    corner[:3, :3] = True
    assert backproject(Mask2D(1, corner), rr).size == 0
    with pytest.raises(ValueError):
        backproject(np.ones((4, 4), dtype=bool), rr)


def test_half_image_mask_on_plane():
    cloud = PointCloud(grid_plane(97, 41))
    view = compute_view(cloud)
    rr = render(cloud, view)
    half = np.zeros((rr.height, rr.width), dtype=bool)
    half[:, : rr.width // 2] = True
    x, _, _ = view.project(cloud.points)
    expected = np.flatnonzero(x < rr.width // 2 - 0.5)
    assert np.array_equal(backproject(half, rr), expected)


def test_union_homomorphism(mug_cloud):
    rr = render(mug_cloud, compute_view(mug_cloud))
    rng = np.random.default_rng(4)
    for _ in range(50):
        a = np.zeros((rr.height, rr.width), dtype=bool)
        b = np.zeros_like(a)
        for m in (a, b):
            for _ in range(rng.integers(1, 4)):
                r0, c0 = rng.integers(0, 512, 2)
                m[r0 : r0 + rng.integers(1, 200), c0 : c0 + rng.integers(1, 200)] = True
        pa, pb, pu = backproject(a, rr), backproject(b, rr), backproject(a | b, rr)
        assert np.array_equal(pu, np.union1d(pa, pb))
        disjoint = b & ~a
        if disjoint.any():
            assert np.intersect1d(pa, backproject(disjoint, rr)).size == 0


def test_rle_round_trip():
    rng = np.random.default_rng(2)
    for _ in range(30):
        bm = rng.random((20, 33)) < rng.random()
        runs = rle_encode(bm)
        assert sum(runs) == bm.size
        assert np.array_equal(rle_decode(runs, (33, 20)), bm)
    bm = np.zeros((2, 3), dtype=bool)
    bm[0, 0] = bm[1, 2] = True
    assert rle_encode(bm) == [0, 1, 4, 1]
    bm[1, 2] = False
    assert rle_encode(bm) == [0, 1, 5]
    with pytest.raises(ValueError):
        rle_decode([5, 5], (3, 2))


def test_masks_dict_round_trip():
    a = np.zeros((16, 16), dtype=bool)
    a[3:5, 2:9] = True
    data = masks_to_dict([Mask2D(7, a)])
    data["masks"].append({"id": 8, "rle": [256]})  # empty masks are dropped
    back = masks_from_dict(data, (16, 16))
    assert [m.id for m in back] == [7]
    assert np.array_equal(back[0].bitmap, a)
    assert back[0].area == 14
    with pytest.raises(ValueError):
        Mask2D(1, np.zeros((4, 4), dtype=bool))


def test_pgm_round_trip(tmp_path):
    img = np.arange(16 * 20, dtype=np.uint8).reshape(16, 20)
    img[0, 0] = 10  # whitespace byte right after the header
    path = tmp_path / "i.pgm"
    write_pgm(path, img)
    assert path.read_bytes().startswith(b"P5\n20 16\n255\n")
    assert np.array_equal(read_pgm(path), img)
    assert pgm_bytes(img) == path.read_bytes()
