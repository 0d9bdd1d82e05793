"""Slice-overlay exports: PPM encoding, grayscale windowing, axis
geometry, and pixel-exact class painting."""

import numpy as np
import pytest

from voxseg.errors import DataError, ShapeError
from voxseg.slices import (
    CLASS_COLORS,
    _grayscale,
    export_slice,
    read_ppm,
    render_overlay,
    write_ppm,
)
from voxseg.volume import Volume

D, H, W = 6, 7, 8


def image_volume(seed=0):
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(4, D, H, W)).astype(np.float32)
    return Volume(data=data, spacing=(1.0, 1.0, 1.0), kind="image")


def label_volume(labels):
    return Volume(data=labels.astype(np.float32)[None], spacing=(1.0, 1.0, 1.0), kind="label_map")


def empty_labels():
    return label_volume(np.zeros((D, H, W), dtype=np.float32))


class TestPpm:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        rgb = rng.integers(0, 256, size=(5, 9, 3), dtype=np.uint8)
        path = tmp_path / "img.ppm"
        write_ppm(path, rgb)
        assert np.array_equal(read_ppm(path), rgb)

    def test_header_layout(self, tmp_path):
        path = tmp_path / "img.ppm"
        write_ppm(path, np.zeros((3, 4, 3), dtype=np.uint8))
        raw = path.read_bytes()
        assert raw.startswith(b"P6\n4 3\n255\n")
        assert len(raw) == len(b"P6\n4 3\n255\n") + 3 * 4 * 3

    def test_rejects_non_rgb(self, tmp_path):
        with pytest.raises(ShapeError):
            write_ppm(tmp_path / "x.ppm", np.zeros((3, 4), dtype=np.uint8))


class TestGrayscale:
    def test_constant_plane_mid_gray(self):
        plane = np.full((4, 5), 3.7)
        assert np.all(_grayscale(plane) == 128)

    def test_minmax_hits_full_range(self):
        plane = np.array([[0.0, 1.0], [2.0, 4.0]])
        gray = _grayscale(plane)
        assert gray.min() == 0 and gray.max() == 255
        assert gray[0, 1] == round(255 / 4)


class TestGeometry:
    """Slice dimensions are the two extents the chosen axis leaves free."""

    @pytest.mark.parametrize(
        "axis,expected",
        [("axial", (H, W)), ("sagittal", (D, H)), ("coronal", (D, W))],
    )
    def test_slice_dimensions(self, axis, expected):
        rgb = render_overlay(image_volume(), empty_labels(), axis, 2)
        assert rgb.shape == (*expected, 3)

    @pytest.mark.parametrize("axis,extent", [("axial", D), ("sagittal", W), ("coronal", H)])
    def test_index_out_of_range(self, axis, extent):
        for bad in (-1, extent):
            with pytest.raises(ShapeError):
                render_overlay(image_volume(), empty_labels(), axis, bad)

    def test_unknown_axis(self):
        with pytest.raises(DataError):
            render_overlay(image_volume(), empty_labels(), "oblique", 0)

    def test_extent_mismatch(self):
        small = Volume(
            data=np.zeros((1, D, H, W - 1), dtype=np.float32),
            spacing=(1.0, 1.0, 1.0),
            kind="label_map",
        )
        with pytest.raises(ShapeError):
            render_overlay(image_volume(), small, "axial", 0)


class TestOverlay:
    def test_all_background_is_pure_grayscale(self):
        rgb = render_overlay(image_volume(), empty_labels(), "axial", 3)
        assert np.array_equal(rgb[:, :, 0], rgb[:, :, 1])
        assert np.array_equal(rgb[:, :, 1], rgb[:, :, 2])

    def test_pixel_exact_painting(self):
        """Each label value paints exactly its class color; the nesting
        order means the innermost class wins where masks overlap."""
        labels = np.zeros((D, H, W))
        labels[3, 1:5, 1:7] = 2  # edema ring: WT only
        labels[3, 2:4, 2:6] = 1  # core: WT+TC
        labels[3, 3, 3:5] = 4  # enhancing: all three
        volume = label_volume(labels)
        rgb = render_overlay(image_volume(), volume, "axial", 3)

        plane = labels[3]
        colors = dict(CLASS_COLORS)
        for value, color in ((2, colors["WT"]), (1, colors["TC"]), (4, colors["ET"])):
            where = plane == value
            assert where.any()
            assert np.all(rgb[where] == color)
        background = plane == 0
        assert np.all(rgb[background][:, 0] == rgb[background][:, 1])
        assert np.all(rgb[background][:, 1] == rgb[background][:, 2])
        gray_rows = set(map(tuple, rgb[background]))
        for color in colors.values():
            assert color not in gray_rows or color[0] == color[1] == color[2]

    def test_off_slice_labels_do_not_paint(self):
        labels = np.zeros((D, H, W))
        labels[1, 2, 2] = 4
        rgb = render_overlay(image_volume(), label_volume(labels), "axial", 3)
        assert np.array_equal(rgb[:, :, 0], rgb[:, :, 1])
        assert np.array_equal(rgb[:, :, 1], rgb[:, :, 2])

    def test_colors_distinct(self):
        seen = {color for _, color in CLASS_COLORS}
        assert len(seen) == 3

    def test_export_writes_readable_file(self, tmp_path):
        path = tmp_path / "slice.ppm"
        export_slice(image_volume(), empty_labels(), "sagittal", 4, path)
        rgb = read_ppm(path)
        assert rgb.shape == (D, H, 3)
