"""Colormap asset and panel-strip rendering."""

import numpy as np
import pytest

from maskdepth import netpbm, viz
from maskdepth.data import generate_scene, sparsify
from maskdepth.masks import merge_masks


class TestColormap:
    def test_table_shape_and_dtype(self):
        lut = viz.load_colormap()
        assert lut.shape == (256, 3)
        assert lut.dtype == np.uint8

    def test_same_depth_same_bytes(self):
        d = np.array([[0.0, 1.0, 40.0], [79.9, 80.0, 12.5]])
        a = viz.colorize_depth(d, 80.0)
        b = viz.colorize_depth(d, 80.0)
        np.testing.assert_array_equal(a, b)

    def test_zero_depth_draws_black(self):
        img = viz.colorize_depth(np.array([[0.0, 40.0]]), 80.0)
        np.testing.assert_array_equal(img[:, 0, 0], [0.0, 0.0, 0.0])
        assert img[:, 0, 1].max() > 0

    def test_mapping_is_linear_in_index(self):
        lut = viz.load_colormap()
        img = viz.colorize_depth(np.array([[80.0]]), 80.0)
        np.testing.assert_allclose(img[:, 0, 0] * 255.0, lut[255])

    def test_out_of_range_depth_clamps(self):
        img = viz.colorize_depth(np.array([[500.0]]), 80.0)
        top = viz.colorize_depth(np.array([[80.0]]), 80.0)
        np.testing.assert_array_equal(img, top)


class TestStrip:
    @pytest.fixture
    def pieces(self):
        s = generate_scene(seed=5, index=0, height=32, width=48, objects=3)
        rng = np.random.default_rng(1)
        sparse, _ = sparsify(s.depth, 0.1, rng)
        mask = merge_masks(s.masks, s.height, s.width)
        d_init = np.clip(s.depth + rng.normal(0, 2, s.depth.shape), 0, 80)
        d_final = np.clip(s.depth + rng.normal(0, 1, s.depth.shape), 0, 80)
        return s, sparse, mask, d_init, d_final

    def test_emits_six_panels_plus_two_raw(self, tmp_path, pieces):
        s, sparse, mask, d_init, d_final = pieces
        paths = viz.write_strip(tmp_path, s.rgb, s.depth, sparse, mask,
                                d_init, d_final, 80.0)
        assert len(paths) == 8
        names = sorted(p.split("/")[-1] for p in paths)
        assert sum(n.endswith(".ppm") for n in names) == 6
        assert sum(n.endswith(".pgm") for n in names) == 2
        for p in paths:
            assert (tmp_path / p.split("/")[-1]).exists()

    def test_raw_final_depth_reads_back_within_quantization(self, tmp_path, pieces):
        s, sparse, mask, d_init, d_final = pieces
        viz.write_strip(tmp_path, s.rgb, s.depth, sparse, mask,
                        d_init, d_final, 80.0)
        got = netpbm.read_depth_pgm(tmp_path / "d_final.pgm")
        # storage is whole centimeters
        assert np.abs(got - d_final).max() <= 0.005 + 1e-12

    def test_panels_share_sample_geometry(self, tmp_path, pieces):
        s, sparse, mask, d_init, d_final = pieces
        viz.write_strip(tmp_path, s.rgb, s.depth, sparse, mask,
                        d_init, d_final, 80.0)
        for name in viz.PANEL_FILES:
            img = netpbm.read_ppm(tmp_path / name)
            assert img.shape == (3, s.height, s.width)

    def test_strip_rewrites_identically(self, tmp_path, pieces):
        s, sparse, mask, d_init, d_final = pieces
        a = tmp_path / "a"
        b = tmp_path / "b"
        for out in (a, b):
            viz.write_strip(out, s.rgb, s.depth, sparse, mask,
                            d_init, d_final, 80.0)
        for name in viz.PANEL_FILES + viz.RAW_FILES:
            assert (a / name).read_bytes() == (b / name).read_bytes()
