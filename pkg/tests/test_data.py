"""Dataset generator, netpbm codecs, and mask merging."""

import numpy as np
import pytest

from maskdepth import netpbm
from maskdepth.data import (Sample, generate_dataset, generate_scene,
                            load_dataset_index, load_samples, read_sample,
                            sparsify, split_by_index, write_sample)
from maskdepth.masks import MaskSource, merge_masks, merged_mask_for
from maskdepth.netpbm import FormatError


@pytest.fixture
def scene():
    return generate_scene(seed=7, index=0, height=64, width=96, objects=5)


class TestNetpbm:
    def test_ppm_round_trip_exact(self, tmp_path, scene):
        path = tmp_path / "x.ppm"
        netpbm.write_ppm(path, scene.rgb)
        np.testing.assert_array_equal(netpbm.read_ppm(path), scene.rgb)

    def test_depth_round_trip_exact(self, tmp_path, scene):
        path = tmp_path / "d.pgm"
        netpbm.write_depth_pgm(path, scene.depth)
        np.testing.assert_array_equal(netpbm.read_depth_pgm(path), scene.depth)

    def test_depth_byte_order_is_big_endian(self, tmp_path):
        path = tmp_path / "d.pgm"
        netpbm.write_depth_pgm(path, np.array([[2.58]]))  # 258 cm = 0x0102
        raw = path.read_bytes()
        assert raw.endswith(b"\x01\x02")

    def test_depth_saturates_at_format_limit(self, tmp_path):
        path = tmp_path / "d.pgm"
        netpbm.write_depth_pgm(path, np.array([[1e6, -3.0]]))
        got = netpbm.read_depth_pgm(path)
        np.testing.assert_array_equal(got, [[655.35, 0.0]])

    def test_mask_written_as_0_and_255(self, tmp_path):
        path = tmp_path / "m.pgm"
        netpbm.write_mask_pgm(path, np.array([[1.0, 0.0], [0.0, 1.0]]))
        raw = path.read_bytes()
        assert raw.endswith(bytes([255, 0, 0, 255]))
        np.testing.assert_array_equal(netpbm.read_gray_pgm(path),
                                      [[1.0, 0.0], [0.0, 1.0]])

    def test_header_comments_and_whitespace_accepted(self, tmp_path):
        path = tmp_path / "c.pgm"
        body = bytes([0, 128, 255, 64])
        path.write_bytes(b"P5 # magic\n# a comment line\n 2\t2\n255\n" + body)
        got = netpbm.read_gray_pgm(path)
        assert got.shape == (2, 2)
        assert got[0, 1] == pytest.approx(128 / 255)

    def test_bad_magic_names_file_and_field(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P4\n2 2\n255\n\x00\x00\x00\x00")
        with pytest.raises(FormatError, match="bad.pgm.*magic"):
            netpbm.read_gray_pgm(path)

    def test_truncated_raster_rejected(self, tmp_path):
        path = tmp_path / "short.pgm"
        path.write_bytes(b"P5\n4 4\n255\n\x00\x00")
        with pytest.raises(FormatError, match="raster"):
            netpbm.read_gray_pgm(path)

    def test_nonnumeric_header_rejected(self, tmp_path):
        path = tmp_path / "junk.ppm"
        path.write_bytes(b"P6\nwide 2\n255\n")
        with pytest.raises(FormatError, match="width"):
            netpbm.read_ppm(path)


class TestSceneGeneration:
    def test_deterministic_for_seed_and_index(self):
        a = generate_scene(seed=3, index=5, height=48, width=64)
        b = generate_scene(seed=3, index=5, height=48, width=64)
        np.testing.assert_array_equal(a.rgb, b.rgb)
        np.testing.assert_array_equal(a.depth, b.depth)
        assert len(a.masks) == len(b.masks)

    def test_different_index_changes_scene(self):
        a = generate_scene(seed=3, index=0, height=48, width=64)
        b = generate_scene(seed=3, index=1, height=48, width=64)
        assert not np.array_equal(a.depth, b.depth)

    def test_masks_are_disjoint_and_nonempty(self, scene):
        assert len(scene.masks) >= 1
        total = np.zeros_like(scene.masks[0])
        for m in scene.masks:
            assert m.sum() > 0
            assert set(np.unique(m)) <= {0.0, 1.0}
            total += m
        assert total.max() <= 1.0  # no pixel owned twice

    def test_mask_pixels_carry_object_depth_nearer_than_neighbours(self, scene):
        # within each mask the depth is constant (flat object facing camera)
        for m in scene.masks:
            vals = scene.depth[m > 0]
            assert vals.min() > 0
            assert np.allclose(vals, vals[0])

    def test_sky_has_zero_depth_and_ground_ramp_recedes(self, scene):
        assert (scene.depth == 0).sum() > 0  # some sky
        bg = (merge_masks(scene.masks, scene.height, scene.width) == 0) & (scene.depth > 0)
        rows = np.where(bg.any(axis=1))[0]
        top, bottom = rows[0], rows[-1]
        top_mean = scene.depth[top][bg[top]].mean()
        bottom_mean = scene.depth[bottom][bg[bottom]].mean()
        assert top_mean > bottom_mean  # farther away toward the horizon

    def test_depth_quantized_to_centimeters(self, scene):
        cm = scene.depth * 100.0
        np.testing.assert_allclose(cm, np.rint(cm), atol=1e-9)

    def test_rgb_quantized_to_8bit_grid(self, scene):
        lv = scene.rgb * 255.0
        np.testing.assert_allclose(lv, np.rint(lv), atol=1e-9)

    def test_objects_validation(self):
        with pytest.raises(ValueError, match="objects"):
            generate_scene(seed=0, index=0, height=32, width=32, objects=0)


class TestSparsify:
    def test_keeps_only_measured_pixels(self, scene):
        rng = np.random.default_rng(0)
        sparse, valid = sparsify(scene.depth, 0.5, rng)
        assert ((valid == 1) <= (scene.depth > 0)).all()
        np.testing.assert_array_equal(sparse[valid == 0], 0.0)
        np.testing.assert_array_equal(sparse[valid == 1], scene.depth[valid == 1])

    def test_fraction_tracks_keep_prob(self):
        depth = np.full((200, 200), 5.0)
        rng = np.random.default_rng(42)
        _, valid = sparsify(depth, 0.05, rng)
        frac = valid.mean()
        sigma = np.sqrt(0.05 * 0.95 / depth.size)
        assert abs(frac - 0.05) < 5 * sigma

    def test_keep_prob_validated(self):
        with pytest.raises(ValueError, match="keep_prob"):
            sparsify(np.ones((4, 4)), -0.1, np.random.default_rng(0))

    def test_keep_prob_endpoints_exact(self):
        depth = np.arange(16, dtype=np.float64).reshape(4, 4)  # one zero px
        _, none_kept = sparsify(depth, 0.0, np.random.default_rng(0))
        np.testing.assert_array_equal(none_kept, np.zeros((4, 4)))
        sparse, all_kept = sparsify(depth, 1.0, np.random.default_rng(0))
        np.testing.assert_array_equal(all_kept, (depth > 0).astype(float))
        np.testing.assert_array_equal(sparse, depth)


class TestMaskMerge:
    def test_merge_is_pixelwise_or_of_crisp_masks(self):
        rng = np.random.default_rng(11)
        masks = [(rng.random((20, 30)) < 0.2).astype(float) for _ in range(4)]
        merged = merge_masks(masks, 20, 30)
        want = np.zeros((20, 30), dtype=bool)
        for m in masks:
            want |= m.astype(bool)
        np.testing.assert_array_equal(merged, want.astype(float))

    def test_merge_empty_stack_is_background(self):
        np.testing.assert_array_equal(merge_masks([], 4, 4), np.zeros((4, 4)))

    def test_merge_soft_masks_takes_maximum(self):
        a = np.full((2, 2), 0.3)
        b = np.full((2, 2), 0.6)
        np.testing.assert_array_equal(merge_masks([a, b], 2, 2), np.full((2, 2), 0.6))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError, match="shape"):
            merge_masks([np.ones((2, 3))], 2, 2)

    def test_out_of_range_values_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            merge_masks([np.full((2, 2), 1.5)], 2, 2)

    def test_ground_truth_source_uses_sample_masks(self, scene):
        got = merged_mask_for(scene, MaskSource("ground_truth"))
        want = merge_masks(scene.masks, scene.height, scene.width)
        np.testing.assert_array_equal(got, want)

    def test_file_source_reads_soft_mask(self, tmp_path, scene):
        netpbm.write_mask_pgm(tmp_path / "pred_mask.pgm",
                              merge_masks(scene.masks, scene.height, scene.width))
        got = merged_mask_for(scene, MaskSource("file"), sample_dir=tmp_path)
        assert got.shape == (scene.height, scene.width)

    def test_file_source_missing_file_is_io_error(self, tmp_path, scene):
        with pytest.raises(FormatError, match="missing"):
            merged_mask_for(scene, MaskSource("file"), sample_dir=tmp_path)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            MaskSource("predicted")


class TestSampleIO:
    def test_write_then_read_round_trip(self, tmp_path, scene):
        write_sample(tmp_path / "s", scene)
        back = read_sample(tmp_path / "s")
        assert back.scene_id == scene.scene_id
        np.testing.assert_array_equal(back.rgb, scene.rgb)
        np.testing.assert_array_equal(back.depth, scene.depth)
        assert len(back.masks) == len(scene.masks)
        for a, b in zip(back.masks, scene.masks):
            np.testing.assert_array_equal(a, b)

    def test_missing_manifest_field_rejected(self, tmp_path, scene):
        write_sample(tmp_path / "s", scene)
        manifest = tmp_path / "s" / "manifest.txt"
        lines = [l for l in manifest.read_text().splitlines() if not l.startswith("depth=")]
        manifest.write_text("\n".join(lines) + "\n")
        with pytest.raises(FormatError, match="depth"):
            read_sample(tmp_path / "s")

    def test_dimension_mismatch_rejected(self, tmp_path, scene):
        write_sample(tmp_path / "s", scene)
        netpbm.write_depth_pgm(tmp_path / "s" / "depth.pgm", np.ones((8, 8)))
        with pytest.raises(FormatError, match="depth"):
            read_sample(tmp_path / "s")


class TestDatasetLevel:
    def test_split_80_20_by_index(self):
        ids = [f"scene_{i:04d}" for i in range(10)]
        train, val = split_by_index(ids)
        assert train == ids[:8]
        assert val == ids[8:]

    def test_generate_load_cycle(self, tmp_path):
        idx = generate_dataset(tmp_path / "ds", count=5, seed=1, height=32,
                               width=32, objects=2)
        assert len(idx.train_ids) == 4
        assert len(idx.val_ids) == 1
        back = load_dataset_index(tmp_path / "ds")
        assert back.train_ids == idx.train_ids
        assert back.val_ids == idx.val_ids
        samples = load_samples(back, "train")
        assert len(samples) == 4
        assert all(s.height == 32 for s in samples)

    def test_regeneration_is_bit_identical(self, tmp_path):
        generate_dataset(tmp_path / "a", count=2, seed=9, height=32, width=48)
        generate_dataset(tmp_path / "b", count=2, seed=9, height=32, width=48)
        for sid in ("scene_0000", "scene_0001"):
            a = (tmp_path / "a" / sid / "depth.pgm").read_bytes()
            b = (tmp_path / "b" / sid / "depth.pgm").read_bytes()
            assert a == b

    def test_count_validated(self, tmp_path):
        with pytest.raises(ValueError, match="count"):
            generate_dataset(tmp_path / "x", count=0)
