import numpy as np
import pytest

from dpetki.errors import EmptySegmentation, GridMismatch
from dpetki.frames import select_frame
from dpetki.metrics import dice_coefficient, iou
from dpetki.phantom import generate_phantom
from dpetki.segment import (
    SegConfig,
    binarize_volume,
    extract_idif,
    filter_and_merge,
    label_islands,
    pericarotid_shell,
    segment_carotids,
    threshold_mask,
)
from dpetki.volume import DynVolume, FrameSchedule, LabeledMask, Mask, Region


@pytest.fixture(scope="module")
def phantom():
    return generate_phantom(seed=7)


@pytest.fixture(scope="module")
def reference(phantom):
    return phantom.volume.frame(select_frame(phantom.volume).index)


def islands_of(sizes):
    """Label volume with one straight run per island, separated by gaps."""
    labels = np.zeros((sum(sizes) + len(sizes), 1, 1), dtype=np.int32)
    x = 0
    for rid, size in enumerate(sizes, start=1):
        labels[x:x + size, 0, 0] = rid
        x += size + 1
    table = {rid: Region(f"island_{rid:02d}", size) for rid, size in enumerate(sizes, start=1)}
    return LabeledMask(labels, table)


class TestThresholdMask:
    """Test thresholding of a reference frame"""

    def test_zero_threshold_keeps_positive_voxels(self):
        """Test that threshold 0 keeps every voxel of a positive volume"""
        frame = np.random.default_rng(0).uniform(0.1, 1.0, (4, 4, 4))
        assert threshold_mask(frame, 0.0).count == 64

    def test_numpy_scalar_threshold(self):
        """Test that numpy scalars work as plain thresholds"""
        frame = np.arange(10, dtype=float).reshape(10, 1, 1)
        for value in (np.float32(5.0), np.float64(5.0), np.int64(5)):
            assert threshold_mask(frame, value).count == 5

    def test_threshold_above_max_is_empty(self):
        """Test that a threshold above the maximum selects nothing"""
        frame = np.random.default_rng(0).uniform(0.1, 1.0, (4, 4, 4))
        cfg = SegConfig(threshold_mode="absolute", absolute=2.0)
        assert threshold_mask(frame, cfg).count == 0

    def test_fraction_of_max(self):
        """Test the fractional threshold"""
        frame = np.arange(10, dtype=float).reshape(10, 1, 1)
        mask = threshold_mask(frame, SegConfig(fraction=0.5))
        assert mask.count == 5

    def test_absolute_mode_needs_value(self):
        """Test that absolute mode without a value is rejected"""
        with pytest.raises(ValueError):
            SegConfig(threshold_mode="absolute")

    def test_binarize_volume(self):
        """Test the 0.5 default of binarize_volume"""
        assert binarize_volume(np.array([[[0.2, 0.5, 0.9]]])).count == 2

    def test_phantom_centerlines_are_included(self, phantom, reference):
        """Test that both carotid centre lines pass the default threshold"""
        mask = threshold_mask(reference, SegConfig())
        cfg = phantom.config
        for cx, cy in cfg.carotid_centers:
            z0, z1 = cfg.carotid_z
            assert mask.data[cx, cy, z0 + 2:z1 - 1].all()


class TestLabelIslands:
    """Test connected-component labelling"""

    def test_two_blobs(self):
        """Test two disjoint 2-voxel blobs"""
        data = np.zeros((6, 3, 3), dtype=bool)
        data[0:2, 0, 0] = True
        data[4:6, 2, 2] = True
        labeled = label_islands(Mask(data))
        assert [r.size for r in labeled.table.values()] == [2, 2]

    def test_ties_broken_by_first_voxel(self):
        """Test that equal sizes are ordered by smallest x-fastest index"""
        data = np.zeros((6, 3, 3), dtype=bool)
        data[4:6, 0, 0] = True
        data[0:2, 0, 2] = True
        labeled = label_islands(Mask(data))
        assert labeled.labels[4, 0, 0] == 1
        assert labeled.labels[0, 0, 2] == 2

    def test_single_voxel(self):
        """Test a one-voxel mask"""
        data = np.zeros((3, 3, 3), dtype=bool)
        data[1, 1, 1] = True
        labeled = label_islands(Mask(data))
        assert list(labeled.table) == [1]
        assert labeled.table[1].size == 1

    def test_hollow_ring(self):
        """Test that a diagonal-step ring is one island under 26-connectivity"""
        data = np.zeros((7, 7, 3), dtype=bool)
        for x, y in [(1, 3), (2, 2), (3, 1), (4, 2), (5, 3), (4, 4), (3, 5), (2, 4)]:
            data[x, y, 1] = True
        assert len(label_islands(Mask(data), 26).table) == 1
        assert len(label_islands(Mask(data), 6).table) == 8

    def test_sizes_partition_the_mask(self):
        """Test that island sizes add up to the mask size"""
        data = np.random.default_rng(3).uniform(size=(10, 10, 10)) > 0.7
        labeled = label_islands(Mask(data), 6)
        assert sum(r.size for r in labeled.table.values()) == data.sum()
        assert np.array_equal(labeled.labels > 0, data)
        sizes = [r.size for r in labeled.table.values()]
        assert sizes == sorted(sizes, reverse=True)

    def test_bad_connectivity(self):
        """Test that only 6, 18 and 26 are accepted"""
        with pytest.raises(ValueError):
            label_islands(Mask(np.zeros((2, 2, 2), dtype=bool)), 8)


class TestFilterAndMerge:
    """Test island filtering"""

    def test_two_large_islands_kept(self):
        """Test sizes [500, 450, 3] with min 100 and k = 2"""
        result = filter_and_merge(islands_of([500, 450, 3]), SegConfig(min_island_size=100))
        assert result.kept == (1, 2)
        assert result.removed_count == 1
        assert result.mask.count == 950

    def test_top_k_limit(self):
        """Test sizes [10, 9, 8] with k = 2"""
        cfg = SegConfig(min_island_size=1, cleanup_fraction=0.0)
        result = filter_and_merge(islands_of([10, 9, 8]), cfg)
        assert result.mask.count == 19

    def test_nothing_survives(self):
        """Test that all islands below the minimum raise EmptySegmentation"""
        with pytest.raises(EmptySegmentation):
            filter_and_merge(islands_of([5, 4]), SegConfig(min_island_size=20))

    def test_cleanup_drops_small_second_island(self):
        """Test that a kept island far smaller than the largest is dropped"""
        cfg = SegConfig(min_island_size=1, cleanup_fraction=0.1)
        result = filter_and_merge(islands_of([200, 5]), cfg)
        assert result.kept == (1,)

    def test_final_mask_inside_threshold_mask(self, reference):
        """Test that segmentation never adds voxels"""
        cfg = SegConfig()
        mask = threshold_mask(reference, cfg)
        result = segment_carotids(reference, cfg)
        assert not np.any(result.mask.data & ~mask.data)


class TestSegmentCarotids:
    """Test the full segmentation on the phantom"""

    def test_dice_and_iou(self, phantom, reference):
        """Test overlap with the true lumen at default settings"""
        result = segment_carotids(reference)
        assert dice_coefficient(phantom.carotid.data, result.mask.data) >= 0.80
        assert iou(phantom.carotid.data, result.mask.data) >= 0.65
        assert len(result.kept) == 2

    def test_threshold_above_max(self, reference):
        """Test that an absolute threshold above the maximum yields no islands"""
        cfg = SegConfig(threshold_mode="absolute", absolute=float(reference.max()) + 1.0)
        with pytest.raises(EmptySegmentation):
            segment_carotids(reference, cfg)


class TestExtractIdif:
    """Test curve extraction under a mask"""

    def volume(self):
        data = np.zeros((2, 1, 1, 2))
        data[0, 0, 0] = [1.0, 2.0]
        data[1, 0, 0] = [3.0, 4.0]
        return DynVolume(data, (1, 1, 1), FrameSchedule((60.0, 60.0)))

    def test_single_voxel(self):
        """Test that a one-voxel mask returns that voxel's series"""
        mask = np.zeros((2, 1, 1), dtype=bool)
        mask[1] = True
        np.testing.assert_array_equal(extract_idif(self.volume(), Mask(mask)).values, [3.0, 4.0])

    def test_mean_of_two(self):
        """Test the mean strategy"""
        mask = np.ones((2, 1, 1), dtype=bool)
        np.testing.assert_array_equal(extract_idif(self.volume(), Mask(mask)).values, [2.0, 3.0])

    def test_hottest(self):
        """Test that the hottest strategy keeps at least one voxel per frame"""
        mask = np.ones((2, 1, 1), dtype=bool)
        tac = extract_idif(self.volume(), Mask(mask), "hottest", 10.0)
        np.testing.assert_array_equal(tac.values, [3.0, 4.0])

    def test_empty_mask(self):
        """Test that an empty mask is rejected"""
        with pytest.raises(EmptySegmentation):
            extract_idif(self.volume(), Mask(np.zeros((2, 1, 1), dtype=bool)))

    def test_grid_mismatch(self):
        """Test that a mask on another grid is rejected"""
        with pytest.raises(GridMismatch):
            extract_idif(self.volume(), Mask(np.ones((3, 1, 1), dtype=bool)))

    def test_permutation_invariance(self, phantom):
        """Test that voxel order does not change the mean curve"""
        values = phantom.volume.data[phantom.carotid.data]
        shuffled = values[np.random.default_rng(0).permutation(values.shape[0])]
        np.testing.assert_allclose(shuffled.mean(axis=0),
                                   extract_idif(phantom.volume, phantom.carotid).values)

    def test_partial_volume_lowers_idif_peak(self, phantom):
        """Test that the IDIF peak is below the true input peak"""
        idif = extract_idif(phantom.volume, phantom.carotid)
        assert idif.values.max() < phantom.truth_cp.values.max()

    def test_pericarotid_shell(self):
        """Test that the shell excludes the mask and its first dilation"""
        data = np.zeros((9, 9, 9), dtype=bool)
        data[4, 4, 4] = True
        shell = pericarotid_shell(Mask(data), 1, 2)
        assert not shell.data[4, 4, 4]
        assert not shell.data[5, 4, 4]
        assert shell.data[6, 4, 4]
        assert shell.data[5, 5, 4]
