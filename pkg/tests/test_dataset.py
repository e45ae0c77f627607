import json
from collections import Counter

import numpy as np
import pytest

from slimdet.dataset import (IMAGES_FILE, MANIFEST_FILE, NOISE, SHAPE_COLOR_MIN, BACKGROUND_MAX,
                             generate_dataset, layout_cells, load_dataset, render_dataset, save_dataset,
                             shape_mask)
from slimdet.errors import ConfigError, FormatError


@pytest.fixture(scope="module")
def large_dataset():
    return render_dataset(seed=11, n_images=1000, image_size=96, small_fraction=0.5)


class TestRender:

    def test_same_seed_same_files(self, tmp_path):
        generate_dataset(str(tmp_path / "a"), seed=7, n_images=6, image_size=64)
        generate_dataset(str(tmp_path / "b"), seed=7, n_images=6, image_size=64)
        for name in (MANIFEST_FILE, IMAGES_FILE):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_different_seed_differs(self):
        a = render_dataset(seed=1, n_images=3, image_size=64)
        b = render_dataset(seed=2, n_images=3, image_size=64)
        assert a.pixels.tobytes() != b.pixels.tobytes()

    def test_all_small(self):
        dataset = render_dataset(seed=5, n_images=50, image_size=96, small_fraction=1.0)
        assert max(dataset.pixel_areas()) < 32 * 32

    def test_small_share(self, large_dataset):
        areas = np.array(large_dataset.pixel_areas())
        assert abs(np.mean(areas < 32 * 32) - 0.5) < 0.05

    def test_class_balance(self, large_dataset):
        counts = Counter(a.class_id for anns in large_dataset.annotations for a in anns)
        mean = sum(counts.values()) / 3
        assert set(counts) == {1, 2, 3}
        for count in counts.values():
            assert abs(count - mean) < 0.2 * mean

    def test_object_count(self, large_dataset):
        sizes = [len(anns) for anns in large_dataset.annotations]
        assert min(sizes) == 1 and max(sizes) == 4

    def test_images_scaled_to_unit_range(self, tiny_dataset):
        images = tiny_dataset.images
        assert images.shape == (8, 3, 32, 32)
        assert images.dtype == np.float32
        assert images.min() >= 0.0 and images.max() <= 1.0

    def test_boxes_are_tight(self):
        dataset = render_dataset(seed=9, n_images=20, image_size=96)
        background = BACKGROUND_MAX + NOISE
        for image, record in zip(dataset.pixels, dataset.manifest.records):
            brightest = image.max(axis=0).astype(int)
            for obj in record["objects"]:
                x0, y0, x1, y1 = obj["box"]
                inside = brightest[y0:y1, x0:x1]
                for edge in (inside[0], inside[-1], inside[:, 0], inside[:, -1]):
                    assert edge.max() >= SHAPE_COLOR_MIN - NOISE
                assert brightest[y0 - 1, x0:x1].max() <= background
                assert brightest[y1, x0:x1].max() <= background
                assert brightest[y0:y1, x0 - 1].max() <= background
                assert brightest[y0:y1, x1].max() <= background

    def test_annotations_are_normalized(self, tiny_dataset):
        for anns, record in zip(tiny_dataset.annotations, tiny_dataset.manifest.records):
            for a, obj in zip(anns, record["objects"]):
                assert a.box == pytest.approx(tuple(v / 32 for v in obj["box"]))

    def test_mixed_sizes_fit_a_64_pixel_canvas(self):
        dataset = render_dataset(seed=4, n_images=40, image_size=64, small_fraction=0.5)
        assert all(len(record["objects"]) == 1 for record in dataset.manifest.records)
        areas = np.array(dataset.pixel_areas())
        assert (areas < 32 * 32).any() and (areas > 32 * 32).any()
        for record in dataset.manifest.records:
            x0, y0, x1, y1 = record["objects"][0]["box"]
            assert 0 < x0 < x1 < 64 and 0 < y0 < y1 < 64

    @pytest.mark.parametrize("image_size, small_fraction, cells", [
        (96, 0.5, 2), (64, 0.5, 1), (64, 1.0, 2), (32, 1.0, 2), (80, 0.5, 2), (72, 0.0, 1),
    ])
    def test_layout_cells(self, image_size, small_fraction, cells):
        assert layout_cells(image_size, small_fraction) == cells

    def test_image_too_small_rejected(self):
        with pytest.raises(ConfigError):
            render_dataset(seed=0, n_images=1, image_size=16, small_fraction=1.0)

    def test_large_objects_need_room(self):
        with pytest.raises(ConfigError, match="small_fraction"):
            render_dataset(seed=0, n_images=1, image_size=32, small_fraction=0.5)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ConfigError):
            render_dataset(seed=0, n_images=0)

    @pytest.mark.parametrize("name", ["circle", "square", "triangle"])
    def test_shape_masks_touch_the_sides(self, name):
        mask = shape_mask(name, 9)
        assert mask[:, 0].any() and mask[:, -1].any() and mask[-1].any()


class TestDiskFormat:

    def test_round_trip(self, tmp_path, tiny_dataset):
        path = tmp_path / "data"
        save_dataset(str(path), tiny_dataset)
        loaded = load_dataset(str(path))
        np.testing.assert_array_equal(loaded.pixels, tiny_dataset.pixels)
        assert loaded.annotations == tiny_dataset.annotations

        again = tmp_path / "again"
        save_dataset(str(again), loaded)
        for name in (MANIFEST_FILE, IMAGES_FILE):
            assert (again / name).read_bytes() == (path / name).read_bytes()

    def test_manifest_records_pixel_boxes(self, tmp_path):
        manifest = generate_dataset(str(tmp_path / "data"), seed=3, n_images=2, image_size=64)
        data = json.loads((tmp_path / "data" / MANIFEST_FILE).read_text(encoding="utf-8"))
        assert data["image_size"] == [64, 64, 3]
        assert data["count"] == 2
        assert data["images_nbytes"] == 2 * 3 * 64 * 64
        assert data["records"] == manifest.records

    def test_truncated_blob_rejected(self, tmp_path, tiny_dataset):
        path = tmp_path / "data"
        save_dataset(str(path), tiny_dataset)
        blob = (path / IMAGES_FILE).read_bytes()
        (path / IMAGES_FILE).write_bytes(blob[:-5])
        with pytest.raises(FormatError, match="bytes"):
            load_dataset(str(path))

    def test_checksum_mismatch_rejected(self, tmp_path, tiny_dataset):
        path = tmp_path / "data"
        save_dataset(str(path), tiny_dataset)
        blob = bytearray((path / IMAGES_FILE).read_bytes())
        blob[100] ^= 0xFF
        (path / IMAGES_FILE).write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="checksum"):
            load_dataset(str(path))

    def test_box_outside_image_rejected(self, tmp_path, tiny_dataset):
        path = tmp_path / "data"
        save_dataset(str(path), tiny_dataset)
        data = json.loads((path / MANIFEST_FILE).read_text(encoding="utf-8"))
        data["records"][0]["objects"][0]["box"] = [0, 0, 40, 10]
        (path / MANIFEST_FILE).write_text(json.dumps(data), encoding="utf-8")
        with pytest.raises(FormatError, match="outside"):
            load_dataset(str(path))

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FormatError, match="missing"):
            load_dataset(str(tmp_path / "nowhere"))
