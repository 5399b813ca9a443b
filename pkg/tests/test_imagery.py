import numpy as np
import pytest

from crossing_tool.imagery import (
    ImageRef,
    ImageryError,
    ImageStore,
    crop_square,
    one_hot,
    read_image,
    read_raw_tensor,
    resample,
    write_raw_tensor,
    write_sprite_sheet,
)


class TestImageRef:
    def test_forms(self):
        assert ImageRef.parse("maps/a.png") == ImageRef("maps/a.png")
        assert ImageRef.parse("maps/a.png#3/28") == ImageRef("maps/a.png", 3, 28)
        assert ImageRef.parse("maps/a.rawt#2") == ImageRef("maps/a.rawt", 2)
        assert str(ImageRef.parse("maps/a.png#3/28")) == "maps/a.png#3/28"

    def test_bad_selector(self):
        with pytest.raises(ImageryError, match="Bad imagery selector"):
            ImageRef.parse("a.png#x")
        with pytest.raises(ImageryError, match="Empty imagery path"):
            ImageRef.parse("#1")

    def test_rebased_between_directories(self, tmp_path):
        ref = ImageRef.parse("maps/a.png#3/28")
        moved = ref.rebased(tmp_path / "data", tmp_path / "out" / "dense")
        assert str(moved) == "../../data/maps/a.png#3/28"
        assert ref.rebased(tmp_path, tmp_path) == ref
        absolute = ImageRef((tmp_path / "a.png").as_posix(), 1)
        assert absolute.rebased(tmp_path / "x", tmp_path / "y") == absolute


class TestRawTensor:
    def test_write_then_read(self, tmp_path, rng):
        data = rng.normal(size=(2, 3, 4))
        write_raw_tensor(tmp_path / "t.rawt", data, "f8")
        np.testing.assert_array_equal(read_raw_tensor(tmp_path / "t.rawt"), data)

    def test_body_size_is_checked(self, tmp_path):
        path = tmp_path / "t.rawt"
        path.write_bytes(b"RAWT1 u8 2 2\n\x00\x01\x02")
        with pytest.raises(ImageryError, match="3 bytes, header implies 4"):
            read_raw_tensor(path)

    def test_foreign_file(self, tmp_path):
        path = tmp_path / "t.rawt"
        path.write_bytes(b"hello\n")
        with pytest.raises(ImageryError, match="not a raw tensor"):
            read_raw_tensor(path)

    def test_unknown_dtype(self, tmp_path):
        with pytest.raises(ImageryError, match="Unsupported raw tensor dtype"):
            write_raw_tensor(tmp_path / "t.rawt", np.zeros(2), "f2")


class TestStore:
    def test_sprite_tiles(self, tmp_path):
        tiles = [np.full((3, 4, 5), 10 * k, dtype=np.uint8) for k in range(4)]
        write_sprite_sheet(tmp_path / "s.png", tiles)
        store = ImageStore(tmp_path)
        assert store.load("s.png").shape == (3, 16, 5)
        tile = store.load("s.png#2/4")
        assert tile.shape == (3, 4, 5)
        assert tile.dtype == np.uint8
        assert (tile == 20).all()

    def test_grayscale_sheet(self, tmp_path):
        write_sprite_sheet(tmp_path / "g.png", [np.full((1, 2, 2), 7, dtype=np.uint8)] * 2)
        assert read_image(tmp_path / "g.png").shape == (1, 4, 2)

    def test_raw_slice(self, tmp_path):
        write_raw_tensor(tmp_path / "m.rawt", np.arange(24).reshape(2, 3, 2, 2))
        slab = ImageStore(tmp_path).load("m.rawt#1")
        assert slab.shape == (3, 2, 2)
        assert slab[0, 0, 0] == 12

    def test_out_of_range(self, tmp_path):
        write_raw_tensor(tmp_path / "m.rawt", np.zeros((2, 1, 2, 2)))
        write_sprite_sheet(tmp_path / "s.png", [np.zeros((1, 3, 3), dtype=np.uint8)] * 3)
        store = ImageStore(tmp_path)
        with pytest.raises(ImageryError, match="index out of range"):
            store.load("m.rawt#2")
        with pytest.raises(ImageryError, match="does not hold tile"):
            store.load("s.png#0/4")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ImageryError, match="Cannot read imagery"):
            ImageStore(tmp_path).load("nowhere.png")


class TestResample:
    def test_same_size_is_identity(self, rng):
        image = rng.uniform(size=(2, 5, 6))
        np.testing.assert_array_equal(resample(image, (5, 6)), image)

    def test_constant_image_stays_constant(self):
        out = resample(np.full((1, 4, 4), 3.0), (8, 6))
        assert out.shape == (1, 8, 6)
        np.testing.assert_allclose(out, 3.0, rtol=1e-6)

    def test_nearest_keeps_class_ids(self):
        classes = np.array([[[0, 2], [5, 13]]], dtype=np.float64)
        out = resample(classes, (4, 4), nearest=True)
        assert set(np.unique(out)) == {0.0, 2.0, 5.0, 13.0}


class TestOneHot:
    def test_planes(self):
        planes = one_hot(np.array([[[0, 1], [1, 3]]]), 4)
        assert planes.shape == (4, 2, 2)
        np.testing.assert_array_equal(planes.sum(axis=0), np.ones((2, 2)))
        assert planes[3, 1, 1] == 1.0

    def test_out_of_range(self):
        with pytest.raises(ImageryError, match="Class ids"):
            one_hot(np.array([[4]]), 4)


class TestCropSquare:
    def test_interior(self):
        image = np.arange(25.0).reshape(1, 5, 5)
        np.testing.assert_array_equal(crop_square(image, 1, 1, 2), [[[6.0, 7.0], [11.0, 12.0]]])

    def test_edges_are_replicated(self):
        image = np.arange(9.0).reshape(1, 3, 3)
        out = crop_square(image, -1, -1, 3)
        np.testing.assert_array_equal(out[0], [[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [3.0, 3.0, 4.0]])

    def test_fully_outside(self):
        with pytest.raises(ImageryError, match="outside"):
            crop_square(np.zeros((1, 3, 3)), 5, 0, 2)
