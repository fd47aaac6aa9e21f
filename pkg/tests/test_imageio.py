import tempfile

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from rdae.imageio import (
    ImageDecodeError,
    decode_pnm,
    ingest_directory,
    load_frame,
    read_image,
    resize_bilinear,
    to_chw,
    write_ppm,
)


def rgb(h, w, seed=0):
    return np.random.default_rng(seed).integers(0, 256, (h, w, 3), dtype=np.uint8)


class TestPnm:
    @settings(max_examples=25, deadline=None)
    @given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9), st.just(3))))
    def test_roundtrip(self, img):
        with tempfile.TemporaryDirectory() as d:
            write_ppm(f"{d}/x.ppm", img)
            np.testing.assert_array_equal(read_image(f"{d}/x.ppm"), img)

    def test_header_layout(self, tmp_path):
        write_ppm(tmp_path / "a.ppm", rgb(2, 3))
        assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6\n3 2\n255\n")

    def test_comments_and_ascii(self):
        img = decode_pnm(b"P3\n# a comment\n2 1\n255\n1 2 3  4 5 6\n")
        assert img.tolist() == [[[1, 2, 3], [4, 5, 6]]]

    def test_grey_is_replicated(self):
        assert decode_pnm(b"P5 1 1 255\n\x07").tolist() == [[[7, 7, 7]]]

    def test_rescales_maxval(self):
        assert decode_pnm(b"P2 2 1 15\n0 15\n").tolist() == [[[0, 0, 0], [255, 255, 255]]]
        assert decode_pnm(b"P6 1 1 65535\n\xff\xff\x00\x00\x80\x00")[0, 0].tolist() == [255, 0, 128]

    @pytest.mark.parametrize("data", [b"P7 1 1 255\n", b"P6 2 2 255\n\x00", b"P6 0 1 255\n", b"P6 a 1 255\n"])
    def test_bad_files(self, data):
        with pytest.raises(ImageDecodeError):
            decode_pnm(data)

    def test_write_rejects_wrong_dtype(self, tmp_path):
        with pytest.raises(ValueError):
            write_ppm(tmp_path / "a.ppm", np.zeros((2, 2, 3), np.float32))


class TestResizeAndIngest:
    def test_noop_resize_is_exact(self):
        img = rgb(16, 16)
        assert resize_bilinear(img, 16) is img
        np.testing.assert_array_equal(to_chw(img) * 255, img.transpose(2, 0, 1).astype(np.float32))

    def test_widescreen_to_square(self, tmp_path):
        Image.fromarray(rgb(480, 854)).save(tmp_path / "wide.png")
        assert load_frame(tmp_path / "wide.png", 128).shape == (3, 128, 128)

    def test_constant_image_survives_resize(self):
        img = np.full((30, 50, 3), 77, np.uint8)
        assert np.all(resize_bilinear(img, 16) == 77)

    def test_directory_order_and_skips(self, tmp_path):
        write_ppm(tmp_path / "b.ppm", np.full((8, 8, 3), 20, np.uint8))
        write_ppm(tmp_path / "a.ppm", np.full((8, 8, 3), 10, np.uint8))
        Image.fromarray(np.full((8, 8, 3), 30, np.uint8)).save(tmp_path / "c.png")
        (tmp_path / "notes.txt").write_text("not an image")
        (tmp_path / "d.ppm").write_bytes(b"P6 8 8 255\n\x00")
        out = ingest_directory(tmp_path, 4)
        assert len(out) == 3
        assert [round(float(f.mean()) * 255) for f in out.frames] == [10, 20, 30]
        assert sorted(s.path.rsplit("/", 1)[-1] for s in out.skipped) == ["d.ppm", "notes.txt"]
        assert out.frames.dtype == np.float32 and out.frames.max() <= 1.0

    def test_empty_directory(self, tmp_path):
        with pytest.raises(ValueError):
            ingest_directory(tmp_path, 8)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            ingest_directory(tmp_path / "nope", 8)
