import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from shiftcd.errors import DataIOError, DimensionError, FormatError
from shiftcd.imagery import (
    Raster,
    TileGrid,
    load_float_map,
    load_label_png,
    load_raster,
    make_grid,
    read_png_text,
    save_float_map,
    save_label_png,
    save_raster,
    stitch,
    tile,
    tile_stride,
)


def random_raster(h, w, c=3, seed=0):
    return Raster(np.random.default_rng(seed).random((h, w, c)).astype(np.float32))


def test_raster_validation():
    with pytest.raises(DimensionError):
        Raster(np.zeros((4, 4, 3, 1), np.float32))
    with pytest.raises(FormatError):
        Raster(np.full((2, 2, 3), 1.5, np.float32))
    r = Raster(np.zeros((3, 5), np.float32))
    assert r.shape == (3, 5, 1)


def test_png_8bit_round_trip_and_text(tmp_path):
    img = (np.arange(4 * 6 * 3) % 256).reshape(4, 6, 3).astype(np.uint8)
    r = Raster(img.astype(np.float32) / 255)
    path = save_raster(tmp_path / "a.png", r, meta={"config_digest": "abc", "seed": 3})
    back = load_raster(path)
    assert np.array_equal(np.round(back.data * 255).astype(np.uint8), img)
    assert read_png_text(path) == {"config_digest": "abc", "seed": "3"}


def test_png_16bit_gray(tmp_path):
    arr = np.array([[0, 1000, 65535]], dtype=np.uint16)
    Image.fromarray(arr).save(tmp_path / "g.png")
    r = load_raster(tmp_path / "g.png")
    assert r.channels == 1
    assert np.allclose(r.data[..., 0], arr / 65535.0, atol=1e-7)


def test_tiff_geo_tags_preserved(tmp_path):
    import tifffile

    geo = {33550: (12, 3, (10.0, 10.0, 0.0)), 33922: (12, 6, (0.0, 0.0, 0.0, 500000.0, 4100000.0, 0.0))}
    r = Raster(random_raster(8, 8).data, geo=geo)
    path = save_raster(tmp_path / "scene.tif", r, bit_depth=16)
    back = load_raster(path)
    assert set(back.geo) >= {33550, 33922}
    with tifffile.TiffFile(path) as tf:
        assert tuple(tf.pages[0].tags[33550].value) == (10.0, 10.0, 0.0)
    assert np.allclose(back.data, r.data, atol=1 / 65535)


def test_float_map_round_trip(tmp_path):
    d = np.random.default_rng(1).random((5, 7)).astype(np.float32)
    save_float_map(tmp_path / "d.tif", d, {"seed": 1})
    assert np.array_equal(load_float_map(tmp_path / "d.tif"), d)


def test_label_png_palettes(tmp_path):
    labels = np.array([[0, 1, 2]], np.uint8)
    pal = {0: 0, 1: 128, 2: 255}
    save_label_png(tmp_path / "t.png", labels, pal)
    assert np.asarray(Image.open(tmp_path / "t.png")).tolist() == [[0, 128, 255]]
    assert np.array_equal(load_label_png(tmp_path / "t.png", pal), labels)
    with pytest.raises(FormatError):
        save_label_png(tmp_path / "bad.png", np.array([[3]]), pal)


def test_missing_and_corrupt_files(tmp_path):
    with pytest.raises(DataIOError):
        load_raster(tmp_path / "nope.png")
    (tmp_path / "junk.png").write_bytes(b"not an image")
    with pytest.raises(DataIOError):
        load_raster(tmp_path / "junk.png")


def test_stride_and_grid_cover_scene():
    assert tile_stride(256, 0.29) == 182
    grid = make_grid((600, 700), 256, 0.29)
    assert grid.origins[0] == (0, 0)
    rows = sorted({r for r, _ in grid.origins})
    cols = sorted({c for _, c in grid.origins})
    assert rows[-1] == 600 - 256 and cols[-1] == 700 - 256
    assert TileGrid.from_json(grid.to_json()) == grid


@settings(max_examples=10, deadline=None)
@given(st.integers(256, 520), st.integers(256, 520), st.sampled_from([0.0, 0.29, 0.5]))
def test_tile_stitch_identity(h, w, overlap):
    r = random_raster(h, w, seed=h * w)
    tiles, grid = tile(r, 256, overlap)
    assert np.array_equal(stitch(tiles, grid, "mean"), r.data)


def test_majority_stitch_and_shape_errors():
    labels = Raster(np.random.default_rng(2).integers(0, 2, (300, 300, 1)).astype(np.float32))
    tiles, grid = tile(labels, 256, 0.29)
    assert np.array_equal(stitch(tiles, grid, "majority"), labels.data)
    with pytest.raises(DimensionError):
        stitch(tiles[:-1], grid)
    with pytest.raises(DimensionError):
        stitch([t[:-1] for t in tiles], grid)
