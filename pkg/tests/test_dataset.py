import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from openpixel import dataset as ds

VAIHINGEN_IDS = [f"area{i}" for i in [*range(1, 9), *range(10, 18), *range(20, 25), *range(26, 36), 37, 38]]


def write_pngs(tmp_path, image, label_rgb):
    Image.fromarray(image, "RGB").save(tmp_path / "image.png")
    Image.fromarray(label_rgb, "RGB").save(tmp_path / "labels.png")
    return tmp_path / "image.png", tmp_path / "labels.png"


def test_load_tile_decodes_palette(tmp_path):
    img = np.zeros((4, 5, 3), np.uint8)
    lab = np.zeros((4, 5, 3), np.uint8)
    lab[:] = (0, 255, 0)  # tree
    lab[1, 2] = (255, 255, 0)  # car
    lab[3, 4] = (1, 2, 3)  # stray
    tile = ds.load_tile(*write_pngs(tmp_path, img, lab))
    assert tile.labels[1, 2] == ds.CLASSES.index("car")
    assert tile.labels[3, 4] == ds.IGNORE
    assert tile.labels[0, 0] == ds.CLASSES.index("tree")
    assert tile.id == tmp_path.name


def test_load_tile_uniform(tmp_path):
    lab = np.full((3, 3, 3), 255, np.uint8)  # street is white
    tile = ds.load_tile(*write_pngs(tmp_path, np.zeros((3, 3, 3), np.uint8), lab))
    assert (tile.labels == ds.CLASSES.index("street")).all()


def test_load_tile_paletted_png(tmp_path):
    Image.fromarray(np.zeros((2, 2, 3), np.uint8), "RGB").save(tmp_path / "image.png")
    lab = Image.new("P", (2, 2))
    lab.putpalette([0, 0, 255] + [0] * 765)
    lab.save(tmp_path / "labels.png")
    tile = ds.load_tile(tmp_path / "image.png", tmp_path / "labels.png")
    assert (tile.labels == ds.CLASSES.index("building")).all()


def test_load_tile_errors(tmp_path):
    with pytest.raises(ValueError, match="size"):
        ds.load_tile(*write_pngs(tmp_path, np.zeros((3, 3, 3), np.uint8), np.zeros((3, 4, 3), np.uint8)))
    with pytest.raises(OSError):
        ds.load_tile(tmp_path / "missing.png", tmp_path / "labels.png")
    (tmp_path / "junk.png").write_bytes(b"not a png")
    with pytest.raises(OSError):
        ds.load_tile(tmp_path / "image.png", tmp_path / "junk.png")


def test_palette_file_round_trip(tmp_path):
    path = tmp_path / "palette.txt"
    ds.save_palette(ds.DEFAULT_PALETTE, path)
    assert ds.load_palette(path) == ds.DEFAULT_PALETTE
    path.write_text("1,2,3,a\n1,2,3,b\n")
    with pytest.raises(ValueError):
        ds.load_palette(path)


def test_loco_scheme_car():
    s = ds.make_loco_scheme("car")
    assert s.known == ("street", "building", "grass", "tree")
    labels = np.array([0, 1, 2, 3, 4, ds.IGNORE], np.uint8)
    np.testing.assert_array_equal(s.remap(labels), [0, 1, 2, 3, ds.UNKNOWN, ds.IGNORE])


def test_all_schemes_partition_classes():
    schemes = [ds.make_loco_scheme(c) for c in ds.CLASSES]
    assert [s.unknown for s in schemes] == list(ds.CLASSES)
    for s in schemes:
        assert set(s.known) | {s.unknown} == set(ds.CLASSES)
        assert s.unknown not in s.known
        ids = np.arange(s.n_known, dtype=np.uint8)
        np.testing.assert_array_equal(s.remap(s.inverse(ids)), ids)
        remapped = s.remap(np.arange(256, dtype=np.uint8))
        assert set(np.unique(remapped)) <= set(range(4)) | {ds.UNKNOWN, ds.IGNORE}


def test_loco_scheme_rejects_unknown_name():
    with pytest.raises(ValueError):
        ds.make_loco_scheme("water")


def test_vaihingen_split():
    assert len(VAIHINGEN_IDS) == 33
    train, test = ds.split_tiles(VAIHINGEN_IDS)
    assert sorted(test, key=ds.patch_number) == ["area11", "area15", "area28", "area30", "area34"]
    assert len(train) == 28 and "area11" not in train


def test_fraction_split():
    ids = [f"synth{i:03d}" for i in range(10)]
    train, test = ds.split_tiles(ids, 0.2, seed=1)
    assert len(test) == 2 and len(train) == 8 and not set(train) & set(test)
    with pytest.raises(ValueError):
        ds.split_tiles(["area11"])


def test_validation_ceiling():
    train, val = ds.hold_out_validation([f"t{i}" for i in range(28)], 0.1, seed=0)
    assert len(val) == 3 and len(train) == 25
    with pytest.raises(ValueError):
        ds.hold_out_validation(["a", "b"], 0.9)
    with pytest.raises(ValueError):
        ds.hold_out_validation(["a", "b"], 0.0)


@given(st.integers(0, 10_000), st.integers(2, 40), st.floats(0.05, 0.6))
@settings(max_examples=50, deadline=None)
def test_validation_split_properties(seed, n, frac):
    ids = [f"t{i}" for i in range(n)]
    try:
        train, val = ds.hold_out_validation(ids, frac, seed)
    except ValueError:
        return
    assert not set(train) & set(val)
    assert sorted(train + val) == sorted(ids)
    assert (train, val) == ds.hold_out_validation(ids, frac, seed)


def mirror_index(i, n):
    if i < 0:
        return -i - 1
    if i >= n:
        return 2 * n - i - 1
    return i


def striped_tile():
    rng = np.random.default_rng(0)
    labels = np.zeros((40, 44), np.uint8)
    labels[:, 11:22] = 1
    labels[:, 22:33] = 2
    labels[:, 33:] = 4
    labels[0, 0] = ds.IGNORE
    return ds.LabeledTile("t0", rng.integers(0, 256, (40, 44, 3), dtype=np.uint8), labels)


def test_patches_exclude_unknown_and_ignore():
    tile = striped_tile()
    scheme = ds.make_loco_scheme("car")  # class 3 (tree) absent -> error
    with pytest.raises(ValueError, match="tree"):
        list(ds.extract_training_patches([tile], scheme, 10))
    scheme = ds.ClassScheme(("street", "building", "grass", "car"), "car")
    samples = list(ds.extract_training_patches([tile], scheme, 100_000, seed=0))
    assert all(0 <= s.label < 3 for s in samples)
    assert all(tile.labels[s.center] not in (3, ds.IGNORE) for s in samples)
    counts = np.bincount([s.label for s in samples])
    assert counts.tolist() == [40 * 11 - 1, 40 * 11, 40 * 11]


def test_patches_balanced_quota():
    tile = striped_tile()
    tile.labels[tile.labels == 4] = 3
    scheme = ds.make_loco_scheme("car")
    samples = list(ds.extract_training_patches([tile], scheme, 100, seed=3))
    assert np.bincount([s.label for s in samples]).tolist() == [100] * 4
    again = list(ds.extract_training_patches([tile], scheme, 100, seed=3))
    assert [s.center for s in samples] == [s.center for s in again]


def test_patch_equals_direct_mirrored_crop():
    tile = striped_tile()
    scheme = ds.ClassScheme(("street", "building", "grass", "car"), "car")
    h, w = tile.labels.shape
    for s in list(ds.extract_training_patches([tile], scheme, 5, seed=1)):
        r, c = s.center
        rows = [mirror_index(i, h) for i in range(r - 27, r + 28)]
        cols = [mirror_index(j, w) for j in range(c - 27, c + 28)]
        expected = tile.image[np.ix_(rows, cols)].transpose(2, 0, 1)
        np.testing.assert_array_equal(s.pixels, expected)


def test_all_unknown_tile_yields_error():
    tile = ds.LabeledTile("u", np.zeros((8, 8, 3), np.uint8), np.full((8, 8), 4, np.uint8))
    with pytest.raises(ValueError):
        list(ds.extract_training_patches([tile], ds.make_loco_scheme("car"), 10))


def test_synthetic_deterministic_and_shares():
    cfg = ds.SynthConfig(n_tiles=3, tile_size=64, n_classes=5, n_regions=10, seed=7,
                         min_class_share=0.05, max_class_share=0.5)
    a, b = ds.generate_synthetic(cfg), ds.generate_synthetic(cfg)
    for ta, tb in zip(a, b):
        np.testing.assert_array_equal(ta.image, tb.image)
        np.testing.assert_array_equal(ta.labels, tb.labels)
        share = np.bincount(ta.labels.ravel(), minlength=5) / ta.labels.size
        assert share.min() >= 0.05 and share.max() <= 0.5


def test_synthetic_noise_free_centre_determines_class():
    tex = [ds.ClassTexture((40, 40, 40), noise=0), ds.ClassTexture((200, 120, 60), noise=0)]
    cfg = ds.SynthConfig(n_tiles=2, tile_size=48, n_classes=2, textures=tex, n_regions=4, seed=2)
    for tile in ds.generate_synthetic(cfg):
        centre_is_class1 = (tile.image == (200, 120, 60)).all(axis=-1)
        np.testing.assert_array_equal(centre_is_class1, tile.labels == 1)


def test_synthetic_round_trip(tmp_path):
    cfg = ds.SynthConfig(n_tiles=2, tile_size=32, n_classes=3, n_regions=5, seed=1)
    tiles = ds.generate_synthetic(cfg)
    palette = ds.synthetic_palette(cfg.names)
    ds.write_dataset(tiles, tmp_path, palette)
    loaded = ds.load_tiles(tmp_path, palette=ds.load_palette(tmp_path / "palette.txt"))
    assert [t.id for t in loaded] == [t.id for t in tiles]
    for a, b in zip(tiles, loaded):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.labels, b.labels)
