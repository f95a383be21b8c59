import hashlib
import json
import random

import pytest

from coldboot.blockstore import (DEFAULT_BLOCK_SIZE, BlockManifest, BlockStore, Layer, LayeredImageSpec,
                                 build_image, flatten, read_file_range)
from coldboot.errors import BuildError, NotFound, RangeError
from oracles import blockstore_roundtrip, padded_block_ids, write_layer


@pytest.fixture
def store(tmp_path):
    return BlockStore(tmp_path / "store")


def one_layer(tmp_path, files, name="l0", tombstones=()):
    d = tmp_path / name
    d.mkdir()
    write_layer(d, files)
    return Layer(d, list(tombstones))


def test_default_block_size():
    assert DEFAULT_BLOCK_SIZE == 512 * 1024


def test_last_block_zero_padded_before_hashing(tmp_path, store):
    data = b"x" * 5000
    spec = LayeredImageSpec("img", [one_layer(tmp_path, {"/a": data})])
    m = build_image(spec, store, block_size=4096)
    tail = data[4096:].ljust(4096, b"\0")
    assert m.file("/a").blocks[1] == hashlib.sha256(tail).hexdigest()
    assert m.file("/a").size == 5000
    assert store.get_block(m.file("/a").blocks[1]) == tail


def test_identical_blocks_stored_once(tmp_path, store):
    spec = LayeredImageSpec("img", [one_layer(tmp_path, {"/a": b"\1" * 8192, "/b": b"\1" * 4096})])
    m = build_image(spec, store, block_size=4096)
    assert m.total_blocks == 3
    assert m.unique_blocks == 1
    assert store.block_count() == 1


def test_block_layout_two_level_fanout(tmp_path, store):
    spec = LayeredImageSpec("img", [one_layer(tmp_path, {"/a": b"hello"})])
    m = build_image(spec, store, block_size=4096)
    bid = m.file("/a").blocks[0]
    assert (store.root / "blocks" / bid[:2] / bid[2:4] / bid).is_file()


def test_manifest_field_order_and_roundtrip(tmp_path, store):
    spec = LayeredImageSpec("img", [one_layer(tmp_path, {"/z": b"1", "/a/b": b"22"})])
    m = build_image(spec, store, block_size=4096)
    doc = json.loads(m.to_json())
    assert list(doc) == ["image_id", "hash", "block_size", "total_blocks", "unique_blocks", "files"]
    assert [f["path"] for f in doc["files"]] == ["/a/b", "/z"]
    assert BlockManifest.from_json(m.to_json()).to_json() == m.to_json()
    assert store.load_manifest("img").to_json() == m.to_json()


@pytest.mark.parametrize("bs", [0, 1000, 2048, 4097, 6000])
def test_rejects_bad_block_size(tmp_path, store, bs):
    spec = LayeredImageSpec("img", [one_layer(tmp_path, {"/a": b"1"})])
    with pytest.raises(ValueError):
        build_image(spec, store, block_size=bs)


def test_tombstone_removes_lower_file_and_directory(tmp_path):
    lower = one_layer(tmp_path, {"/etc/a": b"1", "/etc/b": b"2", "/usr/x": b"3"})
    upper = one_layer(tmp_path, {"/new": b"4"}, "l1", tombstones=["etc", "/usr/x"])
    assert list(flatten(LayeredImageSpec("i", [lower, upper]))) == ["/new"]


def test_upper_layer_overrides_lower(tmp_path, store):
    lower = one_layer(tmp_path, {"/a": b"old"})
    upper = one_layer(tmp_path, {"/a": b"new"}, "l1")
    m = build_image(LayeredImageSpec("i", [lower, upper]), store, block_size=4096)
    assert read_file_range(m, "/a", 0, 3, store=store) == b"new"


def test_file_directory_collision(tmp_path, store):
    lower = one_layer(tmp_path, {"/a/b": b"1"})
    upper = one_layer(tmp_path, {"/a": b"2"}, "l1")
    with pytest.raises(BuildError):
        build_image(LayeredImageSpec("i", [lower, upper]), store)
    lower = one_layer(tmp_path, {"/c": b"1"}, "l2")
    upper = one_layer(tmp_path, {"/c/d": b"2"}, "l3")
    with pytest.raises(BuildError):
        build_image(LayeredImageSpec("i", [lower, upper]), store)


def test_tombstoned_directory_can_become_file(tmp_path):
    lower = one_layer(tmp_path, {"/a/b": b"1"})
    upper = one_layer(tmp_path, {"/a": b"2"}, "l1", tombstones=["a"])
    assert list(flatten(LayeredImageSpec("i", [lower, upper]))) == ["/a"]


def test_missing_layer_dir(tmp_path, store):
    with pytest.raises(BuildError):
        build_image(LayeredImageSpec("i", [Layer(tmp_path / "nope")]), store)


def test_spec_json_relative_paths(tmp_path, store):
    one_layer(tmp_path, {"/f": b"abc"})
    (tmp_path / "spec.json").write_text(json.dumps({"image_id": "s", "layers": [{"path": "l0"}]}))
    m = build_image(LayeredImageSpec.from_json(tmp_path / "spec.json"), store, block_size=4096)
    assert read_file_range(m, "/f", 1, 2, store=store) == b"bc"


def test_range_errors(tmp_path, store):
    m = build_image(LayeredImageSpec("i", [one_layer(tmp_path, {"/a": b"12345"})]), store, block_size=4096)
    with pytest.raises(RangeError):
        read_file_range(m, "/a", 3, 3, store=store)
    with pytest.raises(RangeError):
        read_file_range(m, "/a", -1, 1, store=store)
    with pytest.raises(NotFound):
        read_file_range(m, "/missing", 0, 1, store=store)
    with pytest.raises(RangeError):
        m.block_at("/a", 1)
    assert read_file_range(m, "/a", 5, 0, store=store) == b""


def test_unknown_block_and_manifest(store):
    with pytest.raises(NotFound):
        store.get_block("ab" * 32)
    with pytest.raises(NotFound):
        store.load_manifest("nope")


def test_empty_file(tmp_path, store):
    m = build_image(LayeredImageSpec("i", [one_layer(tmp_path, {"/e": b""})]), store, block_size=4096)
    assert m.file("/e").size == 0 and m.file("/e").blocks == []


def test_dedup_matches_oracle_across_images(tmp_path, store):
    rng = random.Random(5)
    shared = rng.randbytes(3 * 4096)
    a = build_image(LayeredImageSpec("a", [one_layer(tmp_path, {"/x": shared + b"a"})]), store, 4096)
    b = build_image(LayeredImageSpec("b", [one_layer(tmp_path, {"/y": shared + b"b"}, "l1")]), store, 4096)
    expected = padded_block_ids({"x": shared + b"a", "y": shared + b"b"}, 4096)
    assert set(a.block_ids()) | set(b.block_ids()) == expected
    assert store.block_count() == len(expected)


def test_randomized_roundtrip_small(tmp_path):
    n, mismatches = blockstore_roundtrip(60, seed=11, tmp=tmp_path)
    assert mismatches == []
