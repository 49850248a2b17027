import hashlib
import json

import numpy as np
import pytest

from coaxmpi.app.services.artifacts import (
    canonical_json,
    config_hash,
    read_json,
    read_pfm,
    sha256_file,
    update_manifest,
    write_grid_csv,
    write_json,
    write_pfm,
    write_pgm,
    write_rows_csv,
)


def test_canonical_json_is_key_order_independent():
    assert canonical_json({"b": 1, "a": [1.5, "x"]}) == '{"a":[1.5,"x"],"b":1}'
    assert config_hash({"b": 1, "a": 2}) == config_hash({"a": 2, "b": 1})
    assert config_hash({"a": 2}) != config_hash({"a": 3})


def test_canonical_json_rejects_nan():
    with pytest.raises(ValueError):
        canonical_json({"x": float("nan")})


def test_json_round_trip_keeps_floats_exact(tmp_path):
    doc = {"x": 0.1 + 0.2, "nested": {"y": 1e-300}}
    path = write_json(tmp_path / "sub" / "doc.json", doc)
    assert read_json(path) == doc
    assert path.read_text().endswith("\n")


def test_sha256_file(tmp_path):
    path = tmp_path / "blob.bin"
    path.write_bytes(b"coaxial" * 1000)
    assert sha256_file(path) == hashlib.sha256(b"coaxial" * 1000).hexdigest()


def test_manifest_records_each_command(tmp_path):
    first = write_json(tmp_path / "a.json", {"a": 1})
    second = write_json(tmp_path / "b.json", {"b": 2})
    update_manifest(tmp_path, "generate", "hash-1", 7, [first])
    update_manifest(tmp_path, "train", "hash-1", 7, [second], extra={"n_trees": 3})

    manifest = read_json(tmp_path / "manifest.json")
    assert manifest["schema_version"] == 1
    assert set(manifest["commands"]) == {"generate", "train"}
    assert manifest["commands"]["generate"]["files"] == {"a.json": sha256_file(first)}
    assert manifest["commands"]["train"]["n_trees"] == 3


def test_manifest_rerun_replaces_only_its_entry(tmp_path):
    path = write_json(tmp_path / "a.json", {"a": 1})
    update_manifest(tmp_path, "generate", "old", 1, [path])
    update_manifest(tmp_path, "eval", "old", 1, [path])
    update_manifest(tmp_path, "generate", "new", 2, [path])

    commands = read_json(tmp_path / "manifest.json")["commands"]
    assert commands["generate"]["config_hash"] == "new"
    assert commands["eval"]["config_hash"] == "old"


def test_manifest_is_deterministic(tmp_path):
    for name in ("one", "two"):
        out = tmp_path / name
        path = write_json(out / "a.json", {"a": 1})
        update_manifest(out, "generate", "h", 0, [path])
    assert (tmp_path / "one" / "manifest.json").read_bytes() == (tmp_path / "two" / "manifest.json").read_bytes()


def test_unreadable_manifest_is_replaced(tmp_path):
    (tmp_path / "manifest.json").write_text("{broken")
    path = write_json(tmp_path / "a.json", {})
    update_manifest(tmp_path, "generate", "h", 0, [path])
    assert set(read_json(tmp_path / "manifest.json")["commands"]) == {"generate"}


def test_rows_csv_writes_shortest_float_text(tmp_path):
    path = write_rows_csv(tmp_path / "rows.csv", ("name", "value", "n"), [("a", 0.1, 3), ("b", np.float64(2.5), 4)])
    assert path.read_text() == "name,value,n\na,0.1,3\nb,2.5,4\n"


def test_grid_csv_writes_nan_for_masked_pixels(tmp_path):
    path = write_grid_csv(tmp_path / "grid.csv", np.array([[1.0, np.nan], [0.25, 2.0]]))
    assert path.read_text().splitlines() == ["1.0,nan", "0.25,2.0"]


def test_pfm_round_trip_and_orientation(tmp_path):
    grid = np.array([[1.0, 2.0, 3.0], [0.5, np.nan, -4.0]])
    path = write_pfm(tmp_path / "map.pfm", grid)

    data = path.read_bytes()
    assert data.startswith(b"Pf\n3 2\n-1.0\n")
    # bottom row is stored first
    first_value = np.frombuffer(data[len(b"Pf\n3 2\n-1.0\n"):], dtype="<f4", count=1)[0]
    assert first_value == 0.5

    loaded = read_pfm(path)
    assert loaded.shape == (2, 3)
    assert np.array_equal(loaded, grid, equal_nan=True)


def test_pfm_rejects_non_grids(tmp_path):
    with pytest.raises(ValueError):
        write_pfm(tmp_path / "bad.pfm", np.zeros(3))
    (tmp_path / "color.pfm").write_bytes(b"PF\n1 1\n-1.0\n" + np.zeros(3, dtype="<f4").tobytes())
    with pytest.raises(ValueError):
        read_pfm(tmp_path / "color.pfm")


def test_pgm_mask(tmp_path):
    path = write_pgm(tmp_path / "mask.pgm", np.array([[True, False], [False, True]]))
    assert path.read_bytes() == b"P5\n2 2\n255\n" + bytes([255, 0, 0, 255])


def test_manifest_paths_outside_out_dir_stay_absolute(tmp_path):
    elsewhere = write_json(tmp_path / "elsewhere" / "x.json", {})
    update_manifest(tmp_path / "out", "generate", "h", 0, [elsewhere])
    files = json.loads((tmp_path / "out" / "manifest.json").read_text())["commands"]["generate"]["files"]
    assert list(files) == [elsewhere.as_posix()]
