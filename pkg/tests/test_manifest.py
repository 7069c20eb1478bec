import json

import pytest

from pgst.errors import ConfigError
from pgst.manifest import (
    LOCK_NAME,
    MANIFEST_NAME,
    RunManifest,
    finalize_run,
    hash_files,
    hash_tree,
    run_lock,
    sha256_file,
)


def test_sha256_file_known_value(tmp_path):
    p = tmp_path / "x.bin"
    p.write_bytes(b"abc")
    assert sha256_file(p) == (
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
    )


def test_hash_files_skips_missing(tmp_path):
    a = tmp_path / "a.txt"
    a.write_text("hello")
    out = hash_files([a, tmp_path / "nope.txt"])
    assert list(out) == [str(a)]


def test_hash_tree_skips_lock_and_manifest(tmp_path):
    (tmp_path / "out.json").write_text("{}")
    (tmp_path / "sub").mkdir()
    (tmp_path / "sub" / "data.csv").write_text("x\n")
    (tmp_path / LOCK_NAME).write_text("123")
    (tmp_path / MANIFEST_NAME).write_text("{}")
    out = hash_tree(tmp_path)
    assert sorted(out) == ["out.json", "sub/data.csv"]


def test_run_lock_exclusive_and_released(tmp_path):
    with run_lock(tmp_path):
        assert (tmp_path / LOCK_NAME).exists()
        with pytest.raises(ConfigError, match="in use"):
            with run_lock(tmp_path):
                pass
    assert not (tmp_path / LOCK_NAME).exists()
    with run_lock(tmp_path):
        pass


def test_run_lock_released_on_error(tmp_path):
    with pytest.raises(RuntimeError):
        with run_lock(tmp_path):
            raise RuntimeError("boom")
    assert not (tmp_path / LOCK_NAME).exists()


def test_manifest_write_atomic_and_sorted(tmp_path):
    m = RunManifest(command="eval", config={"b": 1, "a": 2}, seed=0)
    target = m.write(tmp_path)
    assert target.name == MANIFEST_NAME
    assert not (tmp_path / (MANIFEST_NAME + ".tmp")).exists()
    obj = json.loads(target.read_text())
    assert obj["command"] == "eval"
    assert obj["config"] == {"a": 2, "b": 1}


def test_wall_time_omitted_in_deterministic_mode(tmp_path, monkeypatch):
    (tmp_path / "out.txt").write_text("result")
    monkeypatch.delenv("PGST_DETERMINISTIC", raising=False)
    m = finalize_run(tmp_path, "eval", {}, 0, [], wall_time_s=1.5)
    obj = json.loads((tmp_path / MANIFEST_NAME).read_text())
    assert obj["wall_time_s"] == 1.5
    assert not m.deterministic

    monkeypatch.setenv("PGST_DETERMINISTIC", "1")
    m = finalize_run(tmp_path, "eval", {}, 0, [], wall_time_s=1.5)
    obj = json.loads((tmp_path / MANIFEST_NAME).read_text())
    assert "wall_time_s" not in obj
    assert m.deterministic


def test_finalize_hashes_inputs_and_outputs(tmp_path):
    src = tmp_path / "in.json"
    src.write_text("[1]")
    run = tmp_path / "run"
    run.mkdir()
    (run / "report.json").write_text("{}")
    m = finalize_run(run, "eval", {"k": "v"}, 7, [src], wall_time_s=0.1)
    assert str(src) in m.inputs
    assert m.inputs[str(src)] == sha256_file(src)
    assert list(m.outputs) == ["report.json"]
    assert m.seed == 7
    # the manifest itself never appears in its own output hashes
    obj = json.loads((run / MANIFEST_NAME).read_text())
    assert sorted(obj["outputs"]) == ["report.json"]


def test_deterministic_reruns_byte_identical(tmp_path, monkeypatch):
    monkeypatch.setenv("PGST_DETERMINISTIC", "1")

    def one_run(d):
        d.mkdir()
        (d / "out.csv").write_text("iters,map50\n0,0.5\n")
        finalize_run(d, "sweep", {"grid": [0]}, 0, [], wall_time_s=2.0)
        return (d / MANIFEST_NAME).read_bytes()

    a = one_run(tmp_path / "a")
    b = one_run(tmp_path / "b")
    assert a == b
