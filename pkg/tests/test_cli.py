import json

import pytest

from pgst.cli import REPORT_ROWS, _resolve, build_parser, main
from pgst.datagen import dataset_split_dir, read_dataset
from pgst.groundnet import GroundingModel, ModelConfig, save_checkpoint
from pgst.manifest import LOCK_NAME, MANIFEST_NAME, hash_tree
from pgst.prompts import DRIVING_CLASSES, benchmark_vocabulary
from pgst.styleengine import load_style_bank


GEN_ARGS = ["--n-train", "6", "--n-val", "2", "--n-test", "2"]


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "bench"
    assert main(["gen-data", "--out", str(root), "--seed", "1", *GEN_ARGS]) == 0
    return root


@pytest.fixture(scope="module")
def ckpt_path(tmp_path_factory, data_root):
    vocab = benchmark_vocabulary(DRIVING_CLASSES)
    model = GroundingModel(ModelConfig(), vocab, seed=0)
    path = tmp_path_factory.mktemp("ckpt") / "checkpoint.pt"
    save_checkpoint(path, model, meta={"stage": "untrained"})
    return path


def test_parser_covers_all_subcommands():
    parser = build_parser()
    ok = [
        ["gen-data", "--out", "d"],
        ["train-source", "--data", "d", "--out", "r"],
        ["fit-style", "--ckpt", "c", "--data", "d", "--domain",
         "daytime_foggy", "--out", "r"],
        ["finetune", "--ckpt", "c", "--data", "d", "--domain",
         "daytime_foggy", "--bank", "b.json", "--out", "r"],
        ["eval", "--ckpt", "c", "--data", "d", "--domain",
         "daytime_foggy", "--out", "r"],
        ["sweep-iters", "--ckpt", "c", "--data", "d", "--out", "r"],
        ["ablate-layers", "--ckpt", "c", "--data", "d", "--out", "r"],
        ["ablate-prompts", "--ckpt", "c", "--data", "d", "--out", "r"],
        ["infer", "--ckpt", "c", "--image", "x.png"],
        ["export-features", "--ckpt", "c", "--data", "d", "--domain",
         "daytime_sunny", "--out", "r"],
        ["report", "runs"],
    ]
    for argv in ok:
        args = parser.parse_args(argv)
        assert callable(args.func), argv[0]


def test_gen_data_layout(data_root):
    train = read_dataset(dataset_split_dir(data_root, "daytime_sunny", "train"))
    val = read_dataset(dataset_split_dir(data_root, "daytime_sunny", "val"))
    assert len(train) == 6 and len(val) == 2
    for domain in ("daytime_foggy", "dusk_rainy", "night_rainy", "night_sunny"):
        test = read_dataset(dataset_split_dir(data_root, domain, "test"))
        assert len(test) == 2
        assert test[0].domain_tag == domain
    assert (data_root / "vocab.json").exists()
    assert (data_root / MANIFEST_NAME).exists()
    assert not (data_root / LOCK_NAME).exists()


def test_gen_data_reproducible(tmp_path, data_root):
    other = tmp_path / "again"
    assert main(["gen-data", "--out", str(other), "--seed", "1", *GEN_ARGS]) == 0
    assert hash_tree(other) == hash_tree(data_root)


def test_gen_data_seed_changes_content(tmp_path, data_root):
    other = tmp_path / "different"
    assert main(["gen-data", "--out", str(other), "--seed", "2", *GEN_ARGS]) == 0
    assert hash_tree(other) != hash_tree(data_root)


def test_missing_required_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["eval", "--data", "d", "--domain", "daytime_foggy", "--out", "r"])
    assert exc.value.code == 2


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_bad_checkpoint_is_runtime_error(tmp_path, data_root, capsys):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    code = main([
        "eval", "--ckpt", str(bad), "--data", str(data_root),
        "--domain", "daytime_foggy", "--out", str(tmp_path / "run"),
    ])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_locked_run_dir_is_runtime_error(tmp_path, capsys):
    out = tmp_path / "run"
    out.mkdir()
    (out / LOCK_NAME).write_text("999")
    code = main(["gen-data", "--out", str(out), "--seed", "0", *GEN_ARGS])
    assert code == 1
    assert "in use" in capsys.readouterr().err


def test_resolve_precedence():
    assert _resolve(5, {"iterations": 3}, "iterations", 100) == 5
    assert _resolve(None, {"iterations": 3}, "iterations", 100) == 3
    assert _resolve(None, {}, "iterations", 100) == 100


def test_fit_style_config_file_and_flag_override(tmp_path, data_root, ckpt_path):
    cfg_file = tmp_path / "cfg.json"
    cfg_file.write_text(json.dumps({"iterations": 3, "fit_lr": 0.05}))

    out_a = tmp_path / "a"
    code = main([
        "fit-style", "--ckpt", str(ckpt_path), "--data", str(data_root),
        "--domain", "daytime_foggy", "--out", str(out_a),
        "--config", str(cfg_file), "--bank-size", "2",
    ])
    assert code == 0
    bank = load_style_bank(out_a / "bank.json")
    assert bank.fit_config.iterations == 3
    assert bank.fit_config.lr == 0.05
    assert len(bank) == 2
    assert bank.domain_tag == "daytime_foggy"

    out_b = tmp_path / "b"
    code = main([
        "fit-style", "--ckpt", str(ckpt_path), "--data", str(data_root),
        "--domain", "daytime_foggy", "--out", str(out_b),
        "--config", str(cfg_file), "--bank-size", "2", "--iters", "5",
    ])
    assert code == 0
    assert load_style_bank(out_b / "bank.json").fit_config.iterations == 5


def test_fit_style_manifest_lists_outputs(tmp_path, data_root, ckpt_path):
    out = tmp_path / "run"
    main([
        "fit-style", "--ckpt", str(ckpt_path), "--data", str(data_root),
        "--domain", "daytime_foggy", "--out", str(out),
        "--iters", "0", "--bank-size", "2",
    ])
    manifest = json.loads((out / MANIFEST_NAME).read_text())
    assert manifest["command"] == "fit-style"
    assert "bank.json" in manifest["outputs"]
    assert str(ckpt_path) in manifest["inputs"]


def test_eval_writes_report(tmp_path, data_root, ckpt_path):
    out = tmp_path / "run"
    code = main([
        "eval", "--ckpt", str(ckpt_path), "--data", str(data_root),
        "--domain", "daytime_foggy", "--tag", "baseline", "--out", str(out),
    ])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    assert report["domain_tag"] == "daytime_foggy"
    assert report["tag"] == "baseline"
    assert 0.0 <= report["map50"] <= 1.0
    assert report["num_images"] == 2


def test_eval_source_defaults_to_val_split(tmp_path, data_root, ckpt_path):
    out = tmp_path / "run"
    code = main([
        "eval", "--ckpt", str(ckpt_path), "--data", str(data_root),
        "--domain", "daytime_sunny", "--out", str(out),
    ])
    assert code == 0
    manifest = json.loads((out / MANIFEST_NAME).read_text())
    assert manifest["config"]["split"] == "val"


def test_infer_outputs_json(tmp_path, data_root, ckpt_path, capsys):
    split = dataset_split_dir(data_root, "daytime_foggy", "test")
    image = sorted(split.glob("images/*.png"))[0]
    out = tmp_path / "run"
    code = main([
        "infer", "--ckpt", str(ckpt_path), "--image", str(image),
        "--domain", "daytime_foggy", "--score-thresh", "0.0",
        "--out", str(out),
    ])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert isinstance(payload, list) and payload
    det = payload[0]
    assert set(det) == {"box", "class", "class_id", "score"}
    assert det["class"] in list(DRIVING_CLASSES)
    saved = json.loads((out / "detections.json").read_text())
    assert saved == payload


def test_export_features_cli(tmp_path, data_root, ckpt_path):
    out = tmp_path / "run"
    code = main([
        "export-features", "--ckpt", str(ckpt_path), "--data", str(data_root),
        "--domain", "daytime_sunny", "--out", str(out),
    ])
    assert code == 0
    lines = (out / "features.csv").read_text().strip().splitlines()
    assert len(lines) == 1 + 6  # header + one row per source train image
    assert lines[0].startswith("image_id,domain_tag,styled,mu_0")


def test_sweep_bad_grid_is_runtime_error(tmp_path, data_root, ckpt_path, capsys):
    code = main([
        "sweep-iters", "--ckpt", str(ckpt_path), "--data", str(data_root),
        "--grid", "0,banana", "--out", str(tmp_path / "run"),
    ])
    assert code == 1
    assert "grid" in capsys.readouterr().err


def _fake_report(run_dir, tag, domain, map50):
    run_dir.mkdir(parents=True)
    (run_dir / "report.json").write_text(json.dumps({
        "domain_tag": domain, "map50": map50, "per_class_ap": {},
        "num_images": 2, "config_fingerprint": "x", "tag": tag,
    }))


def test_report_collates_in_canonical_order(tmp_path, capsys):
    runs = tmp_path / "runs"
    _fake_report(runs / "r1", "pgst", "daytime_foggy", 0.30)
    _fake_report(runs / "r2", "baseline", "daytime_foggy", 0.10)
    _fake_report(runs / "r3", "pgst", "night_sunny", 0.20)
    _fake_report(runs / "r4", "baseline", "night_sunny", 0.05)
    _fake_report(runs / "r5", "pgst", "daytime_sunny", 0.50)

    out = tmp_path / "summary"
    code = main(["report", str(runs), "--out", str(out)])
    assert code == 0
    text = capsys.readouterr().out
    lines = text.strip().splitlines()
    assert lines[0].split()[0] == "stage"
    assert "avg_target" in lines[0]
    # canonical row order regardless of scan order
    baseline_row = next(l for l in lines if l.startswith("Baseline"))
    pgst_row = next(l for l in lines if l.startswith("+ PGST"))
    assert lines.index(baseline_row) < lines.index(pgst_row)
    # avg over the two target domains only
    assert "0.2500" in pgst_row  # (0.30 + 0.20) / 2
    assert (out / "summary.csv").exists()
    assert (out / "summary.txt").read_text().startswith(lines[0])


def test_report_empty_dir_fails(tmp_path, capsys):
    runs = tmp_path / "none"
    runs.mkdir()
    assert main(["report", str(runs)]) == 1
    assert "no report.json" in capsys.readouterr().err


def test_report_row_labels_complete():
    assert [t for t, _ in REPORT_ROWS] == ["baseline", "src_aug", "pgst", "full"]
