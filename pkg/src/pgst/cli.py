"""Command-line entry point: experiment lifecycle and ablation drivers.

Every mutating subcommand takes an ``--out`` run directory, locks it for
the duration of the run, and finishes by writing a manifest with content
hashes of all inputs and outputs.  Config values resolve as flags > config
file (``--config``) > defaults.  Exit codes: 0 success, 1 runtime failure,
2 usage error.
"""

import argparse
import copy
import csv
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .datagen import (
    CANVAS_DEFAULT,
    dataset_split_dir,
    make_benchmark,
    read_dataset,
    resize_longest_side,
    DetectionSample,
)
from .determinism import configure_threads, deterministic_mode
from .errors import ConfigError, ParseError, PGSTError
from .evalkit import (
    SCORE_THRESH,
    evaluate,
    export_features,
    sweep_iterations,
    write_sweep_csv,
)
from .groundnet import (
    GroundingModel,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)
from .manifest import finalize_run, run_lock
from .prompts import (
    ALL_DOMAINS,
    DRIVING_CLASSES,
    DRIVING_ENRICHMENT,
    SOURCE_DOMAIN,
    Prompt,
    Vocabulary,
    benchmark_vocabulary,
    build_domain_prompt,
    build_general_prompt,
    build_unrelated_prompt,
    domain_prompt,
    load_prompt,
    source_prompt,
)
from .styleengine import (
    StyleFitConfig,
    build_style_bank,
    build_style_banks,
    load_style_bank,
    save_style_bank,
)
from .trainer import (
    TrainConfig,
    finetune_with_pgst,
    infer,
    train_source_aug,
)

logger = logging.getLogger(__name__)

LAYER_SETS = ((1,), (1, 5), (1, 3, 5))
PROMPT_KIND_ORDER = ("general", "domain_specific", "unrelated_A", "unrelated_B")
REPORT_ROWS = (
    ("baseline", "Baseline"),
    ("src_aug", "+ Src. Aug."),
    ("pgst", "+ PGST"),
    ("full", "Full (Src. Aug. + PGST)"),
)


def _file_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return obj


def _resolve(flag_value, file_cfg: dict, key: str, default):
    if flag_value is not None:
        return flag_value
    if key in file_cfg:
        return type(default)(file_cfg[key]) if default is not None else file_cfg[key]
    return default


def _load_vocab(data_root, classes) -> Vocabulary:
    path = Path(data_root) / "vocab.json"
    if path.exists():
        try:
            with open(path, "r", encoding="utf-8") as fh:
                return Vocabulary.from_json(json.load(fh))
        except (OSError, json.JSONDecodeError) as exc:
            raise ParseError(f"cannot read vocabulary {path}: {exc}") from exc
    return benchmark_vocabulary(classes)


def _split_dataset(data_root, domain: str, split: str):
    ds = read_dataset(dataset_split_dir(data_root, domain, split))
    if len(ds) == 0:
        raise ConfigError(f"no images under {data_root}/{domain}/{split}")
    return ds


def _prompt_for(args, classes, default_domain: str | None) -> Prompt:
    if getattr(args, "prompt_file", None):
        return load_prompt(args.prompt_file)
    time_tok = getattr(args, "time", None)
    weather_tok = getattr(args, "weather", None)
    if time_tok or weather_tok:
        if not (time_tok and weather_tok):
            raise ConfigError("--time and --weather must be given together")
        enrichment = (
            DRIVING_ENRICHMENT if tuple(classes) == tuple(DRIVING_CLASSES) else None
        )
        return build_domain_prompt(
            classes,
            time_tok,
            weather_tok,
            enrichment=enrichment,
            domain_tag=getattr(args, "domain", "") or "",
        )
    if default_domain is None:
        raise ConfigError("need --prompt-file, --time/--weather, or --domain")
    return domain_prompt(default_domain, classes)


def _fit_cfg(args, file_cfg: dict, seed: int) -> StyleFitConfig:
    cfg = StyleFitConfig(
        iterations=_resolve(args.iters, file_cfg, "iterations", 100),
        lr=_resolve(args.fit_lr, file_cfg, "fit_lr", 1.0),
        momentum=_resolve(args.momentum, file_cfg, "momentum", 0.9),
        weight_decay=_resolve(args.fit_weight_decay, file_cfg, "fit_weight_decay", 1e-4),
        hook_layer=_resolve(args.hook_layer, file_cfg, "hook_layer", 1),
        seed=seed,
    )
    cfg.validate()
    return cfg


def _train_cfg(args, file_cfg: dict, seed: int, tuning_mode="full", hook_layers=(1,)) -> TrainConfig:
    cfg = TrainConfig(
        lr=_resolve(args.lr, file_cfg, "lr", 1e-4),
        weight_decay=_resolve(args.weight_decay, file_cfg, "weight_decay", 0.05),
        epochs=_resolve(args.epochs, file_cfg, "epochs", 12),
        batch_size=_resolve(args.batch_size, file_cfg, "batch_size", 8),
        tuning_mode=tuning_mode,
        hook_layers=tuple(hook_layers),
        seed=seed,
    )
    cfg.validate()
    return cfg


def _bank_indices(bank_size, dataset) -> list[int] | None:
    if bank_size is None or bank_size >= len(dataset):
        return None
    if bank_size < 1:
        raise ConfigError("--bank-size must be >= 1")
    return list(range(bank_size))


def _write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------- commands


def _cmd_gen_data(args) -> int:
    t0 = time.monotonic()
    out = Path(args.out)
    with run_lock(out):
        make_benchmark(
            out,
            seed=args.seed,
            n_train=args.n_train,
            n_val=args.n_val,
            n_test=args.n_test,
            canvas=args.canvas,
        )
        _write_json(out / "vocab.json", benchmark_vocabulary(DRIVING_CLASSES).to_json())
        finalize_run(
            out,
            "gen-data",
            {
                "seed": args.seed,
                "n_train": args.n_train,
                "n_val": args.n_val,
                "n_test": args.n_test,
                "canvas": args.canvas,
            },
            args.seed,
            [],
            time.monotonic() - t0,
        )
    return 0


def _cmd_train_source(args) -> int:
    t0 = time.monotonic()
    out = Path(args.out)
    file_cfg = _file_config(args.config)
    seed = _resolve(args.seed, file_cfg, "seed", 0)
    with run_lock(out):
        train_ds = _split_dataset(args.data, SOURCE_DOMAIN, "train")
        val_ds = _split_dataset(args.data, SOURCE_DOMAIN, "val")
        vocab = _load_vocab(args.data, train_ds.classes)
        model = GroundingModel(ModelConfig(), vocab, seed=seed)
        cfg = _train_cfg(args, file_cfg, seed)
        prompt = source_prompt(train_ds.classes)
        ckpt = train_source_aug(
            model, train_ds, val_ds, prompt, cfg,
            out_dir=out, keep_all=args.keep_all,
        )
        save_checkpoint(
            out / "checkpoint.pt",
            ckpt.model,
            meta={
                "stage": "source_aug",
                "epoch": ckpt.epoch,
                "val_map50": ckpt.val_map50,
                "history": ckpt.history,
                "aborted": ckpt.aborted,
                "train_config": cfg.to_json(),
            },
        )
        _write_json(
            out / "train_summary.json",
            {
                "stage": "source_aug",
                "best_epoch": ckpt.epoch,
                "val_map50": ckpt.val_map50,
                "history": ckpt.history,
                "aborted": ckpt.aborted,
            },
        )
        inputs = [
            dataset_split_dir(args.data, SOURCE_DOMAIN, "train") / "annotations.json",
            dataset_split_dir(args.data, SOURCE_DOMAIN, "val") / "annotations.json",
            Path(args.data) / "vocab.json",
        ]
        if args.config:
            inputs.append(args.config)
        finalize_run(
            out, "train-source", cfg.to_json(), seed, inputs, time.monotonic() - t0
        )
    print(f"best epoch {ckpt.epoch}: source-val map50 {ckpt.val_map50:.4f}")
    return 0


def _cmd_fit_style(args) -> int:
    t0 = time.monotonic()
    out = Path(args.out)
    file_cfg = _file_config(args.config)
    seed = _resolve(args.seed, file_cfg, "seed", 0)
    with run_lock(out):
        model, _ = load_checkpoint(args.ckpt)
        ds = _split_dataset(args.data, SOURCE_DOMAIN, args.split)
        prompt_t = _prompt_for(args, ds.classes, args.domain)
        cfg = _fit_cfg(args, file_cfg, seed)
        bank = build_style_bank(
            model, ds, prompt_t, cfg, indices=_bank_indices(args.bank_size, ds)
        )
        save_style_bank(bank, out / "bank.json")
        inputs = [
            args.ckpt,
            dataset_split_dir(args.data, SOURCE_DOMAIN, args.split)
            / "annotations.json",
        ]
        if args.config:
            inputs.append(args.config)
        if args.prompt_file:
            inputs.append(args.prompt_file)
        finalize_run(
            out,
            "fit-style",
            {**cfg.to_json(), "domain": prompt_t.domain_tag, "bank_size": len(bank)},
            seed,
            inputs,
            time.monotonic() - t0,
        )
    print(f"fitted {len(bank)} styles at layer {bank.hook_layer}")
    return 0


def _cmd_finetune(args) -> int:
    t0 = time.monotonic()
    out = Path(args.out)
    file_cfg = _file_config(args.config)
    seed = _resolve(args.seed, file_cfg, "seed", 0)
    with run_lock(out):
        model, _ = load_checkpoint(args.ckpt)
        banks = [load_style_bank(p) for p in args.bank]
        hook_layers = tuple(b.hook_layer for b in banks)
        train_ds = _split_dataset(args.data, SOURCE_DOMAIN, "train")
        val_ds = _split_dataset(args.data, SOURCE_DOMAIN, "val")
        prompt_t = _prompt_for(args, train_ds.classes, args.domain)
        mode = "prompt_only" if args.mode == "prompt" else "full"
        cfg = _train_cfg(args, file_cfg, seed, tuning_mode=mode, hook_layers=hook_layers)
        ckpt = finetune_with_pgst(
            model, train_ds, val_ds, prompt_t, banks, cfg,
            out_dir=out, keep_all=args.keep_all,
        )
        save_checkpoint(
            out / "checkpoint.pt",
            ckpt.model,
            meta={
                "stage": "pgst_finetune",
                "domain": prompt_t.domain_tag,
                "epoch": ckpt.epoch,
                "val_map50": ckpt.val_map50,
                "history": ckpt.history,
                "aborted": ckpt.aborted,
                "train_config": cfg.to_json(),
            },
        )
        _write_json(
            out / "train_summary.json",
            {
                "stage": "pgst_finetune",
                "domain": prompt_t.domain_tag,
                "best_epoch": ckpt.epoch,
                "val_map50": ckpt.val_map50,
                "history": ckpt.history,
                "aborted": ckpt.aborted,
            },
        )
        inputs = [
            args.ckpt,
            *args.bank,
            dataset_split_dir(args.data, SOURCE_DOMAIN, "train") / "annotations.json",
            dataset_split_dir(args.data, SOURCE_DOMAIN, "val") / "annotations.json",
        ]
        if args.config:
            inputs.append(args.config)
        if args.prompt_file:
            inputs.append(args.prompt_file)
        finalize_run(
            out,
            "finetune",
            {**cfg.to_json(), "domain": prompt_t.domain_tag},
            seed,
            inputs,
            time.monotonic() - t0,
        )
    print(f"best epoch {ckpt.epoch}: source-val map50 {ckpt.val_map50:.4f}")
    return 0


def _cmd_eval(args) -> int:
    t0 = time.monotonic()
    out = Path(args.out)
    split = args.split or ("val" if args.domain == SOURCE_DOMAIN else "test")
    with run_lock(out):
        model, _ = load_checkpoint(args.ckpt)
        ds = _split_dataset(args.data, args.domain, split)
        prompt = _prompt_for(args, ds.classes, args.domain)
        report = evaluate(
            model, ds, prompt,
            score_thresh=args.score_thresh if args.score_thresh is not None else SCORE_THRESH,
            tag=args.tag,
        )
        _write_json(out / "report.json", report.to_json())
        inputs = [
            args.ckpt,
            dataset_split_dir(args.data, args.domain, split) / "annotations.json",
        ]
        if args.prompt_file:
            inputs.append(args.prompt_file)
        finalize_run(
            out,
            "eval",
            {
                "domain": args.domain,
                "split": split,
                "tag": args.tag,
                "score_thresh": args.score_thresh
                if args.score_thresh is not None
                else SCORE_THRESH,
            },
            None,
            inputs,
            time.monotonic() - t0,
        )
    print(f"{args.domain}/{split}: map50 {report.map50:.4f}")
    return 0


def _cmd_sweep_iters(args) -> int:
    t0 = time.monotonic()
    out = Path(args.out)
    file_cfg = _file_config(args.config)
    seed = _resolve(args.seed, file_cfg, "seed", 0)
    try:
        grid = [int(v) for v in args.grid.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad --grid {args.grid!r}: {exc}") from exc
    with run_lock(out):
        model, _ = load_checkpoint(args.ckpt)
        src_train = _split_dataset(args.data, SOURCE_DOMAIN, "train")
        src_val = _split_dataset(args.data, SOURCE_DOMAIN, "val")
        tgt_test = _split_dataset(args.data, args.domain, "test")
        prompt_t = _prompt_for(args, src_train.classes, args.domain)
        fit_cfg = _fit_cfg(args, file_cfg, seed)
        train_cfg = _train_cfg(args, file_cfg, seed)
        rows = sweep_iterations(
            model, src_train, src_val, tgt_test, prompt_t, grid,
            fit_cfg, train_cfg,
            bank_indices=_bank_indices(args.bank_size, src_train),
            csv_path=out / "sweep.csv",
        )
        inputs = [
            args.ckpt,
            dataset_split_dir(args.data, SOURCE_DOMAIN, "train") / "annotations.json",
            dataset_split_dir(args.data, args.domain, "test") / "annotations.json",
        ]
        finalize_run(
            out,
            "sweep-iters",
            {**fit_cfg.to_json(), **train_cfg.to_json(), "grid": grid,
             "domain": args.domain},
            seed,
            inputs,
            time.monotonic() - t0,
        )
    for r in rows:
        print(f"iters {r['iters']:>4}: map50 {r['map50']:.4f}")
    return 0


def ablate_layers(
    base_model: GroundingModel,
    src_train,
    src_val,
    tgt_test,
    prompt_t: Prompt,
    fit_cfg: StyleFitConfig,
    train_cfg: TrainConfig,
    bank_indices=None,
    csv_path=None,
    layer_sets=LAYER_SETS,
) -> list[dict]:
    """Fit + finetune + eval once per hook-layer set, shared seeds."""
    rows = []
    for layers in layer_sets:
        banks = build_style_banks(
            base_model, src_train, prompt_t,
            replace(fit_cfg, hook_layer=layers[0]),
            hook_layers=layers, indices=bank_indices,
        )
        model_i = copy.deepcopy(base_model)
        cfg_i = replace(train_cfg, hook_layers=tuple(layers))
        ckpt = finetune_with_pgst(
            model_i, src_train, src_val, prompt_t,
            [banks[l] for l in layers], cfg_i,
        )
        report = evaluate(ckpt.model, tgt_test, prompt_t)
        rows.append(
            {
                "layers": "+".join(str(l) for l in layers),
                "map50": report.map50,
                "domain": report.domain_tag,
                "seed": train_cfg.seed,
            }
        )
        logger.info("layers %s -> map50 %.4f", rows[-1]["layers"], report.map50)
    if csv_path is not None:
        _write_csv(
            csv_path,
            ("layers", "map50", "domain", "seed"),
            [
                (r["layers"], f"{r['map50']:.6f}", r["domain"], r["seed"])
                for r in rows
            ],
        )
    return rows


def ablate_prompts(
    base_model: GroundingModel,
    src_train,
    src_val,
    tgt_test,
    domain_tag: str,
    fit_cfg: StyleFitConfig,
    train_cfg: TrainConfig,
    bank_indices=None,
    csv_path=None,
) -> list[dict]:
    """One full PGST cycle per prompt kind, each evaluated with its prompt."""
    classes = src_train.classes
    kinds = {
        "general": build_general_prompt(classes),
        "domain_specific": domain_prompt(domain_tag, classes),
        "unrelated_A": build_unrelated_prompt(classes, "A"),
        "unrelated_B": build_unrelated_prompt(classes, "B"),
    }
    rows = []
    for kind in PROMPT_KIND_ORDER:
        prompt = kinds[kind]
        bank = build_style_bank(
            base_model, src_train, prompt, fit_cfg, indices=bank_indices
        )
        model_i = copy.deepcopy(base_model)
        ckpt = finetune_with_pgst(
            model_i, src_train, src_val, prompt, [bank], train_cfg
        )
        report = evaluate(ckpt.model, tgt_test, prompt)
        rows.append(
            {
                "kind": kind,
                "map50": report.map50,
                "domain": tgt_test[0].domain_tag,
                "seed": train_cfg.seed,
            }
        )
        logger.info("prompt %s -> map50 %.4f", kind, report.map50)
    if csv_path is not None:
        _write_csv(
            csv_path,
            ("kind", "map50", "domain", "seed"),
            [(r["kind"], f"{r['map50']:.6f}", r["domain"], r["seed"]) for r in rows],
        )
    return rows


def _cmd_ablate_layers(args) -> int:
    t0 = time.monotonic()
    out = Path(args.out)
    file_cfg = _file_config(args.config)
    seed = _resolve(args.seed, file_cfg, "seed", 0)
    with run_lock(out):
        model, _ = load_checkpoint(args.ckpt)
        src_train = _split_dataset(args.data, SOURCE_DOMAIN, "train")
        src_val = _split_dataset(args.data, SOURCE_DOMAIN, "val")
        tgt_test = _split_dataset(args.data, args.domain, "test")
        prompt_t = _prompt_for(args, src_train.classes, args.domain)
        fit_cfg = _fit_cfg(args, file_cfg, seed)
        train_cfg = _train_cfg(args, file_cfg, seed)
        rows = ablate_layers(
            model, src_train, src_val, tgt_test, prompt_t, fit_cfg, train_cfg,
            bank_indices=_bank_indices(args.bank_size, src_train),
            csv_path=out / "layers.csv",
        )
        finalize_run(
            out,
            "ablate-layers",
            {**fit_cfg.to_json(), **train_cfg.to_json(), "domain": args.domain},
            seed,
            [args.ckpt],
            time.monotonic() - t0,
        )
    for r in rows:
        print(f"layers {r['layers']:>6}: map50 {r['map50']:.4f}")
    return 0


def _cmd_ablate_prompts(args) -> int:
    t0 = time.monotonic()
    out = Path(args.out)
    file_cfg = _file_config(args.config)
    seed = _resolve(args.seed, file_cfg, "seed", 0)
    with run_lock(out):
        model, _ = load_checkpoint(args.ckpt)
        src_train = _split_dataset(args.data, SOURCE_DOMAIN, "train")
        src_val = _split_dataset(args.data, SOURCE_DOMAIN, "val")
        tgt_test = _split_dataset(args.data, args.domain, "test")
        fit_cfg = _fit_cfg(args, file_cfg, seed)
        train_cfg = _train_cfg(args, file_cfg, seed)
        rows = ablate_prompts(
            model, src_train, src_val, tgt_test, args.domain, fit_cfg, train_cfg,
            bank_indices=_bank_indices(args.bank_size, src_train),
            csv_path=out / "prompts.csv",
        )
        finalize_run(
            out,
            "ablate-prompts",
            {**fit_cfg.to_json(), **train_cfg.to_json(), "domain": args.domain},
            seed,
            [args.ckpt],
            time.monotonic() - t0,
        )
    for r in rows:
        print(f"prompt {r['kind']:>16}: map50 {r['map50']:.4f}")
    return 0


def _cmd_infer(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    try:
        with Image.open(args.image) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise ParseError(f"cannot read image {args.image}: {exc}") from exc
    sample = DetectionSample(
        image=torch.from_numpy(arr.transpose(2, 0, 1).copy()),
        boxes=torch.zeros((0, 4)),
        labels=torch.zeros((0,), dtype=torch.int64),
        id=Path(args.image).stem,
        domain_tag=args.domain or "",
    )
    sample = resize_longest_side(sample)
    prompt = _prompt_for(args, DRIVING_CLASSES, args.domain)
    detections = infer(
        model, sample.image, prompt,
        score_thresh=args.score_thresh if args.score_thresh is not None else SCORE_THRESH,
    )
    payload = [
        {
            "box": [round(v, 2) for v in d.box],
            "class": prompt.phrases[d.class_id].split(",")[1].strip()
            if d.class_id < len(prompt)
            else str(d.class_id),
            "class_id": d.class_id,
            "score": round(d.score, 4),
        }
        for d in detections
    ]
    print(json.dumps(payload, indent=2))
    if args.out:
        out = Path(args.out)
        with run_lock(out):
            _write_json(out / "detections.json", payload)
            finalize_run(
                out, "infer", {"image": str(args.image)}, None,
                [args.ckpt, args.image], None,
            )
    return 0


def _cmd_export_features(args) -> int:
    t0 = time.monotonic()
    out = Path(args.out)
    with run_lock(out):
        model, _ = load_checkpoint(args.ckpt)
        split = args.split or ("train" if args.domain == SOURCE_DOMAIN else "test")
        ds = _split_dataset(args.data, args.domain, split)
        bank = load_style_bank(args.bank) if args.bank else None
        export_features(
            model, ds, args.hook_layer, bank=bank, csv_path=out / "features.csv"
        )
        inputs = [
            args.ckpt,
            dataset_split_dir(args.data, args.domain, split) / "annotations.json",
        ]
        if args.bank:
            inputs.append(args.bank)
        finalize_run(
            out,
            "export-features",
            {"domain": args.domain, "split": split, "hook_layer": args.hook_layer},
            None,
            inputs,
            time.monotonic() - t0,
        )
    print(f"wrote {out / 'features.csv'}")
    return 0


def _collect_reports(runs_dir) -> list[dict]:
    reports = []
    for path in sorted(Path(runs_dir).rglob("report.json")):
        try:
            with open(path, "r", encoding="utf-8") as fh:
                obj = json.load(fh)
            reports.append(obj)
        except (OSError, json.JSONDecodeError, KeyError) as exc:
            logger.warning("skipping unreadable report %s: %s", path, exc)
    return reports


def _cmd_report(args) -> int:
    reports = _collect_reports(args.runs)
    if not reports:
        print(f"no report.json files under {args.runs}", file=sys.stderr)
        return 1
    cells: dict[tuple[str, str], list[float]] = {}
    domains_seen = []
    tags_seen = []
    for rep in reports:
        tag = rep.get("tag") or "untagged"
        domain = rep.get("domain_tag", "?")
        cells.setdefault((tag, domain), []).append(float(rep["map50"]))
        if domain not in domains_seen:
            domains_seen.append(domain)
        if tag not in tags_seen:
            tags_seen.append(tag)

    domain_order = [d for d in ALL_DOMAINS if d in domains_seen] + [
        d for d in domains_seen if d not in ALL_DOMAINS
    ]
    target_order = [d for d in domain_order if d != SOURCE_DOMAIN]
    known = [t for t, _ in REPORT_ROWS]
    tag_order = [t for t in known if t in tags_seen] + [
        t for t in tags_seen if t not in known
    ]
    labels = dict(REPORT_ROWS)

    header = ["stage", *domain_order, "avg_target"]
    table_rows = []
    for tag in tag_order:
        row = [labels.get(tag, tag)]
        target_vals = []
        for d in domain_order:
            vals = cells.get((tag, d))
            row.append(f"{sum(vals) / len(vals):.4f}" if vals else "-")
            if vals and d != SOURCE_DOMAIN:
                target_vals.append(sum(vals) / len(vals))
        row.append(
            f"{sum(target_vals) / len(target_vals):.4f}" if target_vals else "-"
        )
        table_rows.append(row)

    widths = [
        max(len(str(r[i])) for r in [header] + table_rows)
        for i in range(len(header))
    ]
    lines = [
        "  ".join(str(v).ljust(w) for v, w in zip(header, widths)),
        "  ".join("-" * w for w in widths),
    ]
    lines += [
        "  ".join(str(v).ljust(w) for v, w in zip(row, widths))
        for row in table_rows
    ]
    text = "\n".join(lines)
    print(text)

    if args.out:
        out = Path(args.out)
        with run_lock(out):
            _write_csv(out / "summary.csv", header, table_rows)
            (out / "summary.txt").write_text(text + "\n", encoding="utf-8")
            finalize_run(out, "report", {"runs": str(args.runs)}, None, [], None)
    return 0


# ---------------------------------------------------------------- parser


def _add_prompt_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--prompt-file", help="JSON prompt file (overrides --domain)")
    p.add_argument("--time", help="time token for a custom prompt")
    p.add_argument("--weather", help="weather token for a custom prompt")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--iters", type=int, default=None, help="style fit iterations")
    p.add_argument("--fit-lr", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--fit-weight-decay", type=float, default=None)
    p.add_argument("--hook-layer", type=int, default=None)
    p.add_argument("--bank-size", type=int, default=None,
                   help="fit styles for only the first N source images")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pgst",
        description="Prompt-guided style transfer for single-domain "
        "generalized detection, desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-val", type=int, default=128)
    p.add_argument("--n-test", type=int, default=128)
    p.add_argument("--canvas", type=int, default=CANVAS_DEFAULT)
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train-source", help="train the source-augmented model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--keep-all", action="store_true")
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train_source)

    p = sub.add_parser("fit-style", help="fit a target style bank")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    _add_fit_flags(p)
    _add_prompt_flags(p)
    p.set_defaults(func=_cmd_fit_style)

    p = sub.add_parser("finetune", help="fine-tune with style injection")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--bank", action="append", required=True,
                   help="style bank JSON (repeat for multiple hook layers)")
    p.add_argument("--mode", choices=("full", "prompt"), default="full")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--keep-all", action="store_true")
    _add_train_flags(p)
    _add_prompt_flags(p)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one domain")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--tag", default="", help="stage label for report collation")
    p.add_argument("--score-thresh", type=float, default=None)
    p.add_argument("--out", required=True)
    _add_prompt_flags(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep-iters", help="style-fit iteration sweep")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", default="daytime_foggy")
    p.add_argument("--grid", default="0,25,100")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    _add_fit_flags(p)
    _add_train_flags(p)
    _add_prompt_flags(p)
    p.set_defaults(func=_cmd_sweep_iters)

    p = sub.add_parser("ablate-layers", help="hook-layer ablation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", default="daytime_foggy")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    _add_fit_flags(p)
    _add_train_flags(p)
    _add_prompt_flags(p)
    p.set_defaults(func=_cmd_ablate_layers)

    p = sub.add_parser("ablate-prompts", help="prompt-template ablation")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", default="daytime_foggy")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None)
    _add_fit_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_ablate_prompts)

    p = sub.add_parser("infer", help="run detection on one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--domain", default=None)
    p.add_argument("--score-thresh", type=float, default=None)
    p.add_argument("--out", default=None)
    _add_prompt_flags(p)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("export-features", help="dump per-image channel stats")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--hook-layer", type=int, default=1)
    p.add_argument("--bank", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_features)

    p = sub.add_parser("report", help="collate eval reports into a summary")
    p.add_argument("runs", help="directory containing run subdirectories")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    configure_threads()
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except PGSTError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
