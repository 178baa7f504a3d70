"""Command-line entry point tying the pipeline stages together.

Each subcommand reads an INI-style config whose sections mirror the library's
dataclasses, runs one stage, and writes its artifacts plus the resolved
config, seeds, and hashes into a fresh per-run directory so results can be
reproduced exactly.

Exit codes: 0 success, 2 usage error, 3 malformed config, 4 missing or
malformed input file (checkpoint, dataset, recording).
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, baselines, evaluation, mae_model, synth_bench, trainer
from .anomaly_head import (ThresholdConfig, calibrate_threshold, decisions,
                           write_decisions_csv)
from .errors import ConfigError, FormatError, ShmFomoError
from .io_formats import (config_hash, load_dataset, load_manifest,
                         load_recording_binary, load_recording_csv,
                         save_dataset, save_manifest, save_recording_binary)
from .mae_model import ModelConfig
from .signal_pipeline import (TAG_ANOMALY, TAG_NORMAL, PipelineConfig,
                              build_dataset, energy_keep, make_windows, normalize)
from .synth_bench import BridgeConfig, TrafficConfig
from .trainer import KDConfig, parse_train_plan

ENV_OUT = "SHM_FOMO_OUT"


def derive_seed(global_seed: int, module_name: str) -> int:
    """Module seed = stable hash of (global seed, module name)."""
    digest = hashlib.sha256(f"{global_seed}:{module_name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


# ---------------------------------------------------------------------------
# config handling


def load_config(path) -> configparser.ConfigParser:
    if not Path(path).is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return parser


def _coerce(raw: str, typ):
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ is tuple:
        return tuple(float(v) for v in raw.split(",") if v.strip())
    return typ(raw)


def build_from_section(cls, section: dict):
    """Instantiate a config dataclass from a string-valued mapping."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in section.items():
        if key not in fields:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        default = fields[key].default
        typ = type(default) if default is not dataclasses.MISSING else str
        if typ is int and "." in raw:
            typ = float
        try:
            kwargs[key] = _coerce(raw, typ)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot build {cls.__name__}: {exc}") from exc


def section(cfg: configparser.ConfigParser, name: str) -> dict:
    return dict(cfg[name]) if cfg.has_section(name) else {}


def paths_of(cfg: configparser.ConfigParser, *keys, required=True) -> list[Path]:
    sec = section(cfg, "paths")
    out = []
    for key in keys:
        if key not in sec:
            if required:
                raise ConfigError(f"[paths] section needs {key!r}")
            out.append(None)
            continue
        out.append(Path(sec[key]))
    return out


def make_run_dir(root: Path, command: str, cfg_hash: str) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{command}-{stamp}-{cfg_hash[:8]}"
    run_dir = base
    k = 1
    while run_dir.exists():
        run_dir = Path(f"{base}-{k}")
        k += 1
    run_dir.mkdir(parents=True)
    return run_dir


def write_run_info(run_dir: Path, command: str, cfg_path, seed: int) -> None:
    info = {
        "command": command,
        "config": str(cfg_path) if cfg_path else None,
        "config_sha": config_hash(_config_dict(cfg_path)) if cfg_path else None,
        "seed": seed,
        "version": __version__,
    }
    (run_dir / "run.json").write_text(json.dumps(info, indent=2) + "\n")
    if cfg_path:
        (run_dir / "config.ini").write_text(Path(cfg_path).read_text())


def _config_dict(cfg_path) -> dict:
    parser = load_config(cfg_path)
    return {s: dict(parser[s]) for s in parser.sections()}


def _global_seed(args, cfg) -> int:
    if args.seed is not None:
        return args.seed
    exp = section(cfg, "experiment")
    return int(exp.get("seed", 0))


def _load_recording(path: Path):
    if not path.is_file():
        raise FileNotFoundError(f"recording not found: {path}")
    if path.suffix == ".csv":
        return load_recording_csv(path)
    return load_recording_binary(path)


def _load_dataset_dir(path: Path):
    if not path.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {path}")
    windows = load_dataset(path)
    if not windows:
        raise FormatError(f"{path}: no dataset records found")
    return windows


def _load_checkpoint(path: Path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return trainer.load_checkpoint(path)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_gen(args, cfg, run_dir: Path) -> int:
    seed = derive_seed(_global_seed(args, cfg), "synth_bench")
    synth = section(cfg, "synth")
    kind = synth.pop("kind", "ambient")
    duration = float(synth.pop("duration_s", "600"))
    damaged = _coerce(synth.pop("damaged", "false"), bool)
    count = int(synth.pop("count", "1"))
    bridge = build_from_section(BridgeConfig, synth)
    entries = []
    for i in range(count):
        rec_seed = seed + i
        if kind == "ambient":
            rec = synth_bench.gen_ambient(bridge, duration, damaged=damaged,
                                          seed=rec_seed)
            state = "damaged" if damaged else "normal"
        elif kind == "traffic":
            traffic = build_from_section(TrafficConfig, section(cfg, "traffic"))
            rec = synth_bench.gen_traffic(bridge, traffic, duration, seed=rec_seed)
            state = "traffic"
        else:
            raise ConfigError(f"unknown synth kind {kind!r}")
        name = f"rec_{state}_{i:03d}.bin"
        save_recording_binary(rec, run_dir / name)
        entries.append({"file": name, "state": state, "seed": rec_seed,
                        "config_hash": config_hash(bridge)})
    save_manifest(run_dir / "manifest.json", entries)
    print(f"wrote {count} recording(s) + manifest to {run_dir}")
    return 0


_STATE_TO_TAG = {"normal": TAG_NORMAL, "damaged": TAG_ANOMALY, "traffic": None}


def cmd_preprocess(args, cfg, run_dir: Path) -> int:
    pipe = build_from_section(PipelineConfig, section(cfg, "pipeline"))
    (input_path,) = paths_of(cfg, "input")
    if input_path.is_dir():
        input_path = input_path / "manifest.json"
    if not input_path.is_file():
        raise FileNotFoundError(f"input not found: {input_path}")
    recs, tags = [], []
    if input_path.suffix == ".json":
        for entry in load_manifest(input_path):
            recs.append(_load_recording(input_path.parent / entry["file"]))
            tags.append(_STATE_TO_TAG.get(entry.get("state"), None))
    else:
        recs.append(_load_recording(input_path))
        tags.append(None)
    result = build_dataset(recs, pipe, tags=tags)
    out_dir = run_dir / "dataset"
    save_dataset(result.windows, out_dir)
    summary = {"windows": len(result.windows), "candidates": result.n_candidates,
               "dropped_by_energy_filter": result.n_dropped}
    (run_dir / "preprocess.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"kept {len(result.windows)}/{result.n_candidates} windows "
          f"({result.n_dropped} dropped); dataset at {out_dir}")
    return 0


def _train_plan(cfg, phase: str, seed: int):
    values = dict(section(cfg, "train"))
    values.setdefault("phase", phase)
    values.setdefault("seed", str(derive_seed(seed, "trainer")))
    defaults = {
        "pretrain": trainer.pretrain_plan,
        "finetune_ad": trainer.finetune_ad_plan,
        "finetune_tle": trainer.finetune_tle_plan,
        "finetune_kd": lambda **kw: trainer.TrainPlan(**{**dict(
            phase="finetune_kd", base_lr=2.5e-6, weight_decay=0.05,
            epochs=500, batch_size=8, warmup_epochs=0), **kw}),
    }[phase]
    plan = parse_train_plan(values)
    if not section(cfg, "train"):
        plan = defaults(seed=plan.seed)
    return plan


def cmd_pretrain(args, cfg, run_dir: Path) -> int:
    seed = _global_seed(args, cfg)
    model_cfg = build_from_section(ModelConfig, section(cfg, "model"))
    (data_dir,) = paths_of(cfg, "dataset")
    windows = _load_dataset_dir(data_dir)
    plan = _train_plan(cfg, "pretrain", seed)
    model = mae_model.build_model(model_cfg, seed=derive_seed(seed, "mae_model"))
    log = trainer.pretrain(model, windows, plan)
    _save_training_outputs(model, log, run_dir, plan, cfg_note="pretrain")
    return 0


def _save_training_outputs(model, log, run_dir: Path, plan, cfg_note: str) -> None:
    ckpt = run_dir / "checkpoint.ckpt"
    provenance = config_hash({"plan": plan, "note": cfg_note})
    trainer.save_checkpoint(model, ckpt, provenance=provenance)
    log.write_csv(run_dir / "trainlog.csv")
    print(f"{cfg_note}: final loss {log.final_loss:.6g}; checkpoint at {ckpt}")


def cmd_finetune_ad(args, cfg, run_dir: Path) -> int:
    seed = _global_seed(args, cfg)
    (data_dir, ckpt_in) = paths_of(cfg, "dataset", "checkpoint")
    model = _load_checkpoint(ckpt_in)
    windows = _load_dataset_dir(data_dir)
    plan = _train_plan(cfg, "finetune_ad", seed)
    log = trainer.finetune_ad(model, windows, plan)
    _save_training_outputs(model, log, run_dir, plan, cfg_note="finetune-ad")
    return 0


def cmd_finetune_tle(args, cfg, run_dir: Path) -> int:
    seed = _global_seed(args, cfg)
    (data_dir, ckpt_in) = paths_of(cfg, "dataset", "checkpoint")
    model = _load_checkpoint(ckpt_in)
    windows = _load_dataset_dir(data_dir)
    plan = _train_plan(cfg, "finetune_tle", seed)
    student = mae_model.attach_regression_head(model, seed=derive_seed(seed, "reg_head"))
    log = trainer.finetune_tle(student, windows, plan)
    _save_training_outputs(student, log, run_dir, plan, cfg_note="finetune-tle")
    return 0


def cmd_distill(args, cfg, run_dir: Path) -> int:
    seed = _global_seed(args, cfg)
    (data_dir, ckpt_in, teacher_path) = paths_of(cfg, "dataset", "checkpoint", "teacher")
    student_base = _load_checkpoint(ckpt_in)
    teacher = _load_checkpoint(teacher_path)
    windows = _load_dataset_dir(data_dir)
    plan = _train_plan(cfg, "finetune_kd", seed)
    kd = build_from_section(KDConfig, section(cfg, "kd"))
    student = mae_model.attach_regression_head(student_base,
                                               seed=derive_seed(seed, "reg_head"))
    log = trainer.finetune_kd(student, teacher, windows, plan, kd)
    _save_training_outputs(student, log, run_dir, plan, cfg_note="distill")
    return 0


def cmd_eval_ad(args, cfg, run_dir: Path) -> int:
    seed = _global_seed(args, cfg)
    (train_dir, calib_dir, test_dir, ckpt) = paths_of(
        cfg, "train_dataset", "calibration_dataset", "test_dataset", "checkpoint")
    model = _load_checkpoint(ckpt)
    thr_cfg = build_from_section(ThresholdConfig, section(cfg, "threshold"))
    eval_seed = derive_seed(seed, "eval_ad")
    train_err = mae_model.reconstruction_errors(model, _load_dataset_dir(train_dir),
                                                base_seed=eval_seed)
    calib_err = mae_model.reconstruction_errors(model, _load_dataset_dir(calib_dir),
                                                base_seed=eval_seed)
    test_windows = _load_dataset_dir(test_dir)
    test_err = mae_model.reconstruction_errors(model, test_windows, base_seed=eval_seed)
    truth = np.array([w.tag == TAG_ANOMALY for w in test_windows])
    threshold = calibrate_threshold(train_err, calib_err, thr_cfg)
    per_filter = evaluation.evaluate_anomaly_detection(test_err, truth, threshold)
    report = evaluation.MetricsReport(task_id="ad_synth", model_id="mae",
                                      n_samples=len(test_windows),
                                      ad_by_filter=per_filter)
    evaluation.write_report_csv(run_dir / "report.csv", [report])
    write_decisions_csv(run_dir / "decisions.csv",
                        decisions(test_err, threshold, 15), truth)
    print(f"threshold {threshold:.6g}")
    for L, m in sorted(per_filter.items()):
        print(f"L={L:<4d} accuracy {m.accuracy:.4f}  sensitivity {m.sensitivity:.4f}"
              f"  specificity {m.specificity:.4f}")
    return 0


def cmd_eval_tle(args, cfg, run_dir: Path) -> int:
    (test_dir, ckpt) = paths_of(cfg, "test_dataset", "checkpoint")
    model = _load_checkpoint(ckpt)
    windows = _load_dataset_dir(test_dir)
    y_true = np.array([w.target for w in windows], dtype=np.float64)
    y_pred = np.array([mae_model.forward_regress(model, w.image) for w in windows])
    report = evaluation.regression_metrics(y_pred, y_true)
    report.task_id, report.model_id = "tle_synth", "mae"
    evaluation.write_predictions_csv(run_dir / "predictions.csv", y_true, y_pred)
    evaluation.write_report_csv(run_dir / "report.csv", [report])
    print(evaluation.format_report_table([report]))
    return 0


def cmd_ablation(args, cfg, run_dir: Path) -> int:
    seed = _global_seed(args, cfg)
    (all_dir, task_dir, ft_dir, test_dir) = paths_of(
        cfg, "pretrain_all_dataset", "task_dataset", "finetune_dataset", "test_dataset")
    model_cfg = build_from_section(ModelConfig, section(cfg, "model"))
    pre_plan = _train_plan(cfg, "pretrain", seed)
    ft_values = dict(section(cfg, "finetune"))
    ft_values.setdefault("phase", "finetune_tle")
    ft_values.setdefault("seed", str(derive_seed(seed, "trainer")))
    ft_plan = parse_train_plan(ft_values)
    results = evaluation.ablation_protocol(
        model_cfg, _load_dataset_dir(all_dir), _load_dataset_dir(task_dir),
        _load_dataset_dir(ft_dir), _load_dataset_dir(test_dir),
        pre_plan, ft_plan, seed=derive_seed(seed, "ablation"))
    reports = []
    for regime, res in results.items():
        if res.error:
            print(f"{regime}: FAILED ({res.error})")
        else:
            reports.append(res.report)
            print(f"{regime}: MAE% {res.report.mae_pct:.2f}  R2 {res.report.r2:.3f}")
    evaluation.write_report_csv(run_dir / "report.csv", reports)
    return 0


def _feature_targets(manifest_path: Path, pipe: PipelineConfig):
    """Per-window statistical features of raw windows, with traffic targets."""
    from .signal_pipeline import VEHICLE_CLASS_TO_LABEL, compute_target

    k = VEHICLE_CLASS_TO_LABEL.get(pipe.vehicle_class, "any")
    feats, targets = [], []
    for entry in load_manifest(manifest_path):
        rec = _load_recording(manifest_path.parent / entry["file"])
        if rec.labels is None:
            raise ConfigError(f"{entry['file']} has no labels; cannot build targets")
        for w in make_windows(rec, pipe):
            if not energy_keep(w, pipe.energy_threshold):
                continue
            feats.append(baselines.extract_features(w.values))
            sl = rec.labels[w.start_index:w.start_index + len(w.values)]
            targets.append(compute_target(sl, k))
    return np.stack(feats), np.asarray(targets)


def _raw_normalized_windows(manifest_path: Path, pipe: PipelineConfig):
    """Time-window vectors (normalized, energy-filtered) grouped by state."""
    by_state: dict[str, list] = {}
    for entry in load_manifest(manifest_path):
        rec = _load_recording(manifest_path.parent / entry["file"])
        vecs = [normalize(w).values for w in make_windows(rec, pipe)
                if energy_keep(w, pipe.energy_threshold)]
        by_state.setdefault(entry["state"], []).extend(vecs)
    return {state: np.stack(vecs) for state, vecs in by_state.items() if vecs}


def cmd_baseline(args, cfg, run_dir: Path) -> int:
    mode = section(cfg, "baseline").get("mode", "pca-ad")
    pipe = build_from_section(PipelineConfig, section(cfg, "pipeline"))
    if mode == "pca-ad":
        (train_m, calib_m, test_m) = paths_of(
            cfg, "train_manifest", "calibration_manifest", "test_manifest")
        cf = int(section(cfg, "baseline").get("cf", "32"))
        train = _raw_normalized_windows(train_m, pipe)["normal"]
        calib = _raw_normalized_windows(calib_m, pipe)["normal"]
        test = _raw_normalized_windows(test_m, pipe)
        model = baselines.pca_fit(train, cf=cf)
        baselines.save_pca(model, run_dir / "pca.ckpt")
        thr_cfg = build_from_section(ThresholdConfig, section(cfg, "threshold"))
        threshold = calibrate_threshold(baselines.pca_errors(model, train),
                                        baselines.pca_errors(model, calib), thr_cfg)
        test_vecs = np.concatenate([test["normal"], test["damaged"]])
        truth = np.concatenate([np.zeros(len(test["normal"]), bool),
                                np.ones(len(test["damaged"]), bool)])
        errors = baselines.pca_errors(model, test_vecs)
        per_filter = evaluation.evaluate_anomaly_detection(errors, truth, threshold)
        for L, m in sorted(per_filter.items()):
            print(f"PCA L={L:<4d} accuracy {m.accuracy:.4f}  "
                  f"sensitivity {m.sensitivity:.4f}  specificity {m.specificity:.4f}")
        report = evaluation.MetricsReport(task_id="ad_synth", model_id=f"pca_cf{cf}",
                                          n_samples=len(test_vecs),
                                          ad_by_filter=per_filter)
        evaluation.write_report_csv(run_dir / "report.csv", [report])
        return 0
    if mode in ("knn-tle", "linreg-tle"):
        (train_m, test_m) = paths_of(cfg, "train_manifest", "test_manifest")
        x_train, y_train = _feature_targets(train_m, pipe)
        x_test, y_test = _feature_targets(test_m, pipe)
        if mode == "knn-tle":
            k = int(section(cfg, "baseline").get("k", "7"))
            y_pred = np.array([baselines.knn_predict(x_train, y_train, q, k=k)
                               for q in x_test])
            model_id = f"knn_k{k}"
        else:
            lin = baselines.linreg_fit(x_train, y_train)
            y_pred = baselines.linreg_predict(lin, x_test)
            model_id = "linreg"
        report = evaluation.regression_metrics(y_pred, y_test)
        report.task_id, report.model_id = "tle_synth", model_id
        evaluation.write_predictions_csv(run_dir / "predictions.csv", y_test, y_pred)
        evaluation.write_report_csv(run_dir / "report.csv", [report])
        print(evaluation.format_report_table([report]))
        return 0
    raise ConfigError(f"unknown baseline mode {mode!r}")


def cmd_describe(args, cfg, run_dir) -> int:
    path = Path(args.checkpoint)
    model = _load_checkpoint(path)
    meta = mae_model.load_meta(path)
    cfg_m = model.config
    print(f"checkpoint        {path}")
    print(f"embedding dims    encoder {cfg_m.e_dim}, decoder {cfg_m.d_dim}")
    print(f"blocks/heads      {cfg_m.n_blocks} blocks; {cfg_m.e_heads}/{cfg_m.d_heads} heads")
    print(f"patch/mask        {cfg_m.patch_size}px patches, mask ratio {cfg_m.mask_ratio}")
    print(f"decoder present   {model.has_decoder}")
    print(f"regression head   {model.has_reg_head}")
    print(f"trainable params  {model.n_params()}")
    print(f"file size         {path.stat().st_size} bytes "
          f"({path.stat().st_size / 1e6:.3f} MB)")
    print(f"provenance        {meta.get('provenance', '')!r}")
    return 0


COMMANDS = {
    "synth-gen": (cmd_synth_gen, True),
    "preprocess": (cmd_preprocess, True),
    "pretrain": (cmd_pretrain, True),
    "finetune-ad": (cmd_finetune_ad, True),
    "finetune-tle": (cmd_finetune_tle, True),
    "distill": (cmd_distill, True),
    "eval-ad": (cmd_eval_ad, True),
    "eval-tle": (cmd_eval_tle, True),
    "ablation": (cmd_ablation, True),
    "baseline": (cmd_baseline, True),
    "describe": (cmd_describe, False),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shm-fomo",
        description="Masked-autoencoder pipeline for vibration-based "
                    "structural health monitoring.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, needs_config) in COMMANDS.items():
        p = sub.add_parser(name)
        if name == "describe":
            p.add_argument("checkpoint", help="checkpoint file to inspect")
        if needs_config:
            p.add_argument("--config", required=True, help="INI config file")
        p.add_argument("--seed", type=int, default=None, help="global seed override")
        p.add_argument("--threads", type=int, default=None,
                       help="cap BLAS worker threads (1 = bitwise deterministic)")
        p.add_argument("--out", default=None,
                       help=f"output root (default ${ENV_OUT} or ./runs)")
    return parser


def run(argv) -> int:
    args = build_parser().parse_args(argv)
    handler, needs_config = COMMANDS[args.command]
    cfg = load_config(args.config) if needs_config else configparser.ConfigParser()

    out_root = Path(args.out or os.environ.get(ENV_OUT, "runs"))
    if needs_config:
        run_dir = make_run_dir(out_root, args.command,
                               config_hash(_config_dict(args.config)))
        write_run_info(run_dir, args.command, args.config, _global_seed(args, cfg))
    else:
        run_dir = None

    if args.threads is not None:
        try:
            from threadpoolctl import threadpool_limits
        except ImportError:
            threadpool_limits = None
        if threadpool_limits is not None:
            with threadpool_limits(limits=args.threads):
                return handler(args, cfg, run_dir)
    return handler(args, cfg, run_dir)


def main() -> None:
    try:
        code = run(sys.argv[1:])
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        code = 3
    except (FileNotFoundError, FormatError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        code = 4
    except ShmFomoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        code = 1
    sys.exit(code)


if __name__ == "__main__":
    main()
