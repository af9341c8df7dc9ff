"""Command-line entry point: ``anysat synth-data | pretrain | adapt | eval``.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric abort, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint, tree_hash
from .config import ConfigError, RunConfig, load_config, parse_config
from .data import DatasetSpecError, SyntheticConfigError, TileDataset, TileLabels, TileSample, store_tile, validate_dataset_spec
from .data.synth import synth_generate
from .data.tilefile import TileFormatError
from .heads import AdaptResult, HeadConfigError, HeadTask, adapt, evaluate
from .model import BACKBONE, AnySat
from .nn import ParamTree
from .ssl import NonFiniteLossError, init_state, pretrain, restore_state, state_arrays

log = logging.getLogger("anysat")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ResumeWarning(UserWarning):
    pass


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return None if not math.isfinite(float(x)) else float(x)
    return x


def _backbone_arrays(arrays: dict[str, np.ndarray], prefix: str = "") -> dict[str, np.ndarray]:
    out = {}
    for k, v in arrays.items():
        if prefix and not k.startswith(prefix):
            continue
        name = k[len(prefix):]
        if name.split("/", 1)[0] in BACKBONE:
            out[name] = v
    return out


def _model_from(cfg: RunConfig, datasets=()) -> AnySat:
    registry = cfg.registry()
    for d in datasets:
        for m, spec in d.info.modalities.items():
            if m in registry and registry[m] != spec:
                raise ConfigError(f"{d.name}: modality {m!r} differs from the config's definition")
            registry.setdefault(m, spec)
    return AnySat(registry, cfg.network_config())


# ---------------------------------------------------------------- synth-data


def cmd_synth_data(args) -> int:
    cfg = load_config(args.config)
    registry = cfg.registry()
    names = [args.dataset] if args.dataset else [d.name for d in cfg.data.datasets]
    out = Path(args.out)
    summaries = []
    for name in names:
        info = validate_dataset_spec(cfg.dataset_spec(name), registry)
        target = out if len(names) == 1 else out / name
        manifest = synth_generate(info, cfg.synthetic(name), target, cfg.content_hash())
        summaries.append(
            {
                "dataset": name,
                "dir": str(target),
                "tiles": len(manifest["tiles"]),
                "modalities": [m["name"] for m in manifest["modalities"]],
                "num_classes": manifest["num_classes"],
                "config_hash": manifest["config_hash"],
            }
        )
    print(json.dumps(summaries if len(summaries) > 1 else summaries[0], indent=2))
    return EXIT_OK


# ---------------------------------------------------------------- pretrain


def _apply_ablation(cfg: RunConfig, ablation: str | None) -> RunConfig:
    if ablation is None:
        return cfg
    key = {"random-drop": "random_drop", "no-contrastive": "no_contrastive"}[ablation]
    return cfg.model_copy(update={"ssl": cfg.ssl.model_copy(update={key: True})})


def _param_counts(tree: ParamTree) -> dict[str, int]:
    counts: dict[str, int] = {}
    for k, v in tree.items():
        top = k.split("/", 1)[0]
        counts[top] = counts.get(top, 0) + int(v.data.size)
    return counts


def cmd_pretrain(args) -> int:
    datasets = [TileDataset(d) for d in args.data]
    if args.resume:
        arrays, meta = load_checkpoint(args.resume)
        if meta.get("kind") != "pretrain":
            raise ConfigError(f"{args.resume} is not a pretraining checkpoint")
    if args.config:
        cfg = load_config(args.config)
    elif args.resume:
        cfg = parse_config(meta["config"])
    else:
        raise ConfigError("pretrain needs --config (or --resume with a checkpoint that embeds one)")
    cfg = _apply_ablation(cfg, args.ablation)
    chash = cfg.content_hash()
    pcfg = cfg.pretrain_config()
    model = _model_from(cfg, datasets)

    if args.resume:
        if meta.get("config_hash") != chash:
            msg = f"config hash {chash[:12]} differs from the checkpoint's {str(meta.get('config_hash'))[:12]}"
            warnings.warn(msg, ResumeWarning, stacklevel=1)
            print(f"warning: {msg}", file=sys.stderr)
        state = restore_state(model, pcfg, arrays, meta["state"], meta["state"]["step"] + args.steps)
    else:
        state = init_state(model, pcfg, args.steps)

    trace_path = Path(args.trace) if args.trace else Path(str(args.out) + ".trace.jsonl")
    if not args.resume and trace_path.exists():
        trace_path.unlink()
    state, trace = pretrain(model, datasets, pcfg, args.steps, state, trace_path, chash)

    teacher = {k: v.data for k, v in state.teacher.items()}
    meta_out = {
        "kind": "pretrain",
        "version": __version__,
        "config": json.loads(cfg.canonical()),
        "config_hash": chash,
        "seed": cfg.data.seed,
        "step": state.step,
        "datasets": [d.name for d in datasets],
        "ablation": args.ablation,
        "param_counts": _param_counts(state.student),
        "backbone_hash": tree_hash(_backbone_arrays(teacher), args.dtype),
        "dtype": args.dtype,
        "state": state.meta(),
    }
    save_checkpoint(args.out, state_arrays(state), meta_out, args.dtype)
    last = trace[-1]
    print(json.dumps({"step": state.step, "total": last.total, "trace": str(trace_path), "config_hash": chash}))
    return EXIT_OK


# ---------------------------------------------------------------- adapt / eval


def _task_overrides(args) -> dict:
    return {
        "task": args.task,
        "mode": args.mode,
        "N": args.N,
        "m_ref": args.m_ref,
        "P": args.P,
        "head": args.head,
        "epochs": args.epochs,
        "lr": args.lr,
        "multilabel": True if args.multilabel else None,
    }


def cmd_adapt(args) -> int:
    dataset = TileDataset(args.data)
    backbone = None
    source_hash = None
    if args.ckpt:
        arrays, meta = load_checkpoint(args.ckpt)
        prefix = "teacher/" if meta.get("kind") == "pretrain" else ""
        backbone = _backbone_arrays(arrays, prefix)
        source_hash = meta.get("backbone_hash")
    if args.config:
        cfg = load_config(args.config)
    elif args.ckpt:
        cfg = parse_config(meta["config"])
    else:
        raise ConfigError("adapt needs --ckpt or --config")
    if args.mode != "scratch" and backbone is None:
        raise ConfigError(f"mode {args.mode!r} needs a pretrained --ckpt")
    tcfg = cfg.task_config(dataset.num_classes, **_task_overrides(args))
    if backbone is not None and args.config and args.ckpt:
        cfg_model = parse_config(meta["config"]).model
        if cfg_model != cfg.model:
            raise ConfigError("model section of --config differs from the checkpoint's")
    model = _model_from(cfg, [dataset])
    res: AdaptResult = adapt(model, dataset, tcfg, backbone=backbone)

    out_arrays = res.params.arrays()
    dtype = args.dtype
    meta_out = {
        "kind": "adapt",
        "version": __version__,
        "config": json.loads(cfg.canonical()),
        "config_hash": cfg.content_hash(),
        "seed": cfg.data.seed,
        "task": tcfg.to_dict(),
        "label_side": res.task.geo.label_side if res.task.is_seg else None,
        "backbone_hash": tree_hash(_backbone_arrays(out_arrays), dtype),
        "source_backbone_hash": source_hash,
        "dataset": dataset.name,
        "train_ids": [int(i) for i in res.metadata.get("train_ids", [])],
        "test_ids": [int(i) for i in res.metadata.get("test_ids", [])],
        "history": res.history,
        "test_metrics": _jsonable(res.test_metrics),
        "pretrained": res.metadata["pretrained"],
        "param_counts": _param_counts(res.params),
        "dtype": dtype,
    }
    save_checkpoint(args.out, out_arrays, meta_out, dtype)
    print(json.dumps({"out": str(args.out), "test_metrics": _summary_line(res.test_metrics), "config_hash": meta_out["config_hash"]}))
    return EXIT_OK


def _summary_line(metrics: dict) -> dict:
    keys = ("overall_accuracy", "miou", "weighted_f1", "macro_f1")
    return {k: _jsonable(metrics[k]) for k in keys if k in metrics}


def _export_predictions(out_dir: Path, dataset, task: HeadTask, preds: dict[int, np.ndarray], chash: str) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, p in preds.items():
        extra = {"config_hash": chash, "prediction": True}
        if task.is_seg:
            labels = TileLabels(sorted(int(c) for c in np.unique(p)), None, np.asarray(p, dtype=np.int64), task.ds.label_resolution())
        elif task.cfg.multilabel:
            labels = TileLabels([int(c) for c in np.flatnonzero(p >= 0.5)], None)
            extra["scores"] = [float(s) for s in p]
        else:
            labels = TileLabels([int(p)], int(p))
        store_tile(out_dir / f"pred_{i:05d}.anysat", TileSample(dataset.name, i, {}, {}, labels), extra)


def cmd_eval(args) -> int:
    arrays, meta = load_checkpoint(args.ckpt)
    if meta.get("kind") != "adapt":
        raise ConfigError(f"{args.ckpt} is not an adapted checkpoint (run `adapt` first)")
    dataset = TileDataset(args.data)
    cfg = parse_config(meta["config"], env={})
    tcfg = cfg.task_config(**{k: v for k, v in meta["task"].items() if k != "seed"})
    model = _model_from(cfg, [dataset])
    task = HeadTask(model, dataset.info, tcfg, meta.get("label_side"))
    params = ParamTree.from_arrays(arrays, trainable=False)
    for k, _, _ in task.head.param_specs():
        if k not in params:
            raise ConfigError(f"checkpoint lacks head parameter {k!r}; task/head mismatch")
    if args.split == "test" and meta.get("test_ids"):
        ids = meta["test_ids"]
    else:
        ids = list(range(len(dataset)))
    res = evaluate(task, params, dataset, ids)
    metrics = _jsonable(res["metrics"])
    doc = {
        "config_hash": meta["config_hash"],
        "backbone_hash": meta["backbone_hash"],
        "dataset": dataset.name,
        "task": meta["task"],
        "split": args.split,
        "tile_ids": [int(i) for i in ids],
        "metrics": metrics,
    }
    mpath = Path(args.metrics)
    mpath.write_text(json.dumps(doc, indent=2, sort_keys=True))
    csv_path = Path(args.csv) if args.csv else mpath.with_suffix(".csv")
    _write_class_csv(csv_path, metrics, tcfg.N, meta["config_hash"])
    if args.predictions:
        _export_predictions(Path(args.predictions), dataset, task, res["predictions"], meta["config_hash"])
    print(json.dumps({"metrics": str(mpath), "csv": str(csv_path), **_summary_line(res["metrics"])}))
    return EXIT_OK


def _write_class_csv(path: Path, metrics: dict, N: int, chash: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config_hash={chash}\n")
        w = csv.writer(fh)
        w.writerow(["class", "support", "f1", "iou"])
        for c in range(N):
            iou = metrics["per_class_iou"][c]
            w.writerow([c, metrics["support"][c], metrics["per_class_f1"][c], "" if iou is None else iou])


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="anysat", description="Scale-adaptive multimodal tile models on synthetic data.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="generate a synthetic dataset directory")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--dataset", help="only this dataset of the config")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("pretrain", help="self-supervised pretraining")
    s.add_argument("--config")
    s.add_argument("--data", nargs="+", required=True, action="extend")
    s.add_argument("--steps", type=_positive_int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--trace", help="loss trace JSONL (default: <out>.trace.jsonl)")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--ablation", choices=("random-drop", "no-contrastive"))
    s.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("adapt", help="fit a downstream head")
    s.add_argument("--mode", choices=("scratch", "finetune", "probe"), required=True)
    s.add_argument("--task", choices=("classify", "segment", "changedet"), required=True)
    s.add_argument("--ckpt")
    s.add_argument("--config", help="overrides the configuration stored in --ckpt")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--N", type=int)
    s.add_argument("--m-ref", dest="m_ref")
    s.add_argument("--P", type=float)
    s.add_argument("--head", choices=("linear", "mlp"))
    s.add_argument("--epochs", type=_positive_int)
    s.add_argument("--lr", type=float)
    s.add_argument("--multilabel", action="store_true")
    s.add_argument("--dtype", choices=("f32", "f64"), default="f64")
    s.set_defaults(func=cmd_adapt)

    s = sub.add_parser("eval", help="metrics of an adapted checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--metrics", required=True)
    s.add_argument("--csv", help="per-class CSV (default: metrics path with .csv)")
    s.add_argument("--predictions", help="directory for exported prediction tiles")
    s.add_argument("--split", choices=("test", "all"), default="test")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DatasetSpecError, SyntheticConfigError, HeadConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, TileFormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
