"""Command-line entry point: ``lgseg <subcommand> [options]``.

Every option may also come from a ``--config`` key=value file (keys use
underscores); flags given on the command line win.  Each run writes
``manifest.txt`` into its ``--out`` directory.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import platform
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import scipy
import sklearn

from . import __version__
from ._validation import fitted_catalog
from .augment import AugmentConfig, augment_scene, color_jitter, extract_instances
from .bench import (
    accumulate,
    confusion_matrix,
    ground_truth_instances,
    map_range,
    metrics,
    proposals_from_labels,
    sample_limited_annotations,
)
from .catalog import UNLABELED, LabelCatalog, make_catalog, read_catalog, write_catalog
from .embed import (
    EmbeddingTable,
    fit_pca,
    load_table,
    normalize_rows,
    project,
    read_embeddings,
    save_table,
    synthetic_anchors,
)
from .errors import DataError, LgsegError, NumericError
from .experiment import ExperimentConfig, run_experiment
from .losses import ContrastiveConfig
from .model import (
    finetune,
    finetune_config,
    model_from_tensors,
    model_tensors,
    predict,
    pretrain,
    pretrain_config,
    read_checkpoint,
    scratch_encoder,
    write_checkpoint,
)
from .rng import substream
from .scene import read_prediction, read_scene, scene_stats, write_prediction, write_scene
from .synthetic import SyntheticSpec, generate_synthetic_scene, scene_seed, synthetic_catalog

log = logging.getLogger("lgseg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- option tables ------------------------------------------------------------

def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# name -> (type, default, help); bool options get --name / --no-name flags
TRAIN_OPTS = {
    "epochs": (int, None, "training epochs"),
    "lr": (float, 0.05, "base learning rate"),
    "momentum": (float, 0.9, "SGD momentum"),
    "decay": (float, 0.3, "learning-rate decay factor"),
    "batch": (int, 8, "scenes per step"),
    "resolution": (float, 0.05, "voxel size in meters"),
    "max_cells": (int, 1024, "labeled cells drawn per scene per step (0 = all)"),
    "hidden": (int, 64, "encoder hidden width"),
    "color": (_bool, True, "use point colors as input"),
}

COMMANDS = {
    "gen": {
        "scenes": (int, 10, "number of scenes"),
        "categories": (int, 20, "number of categories"),
        "zipf": (float, 1.0, "Zipf exponent of the object population"),
        "density": (float, 2000.0, "surface points per square meter"),
    },
    "stats": {
        "scenes": (str, None, "scene files or directories"),
        "catalog": (str, None, "catalog file"),
    },
    "augment": {
        "scenes": (str, None, "scenes to augment"),
        "catalog": (str, None, "catalog file with splits"),
        "bank": (str, "", "scenes to extract tail instances from (default: --scenes)"),
        "samples": (int, 4, "instances inserted per scene"),
        "attempts": (int, 0, "placement attempts (0 = 10 per sample)"),
        "jitter": (float, 0.0, "color jitter sigma"),
    },
    "pretrain": {
        "train": (str, None, "training scenes"),
        "catalog": (str, None, "catalog file"),
        "anchors": (str, "", "EMB1 anchor file (default: synthetic anchors)"),
        "anchor_source": (str, "clip", "source tag of --anchors"),
        "dim": (int, 64, "synthetic anchor dimension"),
        "objective": (str, "anchor", "anchor or supcon"),
        "t_pos": (float, 0.0, "positive margin"),
        "t_neg": (float, 0.6, "negative margin"),
        "lam": (float, 1.0, "negative term weight"),
        "n_neg": (int, 3, "negatives per point"),
        "distance": (str, "cosine", "cosine, l1 or l2"),
        **TRAIN_OPTS,
    },
    "finetune": {
        "train": (str, None, "training scenes"),
        "catalog": (str, None, "catalog file"),
        "init": (str, "", "pre-trained checkpoint (default: train from scratch)"),
        "dim": (int, 64, "encoder output width when training from scratch"),
        "loss": (str, "cfocal", "ce, weighted_ce, focal or cfocal"),
        "gamma": (float, 2.0, "focusing parameter"),
        "augment": (_bool, True, "online instance sampling"),
        "samples": (int, 4, "instances inserted per scene"),
        "masks": (str, "", "directory of annotation masks from `annotate`"),
        **TRAIN_OPTS,
    },
    "predict": {
        "model": (str, None, "fine-tuned checkpoint"),
        "scenes": (str, None, "scenes to label"),
    },
    "eval": {
        "gt": (str, None, "ground-truth scenes"),
        "pred": (str, None, "prediction files, matched to --gt by sorted order"),
        "catalog": (str, "", "catalog file (names and splits)"),
    },
    "eval-inst": {
        "gt": (str, None, "ground-truth scenes"),
        "pred": (str, None, "prediction files"),
        "catalog": (str, "", "catalog file; structural categories are skipped"),
        "link_radius": (float, 0.05, "linking distance for instance proposals"),
    },
    "annotate": {
        "scenes": (str, None, "scenes to annotate"),
        "fraction": (float, 0.05, "fraction of labeled points to keep"),
    },
    "pca": {
        "emb": (str, None, "EMB1 file"),
        "dim": (int, 96, "components to keep"),
    },
    "embed-import": {
        "emb": (str, None, "EMB1 file"),
        "catalog": (str, None, "catalog file to align rows to"),
        "source": (str, "clip", "source tag"),
    },
    "experiment": {},
}

SUMMARIES = {
    "gen": "generate a synthetic long-tail corpus and its catalog",
    "stats": "per-category instance and point counts",
    "augment": "insert tail-category instances into scenes",
    "pretrain": "contrastive pre-training against text anchors",
    "finetune": "supervised segmentation training",
    "predict": "label scenes with a fine-tuned model",
    "eval": "semantic mIoU report with head/common/tail means",
    "eval-inst": "instance mAP from semantic predictions",
    "annotate": "limited-annotation masks",
    "pca": "reduce an anchor table with PCA",
    "embed-import": "align an EMB1 table to a catalog",
    "experiment": "multi-seed comparison of training arms",
}

LIST_KEYS = ("scenes", "bank", "train", "gt", "pred")
INPUT_KEYS = ("scenes", "catalog", "bank", "train", "anchors", "init", "masks", "model",
              "gt", "pred", "emb")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lgseg", description="Long-tail 3D semantic segmentation toolkit.")
    parser.add_argument("--version", action="version", version=f"lgseg {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, opts in COMMANDS.items():
        p = sub.add_parser(name, help=SUMMARIES[name], description=SUMMARIES[name])
        if name == "experiment":
            p.add_argument("experiment_config", help="key=value experiment file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
        p.add_argument("--workers", type=int, default=None, help="parallel scene workers")
        p.add_argument("--config", default=None, help="key=value file of option defaults")
        for key, (kind, _, text) in opts.items():
            flag = "--" + key.replace("_", "-")
            if kind is _bool:
                p.add_argument(flag, action=argparse.BooleanOptionalAction, default=None, help=text)
            elif key in LIST_KEYS and kind is str:
                p.add_argument(flag, nargs="+", default=None, help=text)
            else:
                p.add_argument(flag, type=kind, default=None, help=text)
    return parser


def read_kv(path) -> dict:
    out = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"{path}:{n}: expected key=value")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve(args) -> dict:
    """Merge flags over config-file values over defaults."""
    opts = COMMANDS[args.command]
    file_values = read_kv(args.config) if args.config else {}
    allowed = set(opts) | {"seed", "workers"}
    unknown = set(file_values) - allowed
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    cfg = {}
    table = {**opts, "seed": (int, 0, ""), "workers": (int, 1, "")}
    for key, (kind, default, _) in table.items():
        value = getattr(args, key)
        if value is None and key in file_values:
            raw = file_values[key]
            try:
                value = raw.split() if key in LIST_KEYS and kind is str else kind(raw)
            except ValueError as exc:
                raise UsageError(f"bad config value for {key}: {raw!r}") from exc
        cfg[key] = default if value is None else value
    if cfg["workers"] < 1:
        raise UsageError("--workers must be at least 1")
    return cfg


# -- helpers ------------------------------------------------------------------

def _as_list(value):
    if value in (None, ""):
        return []
    return [value] if isinstance(value, str) else list(value)


def expand(paths, suffix: str) -> list[Path]:
    """Files as given, plus the sorted ``*suffix`` files of any directory."""
    out = []
    for p in map(Path, _as_list(paths)):
        out.extend(sorted(p.glob(f"*{suffix}")) if p.is_dir() else [p])
    return out


def check_inputs(cfg: dict, command: str):
    opts = COMMANDS[command]
    for key in INPUT_KEYS:
        if key not in opts or opts[key][0] is not str:
            continue
        values = _as_list(cfg[key])
        if opts[key][1] is None and not values:
            raise UsageError(f"--{key.replace('_', '-')} is required")
        for v in values:
            if not Path(v).exists():
                raise UsageError(f"no such file or directory: {v}")


def write_manifest(out: Path, command: str, cfg: dict, extra=None):
    lines = [f"command={command}"]
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, (list, tuple)):
            value = " ".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    for key, value in (extra or {}).items():
        lines.append(f"{key}={value}")
    lines += [f"version.lgseg={__version__}", f"version.numpy={np.__version__}",
              f"version.scipy={scipy.__version__}", f"version.sklearn={sklearn.__version__}",
              f"version.python={platform.python_version()}"]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_scenes(paths):
    files = expand(paths, ".sc3d")
    if not files:
        raise DataError("no .sc3d scenes found")
    return files, [read_scene(f) for f in files]


def _parallel_map(fn, items, workers):
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(min(workers, len(items))) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _catalog_for(cfg, scenes=None) -> LabelCatalog:
    catalog = read_catalog(cfg["catalog"])
    return fitted_catalog(catalog, scenes) if scenes is not None else catalog


def _train_common(cfg, prefix_epochs):
    return dict(lr=cfg["lr"], momentum=cfg["momentum"], decay=cfg["decay"], batch=cfg["batch"],
                seed=cfg["seed"], resolution=cfg["resolution"],
                max_cells=cfg["max_cells"] or None, hidden=cfg["hidden"], use_color=cfg["color"],
                epochs=cfg["epochs"] if cfg["epochs"] is not None else prefix_epochs)


# -- subcommands --------------------------------------------------------------

def _gen_one(job):
    spec, catalog, seed = job
    return generate_synthetic_scene(spec, catalog, seed)


def cmd_gen(cfg, out: Path, extra: dict):
    spec = SyntheticSpec(n_categories=cfg["categories"], zipf_exponent=cfg["zipf"],
                         density=cfg["density"])
    catalog = synthetic_catalog(cfg["categories"])
    jobs = [(spec, catalog, scene_seed(cfg["seed"], k)) for k in range(cfg["scenes"])]
    scenes = _parallel_map(_gen_one, jobs, cfg["workers"])
    for k, scene in enumerate(scenes):
        write_scene(scene, out / f"scene_{k:04d}.sc3d")
    write_catalog(fitted_catalog(catalog, scenes), out / "catalog.tsv")
    print(f"wrote {len(scenes)} scenes to {out}")


def cmd_stats(cfg, out: Path, extra: dict):
    _, scenes = _load_scenes(cfg["scenes"])
    catalog = read_catalog(cfg["catalog"])
    inst, pts = scene_stats(scenes, len(catalog))
    order = sorted(range(len(catalog)), key=lambda i: (-pts[i], catalog.names[i]))
    lines = ["id\tname\tinstances\tpoints\tsplit"]
    for i in order:
        lines.append(f"{i}\t{catalog.names[i]}\t{inst[i]}\t{pts[i]}\t{catalog.split.get(i, '-')}")
    text = "\n".join(lines) + "\n"
    (out / "stats.tsv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_augment(cfg, out: Path, extra: dict):
    files, scenes = _load_scenes(cfg["scenes"])
    bank_scenes = _load_scenes(cfg["bank"])[1] if cfg["bank"] else scenes
    catalog = _catalog_for(cfg, bank_scenes)
    bank = extract_instances(bank_scenes, catalog.ids_in("tail"))
    if len(bank) == 0:
        raise DataError("no tail-category instances to sample from")
    aug = AugmentConfig(n_samples=cfg["samples"], max_attempts=cfg["attempts"] or None,
                        jitter_sigma=cfg["jitter"])
    for k, (path, scene) in enumerate(zip(files, scenes)):
        rng = substream(cfg["seed"], f"augment/scene={k}")
        result = color_jitter(augment_scene(scene, bank, catalog, aug, rng), aug.jitter_sigma, rng)
        write_scene(result, out / path.name)
    print(f"augmented {len(scenes)} scenes into {out}")


def cmd_pretrain(cfg, out: Path, extra: dict):
    _, scenes = _load_scenes(cfg["train"])
    catalog = _catalog_for(cfg, scenes)
    if cfg["anchors"]:
        table = load_table(cfg["anchors"], catalog, cfg["anchor_source"])
    else:
        table = synthetic_anchors(len(catalog), cfg["dim"], cfg["seed"])
    ccfg = ContrastiveConfig(t_pos=cfg["t_pos"], t_neg=cfg["t_neg"], lam=cfg["lam"],
                             n_neg=cfg["n_neg"], distance=cfg["distance"])
    if cfg["objective"] not in ("anchor", "supcon"):
        raise UsageError("--objective must be anchor or supcon")
    tcfg = pretrain_config(contrastive=ccfg, objective=cfg["objective"], **_train_common(cfg, 60))
    history = []
    params = pretrain(scenes, catalog, table, tcfg, history=history)
    meta = {"resolution": tcfg.resolution, "use_color": tcfg.use_color}
    write_checkpoint(model_tensors(params, meta=meta), out / "encoder.ckpt")
    write_catalog(catalog, out / "catalog.tsv")
    _write_history(out / "history.txt", history)
    extra["milestones"] = ",".join(map(str, tcfg.milestones))


def _write_history(path: Path, history):
    path.write_text("".join(f"{e}\t{v:.8f}\n" for e, v in enumerate(history)), encoding="utf-8")


def cmd_finetune(cfg, out: Path, extra: dict):
    files, scenes = _load_scenes(cfg["train"])
    catalog = _catalog_for(cfg, scenes)
    aug = AugmentConfig(n_samples=cfg["samples"]) if cfg["augment"] else None
    tcfg = finetune_config(loss=cfg["loss"], gamma=cfg["gamma"], augment=aug,
                           **_train_common(cfg, 40))
    if cfg["init"]:
        params, _, _ = model_from_tensors(read_checkpoint(cfg["init"]))
    else:
        params = scratch_encoder(cfg["dim"], tcfg)
    masks = None
    if cfg["masks"]:
        masks = []
        for f, s in zip(files, scenes):
            mfile = Path(cfg["masks"]) / (f.stem + ".mask")
            if not mfile.exists():
                raise UsageError(f"missing annotation mask {mfile}")
            masks.append(read_prediction(mfile).astype(bool))
    history = []
    params, head = finetune(params, scenes, catalog, masks, cfg=tcfg, history=history)
    meta = {"resolution": tcfg.resolution, "use_color": tcfg.use_color}
    write_checkpoint(model_tensors(params, head, meta), out / "model.ckpt")
    write_catalog(catalog, out / "catalog.tsv")
    _write_history(out / "history.txt", history)
    extra["milestones"] = ",".join(map(str, tcfg.milestones))


def cmd_predict(cfg, out: Path, extra: dict):
    params, head, meta = model_from_tensors(read_checkpoint(cfg["model"]))
    if head is None:
        raise DataError("checkpoint has no classification head")
    resolution = meta.get("resolution", 0.05)
    use_color = bool(meta.get("use_color", 1.0))
    files, scenes = _load_scenes(cfg["scenes"])
    for path, scene in zip(files, scenes):
        labels = predict(params, head, scene, resolution, use_color)
        write_prediction(labels, out / (path.stem + ".sprd"))
    extra["resolution"] = resolution
    print(f"wrote {len(files)} predictions to {out}")


def _pairs(cfg):
    gt_files = expand(cfg["gt"], ".sc3d")
    pred_files = expand(cfg["pred"], ".sprd")
    if len(gt_files) != len(pred_files) or not gt_files:
        raise DataError(f"{len(gt_files)} ground-truth scenes vs {len(pred_files)} predictions")
    return [(read_scene(g), read_prediction(p)) for g, p in zip(gt_files, pred_files)]


def cmd_eval(cfg, out: Path, extra: dict):
    pairs = _pairs(cfg)
    if cfg["catalog"]:
        catalog = read_catalog(cfg["catalog"])
    else:
        top = max(max(int(s.semantic[s.semantic != UNLABELED].max(initial=0)),
                      int(p.max(initial=0))) for s, p in pairs)
        catalog = make_catalog([str(i) for i in range(top + 1)])
    cm = confusion_matrix(len(catalog))
    for scene, pred in pairs:
        cm = accumulate(cm, scene.semantic, pred)
    report = metrics(cm, catalog)
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    sys.stdout.write(report.to_text())
    print(f"mIoU {report.miou:.6f}")


def cmd_eval_inst(cfg, out: Path, extra: dict):
    pairs = _pairs(cfg)
    skip = read_catalog(cfg["catalog"]).structural_ids() if cfg["catalog"] else set()
    preds, gts = [], []
    for k, (scene, labels) in enumerate(pairs):
        gts += ground_truth_instances(scene, k, skip)
        preds += proposals_from_labels(scene.positions, labels, k, cfg["link_radius"], skip)
    m25, m50, mrange = map_range(preds, gts)
    text = f"mAP@0.25\t{m25:.6f}\nmAP@0.50\t{m50:.6f}\nmAP@[0.50:0.95]\t{mrange:.6f}\n"
    (out / "report_inst.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_annotate(cfg, out: Path, extra: dict):
    files, scenes = _load_scenes(cfg["scenes"])
    for k, (path, scene) in enumerate(zip(files, scenes)):
        mask = sample_limited_annotations(scene, cfg["fraction"],
                                          substream(cfg["seed"], f"annotate/scene={k}"))
        write_prediction(mask.astype(np.uint16), out / (path.stem + ".mask"))
    print(f"wrote {len(files)} masks to {out}")


def _read_table(path, tag="synthetic"):
    names, vectors = read_embeddings(path)
    return EmbeddingTable(normalize_rows(vectors.astype(np.float64)), tuple(names), tag)


def cmd_pca(cfg, out: Path, extra: dict):
    table = _read_table(cfg["emb"])
    model = fit_pca(table, cfg["dim"])
    save_table(project(model, table), out / "anchors.emb1")
    extra["retained_variance"] = f"{model.retained_ratio:.6f}"
    print(f"kept {cfg['dim']} components, retained variance {model.retained_ratio:.6f}")


def cmd_embed_import(cfg, out: Path, extra: dict):
    catalog = read_catalog(cfg["catalog"])
    table = load_table(cfg["emb"], catalog, cfg["source"])
    save_table(table, out / "anchors.emb1")
    print(f"imported {len(table)} anchors of dimension {table.dim}")


def cmd_experiment(cfg, out: Path, extra: dict, args=None):
    values = read_kv(args.experiment_config)
    ecfg = ExperimentConfig.from_mapping(values)
    result = run_experiment(ecfg, workers=cfg["workers"])
    (out / "table.txt").write_text(result.table(), encoding="utf-8")
    (out / "results.json").write_text(result.to_json() + "\n", encoding="utf-8")
    extra.update({f"experiment.{k}": v for k, v in ecfg.as_mapping().items()})
    sys.stdout.write(result.table())


HANDLERS = {
    "gen": cmd_gen, "stats": cmd_stats, "augment": cmd_augment, "pretrain": cmd_pretrain,
    "finetune": cmd_finetune, "predict": cmd_predict, "eval": cmd_eval,
    "eval-inst": cmd_eval_inst, "annotate": cmd_annotate, "pca": cmd_pca,
    "embed-import": cmd_embed_import, "experiment": cmd_experiment,
}


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        cfg = resolve(args)
        check_inputs(cfg, args.command)
        if args.command == "experiment" and not Path(args.experiment_config).is_file():
            raise UsageError(f"no such file: {args.experiment_config}")
        out = Path(args.out)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise UsageError(f"cannot create output directory {out}: {exc}") from exc
        extra = {}
        handler = HANDLERS[args.command]
        if args.command == "experiment":
            handler(cfg, out, extra, args)
        else:
            handler(cfg, out, extra)
        write_manifest(out, args.command, cfg, extra)
        return EXIT_OK
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"lgseg: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"lgseg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LgsegError, OSError) as exc:
        print(f"lgseg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main():
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
