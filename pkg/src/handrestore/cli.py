"""Command-line entry point: gen-data, train, eval, restore, handover."""

from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import datagen, handover, io, metrics, network, training
from .geometry import backproject
from .datagen import CorruptionParams
from .network import Model, ModelConfig

log = logging.getLogger("handrestore")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED, EXIT_HASH = 0, 2, 3, 4, 5

DEFAULT_CONFIG = {
    "seed": 0,
    "dataset": {
        "n_scenes": 500, "seed": 0, "width": 64, "height": 64,
        "kinds": list(datagen.OBJECT_KINDS), "weights": None,
        "corruption": {"p_missing": 0.35, "p_background": 0.35, "p_noise": 0.15, "sigma": 0.01},
    },
    "model": {"resolution": 8, "margin": 0.05, "hidden": [256, 128], "hand_feature": "3d",
              "point_fusion": "on", "multiscale": "on"},
    "loss": {"w_depth": 200.0, "w_prob": 10.0, "w_norm": 0.5},
    "optimizer": {"epochs": 100, "lr": 1e-3, "lr_late": 1e-4, "decay_fraction": 0.8, "max_steps": None},
    "train": {"exclude_unknown": False},
    "handover": {"width": 128, "height": 128, "seed": 0, "n_grasps": 512, "tick_budget": 150},
}


class ConfigError(ValueError):
    pass


class HashMismatch(RuntimeError):
    pass


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = value
    return out


def _switch(value, name: str) -> bool:
    if value in ("on", True):
        return True
    if value in ("off", False):
        return False
    raise ConfigError(f"{name} must be 'on' or 'off'")


def load_config(path: str | None = None, overrides: dict | None = None) -> dict:
    """Defaults merged with a JSON file; unknown keys are rejected."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            user = io.read_json(path)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        model_config(cfg)
        corruption(cfg)
        training.LossWeights(**cfg["loss"])
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    ds = cfg["dataset"]
    if int(ds["n_scenes"]) < 1:
        raise ConfigError("dataset.n_scenes must be >= 1")
    if ds["width"] % 32 or ds["height"] % 32:
        raise ConfigError("image width and height must be multiples of 32")
    unknown = set(ds["kinds"]) - set(datagen.OBJECT_KINDS)
    if unknown:
        raise ConfigError(f"unknown object kinds {sorted(unknown)}")
    if int(cfg["optimizer"]["epochs"]) < 0:
        raise ConfigError("optimizer.epochs must be >= 0")


def config_hash(cfg: dict) -> str:
    return io.content_hash(cfg)


def model_config(cfg: dict) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(resolution=int(m["resolution"]), margin=float(m["margin"]), hidden=tuple(m["hidden"]),
                       hand_feature=m["hand_feature"], point_fusion=_switch(m["point_fusion"], "point_fusion"),
                       multiscale=_switch(m["multiscale"], "multiscale"))


def corruption(cfg: dict) -> CorruptionParams:
    return CorruptionParams(**cfg["dataset"]["corruption"])


# checkpoints -----------------------------------------------------------------------

def save_checkpoint(path: str | Path, model: Model, cfg: dict, extra: dict | None = None) -> None:
    out = Path(path)
    (out / "params").mkdir(parents=True, exist_ok=True)
    files = {}
    for name in model.names:
        fname = f"params/{name}.rvt"
        io.write_tensor(out / fname, model.params[name].astype(np.float64))
        files[name] = fname
    manifest = {"config": cfg, "config_hash": config_hash(cfg), "params": files,
                "n_params": model.n_params}
    manifest.update(extra or {})
    io.write_json(out / "manifest.json", manifest)


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    root = Path(path)
    manifest = io.read_json(root / "manifest.json")
    cfg = manifest["config"]
    if config_hash(cfg) != manifest["config_hash"]:
        raise HashMismatch("config drift: checkpoint config does not match its recorded hash")
    mc = model_config(cfg)
    params = {name: io.read_tensor(root / f) for name, f in manifest["params"].items()}
    shapes = network.param_shapes(mc)
    if set(shapes) != set(params) or any(params[n].shape != s for n, s in shapes.items()):
        raise io.FormatError("checkpoint parameters do not match the model config")
    return Model({n: params[n] for n in shapes}, mc), manifest


def resolve_backend(spec: str):
    """'oracle', 'passthrough' or a checkpoint directory -> (restore_fn, label, config or None)."""
    if spec == "oracle":
        return handover.oracle_backend, "oracle", None
    if spec == "passthrough":
        return handover.passthrough_backend, "passthrough", None
    model, manifest = load_checkpoint(spec)
    return handover.model_backend(model), "restored", manifest["config"]


# commands --------------------------------------------------------------------------

def cmd_gen_data(cfg: dict, out_dir: str, workers: int = 1) -> dict:
    ds = cfg["dataset"]
    return datagen.generate_dataset(
        out_dir, int(ds["n_scenes"]), seed=int(ds["seed"]), width=int(ds["width"]), height=int(ds["height"]),
        kinds=tuple(ds["kinds"]), weights=ds["weights"], corruption=corruption(cfg),
        extra_manifest={"config_hash": config_hash(cfg)}, model_config=model_config(cfg), workers=workers,
    )


def _prepared(ds: datagen.Dataset, split: str, mc: ModelConfig, exclude_unknown: bool):
    entries = ds.entries(split, False if exclude_unknown else None)
    return [training.PreparedScene.from_record(ds.load(e), mc) for e in entries]


def cmd_train(cfg: dict, dataset: str, out: str) -> tuple[Model, list]:
    ds = datagen.Dataset(dataset)
    mc = model_config(cfg)
    excl = bool(cfg["train"]["exclude_unknown"])
    train_set = _prepared(ds, "train", mc, excl)
    val_set = _prepared(ds, "val", mc, excl)
    opt = cfg["optimizer"]
    tc = training.TrainConfig(epochs=int(opt["epochs"]), lr=float(opt["lr"]), lr_late=float(opt["lr_late"]),
                              decay_fraction=float(opt["decay_fraction"]), seed=int(cfg["seed"]),
                              weights=training.LossWeights(**cfg["loss"]), max_steps=opt["max_steps"])
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    h = config_hash(cfg)
    last_good = {}

    def keep(epoch, model, entry):
        last_good["model"] = model.copy()

    with open(out_dir / "train_log.jsonl", "w") as logf:
        logf.write(json.dumps({"config_hash": h, "n_train": len(train_set), "n_val": len(val_set)}, sort_keys=True) + "\n")
        try:
            model, history = training.train(train_set, tc, val_set=val_set or None, model_config=mc,
                                            log_stream=logf, on_epoch=keep)
        except training.Diverged as e:
            good = e.last_good or last_good.get("model") or Model.init(tc.seed, mc)
            save_checkpoint(out_dir / "checkpoint", good, cfg, {"status": "diverged"})
            raise
    save_checkpoint(out_dir / "checkpoint", model, cfg, {"status": "ok", "epochs": len(history)})
    return model, history


def cmd_eval(backend: str, dataset: str, split: str, cfg: dict | None = None, unknown: bool | None = None,
             out: str | None = None) -> metrics.DatasetReport:
    fn, label, ck_cfg = resolve_backend(backend)
    if cfg is not None and ck_cfg is not None and config_hash(cfg) != config_hash(ck_cfg):
        raise HashMismatch("config drift: checkpoint was trained with a different config")
    h = config_hash(ck_cfg if ck_cfg is not None else (cfg or load_config()))
    ds = datagen.Dataset(dataset)
    entries = ds.entries(None if split == "all" else split, unknown)
    if not entries:
        raise datagen.SpecError(f"split {split!r} is empty")
    report = metrics.evaluate_dataset(fn, ((e["dir"], ds.load(e)) for e in entries))
    doc = {"config_hash": h, "backend": label, "split": split, **report.to_dict()}
    table = metrics.format_table({label: report.restored, "corrupted": report.corrupted})
    if out is not None:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        io.write_json(out, doc)
        Path(out).with_suffix(".txt").write_text(table + "\n")
    print(table)
    return report


def cmd_restore(backend: str, scene_dir: str, out: str, keep_background: bool = False) -> np.ndarray:
    fn, label, ck_cfg = resolve_backend(backend)
    rec = datagen.read_scene(scene_dir)
    depth = np.asarray(fn(rec), dtype=np.float64)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    io.write_tensor(out_dir / "depth_restored.rvt", depth.astype(np.float32))
    keep = depth > 0
    if not keep_background:
        keep &= rec.mask_obj
    pts, _ = backproject(np.where(keep, depth, 0.0), rec.intrinsics)
    np.savetxt(out_dir / "points.xyz", pts, fmt="%.6f")
    io.write_json(out_dir / "restore.json", {
        "backend": label, "config_hash": config_hash(ck_cfg) if ck_cfg else None,
        "points": int(len(pts)), "masked": not keep_background,
    })
    return depth


def cmd_handover(backend: str, cfg: dict, out: str, scenarios: str | None = None, workers: int = 1) -> dict:
    fn, label, ck_cfg = resolve_backend(backend)
    if scenarios:
        files = sorted(Path(scenarios).glob("*.json"))
        if not files:
            raise FileNotFoundError(f"no scenario files in {scenarios}")
        scripts = [handover.ScenarioScript.from_dict(io.read_json(f)) for f in files]
    else:
        scripts = default_scripts(cfg)
    out_dir = Path(out)
    (out_dir / "trajectories").mkdir(parents=True, exist_ok=True)
    results = _map(_run_one, [(s, backend, str(out_dir / "trajectories")) for s in scripts], workers) \
        if workers > 1 else [_run_one((s, fn, str(out_dir / "trajectories"))) for s in scripts]
    summary = handover.summarize(results)
    summary["scenarios"] = results
    summary["backend"] = label
    summary["config_hash"] = config_hash(ck_cfg if ck_cfg is not None else cfg)
    io.write_json(out_dir / "report.json", summary)
    text = handover.format_report(summary, label)
    (out_dir / "report.txt").write_text(text + "\n")
    print(text)
    return summary


def default_scripts(cfg: dict) -> list:
    hv = cfg["handover"]
    scripts = handover.default_scenarios(int(hv["seed"]), int(hv["width"]), int(hv["height"]), corruption(cfg))
    for s in scripts:
        s.n_grasps = int(hv["n_grasps"])
        s.tick_budget = int(hv["tick_budget"])
    return scripts


def _run_one(args):
    script, backend, traj_dir = args
    fn = resolve_backend(backend)[0] if isinstance(backend, str) else backend
    with open(Path(traj_dir) / f"{script.name}.jsonl", "w") as f:
        return handover.run_scenario(script, fn, f)


def _map(fn, items, workers):
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def write_scenarios(cfg: dict, out: str) -> int:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    scripts = default_scripts(cfg)
    for s in scripts:
        io.write_json(out_dir / f"{s.name}.json", s.to_dict())
    return len(scripts)


# entry point -----------------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="handrestore", description=__doc__)
    p.add_argument("--threads", type=int, default=1, help="cap on worker processes and BLAS threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, help="override dataset.n_scenes")

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--config")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--epochs", type=int, help="override optimizer.epochs")

    e = sub.add_parser("eval", help="restored vs corrupted metrics on a split")
    e.add_argument("--checkpoint", required=True, help="checkpoint directory, 'oracle' or 'passthrough'")
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    e.add_argument("--category", default="any", choices=["any", "known", "unknown"])
    e.add_argument("--config", help="refuse to run if it differs from the checkpoint's config")
    e.add_argument("--out")

    r = sub.add_parser("restore", help="restore one scene and dump a point cloud")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--keep-background", action="store_true")

    h = sub.add_parser("handover", help="run the handover benchmark")
    h.add_argument("--backend", required=True, help="checkpoint directory, 'oracle' or 'passthrough'")
    h.add_argument("--config")
    h.add_argument("--scenarios", help="directory of scenario JSON files (default: built-in suite)")
    h.add_argument("--write-scenarios", help="write the built-in suite to this directory and exit")
    h.add_argument("--out", default="handover_out")
    return p


def _run(args) -> int:
    if args.command == "gen-data":
        cfg = load_config(args.config, {"dataset": {"n_scenes": args.n}} if args.n else None)
        man = cmd_gen_data(cfg, args.out, workers=args.threads)
        print(f"wrote {man['n_scenes']} scenes to {args.out} {man['split_counts']}")
    elif args.command == "train":
        cfg = load_config(args.config, {"optimizer": {"epochs": args.epochs}} if args.epochs is not None else None)
        _, hist = cmd_train(cfg, args.dataset, args.out)
        print(f"trained {len(hist)} epochs; checkpoint in {Path(args.out) / 'checkpoint'}")
    elif args.command == "eval":
        cfg = load_config(args.config) if args.config else None
        unknown = {"any": None, "known": False, "unknown": True}[args.category]
        cmd_eval(args.checkpoint, args.dataset, args.split, cfg, unknown, args.out)
    elif args.command == "restore":
        cmd_restore(args.checkpoint, args.scene, args.out, args.keep_background)
    elif args.command == "handover":
        cfg = load_config(args.config)
        if args.write_scenarios:
            print(f"wrote {write_scenarios(cfg, args.write_scenarios)} scenarios")
        else:
            cmd_handover(args.backend, cfg, args.out, args.scenarios, workers=args.threads)
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=max(1, args.threads)):
            return _run(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except HashMismatch as e:
        print(str(e), file=sys.stderr)
        return EXIT_HASH
    except training.Diverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, io.FormatError, datagen.SpecError, KeyError, training.TrainingError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
