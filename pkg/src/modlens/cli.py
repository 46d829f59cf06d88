"""``modlens`` command line: synth, train, eval, analyze, benchmark.

Exit codes: 0 success, 2 usage/config error, 3 runtime failure (diverged loss, I/O, bad data).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from .errors import ConfigError, DataFormatError, ModlensError, TrainingDivergedError
from .rasterdata import DatasetManifest, SynthConfig, generate_synthetic
from .segnet import NetConfig, load_checkpoint

log = logging.getLogger("modlens")

RUN_CONFIG_KEYS = {"data", "out", "seed", "mode", "occlusion_value", "split", "epochs", "preset",
                   "net", "train", "synth"}
PRESETS = ("practical", "fullscale")


def load_run_config(path: str | None) -> dict:
    if not path:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    try:
        cfg = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config file must hold a JSON object")
    unknown = set(cfg) - RUN_CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    for section in ("net", "train", "synth"):
        if section in cfg and not isinstance(cfg[section], dict):
            raise ConfigError(f"config section {section!r} must be an object")
    return cfg


def merge(cfg: dict, args: argparse.Namespace, keys) -> dict:
    """Flags override config-file keys."""
    out = dict(cfg)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _need(cfg: dict, key: str) -> str:
    if not cfg.get(key):
        raise ConfigError(f"missing required setting {key!r} (flag --{key.replace('_', '-')} or config key)")
    return cfg[key]


def _data_manifest(cfg: dict) -> DatasetManifest:
    root = Path(_need(cfg, "data"))
    if not root.is_dir():
        raise ConfigError(f"data directory {root} does not exist")
    if not (root / "manifest.json").is_file():
        raise ConfigError(f"{root} has no manifest.json")
    return DatasetManifest.load(root)


def _out_dir(cfg: dict) -> Path:
    out = Path(_need(cfg, "out"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo(cfg: dict, out: Path) -> None:
    (out / "effective_config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True, default=str) + "\n")


def _train_config(cfg: dict):
    from .trainer import TrainConfig

    preset = cfg.get("preset", "practical")
    if preset not in PRESETS:
        raise ConfigError(f"preset must be one of {PRESETS}")
    base = TrainConfig.practical() if preset == "practical" else TrainConfig()
    values = {**asdict(base), **cfg.get("train", {})}
    if cfg.get("seed") is not None:
        values["seed"] = cfg["seed"]
    if cfg.get("occlusion_value") is not None:
        values["occlusion_value"] = cfg["occlusion_value"]
    if cfg.get("epochs") is not None:
        values["max_epochs"] = cfg["epochs"]
    tc = TrainConfig.from_dict(values)
    tc.validate()
    return tc


def _net_config(cfg: dict, mode: str, manifest: DatasetManifest, seed: int) -> NetConfig:
    from .trainer import default_net_config

    net = dict(cfg.get("net", {}))
    allowed = {f.name for f in fields(NetConfig)} - {"in_channels", "num_modalities", "influence_head"}
    unknown = set(net) - allowed
    if unknown:
        raise ConfigError(f"unknown net config keys: {sorted(unknown)}")
    net.setdefault("seed", seed)
    nc = default_net_config(mode, manifest, **net)
    nc.validate()
    return nc


def _format_metrics(record) -> dict:
    pct = record.percent()
    return {**pct, "tp": record.tp, "fp": record.fp, "fn": record.fn, "tn": record.tn}


def write_metrics(results: dict, path: Path) -> None:
    """JSON with IoU/accuracy/F1 in percent, always printed with two decimals."""
    lines = ["{"]
    items = list(results.items())
    for i, (split, m) in enumerate(items):
        lines.append(f'  "{split}": {{')
        lines.append(f'    "iou": {m["iou"]:.2f},')
        lines.append(f'    "accuracy": {m["accuracy"]:.2f},')
        lines.append(f'    "f1": {m["f1"]:.2f},')
        lines.append(f'    "confusion": {{"tp": {m["tp"]}, "fp": {m["fp"]}, "fn": {m["fn"]}, "tn": {m["tn"]}}}')
        lines.append("  }" + ("," if i < len(items) - 1 else ""))
    lines.append("}")
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    cfg = merge(load_run_config(args.config), args, ("out", "seed"))
    synth = dict(cfg.get("synth", {}))
    for flag, key in (("samples", "num_samples"), ("height", "height"), ("width", "width")):
        if getattr(args, flag) is not None:
            synth[key] = getattr(args, flag)
    if cfg.get("seed") is not None:
        synth["seed"] = cfg["seed"]
    known = {f.name for f in fields(SynthConfig)} - {"scheme"}
    unknown = set(synth) - known
    if unknown:
        raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
    sc = SynthConfig(**synth)
    try:
        sc.validate()
    except ConfigError as e:
        raise ConfigError(f"synth config: {e}") from None
    out = _out_dir(cfg)
    manifest = generate_synthetic(sc, out)
    print(f"wrote {len(manifest.samples)} samples to {out}")
    return 0


def cmd_train(args) -> int:
    from .trainer import train

    cfg = merge(load_run_config(args.config), args, ("data", "out", "seed", "mode", "occlusion_value", "epochs",
                                                      "preset"))
    mode = cfg.get("mode", "framework")
    if mode not in ("plain", "framework"):
        raise ConfigError("mode must be 'plain' or 'framework'")
    manifest = _data_manifest(cfg)
    tc = _train_config(cfg)
    nc = _net_config(cfg, mode, manifest, tc.seed)
    out = _out_dir(cfg)
    _echo({**cfg, "mode": mode, "train": asdict(tc), "net": asdict(nc)}, out)

    def report(row):
        log.info("epoch %d  train_loss %.4f  val_loss %.4f  val_iou %.2f", row["epoch"], row["train_loss"],
                 row["val_loss"], 100 * row["val_iou"])

    result = train(mode, tc, manifest, nc, out_dir=out, log=report)
    print(f"{mode}: best epoch {result.best_epoch}, {tc.early_stop_metric}={result.best_metric:.4f}; "
          f"checkpoint {result.checkpoint}")
    return 0


def _checkpoint_train_config(extra: dict, cfg: dict):
    from .trainer import TrainConfig

    tc = TrainConfig.from_dict(extra.get("train_config", {}))
    if cfg.get("occlusion_value") is not None:
        tc.occlusion_value = float(cfg["occlusion_value"])
    return tc


def cmd_eval(args) -> int:
    from .trainer import evaluate

    cfg = merge(load_run_config(args.config), args, ("data", "out", "occlusion_value", "split"))
    manifest = _data_manifest(cfg)
    model, extra = load_checkpoint(_need(vars(args), "checkpoint"))
    tc = _checkpoint_train_config(extra, cfg)
    splits = [cfg["split"]] if cfg.get("split") else [s for s in ("val", "test") if manifest.ids(s)]
    results = {s: _format_metrics(evaluate(model, manifest, s, tc)) for s in splits}
    out = Path(cfg["out"]) if cfg.get("out") else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    write_metrics(results, out / "metrics.json")
    for s, m in results.items():
        print(f"{s}: IoU {m['iou']:.2f}  Acc {m['accuracy']:.2f}  F1 {m['f1']:.2f}")
    return 0


def cmd_analyze(args) -> int:
    from .analyzer import collect_scores, export_violin_data

    cfg = merge(load_run_config(args.config), args, ("data", "out", "occlusion_value", "split"))
    manifest = _data_manifest(cfg)
    model, extra = load_checkpoint(_need(vars(args), "checkpoint"))
    if not model.has_head:
        raise ConfigError("analyze needs a framework checkpoint (this one is a plain network)")
    tc = _checkpoint_train_config(extra, cfg)
    out = _out_dir(cfg)
    table = collect_scores(model, manifest, cfg.get("split") or "val", config=tc)
    paths = export_violin_data(table, out)
    for s in table.summary():
        print(f"{s['modality']:<22} mean influence {s['mean']:.4f}  median {s['median']:.4f}")
    print("wrote " + ", ".join(str(p) for p in paths.values()))
    return 0


def cmd_benchmark(args) -> int:
    from .trainer import benchmark_timing, prepare_split, write_json

    cfg = merge(load_run_config(args.config), args, ("data", "out", "seed", "occlusion_value", "epochs", "preset"))
    manifest = _data_manifest(cfg)
    epochs = int(cfg.get("epochs") or 2)
    tc = _train_config({**cfg, "epochs": None})
    out = _out_dir(cfg)
    data = prepare_split(manifest, "train", tc)
    rows = {}
    for mode in ("plain", "framework"):
        nc = _net_config(cfg, mode, manifest, tc.seed)
        rows[mode] = benchmark_timing(mode, tc, manifest, epochs, nc, data=data).to_json()
    report = {
        **rows,
        "measured_epochs": epochs,
        "warmup_epochs": 1,
        "epoch_overhead_s": rows["framework"]["epoch_s"] - rows["plain"]["epoch_s"],
        "batch_ratio": rows["framework"]["batch_s"] / rows["plain"]["batch_s"],
    }
    _echo({**cfg, "train": asdict(tc)}, out)
    write_json(report, out / "timing.json")
    print(f"{'Settings':<10} {'Epoch':>10} {'Batch':>10} {'Optimizer Step':>15}")
    for mode, r in rows.items():
        print(f"{mode:<10} {r['epoch_s']:>10.2f} {r['batch_s']:>10.5f} {r['optimizer_step_s']:>15.5f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modlens", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *extra):
        sp.add_argument("--config", help="JSON run config; flags override its keys")
        sp.add_argument("--out", help="output directory")
        if "seed" in extra:
            sp.add_argument("--seed", type=int)
        if "data" in extra:
            sp.add_argument("--data", help="dataset directory containing manifest.json")
        if "occlusion" in extra:
            sp.add_argument("--occlusion-value", dest="occlusion_value", type=float,
                            help="fill value for occluded channels (default 0)")

    s = sub.add_parser("synth", help="generate a synthetic multimodal dataset")
    common(s, "seed")
    s.add_argument("--samples", type=int)
    s.add_argument("--height", type=int)
    s.add_argument("--width", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a plain or framework model")
    common(t, "seed", "data", "occlusion")
    t.add_argument("--mode", choices=("plain", "framework"))
    t.add_argument("--epochs", type=int, help="maximum epochs")
    t.add_argument("--preset", choices=PRESETS, help="learning-rate preset (default practical)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="IoU/accuracy/F1 of a checkpoint")
    common(e, "data", "occlusion")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("train", "val", "test"))
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="per-modality influence scores and densities")
    common(a, "data", "occlusion")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--split", choices=("train", "val", "test"))
    a.set_defaults(func=cmd_analyze)

    b = sub.add_parser("benchmark", help="epoch/batch/optimizer-step timing of both modes")
    common(b, "seed", "data", "occlusion")
    b.add_argument("--epochs", type=int, help="measured epochs after one warm-up (default 2)")
    b.add_argument("--preset", choices=PRESETS)
    b.set_defaults(func=cmd_benchmark)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"modlens {args.command}: configuration error: {e}", file=sys.stderr)
        return 2
    except (TrainingDivergedError, DataFormatError, OSError, ModlensError) as e:
        print(f"modlens {args.command}: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
