"""Command-line entry point: ``ssclab {gen-data,train,eval,analyze}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import analysis
from .consistency import ConsistencyConfig
from .data import DatasetFormatError, SyntheticSpec, export_dataset, generate, load_dataset
from .metrics import evaluate
from .nn import BackboneConfig, load_checkpoint, model_from_checkpoint
from .train import FitResult, TrainConfig, fit, predict, write_run

log = logging.getLogger("ssclab")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
SPLITS = ("train", "val", "test")


class ConfigError(ValueError):
    pass


# -- run configuration ---------------------------------------------------------------

def _fields(cls):
    return {f.name for f in dataclasses.fields(cls)}


DATA_SIZES = {"n_train": 2000, "n_val": 500, "n_test": 500}
PATH_KEYS = {"data", "out", "checkpoint"}
SECTIONS = {
    "data": _fields(SyntheticSpec) | set(DATA_SIZES),
    "model": _fields(BackboneConfig),
    "train": _fields(TrainConfig) - {"consistency"},
    "consistency": _fields(ConsistencyConfig) - {"variant"},
    "paths": PATH_KEYS,
}


@dataclasses.dataclass
class RunConfig:
    spec: SyntheticSpec = dataclasses.field(default_factory=SyntheticSpec)
    sizes: dict = dataclasses.field(default_factory=lambda: dict(DATA_SIZES))
    model: BackboneConfig = dataclasses.field(default_factory=BackboneConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    paths: dict = dataclasses.field(default_factory=dict)

    def to_dict(self):
        data = self.spec.to_dict()
        data.update(self.sizes)
        model = {k: list(v) if isinstance(v, tuple) else v
                 for k, v in dataclasses.asdict(self.model).items()}
        train = self.train.to_dict()
        consistency = train.pop("consistency")
        consistency.pop("variant")
        return {"data": data, "model": model, "train": train, "consistency": consistency,
                "paths": dict(self.paths)}


def parse_run_config(doc: dict) -> RunConfig:
    """Build a RunConfig from a JSON document, rejecting unknown sections and keys."""
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    for section, body in doc.items():
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(body, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        for key in body:
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
    try:
        data = dict(doc.get("data", {}))
        sizes = {k: int(data.pop(k, v)) for k, v in DATA_SIZES.items()}
        if any(v < 0 for v in sizes.values()):
            raise ValueError("split sizes must be non-negative")
        spec = SyntheticSpec.from_dict(data)
        model = BackboneConfig(**{k: tuple(v) if isinstance(v, list) else v
                                  for k, v in doc.get("model", {}).items()})
        consistency = ConsistencyConfig(**doc.get("consistency", {}))
        train = TrainConfig(**doc.get("train", {}), consistency=consistency)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid config: {exc}") from None
    return RunConfig(spec, sizes, model, train, dict(doc.get("paths", {})))


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from None
    return parse_run_config(doc)


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    """Command-line flags win over the config file."""
    train_over = {}
    if getattr(args, "seed", None) is not None:
        train_over["seed"] = args.seed
        cfg.spec = dataclasses.replace(cfg.spec, seed=args.seed)
    if getattr(args, "variant", None) is not None:
        train_over["variant"] = args.variant
    if getattr(args, "epochs", None) is not None:
        train_over["epochs"] = args.epochs
    if train_over:
        try:
            cfg.train = dataclasses.replace(cfg.train, **train_over)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    for key in PATH_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            cfg.paths[key] = str(value)
    return cfg


def _require_path(cfg: RunConfig, key: str) -> Path:
    if key not in cfg.paths:
        raise ConfigError(f"missing --{key} (or paths.{key} in the config)")
    return Path(cfg.paths[key])


def _model_config_near(checkpoint: Path, fallback: BackboneConfig) -> BackboneConfig:
    """Use the ``model`` section echoed next to a checkpoint when there is one."""
    sidecar = checkpoint.parent / "config.json"
    if sidecar.is_file():
        doc = json.loads(sidecar.read_text())
        if isinstance(doc, dict) and "model" in doc:
            return parse_run_config({"model": doc["model"]}).model
    return fallback


def _load_model(cfg: RunConfig, checkpoint: Path):
    if not checkpoint.is_file():
        raise ConfigError(f"checkpoint not found: {checkpoint}")
    try:
        return model_from_checkpoint(checkpoint, _model_config_near(checkpoint, cfg.model))
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"{checkpoint}: {exc}") from None


def _load_split(root: Path, split: str):
    path = root / split
    if not path.is_dir():
        raise ConfigError(f"dataset split not found: {path}")
    return load_dataset(path, split)


# -- commands -----------------------------------------------------------------------

def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = _require_path(cfg, "out")
    try:
        cfg.spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    for split in SPLITS:
        n = cfg.sizes[f"n_{split}"]
        export_dataset(generate(cfg.spec, n, split), out / split, cfg.spec)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    print(json.dumps({"out": str(out), **{f"n_{s}": cfg.sizes[f"n_{s}"] for s in SPLITS}}))
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    data, out = _require_path(cfg, "data"), _require_path(cfg, "out")
    train, val = _load_split(data, "train"), _load_split(data, "val")
    stage_one = None
    if cfg.train.variant == "fix" and args.stage_one is not None:
        stage_one = _stage_one_from(cfg, Path(args.stage_one))
    result = fit(cfg.train, train, val, backbone=cfg.model, stage_one=stage_one)
    write_run(result, out, cfg.to_dict())
    print(json.dumps({"out": str(out), "best_epoch": result.best_epoch,
                      "val_mA": result.best_report.mA if result.best_report else None}))
    return EXIT_OK


def _stage_one_from(cfg: RunConfig, checkpoint: Path):
    """Wrap a saved baseline checkpoint so the fix variant can skip stage one."""
    model = _load_model(cfg, checkpoint)
    state = load_checkpoint(checkpoint)
    return FitResult(dataclasses.replace(cfg.train, variant="baseline").resolved(), model, None,
                     [], state, -1, None)


def cmd_eval(cfg: RunConfig, args) -> int:
    checkpoint, data = _require_path(cfg, "checkpoint"), _require_path(cfg, "data")
    model = _load_model(cfg, checkpoint)
    ds = _load_split(data, args.split)
    probs, _ = predict(model, ds)
    report = evaluate(probs, ds.labels, attribute_names=ds.attribute_names)
    print(report.to_json())
    return EXIT_OK


def cmd_analyze(cfg: RunConfig, args) -> int:
    data, out = _require_path(cfg, "data"), _require_path(cfg, "out")
    if args.mode == "sweep":
        if args.param is None or args.values is None:
            raise ConfigError("--mode sweep needs --param and --values")
        try:
            values = [float(v) for v in args.values.split(",") if v.strip()]
        except ValueError:
            raise ConfigError(f"--values must be comma-separated numbers: {args.values!r}") from None
        train, val = _load_split(data, "train"), _load_split(data, "val")
        test = _load_split(data, "test") if (data / "test").is_dir() else None
        try:
            rows = analysis.sweep(cfg.train, args.param, values, train, val, test, cfg.model)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"sweep_{args.param}.csv"
        path.write_text(analysis.sweep_csv(rows))
        print(json.dumps({"table": str(path), "rows": len(rows)}))
        return EXIT_OK

    model = _load_model(cfg, _require_path(cfg, "checkpoint"))
    ds = _load_split(data, args.split)
    if args.mode == "cams":
        samples = range(min(args.samples, len(ds)))
        attrs = range(ds.num_attributes) if args.attributes is None else \
            [int(a) for a in args.attributes.split(",")]
        paths = analysis.export_cams(model, ds, samples, attrs, out)
        print(json.dumps({"out": str(out), "heatmaps": len(paths)}))
    else:
        written = []
        for kind in ("spatial", "semantic"):
            dists = analysis.similarity_distributions(model, ds, kind, args.max_pairs,
                                                      seed=cfg.train.seed)
            written += analysis.write_histograms(dists, out, kind)
            print(json.dumps({"kind": kind, "mean_frac_high": analysis.mean_high_fraction(dists)}))
        log.info("wrote %d histogram files to %s", len(written), out)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "analyze": cmd_analyze}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssclab", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="overrides data and training seeds")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, *, data=True, out=True, checkpoint=False):
        p.add_argument("--config", help="RunConfig JSON file")
        if data:
            p.add_argument("--data", help="dataset root holding train/val/test splits")
        if out:
            p.add_argument("--out", help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", help="SSCCKPT1 checkpoint file")

    p = sub.add_parser("gen-data", help="render the synthetic corpus")
    common(p, data=False)
    p = sub.add_parser("train", help="train one variant")
    common(p)
    p.add_argument("--variant", choices=("baseline", "soft", "hard", "fix"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--stage-one", help="baseline checkpoint to reuse for the fix variant")
    p = sub.add_parser("eval", help="print an EvalReport as JSON")
    common(p, out=False, checkpoint=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p = sub.add_parser("analyze", help="heatmaps, similarity histograms or sweeps")
    common(p, checkpoint=True)
    p.add_argument("--mode", required=True, choices=("cams", "sim", "sweep"))
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--samples", type=int, default=3)
    p.add_argument("--attributes", help="comma-separated attribute indices (default all)")
    p.add_argument("--max-pairs", type=int, default=2000)
    p.add_argument("--param", choices=analysis.SWEEP_PARAMS)
    p.add_argument("--values", help="comma-separated grid, e.g. 0,0.5,0.9")
    p.add_argument("--epochs", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = apply_overrides(load_run_config(args.config), args)
        if args.verbose:
            print(json.dumps(cfg.to_dict(), sort_keys=True), file=sys.stderr)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"ssclab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DatasetFormatError as exc:
        print(f"ssclab: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FloatingPointError as exc:
        print(f"ssclab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"ssclab: I/O error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
