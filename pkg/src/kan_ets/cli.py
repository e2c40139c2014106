"""Command-line entry point: ``kan-ets {generate,train,evaluate,stability,report}``.

A run is described by one JSON document with optional sections::

    {"dataset": {"preset": 1, "n_sites": 8, ...},
     "model":   {"kind": "kan", "architecture": "[500,100,500]"},
     "train":   {"learning_rate": 5e-4, "epochs": 3000, "lam": 1.0, ...},
     "eval":    {"formats": ["csv", "json", "svg"], "overlays": 0, "n_partitions": 10},
     "io":      {"dataset": "data.json", "checkpoint": "model.json"}}

Command-line flags override file fields.  Exit codes: 0 success, 2 bad
configuration, 3 bad or missing data/checkpoint, 4 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from kan_ets.chain_kan import ChainModel, chain_from_dict, chain_to_dict
from kan_ets.datasets import DatasetError, DatasetRecipe, generate_dataset, load_dataset, preset_recipe, save_dataset
from kan_ets.evaluation import R2Report, R2Entry, StabilityTable, emit_report, evaluate, stability_experiment
from kan_ets.kan import CheckpointError, network_from_dict, network_to_dict, parse_architecture
from kan_ets.spin_dynamics import DEFAULT_CHAIN, SimulationError
from kan_ets.training import ConfigError, ModelSpec, TrainConfig, TrainingDiverged, train

log = logging.getLogger("kan_ets")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
MODEL_KINDS = {"kan": ("kan", "spline"), "wavkan": ("kan", "wavelet"), "chain": ("chain", "spline")}
DATASET_FIELDS = ("amplitudes", "n_frequencies", "omega_min", "omega_max", "n_steps")


class DataError(RuntimeError):
    """Missing or inconsistent dataset/checkpoint files."""


@dataclass
class RunConfig:
    recipe: DatasetRecipe
    model: ModelSpec
    train: TrainConfig
    seed: int = 0
    fraction: float = 0.8
    formats: tuple = ("csv", "json", "svg")
    overlays: int = 0
    n_partitions: int = 10
    threads: int = 1
    io: dict = field(default_factory=dict)
    model_kind: str = "kan"
    preset: int | None = None

    def to_dict(self) -> dict:
        return {
            "dataset": {"preset": self.preset, **self.recipe.to_dict()},
            "model": {"kind": self.model_kind, **self.model.to_dict()},
            "train": self.train.to_dict(),
            "eval": {"formats": list(self.formats), "overlays": self.overlays, "n_partitions": self.n_partitions},
            "split": {"fraction": self.fraction, "seed": self.seed},
            "threads": self.threads,
            "io": self.io,
        }


# ---------------------------------------------------------------------------
# configuration


def _resolve_recipe(section: dict, preset_flag, sites_flag) -> tuple[DatasetRecipe, int | None]:
    section = dict(section)
    file_preset = section.pop("preset", None)
    preset = preset_flag if preset_flag is not None else file_preset
    if preset_flag is not None and file_preset is not None and preset_flag != file_preset:
        log.info("--preset %s overrides config preset %s", preset_flag, file_preset)
    n_sites = sites_flag if sites_flag is not None else section.pop("n_sites", DEFAULT_CHAIN.n_sites)
    section.pop("n_sites", None)
    chain_fields = {k: section.pop(k) for k in ("jz", "hx", "hz") if k in section}
    unknown = set(section) - set(DATASET_FIELDS)
    if unknown:
        raise ConfigError(f"unknown dataset fields {sorted(unknown)}")
    if preset is not None:
        try:
            base = preset_recipe(int(preset), int(n_sites))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        for key, value in section.items():
            old = getattr(base, key)
            log.info("dataset field %s=%r overrides preset %s value %r", key, value, preset, old)
    elif not section:
        raise ConfigError("no dataset given: use --preset or a dataset section in --config")
    else:
        base = None
    chain = replace(DEFAULT_CHAIN.with_sites(int(n_sites)), **chain_fields)
    if base is None:
        missing = {"amplitudes", "n_frequencies"} - set(section)
        if missing:
            raise ConfigError(f"dataset section without a preset needs {sorted(missing)}")
        kwargs = {k: section[k] for k in DATASET_FIELDS if k in section}
        kwargs["amplitudes"] = tuple(kwargs["amplitudes"])
        return DatasetRecipe(chain=chain, **kwargs), None
    over = dict(section)
    if "amplitudes" in over:
        over["amplitudes"] = tuple(over["amplitudes"])
    return replace(base, chain=chain, **over), int(preset)


def _resolve_model(section: dict, n_steps: int, seed: int) -> tuple[ModelSpec, str]:
    section = dict(section)
    kind = section.pop("kind", "kan")
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}; expected one of {sorted(MODEL_KINDS)}")
    family, layer = MODEL_KINDS[kind]
    layer = section.pop("layer", layer)
    window = section.pop("window", None)
    default_arch = (n_steps, 100, n_steps) if family == "kan" else (window or n_steps, 3, 1)
    try:
        arch = parse_architecture(section.pop("architecture", default_arch))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if family == "chain" and window is None:
        window = arch[0]
    extra = {k: section.pop(k) for k in ("output_layer_scale",) if k in section}
    if section:
        raise ConfigError(f"unknown model fields {sorted(section)}")
    return ModelSpec(arch, layer, family, window, seed, **extra), kind


def resolve_config(args) -> RunConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from None
        unknown = set(doc) - {"dataset", "model", "train", "eval", "io", "seed", "threads", "split"}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
    io = dict(doc.get("io", {}))
    for key in ("dataset", "checkpoint", "report"):
        value = getattr(args, key, None)
        if value is not None:
            io[key] = value

    seed = args.seed if args.seed is not None else int(doc.get("seed", 0))
    split = doc.get("split", {})
    fraction = float(split.get("fraction", 0.8))

    # When a dataset file is given its recipe is authoritative.
    ds_section = doc.get("dataset", {})
    if args.command == "report" or (
        args.command != "generate" and io.get("dataset") and args.preset is None and not ds_section
    ):
        recipe, preset = None, None
    else:
        recipe, preset = _resolve_recipe(ds_section, args.preset, args.sites)

    train_section = dict(doc.get("train", {}))
    for flag, key in (("epochs", "epochs"), ("lam", "lam"), ("lr", "learning_rate")):
        value = getattr(args, flag, None)
        if value is not None:
            train_section[key] = value
    if getattr(args, "allow_out_of_range", False):
        train_section["allow_out_of_range"] = True
    train_section.setdefault("seed", seed)
    if args.seed is not None:
        train_section["seed"] = seed
    tcfg = TrainConfig.from_dict(train_section)

    ev = doc.get("eval", {})
    formats = tuple(ev.get("formats", ("csv", "json", "svg")))
    bad = set(formats) - {"csv", "json", "svg"}
    if bad:
        raise ConfigError(f"unknown report formats {sorted(bad)}")
    n_partitions = getattr(args, "partitions", None) or int(ev.get("n_partitions", 10))

    threads = args.threads or int(os.environ.get("KAN_ETS_THREADS", 0) or doc.get("threads", 1))
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")

    cfg = RunConfig(recipe=recipe, model=None, train=tcfg, seed=seed, fraction=fraction, formats=formats,
                    overlays=int(ev.get("overlays", 0)), n_partitions=n_partitions, threads=threads, io=io,
                    preset=preset)
    cfg._model_section = doc.get("model", {})
    if getattr(args, "model", None):
        cfg._model_section = {**cfg._model_section, "kind": args.model}
    if getattr(args, "architecture", None):
        cfg._model_section = {**cfg._model_section, "architecture": args.architecture}
    if recipe is not None:
        cfg.model, cfg.model_kind = _resolve_model(cfg._model_section, recipe.n_steps, seed)
    return cfg


def _finish_model(cfg: RunConfig, n_steps: int):
    if cfg.model is None or cfg.recipe is None:
        cfg.model, cfg.model_kind = _resolve_model(cfg._model_section, n_steps, cfg.seed)


# ---------------------------------------------------------------------------
# files


def _load_dataset(path):
    if not path:
        raise DataError("no dataset file given (use --dataset or io.dataset)")
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise DataError(f"dataset file {path} not found") from None
    except (DatasetError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"dataset file {path}: {exc}") from None


def save_model(model, path) -> None:
    doc = chain_to_dict(model) if isinstance(model, ChainModel) else network_to_dict(model)
    Path(path).write_text(json.dumps(doc), encoding="utf-8")


def load_model(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return chain_from_dict(doc) if "n_members" in doc else network_from_dict(doc)
    except FileNotFoundError:
        raise DataError(f"checkpoint {path} not found") from None
    except (json.JSONDecodeError, CheckpointError, KeyError, TypeError, ValueError) as exc:
        raise DataError(f"checkpoint {path}: {exc}") from None


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _tag(cfg: RunConfig, dataset=None) -> str:
    ds_id = f"p{cfg.preset}" if cfg.preset else "custom"
    if dataset is not None and cfg.preset is None:
        ds_id = f"n{len(dataset)}"
    arch = "-".join(str(w) for w in cfg.model.architecture) if cfg.model else "model"
    return f"{ds_id}_{cfg.model_kind}{arch}_s{cfg.seed}"


def _write_reports(obj, stem: Path, formats, **kw) -> list[Path]:
    written = []
    for fmt in formats:
        written += emit_report(obj, stem.with_suffix(f".{fmt}"), fmt, **kw)
    return written


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg: RunConfig, args) -> int:
    t0 = time.perf_counter()
    ds = generate_dataset(cfg.recipe, threads=cfg.threads)
    path = Path(cfg.io.get("dataset") or _out_dir(args) / f"dataset_{_tag(cfg).split('_')[0]}_N{cfg.recipe.chain.n_sites}.json")
    if cfg.io.get("dataset"):
        path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, path)
    print(f"wrote {len(ds)} samples to {path} in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


def _prepared(cfg: RunConfig, ds):
    if ds.split is not None and ds.scaler is not None and ds.split.seed == cfg.seed:
        return ds
    return ds.prepared(cfg.fraction, cfg.seed)


def _dataset_for(cfg: RunConfig):
    if cfg.io.get("dataset"):
        ds = _load_dataset(cfg.io["dataset"])
        if cfg.recipe is not None and cfg.recipe != ds.recipe:
            log.info("dataset file recipe differs from the configured recipe; using the file")
        cfg.recipe = ds.recipe
        cfg.model = None
    else:
        ds = generate_dataset(cfg.recipe, threads=cfg.threads)
    _finish_model(cfg, ds.recipe.n_steps)
    return ds


def cmd_train(cfg: RunConfig, args) -> int:
    ds = _prepared(cfg, _dataset_for(cfg))
    model = cfg.model.build(ds.recipe.n_steps)
    out = _out_dir(args)
    tag = _tag(cfg, ds)
    ckpt = Path(cfg.io.get("checkpoint") or out / f"model_{tag}.json")
    try:
        result = train(model, ds, cfg.train)
    except TrainingDiverged as exc:
        save_model(exc.model, ckpt)
        manifest = {"config": cfg.to_dict(), "diverged_at_epoch": exc.epoch, "error": str(exc),
                    "history": [h.__dict__ for h in exc.history], "checkpoint": str(ckpt)}
        (out / f"manifest_{tag}.json").write_text(json.dumps(manifest, indent=1))
        print(f"training diverged: {exc}; last good parameters saved to {ckpt}", file=sys.stderr)
        return EXIT_DIVERGED
    save_model(model, ckpt)
    manifest = result.manifest(cfg.train, cfg.model, ckpt)
    manifest["config"] = cfg.to_dict()
    manifest["split"] = {"train": list(ds.split.train), "test": list(ds.split.test), "seed": ds.split.seed}
    (out / f"manifest_{tag}.json").write_text(json.dumps(manifest, indent=1))
    last = result.history[-1]
    print(f"trained {len(result.history)} epochs in {result.wall_clock:.1f} s: "
          f"mse={last.mse:.3e} penalty={last.penalty:.3e}; checkpoint {ckpt}")
    if args.evaluate_after:
        return _evaluate(cfg, ds, model, out, tag)
    return EXIT_OK


def _evaluate(cfg, ds, model, out, tag) -> int:
    rep = evaluate(model, ds, metadata={"config": cfg.to_dict()})
    written = _write_reports(rep, out / f"r2_{tag}", cfg.formats, dataset=ds, model=model, overlays=cfg.overlays)
    for t, s in rep.summary().items():
        print(f"R²>{t}: {s['count']}/{s['total']} ({100 * s['fraction']:.1f}%)")
    print("wrote " + ", ".join(str(p) for p in written))
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    if not cfg.io.get("checkpoint"):
        raise DataError("no checkpoint given (use --checkpoint or io.checkpoint)")
    model = load_model(cfg.io["checkpoint"])
    ds = _dataset_for(cfg)
    n = ds.recipe.n_steps
    if model.architecture[0] != n or model.architecture[-1] != n:
        raise DataError(f"checkpoint maps {model.architecture[0]}->{model.architecture[-1]} steps "
                        f"but the dataset has N_T={n}")
    ds = _prepared(cfg, ds)
    cfg.model = replace(cfg.model, architecture=getattr(model, "member_architecture", model.architecture))
    cfg.model_kind = "chain" if isinstance(model, ChainModel) else ("kan" if model.kind == "spline" else "wavkan")
    return _evaluate(cfg, ds, model, _out_dir(args), _tag(cfg, ds))


def cmd_stability(cfg: RunConfig, args) -> int:
    ds = _dataset_for(cfg)
    out = _out_dir(args)
    try:
        table = stability_experiment(ds, cfg.model, cfg.train, cfg.n_partitions, cfg.fraction,
                                     on_row=lambda r: print(f"partition {r['seed']}: {r['0.98']:.3f} "
                                                            f"{r['0.95']:.3f} {r['0.9']:.3f}", flush=True))
    except RuntimeError as exc:
        if isinstance(exc.__cause__, TrainingDiverged):
            print(str(exc), file=sys.stderr)
            return EXIT_DIVERGED
        raise
    table.metadata["config"] = cfg.to_dict()
    written = _write_reports(table, out / f"stability_{_tag(cfg, ds)}", cfg.formats)
    means = table.means()
    print(f"means: R²>0.98 {means['0.98']:.3f}  R²>0.95 {means['0.95']:.3f}  R²>0.9 {means['0.9']:.3f}")
    print("wrote " + ", ".join(str(p) for p in written))
    return EXIT_OK


def cmd_report(cfg: RunConfig, args) -> int:
    """Re-render a saved R² report or stability table (JSON) in the requested formats."""
    src = cfg.io.get("report")
    if not src:
        raise DataError("no report given (use --report PATH)")
    try:
        doc = json.loads(Path(src).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"report {src} not found") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"report {src} is not valid JSON: {exc}") from None
    if "entries" in doc:
        obj = R2Report([R2Entry(**e) for e in doc["entries"]], doc.get("metadata", {}))
        for t, s in obj.summary().items():
            print(f"R²>{t}: {s['count']}/{s['total']} ({100 * s['fraction']:.1f}%)")
    elif "rows" in doc:
        obj = StabilityTable(doc["rows"], doc.get("metadata", {}))
        print("seed  R²>0.98  R²>0.95  R²>0.9")
        for r in obj.rows:
            print(f"{r['seed']:>4}  {r['0.98']:.3f}    {r['0.95']:.3f}    {r['0.9']:.3f}")
        m = obj.means()
        print(f"mean  {m['0.98']:.3f}    {m['0.95']:.3f}    {m['0.9']:.3f}")
    else:
        raise DataError(f"{src} is neither an R² report nor a stability table")
    formats = [f for f in cfg.formats if f != "json"]
    written = _write_reports(obj, _out_dir(args) / Path(src).stem, formats)
    print("wrote " + ", ".join(str(p) for p in written))
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
            "stability": cmd_stability, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="JSON run configuration")
    common.add_argument("--preset", type=int, choices=(1, 2, 3, 4), help="dataset recipe preset")
    common.add_argument("--seed", type=int, help="split / initialisation / shuffling seed")
    common.add_argument("--sites", type=int, help="spin-chain length used to simulate data")
    common.add_argument("--threads", type=int, help="worker cap (default: $KAN_ETS_THREADS or 1)")
    common.add_argument("--out", default="runs", metavar="DIR", help="output directory (default: runs)")
    common.add_argument("--dataset", metavar="PATH", help="dataset file")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="kan-ets", description="Ehrenfest-penalized KANs for driven spin-chain time series")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate a dataset")

    model_opts = argparse.ArgumentParser(add_help=False)
    model_opts.add_argument("--model", choices=sorted(MODEL_KINDS), help="model family")
    model_opts.add_argument("--architecture", help='width tuple, e.g. "[500,100,500]"')
    model_opts.add_argument("--epochs", type=int)
    model_opts.add_argument("--lam", type=float, help="penalty weight λ")
    model_opts.add_argument("--lr", type=float, help="learning rate")
    model_opts.add_argument("--allow-out-of-range", action="store_true",
                            help="accept learning rates / epoch counts outside the supported ranges")

    p = sub.add_parser("train", parents=[common, model_opts], help="train a model")
    p.add_argument("--checkpoint", metavar="PATH", help="where to write the trained model")
    p.add_argument("--evaluate-after", action="store_true", help="also write the R² report")
    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on the test split")
    p.add_argument("--checkpoint", metavar="PATH", required=False)
    p = sub.add_parser("stability", parents=[common, model_opts], help="repeat split/train/evaluate over seeds 1..n")
    p.add_argument("--partitions", type=int, help="number of partitions (default 10)")
    p = sub.add_parser("report", parents=[common], help="re-render a saved report or stability table")
    p.add_argument("--report", metavar="PATH", help="report or table JSON")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
    except (ConfigError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=cfg.threads):
            return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DatasetError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except SimulationError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
