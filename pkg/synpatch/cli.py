""" Command line front end.

    synpatch datagen --out runs/data
    synpatch sweep   --model pythia/model.safetensors --tokenizer pythia --data runs/data --out runs/sweep
    synpatch das     --config das.json --out runs/das
    synpatch steer   --config steer.json --benchmark blimp.jsonl --out runs/steer
    synpatch validate --data runs/data

Settings come from one JSON file (--config) and flags override it. Every
command writes manifest.json into its output directory.

Exit codes: 0 success, 1 validation or invariant failure, 2 input error.
"""

# Core Python imports.
import argparse
from dataclasses import asdict, dataclass, field, fields
import json
import os
import sys
import time

# 3rd party imports.
from loguru import logger
import pandas as pd

# Local imports.
from .das import DasDirection, DasTrainConfig, leave_one_out
from .datagen import build_splits, check_disjoint, default_sizes, default_templates, load_vocabulary, read_split, symmetrize, validate, write_split
from .errors import (
    AlignmentError,
    ArchiveError,
    ConfigError,
    DatasetError,
    HookPointError,
    InterventionError,
    SequenceError,
    SynpatchError,
    TokenizerError,
    VocabularyError
)
from .intervention import HookPoint, Intervention, Scale
from .metrics import average_heatmaps, benchmark_accuracy, read_benchmark
from .sweep import component_grid, head_grid, hookpoint_grid, run_sweep, tokenize_pairs
from .tensor import dtypes
from .transformer import ModelConfig, Tokenizer, load_model
from .utils import __version__, configure_logging, default_alpha_grid, default_steering_heads, dump_json, sha256_file, write_atomic

#------------------------------------------------------------------------------
# Constants.
commands = ("datagen", "sweep", "das", "steer", "validate")

exit_ok = 0
exit_failed = 1
exit_input = 2

# Errors that mean the user's inputs are wrong, rather than the computation.
_input_errors = (
    AlignmentError,
    ArchiveError,
    ConfigError,
    DatasetError,
    HookPointError,
    InterventionError,
    SequenceError,
    TokenizerError,
    VocabularyError
)

component_kinds = ("resid", "attn", "mlp", "head")

#------------------------------------------------------------------------------
# Configuration.

@dataclass
class ExperimentConfig:
    """ Every setting a command reads. Paths are taken as given.
    """
    model: str = None
    model_config: str = None
    tokenizer: str = None
    data: str = None
    out: str = "synpatch-out"
    seed: int = 0
    dtype: str = "f32"
    workers: int = 1
    log_level: str = "INFO"

    # datagen
    vocab_id: str = None
    vocab_ood: str = None
    sizes: dict = field(default_factory=lambda: dict(default_sizes))
    constructions: list = None
    npi_items: list = field(default_factory=lambda: ["any"])

    # sweep
    kinds: list = field(default_factory=lambda: list(component_kinds))
    positions: list = field(default_factory=lambda: ["-1"])
    head_position: str = "-1"
    intervention: str = "patch"

    # das
    das_hookpoints: list = None
    lr: float = 5e-3
    warmup: float = 0.1
    batch_size: int = 4
    steps: int = 100

    # steer
    benchmark: str = None
    mode: str = "whole"
    steering_heads: list = field(default_factory=lambda: list(default_steering_heads))
    alphas: list = field(default_factory=lambda: list(default_alpha_grid))

    def __post_init__(self):
        if self.dtype not in dtypes:
            raise ConfigError(f"dtype must be one of {sorted(dtypes)}, got '{self.dtype}'")
        if self.workers < 1:
            raise ConfigError(f"workers must be at least 1, got {self.workers}")
        if self.mode not in ("whole", "region"):
            raise ConfigError(f"mode must be 'whole' or 'region', got '{self.mode}'")
        for kind in self.kinds:
            if kind not in component_kinds:
                raise ConfigError(f"unknown component kind '{kind}', expected one of {component_kinds}")
        unknown = set(self.sizes) - set(default_sizes)
        if unknown:
            raise ConfigError(f"unknown split sizes {sorted(unknown)}")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}")
        return cls(**data)

    @classmethod
    def from_json(cls, path):
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"can't read config '{path}': {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"config '{path}' must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self):
        return asdict(self)

    def das_config(self):
        return DasTrainConfig(lr=self.lr, warmup=self.warmup, batch_size=self.batch_size, steps=self.steps, seed=self.seed)

def _flag_overrides(args):
    overrides = {}
    for name in ("model", "model_config", "tokenizer", "data", "out", "seed", "dtype", "workers", "log_level",
                 "benchmark", "intervention", "steps", "lr", "mode"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    if getattr(args, "constructions", None):
        overrides["constructions"] = args.constructions.split(",")
    if getattr(args, "kinds", None):
        overrides["kinds"] = args.kinds.split(",")
    if getattr(args, "positions", None):
        overrides["positions"] = args.positions.split(",")
    if getattr(args, "hookpoints", None):
        overrides["das_hookpoints"] = args.hookpoints.split(",")
    if getattr(args, "heads", None):
        overrides["steering_heads"] = args.heads.split(",")
    if getattr(args, "alphas", None):
        overrides["alphas"] = [float(a) for a in args.alphas.split(",")]
    return overrides

def load_config(args):
    """ Config file values, then flag overrides. Flags win.
    """
    base = {}
    if args.config is not None:
        base = ExperimentConfig.from_json(args.config).to_dict()
    base.update(_flag_overrides(args))
    return ExperimentConfig.from_dict(base)

#------------------------------------------------------------------------------
# Run manifest.

def _hash_paths(path):
    """ sha256 of a file, or of every file under a directory.
    """
    if os.path.isdir(path):
        hashes = {}
        for root, _, names in sorted(os.walk(path)):
            for name in sorted(names):
                full = os.path.join(root, name)
                hashes[full] = sha256_file(full)
        return hashes
    return {path: sha256_file(path)}

@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    version: str = __version__
    exit_code: int = exit_ok

    def add_input(self, path):
        if path is not None and os.path.exists(path):
            self.inputs.update(_hash_paths(path))

    def add_output(self, path):
        self.outputs[os.path.relpath(path, self.config["out"])] = sha256_file(path)

    def to_dict(self):
        return asdict(self)

    def write(self):
        path = os.path.join(self.config["out"], "manifest.json")
        write_atomic(path, dump_json(self.to_dict()))
        return path

#------------------------------------------------------------------------------
# Shared loading.

def _require(path, what):
    if path is None:
        raise ConfigError(f"no {what} given")
    if not os.path.exists(path):
        raise ConfigError(f"{what} '{path}' doesn't exist")
    return path

def _load_model(cfg, manifest):
    model_path = _require(cfg.model, "model weights")
    config_path = cfg.model_config or os.path.join(os.path.dirname(os.path.abspath(model_path)), "config.json")
    _require(config_path, "model config")
    config = ModelConfig.from_json(config_path)
    model = load_model(model_path, config, dtype=cfg.dtype)
    manifest.add_input(model_path)
    manifest.add_input(config_path)
    logger.info(f"Loaded {config.n_layers}-layer, {config.n_heads}-head model from {model_path}")
    return model

def _load_tokenizer(cfg, manifest):
    path = _require(cfg.tokenizer, "tokenizer")
    tokenizer = Tokenizer.from_path(path)
    manifest.add_input(path)
    return tokenizer

def _load_vocabularies(cfg, manifest):
    id_vocab = load_vocabulary(cfg.vocab_id, "ID")
    ood_vocab = load_vocabulary(cfg.vocab_ood, "OOD")
    manifest.add_input(cfg.vocab_id)
    manifest.add_input(cfg.vocab_ood)
    check_disjoint(id_vocab, ood_vocab)
    return id_vocab, ood_vocab

def _load_split(cfg, manifest):
    directory = _require(cfg.data, "dataset directory")
    split = read_split(directory, cfg.constructions)
    manifest.add_input(directory)
    return split

def _tokenized_parts(tokenizer, split, construction, manifest):
    """ Symmetrized and tokenized parts of one construction.
    """
    parts = {}
    for name, pairs in split.select(construction).parts().items():
        tpairs, excluded = tokenize_pairs(tokenizer, symmetrize(pairs))
        manifest.counts[f"{construction}.{name}.pairs"] = len(tpairs)
        manifest.counts[f"{construction}.{name}.excluded"] = excluded
        parts[name] = tpairs
    return parts

def _sweep_grids(cfg, config):
    grids = {}
    for kind in cfg.kinds:
        if kind == "head":
            grids[kind] = head_grid(config, cfg.head_position)
        else:
            grids[kind] = component_grid(kind, config, cfg.positions)
    return grids

def _save_heatmap(heatmap, path, manifest):
    for written in heatmap.save(path):
        manifest.add_output(written)

#------------------------------------------------------------------------------
# Commands.

def cmd_datagen(cfg, manifest):
    """ Generate, validate and write every construction's splits.
    """
    id_vocab, ood_vocab = _load_vocabularies(cfg, manifest)
    split = build_splits(
        default_templates,
        id_vocab,
        ood_vocab,
        cfg.seed,
        sizes=cfg.sizes,
        y_base_items=tuple(cfg.npi_items),
        constructions=cfg.constructions
    )
    tokenizer = _load_tokenizer(cfg, manifest) if cfg.tokenizer else None
    report = validate(split, id_vocab, ood_vocab, cfg.sizes, tokenizer)

    data_dir = os.path.join(cfg.out, "data")
    for path in write_split(data_dir, split):
        manifest.add_output(path)
    report_path = os.path.join(cfg.out, "validation.json")
    write_atomic(report_path, dump_json(report.to_dict()))
    manifest.add_output(report_path)

    for name, pairs in split.parts().items():
        manifest.counts[name] = len(pairs)
    manifest.counts["violations"] = len(report.violations)
    if not report.passed:
        for violation in report.violations[:20]:
            logger.error(f"{violation['kind']} ({violation['construction']}): {violation['detail']}")
        return exit_failed
    logger.success(f"Wrote {len(split.constructions())} constructions to {data_dir}")
    return exit_ok

def _sweep_directions(cfg, config):
    """ (grids, directions) for the configured intervention.
    """
    kind, _, argument = cfg.intervention.partition(":")
    if kind == "patch":
        return _sweep_grids(cfg, config), {}
    if kind == "das":
        direction = DasDirection.load(_require(argument, "direction file"))
        direction.hookpoint.validate(config)
        grid = hookpoint_grid([direction.hookpoint])
        return {"das": grid}, {"das": {(0, 0): direction.vector}}
    if kind == "scale":
        raise ConfigError("scale interventions are evaluated with 'steer', not 'sweep'")
    raise ConfigError(f"unknown intervention '{cfg.intervention}', expected patch, das:<file> or scale:<alpha>")

def cmd_sweep(cfg, manifest):
    """ ID, OOD and averaged odds heatmaps per (construction, component kind).
    """
    model = _load_model(cfg, manifest)
    tokenizer = _load_tokenizer(cfg, manifest)
    split = _load_split(cfg, manifest)
    grids, directions = _sweep_directions(cfg, model.config)
    if cfg.intervention.startswith("das:"):
        manifest.add_input(cfg.intervention.partition(":")[2])

    forward_passes = 0
    planned = 0
    for construction in split.constructions():
        parts = _tokenized_parts(tokenizer, split, construction, manifest)
        for kind, grid in grids.items():
            heatmaps = {}
            for distribution, part in (("id", "id_test"), ("ood", "ood_test")):
                if not parts[part]:
                    logger.warning(f"{construction}: no {part} pairs, skipping {kind} {distribution}")
                    continue
                metadata = {"construction": construction, "component": kind, "distribution": distribution, "intervention": cfg.intervention}
                heatmaps[distribution], stats = run_sweep(
                    model, parts[part], grid, directions.get(kind), cfg.workers, metadata, desc=f"{construction} {kind} {distribution}"
                )
                forward_passes += stats["forward_passes"]
                planned += stats["forward_passes_planned"]
            if heatmaps:
                heatmaps["avg"] = average_heatmaps(heatmaps.values(), {"construction": construction, "component": kind, "distribution": "avg"})
            for distribution, heatmap in heatmaps.items():
                _save_heatmap(heatmap, os.path.join(cfg.out, "sweep", f"{construction}.{kind}.{distribution}.csv"), manifest)

    manifest.counts["forward_passes"] = forward_passes
    manifest.counts["forward_passes_planned"] = planned
    return exit_ok

def _das_grid(cfg, config):
    if cfg.das_hookpoints:
        grid = hookpoint_grid(cfg.das_hookpoints)
    else:
        grid = component_grid("resid", config, cfg.positions)
    for hookpoint in grid.hookpoints():
        hookpoint.validate(config)
    return grid

def cmd_das(cfg, manifest):
    """ Leave-one-out DAS over the configured constructions and hook points.
    """
    model = _load_model(cfg, manifest)
    tokenizer = _load_tokenizer(cfg, manifest)
    split = _load_split(cfg, manifest)
    grid = _das_grid(cfg, model.config)

    data = {c: _tokenized_parts(tokenizer, split, c, manifest) for c in split.constructions()}
    plan = leave_one_out(model, data, grid, cfg.das_config(), cfg.workers)

    for fold in plan.folds:
        fold_dir = os.path.join(cfg.out, "das", fold.held_out)
        for cell in sorted(fold.directions):
            direction = fold.directions[cell]
            path = os.path.join(fold_dir, f"{direction.hookpoint}.direction.json")
            manifest.add_output(direction.save(path))
        for distribution, heatmap in fold.heatmaps.items():
            _save_heatmap(heatmap, os.path.join(fold_dir, f"{distribution}.csv"), manifest)
    manifest.counts["folds"] = len(plan.folds)
    manifest.counts["directions"] = sum(len(f.directions) for f in plan.folds)
    return exit_ok

def _steering_interventions(cfg, config, alpha):
    interventions = []
    for head in cfg.steering_heads:
        hookpoint = HookPoint.parse(f"head.{head}@*").validate(config)
        interventions.append(Intervention(hookpoint, Scale(alpha)))
    return interventions

def cmd_steer(cfg, manifest):
    """ Benchmark accuracy with the steering heads scaled by each alpha.
    """
    model = _load_model(cfg, manifest)
    tokenizer = _load_tokenizer(cfg, manifest)
    benchmark = _require(cfg.benchmark, "benchmark file")
    pairs = read_benchmark(benchmark)
    manifest.add_input(benchmark)

    alphas = list(cfg.alphas)
    kind, _, argument = cfg.intervention.partition(":")
    if kind == "scale":
        try:
            alphas = [float(argument)]
        except ValueError as e:
            raise ConfigError(f"bad scale '{cfg.intervention}'") from e
    elif kind != "patch":
        raise ConfigError(f"steer takes scale:<alpha> interventions, got '{cfg.intervention}'")

    # Check every head up front so a bad one fails before any scoring.
    _steering_interventions(cfg, model.config, 1.0)

    baseline = benchmark_accuracy(model, tokenizer, pairs, cfg.mode)
    rows = []
    for alpha in alphas:
        report = benchmark_accuracy(model, tokenizer, pairs, cfg.mode, _steering_interventions(cfg, model.config, alpha))
        rows.append(dict(alpha=alpha, **report.to_dict()))
        logger.info(f"alpha {alpha}: accuracy {report.accuracy:.4f} ({report.correct}/{report.total})")

    result = {
        "mode": cfg.mode,
        "heads": list(cfg.steering_heads),
        "baseline": baseline.to_dict(),
        "rows": rows
    }
    json_path = os.path.join(cfg.out, "steer.json")
    write_atomic(json_path, dump_json(result))
    manifest.add_output(json_path)

    table = pd.DataFrame([
        {"alpha": row["alpha"], "category": category, "correct": c["correct"], "total": c["total"], "accuracy": c["correct"] / c["total"]}
        for row in rows
        for category, c in row["categories"].items()
    ], columns=["alpha", "category", "correct", "total", "accuracy"])
    csv_path = os.path.join(cfg.out, "steer.csv")
    write_atomic(csv_path, table.to_csv(index=False, float_format="%.10g", lineterminator="\n"))
    manifest.add_output(csv_path)

    manifest.counts["benchmark_pairs"] = len(pairs)
    manifest.counts["filtered"] = baseline.filtered
    return exit_ok

def cmd_validate(cfg, manifest):
    """ Re-run dataset validation on a generated directory.
    """
    id_vocab, ood_vocab = _load_vocabularies(cfg, manifest)
    split = _load_split(cfg, manifest)
    # Control distances count model tokens when a tokenizer is configured.
    tokenizer = _load_tokenizer(cfg, manifest) if cfg.tokenizer else None
    report = validate(split, id_vocab, ood_vocab, cfg.sizes, tokenizer)

    report_path = os.path.join(cfg.out, "validation.json")
    write_atomic(report_path, dump_json(report.to_dict()))
    manifest.add_output(report_path)
    manifest.counts["violations"] = len(report.violations)
    if not report.passed:
        for violation in report.violations[:20]:
            logger.error(f"{violation['kind']} ({violation['construction']}): {violation['detail']}")
        return exit_failed
    return exit_ok

_handlers = {
    "datagen": cmd_datagen,
    "sweep": cmd_sweep,
    "das": cmd_das,
    "steer": cmd_steer,
    "validate": cmd_validate
}

#------------------------------------------------------------------------------
# Entry point.

def build_parser():
    parser = argparse.ArgumentParser(prog="synpatch", description="Causal interventions on GPT-NeoX style language models.")
    parser.add_argument("--version", action="version", version=f"synpatch {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    for command in commands:
        sub = subparsers.add_parser(command, help=_handlers[command].__doc__.strip())
        sub.add_argument("--config", help="experiment config JSON")
        sub.add_argument("--model", help="safetensors weight archive")
        sub.add_argument("--model-config", dest="model_config", help="model config JSON (default: config.json next to the weights)")
        sub.add_argument("--tokenizer", help="tokenizer.json, or a directory with vocab.json and merges.txt")
        sub.add_argument("--data", help="dataset directory")
        sub.add_argument("--out", help="output directory")
        sub.add_argument("--seed", type=int)
        sub.add_argument("--dtype", choices=sorted(dtypes))
        sub.add_argument("--workers", type=int)
        sub.add_argument("--log-level", dest="log_level")
        sub.add_argument("--constructions", help="comma separated construction ids")

    subparsers.choices["sweep"].add_argument("--kinds", help="comma separated component kinds")
    subparsers.choices["sweep"].add_argument("--positions", help="comma separated positions")
    subparsers.choices["sweep"].add_argument("--intervention", help="patch or das:<direction file>")
    subparsers.choices["das"].add_argument("--hookpoints", help="comma separated hook points")
    subparsers.choices["das"].add_argument("--positions", help="comma separated resid positions")
    subparsers.choices["das"].add_argument("--steps", type=int)
    subparsers.choices["das"].add_argument("--lr", type=float)
    subparsers.choices["steer"].add_argument("--benchmark", help="benchmark JSONL")
    subparsers.choices["steer"].add_argument("--heads", help="comma separated layer.head targets")
    subparsers.choices["steer"].add_argument("--alphas", help="comma separated scaling factors")
    subparsers.choices["steer"].add_argument("--intervention", help="scale:<alpha>")
    subparsers.choices["steer"].add_argument("--mode", choices=("whole", "region"))
    return parser

def run(argv=None):
    """ Parse argv, run one command and return its exit code.
    """
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level or "INFO")

    try:
        cfg = load_config(args)
    except (ConfigError, ValueError) as e:
        logger.error(str(e))
        return exit_input
    configure_logging(cfg.log_level)

    manifest = RunManifest(args.command, cfg.to_dict())
    manifest.add_input(args.config)
    started = time.perf_counter()
    try:
        code = _handlers[args.command](cfg, manifest)
    except _input_errors as e:
        logger.error(f"{type(e).__name__}: {e}")
        return exit_input
    except OSError as e:
        logger.error(f"{e}")
        return exit_input
    except SynpatchError as e:
        logger.error(f"{type(e).__name__}: {e}")
        code = exit_failed

    manifest.wall_clock_seconds = round(time.perf_counter() - started, 3)
    manifest.exit_code = code
    manifest.write()
    return code

def main():
    sys.exit(run())

if __name__ == "__main__":
    main()
