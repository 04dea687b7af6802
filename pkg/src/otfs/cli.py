"""Command-line entry point.

Exit codes: 0 success, 2 usage error (usage text on stderr), 1 runtime
failure (one JSON error record on stderr).  Metric output is JSON lines on
stdout; every record carries the resolved config hash and seed.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .dyce import DyceConfig
from .episodes import (
    EpisodeSpec,
    LabeledEmbeddingSet,
    PipelineConfig,
    SyntheticSpec,
    center_scale_for_separation,
    evaluate,
    gen_synthetic,
)
from .errors import ConfigError, ConvergenceError, OTFSError
from .experiments import ABLATION_AXES, ablation_cell, encode_set, parse_axis_values, simulate_memory
from .formats import decode_encoder, encode_encoder, read_embeddings, read_matrix, write_embeddings
from .loss import LossConfig
from .opta import NearestPrototype, OptaConfig, class_prototypes, fit_logistic, opta_iterate, predict
from .ot import SinkhornConfig, sinkhorn, transport_cost, uniform
from .pretrain import LinearEncoder, TrainConfig, run_pretraining

COMMANDS = ("sinkhorn", "gen-synth", "memory-sim", "eval", "align", "pretrain", "ablate")

# flag -> config key, per subcommand; type conversion happens in config.coerce
_SHARED = {"seed": "seed"}
_FLAGS = {
    "sinkhorn": {"epsilon": "epsilon", "tol": "tol", "max-iter": "max_iter"},
    "gen-synth": {
        "classes": "classes",
        "dim": "dim",
        "separation": "separation",
        "within-std": "within_std",
        "bias-shift": "bias_shift",
        "samples": "samples",
    },
    "memory-sim": {
        "variant": "variant",
        "capacity": "capacity",
        "partitions": "partitions",
        "k": "k",
        "batches": "batches",
        "batch": "batch",
        "epsilon": "epsilon",
        "classes": "classes",
        "dim": "dim",
        "separation": "separation",
        "samples": "samples",
    },
    "eval": {
        "ways": "ways",
        "shots": "shots",
        "queries": "queries",
        "episodes": "episodes",
        "opta": "opta",
        "classifier": "classifier",
        "epsilon": "epsilon",
        "normalize": "normalize",
    },
    "align": {"passes": "opta", "epsilon": "epsilon", "classifier": "classifier"},
    "pretrain": {
        "epochs": "epochs",
        "batch": "batch",
        "mask": "mask",
        "momentum": "momentum",
        "epoch-thr": "epoch_thr",
        "dyce-variant": "variant",
        "capacity": "capacity",
        "partitions": "partitions",
        "k": "k",
        "lambda": "lambda",
        "tau": "tau",
        "lr": "lr",
        "noise": "noise",
        "out-dim": "out_dim",
        "epsilon": "epsilon",
    },
}
_FLAGS["ablate"] = {
    **_FLAGS["pretrain"],
    "axis": "axis",
    "values": "values",
    "ways": "ways",
    "shots": "shots",
    "queries": "queries",
    "episodes": "episodes",
    "opta": "opta",
    "classifier": "classifier",
    "classes": "classes",
    "dim": "dim",
    "separation": "separation",
    "samples": "samples",
    "bias-shift": "bias_shift",
}

# file arguments, not part of the hashed config
_PATHS = {
    "sinkhorn": {"cost": True, "r": False, "c": False},
    "gen-synth": {"out": True},
    "memory-sim": {"labels": False},
    "eval": {"data": True, "encoder": False},
    "align": {"support": True, "query": True},
    "pretrain": {"data": True, "out": False},
    "ablate": {"data": False},
}

_HELP = {
    "sinkhorn": "solve one entropic transport problem",
    "gen-synth": "write a synthetic labeled embedding file",
    "memory-sim": "stream embeddings through the clustered memory",
    "eval": "episodic few-shot evaluation",
    "align": "align support prototypes to a query set",
    "pretrain": "student/teacher pretraining with the clustered memory",
    "ablate": "pretrain + evaluate across one configuration axis",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="otfs", description="Optimal-transport few-shot toolkit.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True
    parser.subcommands = {}
    for name in COMMANDS:
        p = sub.add_parser(name, help=_HELP[name], description=_HELP[name])
        parser.subcommands[name] = p
        p.add_argument("--config", metavar="FILE", help="key = value config file")
        for flag, key in {**_SHARED, **_FLAGS[name]}.items():
            p.add_argument(f"--{flag}", dest=f"cfg_{key}", metavar=key.upper(), default=None, help=f"(default {cfgmod.DEFAULTS[key]!r})")
        for flag, required in _PATHS[name].items():
            p.add_argument(f"--{flag}", dest=f"path_{flag}", metavar="FILE", required=required)
    return parser


class _Run:
    """Resolved config plus output helpers for one invocation."""

    def __init__(self, command: str, cfg: dict, out):
        self.command = command
        self.cfg = cfg
        self.hash = cfgmod.config_hash({"command": command, **cfg})
        self.out = out

    def __getitem__(self, key):
        return self.cfg[key]

    def meta(self) -> dict:
        return {"config_hash": self.hash, "seed": self.cfg["seed"]}

    def emit(self, record: dict) -> None:
        self.out.write(json.dumps({**record, **self.meta()}, default=_jsonable) + "\n")

    def sinkhorn_cfg(self) -> SinkhornConfig:
        return SinkhornConfig(epsilon=self["epsilon"], tolerance=self["tol"], max_iterations=self["max_iter"])


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def _synthetic(run: _Run) -> LabeledEmbeddingSet:
    spec = SyntheticSpec(
        classes=run["classes"],
        dim=run["dim"],
        center_scale=center_scale_for_separation(run["separation"], run["dim"]),
        within_std=run["within_std"],
        bias_shift=run["bias_shift"],
        samples_per_class=run["samples"],
        seed=run["seed"],
    )
    return gen_synthetic(spec)


def _train_config(run: _Run) -> TrainConfig:
    return TrainConfig(
        batch_size=run["batch"],
        epochs=run["epochs"],
        learning_rate=run["lr"],
        teacher_momentum=run["momentum"],
        mask_ratio=run["mask"],
        noise_std=run["noise"],
        out_dim=run["out_dim"],
        loss=LossConfig(lam=run["lambda"], tau=run["tau"]),
        dyce=DyceConfig(
            capacity=run["capacity"],
            partitions=run["partitions"],
            neighbors=run["k"],
            epoch_threshold=run["epoch_thr"],
            prototype_ema=run["prototype_ema"],
            variant=run["variant"],
        ),
        sinkhorn=run.sinkhorn_cfg(),
        seed=run["seed"],
    )


def _episodes(run: _Run) -> tuple[EpisodeSpec, PipelineConfig]:
    spec = EpisodeSpec(ways=run["ways"], shots=run["shots"], queries=run["queries"], episodes=run["episodes"], seed=run["seed"])
    pipe = PipelineConfig(
        passes=run["opta"],
        classifier=run["classifier"],
        normalize=run["normalize"],
        barycentric=run["barycentric"],
        sinkhorn=run.sinkhorn_cfg(),
    )
    return spec, pipe


def cmd_sinkhorn(run: _Run, paths) -> None:
    cost = read_matrix(paths["cost"])
    if cost.ndim != 2:
        raise ConfigError("cost file must hold a 2-D matrix")
    r = read_matrix(paths["r"]).ravel() if paths["r"] else uniform(cost.shape[0])
    c = read_matrix(paths["c"]).ravel() if paths["c"] else uniform(cost.shape[1])
    plan = sinkhorn(cost, r, c, run.sinkhorn_cfg())
    run.emit({**plan.to_dict(), "transport_cost": transport_cost(plan, cost)})


def cmd_gen_synth(run: _Run, paths) -> None:
    data = _synthetic(run)
    write_embeddings(data, paths["out"])
    run.emit({"written": str(paths["out"]), "rows": len(data), "dim": data.dim, "classes": int(data.classes.shape[0])})


def cmd_memory_sim(run: _Run, paths) -> None:
    data = read_embeddings(paths["labels"]) if paths["labels"] else _synthetic(run)
    cfg = DyceConfig(
        capacity=run["capacity"],
        partitions=run["partitions"],
        neighbors=run["k"],
        epoch_threshold=0,
        prototype_ema=run["prototype_ema"],
        variant=run["variant"],
    )
    for rec in simulate_memory(data, cfg, run["batches"], 2 * run["batch"], run["seed"], run.sinkhorn_cfg()):
        run.emit(rec.to_dict())


def _load_encoder(path) -> LinearEncoder:
    w, b = decode_encoder(Path(path).read_bytes())
    return LinearEncoder(w, b)


def cmd_eval(run: _Run, paths) -> None:
    data = read_embeddings(paths["data"])
    if paths["encoder"]:
        data = encode_set(_load_encoder(paths["encoder"]), data)
    spec, pipe = _episodes(run)
    run.emit(evaluate(data, spec, pipe).to_dict())


def cmd_align(run: _Run, paths) -> None:
    support = read_embeddings(paths["support"])
    query = read_embeddings(paths["query"])
    if not support.labeled:
        raise ConfigError("support file must carry labels")
    protos = class_prototypes(support.embeddings, support.labels)
    aligned = opta_iterate(protos, query.embeddings, OptaConfig(passes=run["opta"], sinkhorn=run.sinkhorn_cfg()))
    clf = fit_logistic(aligned) if run["classifier"] == "logreg" else NearestPrototype(aligned)
    run.emit({"classes": aligned.classes, "prototypes": aligned.values, "predictions": predict(clf, query.embeddings)})


def cmd_pretrain(run: _Run, paths) -> None:
    data = read_embeddings(paths["data"])
    result = run_pretraining(_train_config(run), data, on_epoch=lambda rec: run.emit(rec.to_dict()))
    if paths["out"]:
        Path(paths["out"]).write_bytes(encode_encoder(result.student.weight, result.student.bias))


def cmd_ablate(run: _Run, paths) -> int:
    axis = run["axis"]
    values = parse_axis_values(axis, run["values"])
    data = read_embeddings(paths["data"]) if paths["data"] else _synthetic(run)
    spec, pipe = _episodes(run)
    base = _train_config(run)
    failed = 0
    for value in values:
        try:
            record = {"status": "ok", **ablation_cell(base, axis, value, data, spec, pipe)}
        except (OTFSError, ValueError) as e:
            failed += 1
            record = {"status": "error", "axis": axis, "value": value, "error": type(e).__name__, "message": str(e)}
        run.emit(record)
    return 1 if failed else 0


_HANDLERS = {
    "sinkhorn": cmd_sinkhorn,
    "gen-synth": cmd_gen_synth,
    "memory-sim": cmd_memory_sim,
    "eval": cmd_eval,
    "align": cmd_align,
    "pretrain": cmd_pretrain,
    "ablate": cmd_ablate,
}


def _error_record(e: Exception, run: _Run | None) -> str:
    rec = {"error": type(e).__name__, "message": str(e)}
    if isinstance(e, ConvergenceError) and e.best is not None:
        rec["iterations_used"] = e.best.iterations_used
        rec["max_marginal_violation"] = e.best.max_marginal_violation
    if run is not None:
        rec.update(run.meta())
    return json.dumps(rec)


def main(argv=None, stdout=None, stderr=None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        with contextlib.redirect_stdout(stdout), contextlib.redirect_stderr(stderr):
            args = parser.parse_args(argv)
    except SystemExit as e:  # argparse: 0 for --help, 2 for usage errors
        return int(e.code or 0)

    sub_parser = parser.subcommands[args.command]
    values = vars(args)
    flags = {k[4:]: v for k, v in values.items() if k.startswith("cfg_")}
    paths = {k[5:]: v for k, v in values.items() if k.startswith("path_")}
    try:
        file_values = cfgmod.load_config_file(args.config) if args.config else {}
        cfg = cfgmod.resolve(file_values, flags)
        if args.command == "ablate" and cfg["axis"] not in ABLATION_AXES:
            raise ConfigError(f"unknown ablation axis {cfg['axis']!r}; choose from {sorted(ABLATION_AXES)}")
        if args.command == "ablate":
            parse_axis_values(cfg["axis"], cfg["values"])
    except ConfigError as e:
        sub_parser.print_usage(stderr)
        stderr.write(f"otfs {args.command}: error: {e}\n")
        return 2

    run = _Run(args.command, cfg, stdout)
    try:
        code = _HANDLERS[args.command](run, paths)
    except (OTFSError, ValueError, OSError) as e:
        stdout.flush()
        stderr.write(_error_record(e, run) + "\n")
        return 1
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
