"""Command-line entry point: gen-data, train, merge, eval, ablate.

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields, replace
from pathlib import Path

from moelora import datagen
from moelora.errors import ConfigError, DatasetError, MoeLoraError, NumericError
from moelora.evaluation import evaluate, model_predictor, oracle_predictor
from moelora.model import TARGET_LAYERS, ModelConfig
from moelora.pipeline import (
    METHODS, RunConfig, apply_overrides, base_model, evaluate_run, load_merged, load_run,
    merge_run, resolve_row, save_merged, save_run, train_method,
)
from moelora.training import TrainConfig

log = logging.getLogger("moelora")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
DEFAULT_SEEDS = (42, 43, 44)

# flag name -> TrainConfig field
FLAG_FIELDS = {
    "rank": "rank", "experts": "experts", "topk": "top_k", "gate_topology": "gate_topology",
    "batch_strategy": "batch_strategy", "seed": "seed", "steps": "max_steps", "lr": "learning_rate",
    "batch_size": "batch_size", "alpha": "alpha", "dropout": "dropout", "eval_interval": "eval_interval",
    "task_dim": "task_dim", "max_input_len": "max_input_len", "max_output_len": "max_output_len",
}
RUN_KEYS = ("method", "beta", "base_steps", "target_layers", "single_rank", "single_steps", "dataset", "out")


# -- config assembly --------------------------------------------------------------

def read_config_file(path: str | Path) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _coerce(field_type, value):
    if isinstance(value, str):
        kind = field_type if isinstance(field_type, str) else getattr(field_type, "__name__", "str")
        try:
            if kind.startswith("int"):
                return int(value)
            if kind.startswith("float"):
                return float(value)
        except ValueError as exc:
            raise ConfigError(f"bad numeric value {value!r}") from exc
    return value


def build_run_config(args: argparse.Namespace) -> tuple[RunConfig, dict]:
    """Defaults, then the config file, then explicit flags (flags win)."""
    raw: dict = read_config_file(args.config) if getattr(args, "config", None) else {}
    for key in list(FLAG_FIELDS) + list(RUN_KEYS):
        value = getattr(args, key, None)
        if value is not None:
            raw[key] = value
    unknown = set(raw) - set(FLAG_FIELDS) - set(FLAG_FIELDS.values()) - set(RUN_KEYS)
    if unknown:
        raise ConfigError(f"unknown config key(s): {sorted(unknown)}")
    types = {f.name: f.type for f in fields(TrainConfig)}
    train_kw = {}
    for key, value in raw.items():
        name = FLAG_FIELDS.get(key, key)
        if name in types:
            train_kw[name] = _coerce(types[name], value)
    train_cfg = TrainConfig(**train_kw)
    layers = raw.get("target_layers", TARGET_LAYERS)
    if isinstance(layers, str):
        layers = tuple(s.strip() for s in layers.split(",") if s.strip())
    cfg = RunConfig(
        method=raw.get("method", "moelora_dense"),
        train=train_cfg,
        target_layers=tuple(layers),
        base_steps=int(raw.get("base_steps", 600)),
        beta=float(raw.get("beta", 1.0)),
        single_rank=int(raw["single_rank"]) if raw.get("single_rank") is not None else None,
        single_steps=int(raw["single_steps"]) if raw.get("single_steps") is not None else None,
    )
    return cfg, raw


# -- commands -----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.tasks < 2:
        raise ConfigError("need at least 2 tasks")
    ds = datagen.generate(args.seed, n_tasks=args.tasks, valid_size=args.valid_size,
                          test_size=args.test_size, vocab=args.vocab)
    path = datagen.save(ds, args.out)
    print(f"{'task':<14}{'metric':<10}{'train':>7}{'valid':>7}{'test':>7}")
    for t in ds.tasks:
        print(f"{t:<14}{datagen.metric_for(t):<10}{ds.counts('train')[t]:>7}"
              f"{ds.counts('valid')[t]:>7}{ds.counts('test')[t]:>7}")
    print(f"wrote {path}")
    return EXIT_OK


def _load_dataset(path) -> datagen.TaskDataset:
    if not path:
        raise ConfigError("--dataset is required")
    try:
        return datagen.load(path)
    except FileNotFoundError as exc:
        raise ConfigError(f"dataset not found: {path}") from exc


def cmd_train(args) -> int:
    cfg, raw = build_run_config(args)
    dataset = _load_dataset(raw.get("dataset"))
    out = Path(raw.get("out") or "run")
    log.info("effective config: %s", json.dumps({"method": cfg.method, **cfg.effective_train().to_dict()}, sort_keys=True))
    run = train_method(dataset, cfg)
    out.mkdir(parents=True, exist_ok=True)
    paths = save_run(run, out)
    for key, res in sorted(run.results.items()):
        res.write_csv(out / ("loss.csv" if not key else f"loss_{key}.csv"))
    model = run.shared
    if model is not None:
        gate = model.gate or (next(iter(model.layer_gates.values())) if model.layer_gates else None)
        if gate is not None:
            for t in model.tasks:
                w = gate.task_weights(t)
                log.info("gate %s: [%s] nonzero=%d", t, ", ".join(f"{v:.4f}" for v in w), int((w > 0).sum()))
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def cmd_merge(args) -> int:
    run = load_run(args.checkpoint)
    merged = merge_run(run)        # raises before anything is written
    paths = save_merged(merged, args.out, {"method": run.method, "train_config": run.config.train.to_dict()})
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


def _merged_predictor(directory: Path, tasks, max_in: int, max_out: int):
    preds = {}
    for t in tasks:
        f = directory / f"merged_{t}.ntc"
        if not f.exists():
            raise ConfigError(f"missing merged checkpoint for task {t!r}: {f}")
        preds[t] = model_predictor(load_merged(f), max_in, max_out)
    return lambda task, samples: preds[task](task, samples)


def cmd_eval(args) -> int:
    dataset = _load_dataset(args.dataset)
    data = dataset.split(args.split)
    if not data.samples:
        raise ConfigError(f"dataset has no {args.split!r} samples")
    max_in, max_out = TrainConfig.max_input_len, TrainConfig.max_output_len
    if args.oracle:
        predict = oracle_predictor
    elif args.merged:
        predict = _merged_predictor(Path(args.merged), data.tasks, max_in, max_out)
    elif args.checkpoint:
        run = load_run(args.checkpoint)
        report = evaluate_run(run, dataset, args.split)
        return _emit(report, args.out)
    elif args.base:
        model = base_model(ModelConfig(), args.seed, args.base_steps)
        predict = model_predictor(model, max_in, max_out)
    else:
        raise ConfigError("eval needs one of --merged, --checkpoint, --base or --oracle")
    return _emit(evaluate(predict, data, args.beta), args.out)


def _emit(report: dict, out) -> int:
    text = json.dumps(report, indent=2, sort_keys=True)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def ablation_rows(names, dataset, cfg: RunConfig, seeds=DEFAULT_SEEDS, on_row=None) -> list[dict]:
    """Mean test scores over ``seeds`` for each method or ablation alias."""
    rows = []
    for name in names:
        method, overrides = resolve_row(name)
        reports = []
        for seed in seeds:
            sub = apply_overrides(cfg, method, overrides)
            sub = replace(sub, train=replace(sub.train, seed=seed))
            reports.append(evaluate_run(train_method(dataset, sub), dataset))
        row = {"method": name}
        for t in dataset.tasks:
            row[t] = sum(r[t]["value"] for r in reports) / len(reports)
        row["average"] = sum(r["average"] for r in reports) / len(reports)
        rows.append(row)
        if on_row:
            on_row(rows)
    return rows


def write_rows(rows: list[dict], tasks, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", *tasks, "average"])
        for row in rows:
            w.writerow([row["method"], *(f"{row[t]:.6f}" for t in tasks), f"{row['average']:.6f}"])
    return path


def cmd_ablate(args) -> int:
    cfg, raw = build_run_config(args)
    dataset = _load_dataset(raw.get("dataset"))
    names = [s.strip() for s in args.methods.split(",") if s.strip()]
    for n in names:
        resolve_row(n)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    out = Path(raw.get("out") or "ablation.csv")
    rows: list[dict] = []

    def save(partial):
        rows[:] = partial
        write_rows(partial, dataset.tasks, out)

    try:
        ablation_rows(names, dataset, cfg, seeds, on_row=save)
    except MoeLoraError:
        write_rows(rows, dataset.tasks, out)
        log.error("ablation aborted; %d completed row(s) saved to %s", len(rows), out)
        raise
    print(out.read_text(), end="")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value file; flags override it")
    p.add_argument("--dataset")
    p.add_argument("--out")
    p.add_argument("--method", choices=sorted(METHODS))
    p.add_argument("--rank", type=int)
    p.add_argument("--experts", type=int)
    p.add_argument("--topk", type=int)
    p.add_argument("--gate-topology", choices=["single_shared", "per_layer"])
    p.add_argument("--batch-strategy", choices=["mixed", "BT", "RBT"])
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--dropout", type=float)
    p.add_argument("--eval-interval", type=int)
    p.add_argument("--task-dim", type=int)
    p.add_argument("--max-input-len", type=int)
    p.add_argument("--max-output-len", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--base-steps", type=int)
    p.add_argument("--target-layers", help="comma-separated layer names or patterns")
    p.add_argument("--single-rank", type=int)
    p.add_argument("--single-steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moelora", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic multi-task corpus")
    g.add_argument("--tasks", type=int, default=8)
    g.add_argument("--seed", type=int, default=42)
    g.add_argument("--valid-size", type=int, default=100)
    g.add_argument("--test-size", type=int, default=100)
    g.add_argument("--vocab", type=int, default=ModelConfig.vocab)
    g.add_argument("--out", default="data.jsonl")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="fine-tune one method")
    _train_flags(t)
    t.set_defaults(func=cmd_train)

    m = sub.add_parser("merge", help="recover per-task dense weights")
    m.add_argument("--checkpoint", required=True, help="run directory or checkpoint file")
    m.add_argument("--out", default="merged")
    m.set_defaults(func=cmd_merge)

    e = sub.add_parser("eval", help="score a model on a dataset split")
    e.add_argument("--dataset", required=True)
    e.add_argument("--merged", help="directory of merged_<task>.ntc files")
    e.add_argument("--checkpoint", help="unmerged run directory or file")
    e.add_argument("--base", action="store_true", help="evaluate the unadapted base model")
    e.add_argument("--oracle", action="store_true", help="score the references against themselves")
    e.add_argument("--seed", type=int, default=42)
    e.add_argument("--base-steps", type=int, default=600)
    e.add_argument("--split", default="test", choices=list(datagen.SPLITS))
    e.add_argument("--beta", type=float, default=1.0)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="compare methods over seeds, CSV of mean scores")
    _train_flags(a)
    a.add_argument("--methods", default="lora_full,moelora_dense")
    a.add_argument("--seeds", default=",".join(map(str, DEFAULT_SEEDS)))
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.command == "train":
        logging.getLogger("moelora").setLevel(logging.INFO)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DatasetError, MoeLoraError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
