"""Method roster and the train -> merge -> evaluate pipeline shared by the CLI and tests."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from moelora import checkpoint
from moelora.datagen import TaskDataset
from moelora.errors import ConfigError, NonMergeableError
from moelora.evaluation import evaluate, model_predictor, oracle_predictor
from moelora.gating import TaskTable
from moelora.merging import MergedModel, TaskVector, recover, recover_all, task_arithmetic_merge
from moelora.model import (
    TARGET_LAYERS, AdapterSettings, InjectionSpec, ModelConfig, ToyLM, freeze_pretrained, inject,
)
from moelora.training import TrainConfig, TrainResult, pretrain_base, train

log = logging.getLogger(__name__)

METHODS: dict[str, dict] = {
    "lora_full": {"kind": "lora"},
    "lora_single": {"kind": "lora", "single": True},
    "moelora_dense": {"kind": "moelora", "gate_mode": "dense"},
    "moelora_sparse": {"kind": "moelora", "gate_mode": "sparse"},
    "moelora_uniform": {"kind": "moelora", "gate_mode": "uniform"},
    "moelora_perlayer": {"kind": "moelora", "gate_mode": "dense", "gate_topology": "per_layer"},
    "molora_input": {"kind": "moelora", "gate_mode": "input_driven"},
    "task_arithmetic": {"kind": "lora", "single": True, "arithmetic": True},
}

# ablation row name -> (method, overrides)
ABLATIONS: dict[str, tuple[str, dict]] = {
    "wo_moe": ("lora_full", {}),
    "wo_gate": ("moelora_uniform", {}),
    "w_multiple_gate": ("moelora_perlayer", {}),
    "w_bt": ("moelora_dense", {"batch_strategy": "BT"}),
    "w_rbt": ("moelora_dense", {"batch_strategy": "RBT"}),
    "lora_full_qkv": ("lora_full", {"target_layers": ("query_key_value",)}),
    "moelora_dense_qkv": ("moelora_dense", {"target_layers": ("query_key_value",)}),
}

TA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 11))


@dataclass
class RunConfig:
    method: str = "moelora_dense"
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    target_layers: tuple[str, ...] = TARGET_LAYERS
    base_steps: int = 600
    beta: float = 1.0
    single_rank: int | None = None
    single_steps: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {sorted(METHODS)}")
        spec = METHODS[self.method]
        if spec["kind"] == "moelora" and self.train.rank % self.train.experts:
            raise ConfigError(f"number of experts {self.train.experts} must divide rank {self.train.rank}")
        if spec.get("gate_mode") == "sparse" and not 1 <= self.train.top_k < self.train.experts:
            raise ConfigError(f"sparse gate needs 1 <= topk < experts, got {self.train.top_k}")
        if self.train.max_input_len + self.train.max_output_len > self.model.context:
            raise ConfigError("max_input_len + max_output_len exceeds the model context")
        self.target_layers = tuple(self.target_layers)

    def effective_train(self) -> TrainConfig:
        spec = METHODS[self.method]
        return replace(self.train, gate_mode=spec.get("gate_mode", "none"),
                       gate_topology=spec.get("gate_topology", "single_shared"))


def resolve_row(name: str) -> tuple[str, dict]:
    """Method name, or an ablation alias, to (method, overrides)."""
    if name in METHODS:
        return name, {}
    if name in ABLATIONS:
        return ABLATIONS[name]
    raise ConfigError(f"unknown method or ablation {name!r}")


def apply_overrides(cfg: RunConfig, method: str, overrides: dict) -> RunConfig:
    train_over = {k: v for k, v in overrides.items() if hasattr(cfg.train, k)}
    run_over = {k: v for k, v in overrides.items() if k not in train_over}
    return replace(cfg, method=method, train=replace(cfg.train, **train_over), **run_over)


# -- base model -----------------------------------------------------------------------

_BASE_CACHE: dict[tuple, dict[str, np.ndarray]] = {}


def base_model(config: ModelConfig, seed: int, steps: int) -> ToyLM:
    """Pretrained, fully frozen base (memoised per config/seed/steps)."""
    key = (config, seed, steps)
    if key not in _BASE_CACHE:
        _BASE_CACHE[key] = {n: a.copy() for n, a in pretrain_base(config, seed, steps).state().items()}
    model = ToyLM(config, seed=seed)
    model.load_state(_BASE_CACHE[key])
    for t in model.named_tensors().values():
        t.requires_grad = False
    return model


def settings_from(cfg: TrainConfig, rank: int | None = None) -> AdapterSettings:
    return AdapterSettings(rank=rank or cfg.rank, alpha=cfg.alpha * (rank or cfg.rank) / cfg.rank,
                           n_experts=cfg.experts, dropout=cfg.dropout,
                           gate_mode=cfg.gate_mode if cfg.gate_mode != "none" else "dense",
                           topology=cfg.gate_topology, top_k=cfg.top_k, task_dim=cfg.task_dim)


def adapt(base: ToyLM, kind: str, patterns, settings: AdapterSettings, tasks, seed: int) -> ToyLM:
    inject(base, InjectionSpec(tuple(patterns), kind), settings, tasks=tasks, seed=seed)
    freeze_pretrained(base)
    return base


# -- training runs ----------------------------------------------------------------------

@dataclass
class TrainedRun:
    method: str
    config: RunConfig
    tasks: list[str]
    models: dict[str, ToyLM]          # "" for a shared model, task name for per-task models
    results: dict[str, TrainResult]
    lam: float | None = None

    @property
    def shared(self) -> ToyLM | None:
        return self.models.get("")


def train_method(dataset: TaskDataset, cfg: RunConfig) -> TrainedRun:
    spec = METHODS[cfg.method]
    tcfg = cfg.effective_train()
    tasks = list(dataset.tasks)
    valid = dataset.split("valid")
    valid = valid if valid.samples else None
    seed = tcfg.seed
    if not spec.get("single"):
        model = adapt(base_model(cfg.model, seed, cfg.base_steps), spec["kind"], cfg.target_layers,
                      settings_from(tcfg), tasks, seed)
        res = train(model, dataset, tcfg, valid)
        return TrainedRun(cfg.method, cfg, tasks, {"": model}, {"": res})

    rank = cfg.single_rank or max(1, tcfg.rank // 2)
    steps = cfg.single_steps or max(1, tcfg.max_steps // len(tasks))
    scfg = replace(tcfg, rank=rank, max_steps=steps)
    models, results = {}, {}
    for t in tasks:
        sub = TaskDataset([s for s in dataset.samples if s.task_id == t], [t])
        sub_valid = sub.split("valid")
        model = adapt(base_model(cfg.model, seed, cfg.base_steps), "lora", cfg.target_layers,
                      settings_from(scfg, rank), [t], seed)
        results[t] = train(model, sub, scfg, sub_valid if sub_valid.samples else None)
        models[t] = model
    run = TrainedRun(cfg.method, cfg, tasks, models, results)
    if spec.get("arithmetic"):
        run.lam = choose_lambda(run, dataset)
    return run


def _arithmetic_model(run: TrainedRun, lam: float) -> MergedModel:
    base = base_model(run.config.model, run.config.train.seed, run.config.base_steps)
    vectors = [TaskVector.from_model(t, run.models[t]) for t in run.tasks]
    return task_arithmetic_merge(base, vectors, lam)


def choose_lambda(run: TrainedRun, dataset: TaskDataset) -> float:
    valid = dataset.split("valid")
    if not valid.samples:
        return 1.0
    t = run.config.train
    best, best_lam = -1.0, TA_GRID[-1]
    for lam in TA_GRID:
        merged = _arithmetic_model(run, lam)
        score = evaluate(model_predictor(merged, t.max_input_len, t.max_output_len), valid)["average"]
        if score > best:
            best, best_lam = score, lam
    return best_lam


def merge_run(run: TrainedRun) -> dict[str, MergedModel]:
    """Per-task merged models; raises NonMergeableError for input-driven gates."""
    if run.method == "task_arithmetic":
        merged = _arithmetic_model(run, run.lam if run.lam is not None else 1.0)
        return {t: MergedModel(t, merged.model) for t in run.tasks}
    if run.shared is not None:
        return recover_all(run.shared, run.tasks)
    return {t: recover(run.models[t], t) for t in run.tasks}


def run_predictor(run: TrainedRun, merged: dict[str, MergedModel] | None = None):
    t = run.config.train
    if merged is None:
        try:
            merged = merge_run(run)
        except NonMergeableError:
            return model_predictor(run.shared, t.max_input_len, t.max_output_len)
    preds = {task: model_predictor(m, t.max_input_len, t.max_output_len) for task, m in merged.items()}
    return lambda task, samples: preds[task](task, samples)


def evaluate_run(run: TrainedRun, dataset: TaskDataset, split: str = "test", oracle: bool = False) -> dict:
    data = dataset.split(split)
    predict = oracle_predictor if oracle else run_predictor(run)
    return evaluate(predict, data, run.config.beta)


def run_method(dataset: TaskDataset, cfg: RunConfig, split: str = "test") -> tuple[TrainedRun, dict]:
    run = train_method(dataset, cfg)
    return run, evaluate_run(run, dataset, split)


# -- checkpoints ------------------------------------------------------------------------

def _meta(cfg: RunConfig, tasks, extra=None) -> dict:
    meta = {
        "format": "moelora-run/1",
        "method": cfg.method,
        "train_config": cfg.train.to_dict(),
        "model_config": cfg.model.to_dict(),
        "target_layers": list(cfg.target_layers),
        "base_steps": cfg.base_steps,
        "beta": cfg.beta,
        "single_rank": cfg.single_rank,
        "single_steps": cfg.single_steps,
        "tasks": list(tasks),
    }
    meta.update(extra or {})
    return meta


def config_from_meta(meta: dict) -> RunConfig:
    return RunConfig(
        method=meta["method"],
        train=TrainConfig.from_dict(meta["train_config"]),
        model=ModelConfig(**meta["model_config"]),
        target_layers=tuple(meta["target_layers"]),
        base_steps=meta.get("base_steps", 600),
        beta=meta.get("beta", 1.0),
        single_rank=meta.get("single_rank"),
        single_steps=meta.get("single_steps"),
    )


def adapter_param_count(model: ToyLM) -> int:
    return sum(t.data.size for layer in model.adapted_layers().values() for t in layer.trainable()
               if not t.name.split(".")[-2] == "router")


def gate_param_count(model: ToyLM) -> int:
    total = sum(t.data.size for t in model.adapter_tensors().values())
    return total - adapter_param_count(model)


def save_run(run: TrainedRun, out_dir: str | Path) -> list[Path]:
    """One checkpoint per trained model (``model.ntc`` or ``model_<task>.ntc``)."""
    out_dir = Path(out_dir)
    paths = []
    for key, model in sorted(run.models.items()):
        extra = {
            "model_task": key or None,
            "adapter_params": int(adapter_param_count(model)),
            "gate_params": int(gate_param_count(model)),
            "mergeable": model.mergeable,
        }
        if run.lam is not None:
            extra["lambda"] = run.lam
        if model.gate is not None or model.layer_gates:
            gate = model.gate or next(iter(model.layer_gates.values()))
            extra["gate_weights"] = {t: [float(w) for w in gate.task_weights(t)] for t in model.tasks}
        if key:
            extra["single_tasks"] = [key]
        name = "model.ntc" if not key else f"model_{key}.ntc"
        meta = _meta(run.config, run.tasks, extra)
        paths.append(checkpoint.save(out_dir / name, model.state(), meta))
    return paths


def load_run(path: str | Path) -> TrainedRun:
    """Inverse of :func:`save_run`; ``path`` is a checkpoint file or a run directory."""
    path = Path(path)
    files = sorted(path.glob("model*.ntc")) if path.is_dir() else [path]
    if not files:
        raise ConfigError(f"no checkpoint found at {path}")
    models, cfg, tasks, lam = {}, None, None, None
    for f in files:
        tensors, meta = checkpoint.load(f)
        if meta.get("format") != "moelora-run/1":
            raise ConfigError(f"{f} is not a training checkpoint")
        cfg = config_from_meta(meta)
        tasks = meta["tasks"]
        lam = meta.get("lambda", lam)
        spec = METHODS[cfg.method]
        tcfg = cfg.effective_train()
        key = meta.get("model_task") or ""
        model_tasks = meta.get("single_tasks") or tasks
        rank = max(1, cfg.single_rank or tcfg.rank // 2) if key else tcfg.rank
        model = ToyLM(cfg.model)
        adapt(model, "lora" if key else spec["kind"], cfg.target_layers, settings_from(tcfg, rank),
              model_tasks, tcfg.seed)
        model.load_state(tensors)
        models[key] = model
    return TrainedRun(cfg.method, cfg, tasks, models, {}, lam)


def save_merged(merged: dict[str, MergedModel], out_dir: str | Path, source: dict | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for task, m in sorted(merged.items()):
        meta = {"format": "moelora-merged/1", "task": task, "model_config": m.config.to_dict(),
                "source": source or {}}
        paths.append(checkpoint.save(out_dir / f"merged_{task}.ntc", m.state(), meta))
    return paths


def load_merged(path: str | Path) -> MergedModel:
    tensors, meta = checkpoint.load(path)
    if meta.get("format") != "moelora-merged/1":
        raise ConfigError(f"{path} is not a merged checkpoint")
    model = ToyLM(ModelConfig(**meta["model_config"]))
    model.load_state(tensors)
    return MergedModel(meta["task"], model)
