"""Fold adapters into plain per-task dense weights, and count forward MACs."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from moelora.adapters import LoraLayer, MoeLoraLayer
from moelora.errors import ConfigError, DimensionError, NonMergeableError
from moelora.gating import TaskTable
from moelora.model import ToyLM

NON_MERGEABLE_MSG = (
    "cannot recover per-task weights: the input-driven gate gives every token its own expert "
    "weights, so no single dense matrix per task reproduces the adapted forward; the adapter "
    "branch must stay in place at inference time, which adds latency"
)


class MergedModel:
    """A plain dense model for one task: no adapters, no gate."""

    def __init__(self, task: str | None, model: ToyLM):
        if model.adapter_kind is not None or model.gate is not None or model.layer_gates:
            raise ConfigError("a merged model cannot carry adapters or gates")
        self.task = task
        self.model = model
        self.tasks = None
        for t in model.named_tensors().values():
            t.requires_grad = False

    @property
    def config(self):
        return self.model.config

    @property
    def layers(self):
        return self.model.layers

    def forward(self, tokens, task_ids=None):
        return self.model.forward(tokens)

    __call__ = forward

    def state(self) -> dict[str, np.ndarray]:
        return self.model.state()


def _plain_copy(model: ToyLM, replace: dict[str, np.ndarray]) -> ToyLM:
    fresh = ToyLM(model.config)
    state = {n: t.data.copy() for n, t in model.base_tensors().items()}
    for name, w in replace.items():
        state[f"{name}.weight"] = w
    fresh.load_state(state)
    return fresh


def _task_weights(model: ToyLM, name: str, j: int) -> np.ndarray:
    gate = model.layer_gates.get(name, model.gate)
    if gate is None:
        raise ConfigError(f"layer {name} has experts but the model has no task gate")
    return gate.task_weights(j)


def recover(model, task) -> MergedModel:
    """W_j = W0 + (alpha/r) * sum_i omega_ji B_i A_i for every adapted layer."""
    if isinstance(model, MergedModel):
        return model
    if not model.mergeable:
        raise NonMergeableError(NON_MERGEABLE_MSG)
    j = model.tasks.index(task) if model.tasks is not None else None
    name_of_task = model.tasks.tasks[j] if j is not None else (task if isinstance(task, str) else None)
    replace = {}
    for name, layer in model.adapted_layers().items():
        if isinstance(layer, MoeLoraLayer):
            delta = layer.delta_weight(_task_weights(model, name, j))
        else:
            delta = layer.delta_weight()
        replace[name] = layer.weight.data + delta
    return MergedModel(name_of_task, _plain_copy(model, replace))


def recover_all(model, tasks: Sequence | None = None, workers: int = 1) -> dict[str, MergedModel]:
    """One merged model per task; tasks may be processed concurrently."""
    if not isinstance(model, MergedModel) and not model.mergeable:
        raise NonMergeableError(NON_MERGEABLE_MSG)
    if tasks is None:
        if getattr(model, "tasks", None) is None:
            raise ConfigError("no task list to recover")
        tasks = list(model.tasks)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            merged = list(pool.map(lambda t: recover(model, t), tasks))
    else:
        merged = [recover(model, t) for t in tasks]
    return {str(t): m for t, m in zip(tasks, merged)}


@dataclass
class TaskVector:
    """Per-layer B_t A_t of one single-task LoRA model."""

    task: str
    deltas: dict[str, np.ndarray]

    @classmethod
    def from_model(cls, task: str, model: ToyLM) -> "TaskVector":
        deltas = {}
        for name, layer in model.adapted_layers().items():
            if not isinstance(layer, LoraLayer):
                raise ConfigError("task vectors are defined for plain LoRA layers only")
            deltas[name] = layer.B.data @ layer.A.data
        return cls(task, deltas)


def task_arithmetic_merge(base: ToyLM, vectors: Sequence[TaskVector], lam: float) -> MergedModel:
    """W = W0 + lambda * sum_t B_t A_t on every layer touched by any task vector."""
    sums: dict[str, np.ndarray] = {}
    for vec in vectors:
        for name, d in vec.deltas.items():
            if name not in base.layers:
                raise ConfigError(f"task vector layer {name!r} not in base model")
            w = base.layers[name].weight
            if d.shape != w.shape:
                raise DimensionError(f"{name}: task vector {d.shape} vs weight {w.shape}")
            sums[name] = sums[name] + d if name in sums else d.copy()
    replace = {n: base.layers[n].weight.data + lam * s for n, s in sums.items()}
    return MergedModel(None, _plain_copy(base, replace))


# -- inference cost ------------------------------------------------------------------

def adapter_branch_macs(layer, rows: int) -> int:
    """MACs of the low-rank branch (and router, if any) of one adapted layer."""
    if not isinstance(layer, (LoraLayer, MoeLoraLayer)):
        return 0
    macs = rows * layer.rank * (layer.d_in + layer.d_out)
    if isinstance(layer, MoeLoraLayer) and layer.router is not None:
        macs += rows * layer.d_in * layer.n_experts
    return macs


def op_count(model, seq_len: int, batch: int = 1) -> int:
    """Multiply-accumulates of one forward pass over ``batch`` sequences of ``seq_len`` tokens.

    Counts matrix products only.  The task gate is excluded: its output
    depends on the task alone and is computed once per task, not per token.
    """
    net = model.model if isinstance(model, MergedModel) else model
    c = net.config
    rows = batch * seq_len
    hd = c.d_model // c.n_heads
    macs = 0
    for layer in net.layers.values():
        macs += rows * layer.d_in * layer.d_out + adapter_branch_macs(layer, rows)
    macs += c.n_layers * 2 * batch * c.n_heads * seq_len * seq_len * hd
    macs += rows * c.d_model * c.vocab
    return macs
