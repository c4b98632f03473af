"""Multi-task low-rank adaptation with a task-motivated mixture of experts."""

from moelora.adapters import FrozenDense, LoraLayer, MoeLoraLayer, count_trainable, lora_forward, moelora_forward
from moelora.errors import (
    ConfigError, ContractError, DatasetError, DimensionError, InvalidObjectiveError, MoeLoraError,
    NonMergeableError, NumericError, UnknownTaskError,
)
from moelora.gating import InputGate, TaskGate, TaskTable, gate_dense, gate_input_driven, gate_sparse
from moelora.merging import MergedModel, TaskVector, op_count, recover, recover_all, task_arithmetic_merge
from moelora.model import AdapterSettings, InjectionSpec, ModelConfig, ToyLM, freeze_pretrained, inject
from moelora.training import TrainConfig, train

__version__ = "0.1.0"
