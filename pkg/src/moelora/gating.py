"""Expert-weight gates: task-motivated (dense, sparse Top-K, uniform) and input-driven."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from moelora import autodiff as ad
from moelora.autodiff import Tensor
from moelora.errors import ConfigError, ContractError, DimensionError, UnknownTaskError

GATE_MODES = ("dense", "sparse", "uniform", "input_driven")
TOPOLOGIES = ("single_shared", "per_layer")
INIT_STD = 0.02


class TaskTable:
    """Ordered, duplicate-free list of task names with index lookup."""

    def __init__(self, tasks: Iterable[str]):
        self.tasks = [str(t) for t in tasks]
        if not self.tasks:
            raise ConfigError("a task table needs at least one task")
        if len(set(self.tasks)) != len(self.tasks):
            raise ConfigError("task ids must be unique")
        self._index = {t: i for i, t in enumerate(self.tasks)}

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __contains__(self, task) -> bool:
        try:
            self.index(task)
        except UnknownTaskError:
            return False
        return True

    def index(self, task) -> int:
        if isinstance(task, (int, np.integer)) and not isinstance(task, bool):
            if 0 <= task < len(self.tasks):
                return int(task)
        elif task in self._index:
            return self._index[task]
        raise UnknownTaskError(f"unknown task {task!r}")

    def indices(self, tasks: Sequence) -> np.ndarray:
        return np.array([self.index(t) for t in tasks], dtype=np.int64)


def top_k_indices(logits, k: int) -> np.ndarray:
    """Indices of the ``k`` largest logits, ties resolved toward the lower index.

    Returned in ascending index order.
    """
    logits = np.asarray(logits, dtype=float).reshape(-1)
    if not 1 <= k <= logits.size:
        raise ContractError(f"K={k} outside [1, {logits.size}]")
    order = np.argsort(-logits, kind="stable")
    return np.sort(order[:k])


def top_k_mask(logits: np.ndarray, k: int) -> np.ndarray:
    """Additive mask: 0 on each row's Top-K entries, -inf elsewhere."""
    logits = np.atleast_2d(logits)
    mask = np.full(logits.shape, -np.inf)
    for row in range(logits.shape[0]):
        mask[row, top_k_indices(logits[row], k)] = 0.0
    return mask


class TaskGate:
    """Softmax of a linear map of a learned task embedding.

    ``E`` holds one ``d_T``-dimensional row per task and ``W_T`` maps it to
    ``N`` expert logits.  In ``uniform`` mode there are no parameters and
    every expert gets exactly ``1/N``.
    """

    def __init__(self, tasks, n_experts: int, task_dim: int = 64, mode: str = "dense",
                 top_k: int = 2, rng: np.random.Generator | None = None, name: str = "gate"):
        if mode not in ("dense", "sparse", "uniform"):
            raise ConfigError(f"task gate mode must be dense, sparse or uniform, got {mode!r}")
        if n_experts < 1 or task_dim < 1:
            raise ConfigError("n_experts and task_dim must be positive")
        self.table = tasks if isinstance(tasks, TaskTable) else TaskTable(tasks)
        self.n_experts = int(n_experts)
        self.task_dim = int(task_dim)
        self.mode = mode
        self.name = name
        if mode == "sparse" and not 1 <= top_k < n_experts:
            raise ContractError(f"sparse gate needs 1 <= K < N, got K={top_k}, N={n_experts}")
        self.top_k = int(top_k)
        rng = rng if rng is not None else np.random.default_rng(0)
        if mode == "uniform":
            self.E = self.W_T = None
        else:
            self.E = Tensor(rng.normal(0.0, INIT_STD, (len(self.table), task_dim)),
                            requires_grad=True, name=f"{name}.E")
            self.W_T = Tensor(rng.normal(0.0, INIT_STD, (n_experts, task_dim)),
                              requires_grad=True, name=f"{name}.W_T")

    def parameters(self) -> list[Tensor]:
        return [] if self.E is None else [self.E, self.W_T]

    def logits(self, task_ids) -> Tensor:
        idx = np.asarray(task_ids, dtype=np.int64).reshape(-1)
        if self.E is None:
            return Tensor(np.zeros((idx.size, self.n_experts)))
        emb = ad.gather_rows(self.E, idx)
        return ad.matmul(emb, ad.transpose(self.W_T))

    def weights(self, task_ids) -> Tensor:
        """Expert weights, one row per entry of ``task_ids`` (integer indices)."""
        idx = np.asarray(task_ids, dtype=np.int64).reshape(-1)
        if self.mode == "uniform":
            return Tensor(np.full((idx.size, self.n_experts), 1.0 / self.n_experts))
        z = self.logits(idx)
        mask = top_k_mask(z.data, self.top_k) if self.mode == "sparse" else None
        return ad.softmax(z, mask)

    def task_weights(self, task) -> np.ndarray:
        with ad.no_grad():
            return self.weights([self.table.index(task)]).data[0].copy()


class InputGate:
    """Per-token router: softmax of a learned projection of the layer input."""

    mode = "input_driven"

    def __init__(self, d_in: int, n_experts: int, rng: np.random.Generator | None = None,
                 name: str = "router"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_in = int(d_in)
        self.n_experts = int(n_experts)
        self.W = Tensor(rng.normal(0.0, INIT_STD, (n_experts, d_in)), requires_grad=True,
                        name=f"{name}.W")

    def parameters(self) -> list[Tensor]:
        return [self.W]

    def weights(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"router expects width {self.d_in}, got {x.shape[-1]}")
        return ad.softmax(ad.matmul(x, ad.transpose(self.W)))


def gate_dense(g: TaskGate, task) -> np.ndarray:
    """softmax(W_T e_j) for a single task, regardless of the gate's own mode."""
    j = g.table.index(task)
    if g.E is None:
        return np.full(g.n_experts, 1.0 / g.n_experts)
    with ad.no_grad():
        return ad.softmax(g.logits([j])).data[0].copy()


def gate_sparse(g: TaskGate, task, k: int) -> np.ndarray:
    """softmax over the K largest of W_T e_j; the rest are exactly 0."""
    j = g.table.index(task)
    if not 1 <= k <= g.n_experts:
        raise ContractError(f"K={k} outside [1, {g.n_experts}]")
    with ad.no_grad():
        z = g.logits([j])
        return ad.softmax(z, top_k_mask(z.data, k)).data[0].copy()


def gate_input_driven(g: InputGate, x) -> np.ndarray:
    with ad.no_grad():
        return g.weights(ad.as_tensor(x)).data.copy()
