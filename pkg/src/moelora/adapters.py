"""LoRA and MOELoRA layers around a frozen dense weight.

Weights follow the row-vector convention ``h = x @ W0`` with
``W0`` of shape ``(d_in, d_out)``, ``B`` of shape ``(d_in, r)`` and ``A`` of
shape ``(r, d_out)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from moelora import autodiff as ad
from moelora.autodiff import Tensor
from moelora.errors import ConfigError, ContractError, DimensionError

INIT_STD = 0.02


class FrozenDense:
    """A pretrained dense projection that never receives gradient."""

    def __init__(self, weight, bias=None, name: str = ""):
        self.name = name
        self.weight = Tensor(weight, requires_grad=False, name=f"{name}.weight")
        if self.weight.ndim != 2:
            raise DimensionError("dense weight must be 2-D")
        self.bias = None if bias is None else Tensor(bias, requires_grad=False, name=f"{name}.bias")

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def base_forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise DimensionError(f"{self.name or 'dense'}: input width {x.shape[-1]} != d_in {self.d_in}")
        h = ad.matmul(x, self.weight)
        if self.bias is not None:
            h = ad.add(h, self.bias)
        return h

    def forward(self, x: Tensor, omega=None, rng=None) -> Tensor:
        return self.base_forward(x)

    def frozen_tensors(self) -> list[Tensor]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def trainable(self) -> list[Tensor]:
        return []


def _check_rank(rank: int, d_in: int, d_out: int) -> None:
    if not isinstance(rank, (int, np.integer)) or rank < 1:
        raise ConfigError(f"rank must be a positive integer, got {rank!r}")
    if rank > min(d_in, d_out):
        warnings.warn(
            f"rank {rank} exceeds min(d_in, d_out) = {min(d_in, d_out)}; the update is not low-rank",
            stacklevel=3,
        )


class LoraLayer(FrozenDense):
    """Frozen dense weight plus one trainable low-rank pair (B, A)."""

    kind = "lora"

    def __init__(self, base: FrozenDense, rank: int, alpha: float | None = None,
                 dropout: float = 0.0, rng: np.random.Generator | None = None):
        _check_rank(rank, base.d_in, base.d_out)
        self.name = base.name
        self.weight, self.bias = base.weight, base.bias
        self.rank = int(rank)
        self.alpha = float(rank if alpha is None else alpha)
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        self.dropout = float(dropout)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.A = Tensor(rng.normal(0.0, INIT_STD, (self.rank, self.d_out)), requires_grad=True,
                        name=f"{self.name}.lora.A")
        self.B = Tensor(np.zeros((self.d_in, self.rank)), requires_grad=True, name=f"{self.name}.lora.B")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self, x: Tensor, rng=None) -> Tensor:
        low = ad.matmul(ad.dropout(x, self.dropout, rng), self.B)
        return ad.scale(ad.matmul(low, self.A), self.scaling)

    def forward(self, x: Tensor, omega=None, rng=None) -> Tensor:
        return ad.add(self.base_forward(x), self.delta(x, rng))

    def delta_weight(self) -> np.ndarray:
        return self.scaling * (self.B.data @ self.A.data)

    def trainable(self) -> list[Tensor]:
        return [self.A, self.B]


@dataclass
class Expert:
    A: Tensor  # (r/N, d_out)
    B: Tensor  # (d_in, r/N)


class MoeLoraLayer(FrozenDense):
    """Frozen dense weight plus N low-rank experts of rank r/N each.

    The expert outputs are mixed by per-row weights ``omega``.  With a
    task gate those rows are identical within a sample; with an input-driven
    ``router`` they are computed here from ``x`` itself.
    """

    kind = "moelora"

    def __init__(self, base: FrozenDense, rank: int, n_experts: int, alpha: float | None = None,
                 dropout: float = 0.0, rng: np.random.Generator | None = None, router=None):
        _check_rank(rank, base.d_in, base.d_out)
        if n_experts < 1 or rank % n_experts:
            raise ConfigError(f"number of experts {n_experts} must divide rank {rank}")
        self.name = base.name
        self.weight, self.bias = base.weight, base.bias
        self.rank = int(rank)
        self.n_experts = int(n_experts)
        self.alpha = float(rank if alpha is None else alpha)
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        self.dropout = float(dropout)
        self.router = router
        rng = rng if rng is not None else np.random.default_rng(0)
        per = self.expert_rank
        self.experts = [
            Expert(
                A=Tensor(rng.normal(0.0, INIT_STD, (per, self.d_out)), requires_grad=True,
                         name=f"{self.name}.experts.{i}.A"),
                B=Tensor(np.zeros((self.d_in, per)), requires_grad=True,
                         name=f"{self.name}.experts.{i}.B"),
            )
            for i in range(self.n_experts)
        ]
        # spreads each expert weight over that expert's r/N columns
        self._expand = np.kron(np.eye(self.n_experts), np.ones((1, per)))

    @property
    def expert_rank(self) -> int:
        return self.rank // self.n_experts

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def mergeable(self) -> bool:
        return self.router is None

    def delta(self, x: Tensor, omega: Tensor, rng=None) -> Tensor:
        """Weighted expert update; ``omega`` has shape ``x.shape[:-1] + (N,)``."""
        if omega.shape != x.shape[:-1] + (self.n_experts,):
            raise DimensionError(
                f"{self.name}: expert weights {omega.shape} do not match rows {x.shape[:-1]} x {self.n_experts}"
            )
        B = ad.concat([e.B for e in self.experts], axis=1)
        A = ad.concat([e.A for e in self.experts], axis=0)
        low = ad.matmul(ad.dropout(x, self.dropout, rng), B)
        low = ad.mul(low, ad.matmul(omega, Tensor(self._expand)))
        return ad.scale(ad.matmul(low, A), self.scaling)

    def forward(self, x: Tensor, omega=None, rng=None) -> Tensor:
        if self.router is not None:
            omega = self.router.weights(x)
        if omega is None:
            raise ContractError(f"{self.name}: no expert weights supplied")
        return ad.add(self.base_forward(x), self.delta(x, omega, rng))

    def delta_weight(self, omega) -> np.ndarray:
        """(alpha/r) * sum_i omega_i B_i A_i for one task's weight vector."""
        omega = np.asarray(omega, dtype=float)
        acc = np.zeros((self.d_in, self.d_out))
        for w, e in zip(omega, self.experts):
            acc += w * (e.B.data @ e.A.data)
        return self.scaling * acc

    def trainable(self) -> list[Tensor]:
        params = [t for e in self.experts for t in (e.A, e.B)]
        if self.router is not None:
            params.extend(self.router.parameters())
        return params


def check_weights(omega, n: int, tol: float = 1e-9) -> np.ndarray:
    omega = np.asarray(omega, dtype=float).reshape(-1)
    if omega.shape != (n,):
        raise ContractError(f"expected {n} expert weights, got {omega.shape[0]}")
    if (omega < 0).any() or abs(omega.sum() - 1.0) > tol:
        raise ContractError("expert weights must be nonnegative and sum to 1")
    return omega


def lora_forward(layer: LoraLayer, x: Tensor, rng=None) -> Tensor:
    """h = x W0 + (alpha/r) x B A."""
    return layer.forward(ad.as_tensor(x), rng=rng)


def moelora_forward(layer: MoeLoraLayer, x: Tensor, omega, rng=None) -> Tensor:
    """h = x W0 + (alpha/r) sum_i omega_i x B_i A_i with one weight vector for every row."""
    x = ad.as_tensor(x)
    n = layer.n_experts
    if isinstance(omega, Tensor) and omega.ndim == 1:
        check_weights(omega.data, n)
        rows = int(np.prod(x.shape[:-1]))
        w = ad.gather_rows(ad.reshape(omega, (1, n)), np.zeros(rows, dtype=np.int64))
        w = ad.reshape(w, x.shape[:-1] + (n,))
    elif isinstance(omega, Tensor):
        w = omega
    else:
        omega = check_weights(omega, n)
        w = Tensor(np.broadcast_to(omega, x.shape[:-1] + (n,)))
    return layer.forward(x, w, rng=rng)


def count_trainable(layer) -> int:
    """Number of scalar parameters with requires_grad set."""
    return int(sum(t.data.size for t in layer.trainable() if t.requires_grad))
