"""Tiny decoder-only language model with named, individually adaptable dense layers.

Every block exposes four projections named after the layers the adapters
target in GLM-style checkpoints: ``attention.query_key_value``,
``attention.dense``, ``mlp.dense_h_to_4h`` and ``mlp.dense_4h_to_h``.
"""

from __future__ import annotations

import fnmatch
import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from moelora import autodiff as ad
from moelora.adapters import FrozenDense, LoraLayer, MoeLoraLayer
from moelora.autodiff import Tensor
from moelora.errors import ConfigError, DimensionError
from moelora.gating import InputGate, TaskGate, TaskTable

TARGET_LAYERS = ("query_key_value", "dense", "dense_h_to_4h", "dense_4h_to_h")
LAYER_ALIASES = {
    "qkv_proj": "query_key_value",
    "attn_dense": "dense",
    "ffn_up": "dense_h_to_4h",
    "ffn_down": "dense_4h_to_h",
}
INIT_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    context: int = 64
    mlp_ratio: int = 4

    def __post_init__(self):
        if min(self.vocab, self.d_model, self.n_layers, self.n_heads, self.context, self.mlp_ratio) < 1:
            raise ConfigError("model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class InjectionSpec:
    """Which dense layers get adapters, and which kind."""

    patterns: tuple[str, ...] = TARGET_LAYERS
    kind: str = "moelora"

    def __post_init__(self):
        if self.kind not in ("lora", "moelora"):
            raise ConfigError(f"adapter kind must be lora or moelora, got {self.kind!r}")
        object.__setattr__(self, "patterns", tuple(self.patterns))

    def matches(self, pattern: str, name: str) -> bool:
        pattern = LAYER_ALIASES.get(pattern, pattern)
        return name.rsplit(".", 1)[-1] == pattern or fnmatch.fnmatchcase(name, pattern)


@dataclass
class AdapterSettings:
    rank: int = 16
    alpha: float | None = None
    n_experts: int = 8
    dropout: float = 0.1
    gate_mode: str = "dense"
    topology: str = "single_shared"
    top_k: int = 2
    task_dim: int = 64
    extra: dict = field(default_factory=dict)


class ToyLM:
    """Pre-norm causal transformer; all base tensors start trainable until frozen."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = config
        c = config
        rng = np.random.default_rng(seed)
        self.wte = Tensor(rng.normal(0, INIT_STD, (c.vocab, c.d_model)), True, "wte")
        self.wpe = Tensor(rng.normal(0, INIT_STD, (c.context, c.d_model)), True, "wpe")
        self.norms: dict[str, Tensor] = {}
        self.layers: dict[str, FrozenDense] = {}
        d, hidden = c.d_model, c.d_model * c.mlp_ratio
        shapes = {
            "attention.query_key_value": (d, 3 * d),
            "attention.dense": (d, d),
            "mlp.dense_h_to_4h": (d, hidden),
            "mlp.dense_4h_to_h": (hidden, d),
        }
        for i in range(c.n_layers):
            for ln in ("ln_1", "ln_2"):
                self.norms[f"h.{i}.{ln}"] = Tensor(np.ones(d), True, f"h.{i}.{ln}.gain")
            for suffix, (din, dout) in shapes.items():
                name = f"h.{i}.{suffix}"
                std = INIT_STD / np.sqrt(2 * c.n_layers) if suffix.endswith(("dense", "4h_to_h")) else INIT_STD
                layer = FrozenDense(rng.normal(0, std, (din, dout)), np.zeros(dout), name)
                layer.weight.requires_grad = layer.bias.requires_grad = True
                self.layers[name] = layer
        self.norms["ln_f"] = Tensor(np.ones(d), True, "ln_f.gain")
        self.lm_head = Tensor(rng.normal(0, INIT_STD, (d, c.vocab)), True, "lm_head.weight")

        self.tasks: TaskTable | None = None
        self.gate: TaskGate | None = None
        self.layer_gates: dict[str, TaskGate] = {}
        self.adapter_kind: str | None = None
        self.settings: AdapterSettings | None = None
        self.training = False
        self.rng: np.random.Generator | None = None

    # -- parameter bookkeeping -------------------------------------------------

    def base_tensors(self) -> dict[str, Tensor]:
        out = {"wte": self.wte, "wpe": self.wpe, "lm_head.weight": self.lm_head}
        out.update({t.name: t for t in self.norms.values()})
        for layer in self.layers.values():
            out.update({t.name: t for t in layer.frozen_tensors()})
        return out

    def adapter_tensors(self) -> dict[str, Tensor]:
        out = {}
        for layer in self.layers.values():
            out.update({t.name: t for t in layer.trainable()})
        gates = ([self.gate] if self.gate is not None else []) + list(self.layer_gates.values())
        for g in gates:
            out.update({t.name: t for t in g.parameters()})
        return out

    def named_tensors(self) -> dict[str, Tensor]:
        out = self.base_tensors()
        out.update(self.adapter_tensors())
        return dict(sorted(out.items()))

    def trainable_parameters(self) -> list[Tensor]:
        return [t for _, t in sorted(self.named_tensors().items()) if t.requires_grad]

    def adapted_layers(self) -> dict[str, FrozenDense]:
        return {n: l for n, l in self.layers.items() if isinstance(l, (LoraLayer, MoeLoraLayer))}

    @property
    def mergeable(self) -> bool:
        return all(getattr(l, "mergeable", True) for l in self.layers.values())

    def load_state(self, tensors: dict[str, np.ndarray], strict: bool = True) -> None:
        own = self.named_tensors()
        if strict:
            missing = sorted(set(own) - set(tensors))
            unexpected = sorted(set(tensors) - set(own))
            if missing or unexpected:
                raise ConfigError(f"state mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, value in tensors.items():
            if name not in own:
                continue
            t = own[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != t.shape:
                raise DimensionError(f"{name}: checkpoint shape {value.shape} != model shape {t.shape}")
            t.data = value.copy()

    def state(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.named_tensors().items()}

    # -- forward ----------------------------------------------------------------

    def expert_weights(self, task_ids, gate: TaskGate | None = None) -> Tensor:
        gate = gate or self.gate
        if gate is None:
            raise ConfigError("model has no task gate")
        return gate.weights(task_ids)

    def _token_weights(self, gate: TaskGate, task_ids: np.ndarray, T: int) -> Tensor:
        omega = gate.weights(task_ids)
        rows = np.repeat(np.arange(task_ids.size), T)
        return ad.reshape(ad.gather_rows(omega, rows), (task_ids.size, T, gate.n_experts))

    def forward(self, tokens, task_ids=None) -> Tensor:
        """Logits of shape (B, T, V) for integer ``tokens`` of shape (B, T)."""
        tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
        B, T = tokens.shape
        c = self.config
        if T > c.context:
            raise DimensionError(f"sequence length {T} exceeds context {c.context}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= c.vocab):
            raise DimensionError("token id outside vocabulary")
        needs_task = self.gate is not None or bool(self.layer_gates)
        if needs_task:
            if task_ids is None:
                raise ConfigError("this model needs task ids")
            task_ids = np.broadcast_to(np.asarray(task_ids, dtype=np.int64), (B,)).copy()
        shared = self._token_weights(self.gate, task_ids, T) if self.gate is not None else None
        rng = self.rng if self.training else None

        x = ad.add(ad.gather_rows(self.wte, tokens),
                   ad.gather_rows(self.wpe, np.broadcast_to(np.arange(T), (B, T))))
        H, hd = c.n_heads, c.d_model // c.n_heads
        causal = np.triu(np.full((T, T), -np.inf), k=1)

        def dense(name, h):
            layer = self.layers[name]
            omega = shared
            if name in self.layer_gates:
                omega = self._token_weights(self.layer_gates[name], task_ids, T)
            return layer.forward(h, omega, rng)

        for i in range(c.n_layers):
            h = ad.rms_norm(x, self.norms[f"h.{i}.ln_1"])
            qkv = dense(f"h.{i}.attention.query_key_value", h)
            heads = []
            for j in range(3):
                part = ad.slice_last(qkv, j * c.d_model, (j + 1) * c.d_model)
                heads.append(ad.transpose(ad.reshape(part, (B, T, H, hd)), (0, 2, 1, 3)))
            q, k, v = heads
            scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(hd))
            att = ad.softmax(scores, causal)
            y = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (B, T, c.d_model))
            x = ad.add(x, dense(f"h.{i}.attention.dense", y))
            h = ad.rms_norm(x, self.norms[f"h.{i}.ln_2"])
            h = ad.gelu(dense(f"h.{i}.mlp.dense_h_to_4h", h))
            x = ad.add(x, dense(f"h.{i}.mlp.dense_4h_to_h", h))
        x = ad.rms_norm(x, self.norms["ln_f"])
        return ad.matmul(x, self.lm_head)

    __call__ = forward


def inject(model: ToyLM, spec: InjectionSpec, settings: AdapterSettings, tasks=None,
           seed: int = 0) -> ToyLM:
    """Wrap every matching dense layer with a LoRA or MOELoRA adapter (in place).

    Returns ``model`` for chaining.  Base weights of wrapped layers are
    flagged frozen; use :func:`freeze_pretrained` to freeze the rest.
    """
    if model.adapter_kind is not None:
        raise ConfigError("model already carries adapters")
    s = settings
    if spec.kind == "moelora":
        if s.n_experts < 1 or s.rank % s.n_experts:
            raise ConfigError(f"number of experts {s.n_experts} must divide rank {s.rank}")
        if s.gate_mode not in ("dense", "sparse", "uniform", "input_driven"):
            raise ConfigError(f"unknown gate mode {s.gate_mode!r}")
        if s.topology not in ("single_shared", "per_layer"):
            raise ConfigError(f"unknown gate topology {s.topology!r}")
    if s.rank < 1:
        raise ConfigError("rank must be positive")
    matched: dict[str, None] = {}
    for pattern in spec.patterns:
        hits = [n for n in model.layers if spec.matches(pattern, n)]
        if not hits:
            raise ConfigError(f"layer pattern {pattern!r} matches no layer")
        matched.update(dict.fromkeys(hits))

    rng = np.random.default_rng(seed)
    task_gated = spec.kind == "moelora" and s.gate_mode != "input_driven"
    if task_gated:
        if tasks is None:
            raise ConfigError("task-gated adapters need a task list")
        model.tasks = tasks if isinstance(tasks, TaskTable) else TaskTable(tasks)
    elif tasks is not None:
        model.tasks = tasks if isinstance(tasks, TaskTable) else TaskTable(tasks)

    for name in model.layers:
        if name not in matched:
            continue
        base = model.layers[name]
        for t in base.frozen_tensors():
            t.requires_grad = False
        if spec.kind == "lora":
            wrapped = LoraLayer(base, s.rank, s.alpha, s.dropout, rng)
        else:
            router = None
            if s.gate_mode == "input_driven":
                router = InputGate(base.d_in, s.n_experts, rng, name=f"{name}.router")
            wrapped = MoeLoraLayer(base, s.rank, s.n_experts, s.alpha, s.dropout, rng, router)
        model.layers[name] = wrapped
    if task_gated:
        if s.topology == "per_layer":
            for name in matched:
                model.layer_gates[name] = TaskGate(model.tasks, s.n_experts, s.task_dim, s.gate_mode,
                                                   s.top_k, rng, name=f"{name}.gate")
        else:
            model.gate = TaskGate(model.tasks, s.n_experts, s.task_dim, s.gate_mode, s.top_k, rng)
    model.adapter_kind = spec.kind
    model.settings = s
    model.rng = np.random.default_rng(seed + 1)
    return model


def freeze_pretrained(model: ToyLM) -> None:
    """Only adapter experts/pairs and gate parameters stay trainable."""
    for t in model.base_tensors().values():
        t.requires_grad = False
    for t in model.adapter_tensors().values():
        t.requires_grad = True


def forward_task(model: ToyLM, batch, task) -> Tensor:
    """Logits for ``batch`` (B, T) under one task id (name or index) or one per row."""
    batch = np.atleast_2d(np.asarray(batch, dtype=np.int64))
    if model.tasks is None:
        return model.forward(batch)
    if isinstance(task, (str, int, np.integer)):
        ids = np.full(batch.shape[0], model.tasks.index(task))
    else:
        ids = model.tasks.indices(task)
    return model.forward(batch, ids)


def checksum(t: Tensor | np.ndarray) -> str:
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    h = hashlib.sha256()
    h.update(str(data.shape).encode())
    h.update(np.ascontiguousarray(data, dtype="<f8").tobytes())
    return h.hexdigest()


def frozen_checksums(model: ToyLM) -> dict[str, str]:
    return {n: checksum(t) for n, t in sorted(model.base_tensors().items()) if not t.requires_grad}
