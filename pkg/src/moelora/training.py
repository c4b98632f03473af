"""Multi-task fine-tuning: batching strategies, objective, Adam, and the training loop."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
from collections import Counter
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from moelora import autodiff as ad
from moelora.autodiff import Tensor
from moelora.datagen import EOS, PAD, SEP, TaskDataset, TaskSample, N_SPECIAL
from moelora.errors import ConfigError, DatasetError, InvalidObjectiveError, NumericError
from moelora.evaluation import evaluate, model_predictor, prompt_tokens
from moelora.model import ModelConfig, ToyLM

log = logging.getLogger(__name__)

BATCH_STRATEGIES = ("mixed", "BT", "RBT")


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_steps: int = 1000
    learning_rate: float = 1e-3
    rank: int = 16
    alpha: float = 16.0
    experts: int = 8
    gate_mode: str = "dense"
    gate_topology: str = "single_shared"
    top_k: int = 2
    task_dim: int = 64
    batch_strategy: str = "mixed"
    seed: int = 42
    max_input_len: int = 48
    max_output_len: int = 16
    dropout: float = 0.1
    eval_interval: int = 50

    def __post_init__(self):
        for name in ("batch_size", "max_steps", "rank", "experts", "task_dim", "max_input_len", "max_output_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.learning_rate < 0 or self.alpha <= 0:
            raise ConfigError("learning_rate must be >= 0 and alpha > 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.eval_interval < 0:
            raise ConfigError("eval_interval must be >= 0")
        if self.batch_strategy not in BATCH_STRATEGIES:
            raise ConfigError(f"batch strategy must be one of {BATCH_STRATEGIES}")
        if self.max_input_len < 2:
            raise ConfigError("max_input_len must leave room for one input token and SEP")
        if self.max_output_len < 2:
            raise ConfigError("max_output_len must leave room for one output token and EOS")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- batching -------------------------------------------------------------------

class BatchSampler:
    """Yields batches of (sample, task index) under one of three strategies.

    ``mixed`` shuffles the union of all training samples each epoch, ``BT``
    serves single-task batches with tasks in round-robin order, and ``RBT``
    picks the task of each batch uniformly at random.
    """

    def __init__(self, samples: Sequence[TaskSample], tasks: Sequence[str], batch_size: int,
                 strategy: str = "mixed", seed: int = 0):
        if strategy not in BATCH_STRATEGIES:
            raise ConfigError(f"batch strategy must be one of {BATCH_STRATEGIES}")
        self.samples = list(samples)
        self.tasks = list(tasks)
        self.batch_size = batch_size
        self.strategy = strategy
        self.rng = np.random.default_rng(seed)
        index = {t: i for i, t in enumerate(self.tasks)}
        self.pools: list[list[int]] = [[] for _ in self.tasks]
        for k, s in enumerate(self.samples):
            if s.task_id not in index:
                raise DatasetError(f"sample task {s.task_id!r} is not among the model's tasks")
            self.pools[index[s.task_id]].append(k)
        empty = [t for t, p in zip(self.tasks, self.pools) if not p]
        if empty:
            raise DatasetError(f"no training samples for task(s) {empty}")
        self._task_of = [index[s.task_id] for s in self.samples]
        self._order: list[np.ndarray] = [np.empty(0, dtype=np.int64)] * len(self.tasks)
        self._cursor = [0] * len(self.tasks)
        self._union = np.empty(0, dtype=np.int64)
        self._ucursor = 0

    def _take_union(self, n: int) -> list[int]:
        out = []
        while len(out) < n:
            if self._ucursor >= self._union.size:
                self._union = self.rng.permutation(len(self.samples))
                self._ucursor = 0
            take = min(n - len(out), self._union.size - self._ucursor)
            out.extend(self._union[self._ucursor:self._ucursor + take].tolist())
            self._ucursor += take
        return out

    def _take_task(self, t: int, n: int) -> list[int]:
        out = []
        pool = self.pools[t]
        while len(out) < n:
            if self._cursor[t] >= self._order[t].size:
                self._order[t] = self.rng.permutation(len(pool))
                self._cursor[t] = 0
            take = min(n - len(out), self._order[t].size - self._cursor[t])
            sel = self._order[t][self._cursor[t]:self._cursor[t] + take]
            out.extend(pool[i] for i in sel)
            self._cursor[t] += take
        return out

    def batch(self, step: int) -> list[tuple[TaskSample, int]]:
        if self.strategy == "mixed":
            idx = self._take_union(self.batch_size)
        else:
            t = step % len(self.tasks) if self.strategy == "BT" else int(self.rng.integers(len(self.tasks)))
            idx = self._take_task(t, self.batch_size)
        return [(self.samples[i], self._task_of[i]) for i in idx]


def make_batches(sampler: BatchSampler, step: int) -> list[tuple[TaskSample, int]]:
    return sampler.batch(step)


def task_mix_hash(task_ids: Sequence[int]) -> str:
    counts = sorted(Counter(int(t) for t in task_ids).items())
    return hashlib.sha1(repr(counts).encode()).hexdigest()[:10]


# -- objective --------------------------------------------------------------------

def encode(sample: TaskSample, max_input_len: int, max_output_len: int) -> tuple[list[int], int]:
    """Full token sequence and the length of its prompt (input + SEP)."""
    if not sample.output:
        raise InvalidObjectiveError("sample has an empty output span")
    prompt = prompt_tokens(sample.input, max_input_len)
    out = list(sample.output[: max_output_len - 1]) + [EOS]
    return prompt + out, len(prompt)


def collate(samples: Sequence[TaskSample], max_input_len: int, max_output_len: int):
    """Teacher-forcing arrays: tokens [B,T], targets [B,T], loss mask [B,T]."""
    encoded = [encode(s, max_input_len, max_output_len) for s in samples]
    T = max(len(seq) for seq, _ in encoded) - 1
    tokens = np.full((len(samples), T), PAD, dtype=np.int64)
    targets = np.full((len(samples), T), PAD, dtype=np.int64)
    mask = np.zeros((len(samples), T), dtype=bool)
    for r, (seq, plen) in enumerate(encoded):
        n = len(seq) - 1
        tokens[r, :n] = seq[:-1]
        targets[r, :n] = seq[1:]
        # target position t predicts seq[t+1]; output span starts at seq[plen]
        mask[r, plen - 1:n] = True
    return tokens, targets, mask


def objective(logits: Tensor, targets, mask) -> Tensor:
    """Token-mean negative log-likelihood over output-span positions only."""
    V = logits.shape[-1]
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise InvalidObjectiveError("empty output span")
    return ad.cross_entropy(ad.reshape(logits, (-1, V)), targets.reshape(-1), mask.reshape(-1))


# -- optimizer ----------------------------------------------------------------------

class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# -- loop -----------------------------------------------------------------------------

@dataclass
class TrainResult:
    losses: list[float]
    hashes: list[str]
    best_step: int | None = None
    best_score: float | None = None
    validation: list[tuple[int, float]] | None = None

    def write_csv(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "task_mix_hash", "loss"])
            for i, (h, loss) in enumerate(zip(self.hashes, self.losses)):
                w.writerow([i, h, repr(loss)])
        return path


def _check_lengths(model: ToyLM, cfg: TrainConfig) -> None:
    if cfg.max_input_len + cfg.max_output_len > model.config.context:
        raise ConfigError(
            f"max_input_len + max_output_len = {cfg.max_input_len + cfg.max_output_len} "
            f"exceeds the model context {model.config.context}"
        )


def train(model: ToyLM, dataset: TaskDataset, cfg: TrainConfig,
          valid: TaskDataset | None = None) -> TrainResult:
    """Optimise the model's trainable tensors on the train split of ``dataset``.

    With ``valid`` and a positive ``eval_interval``, the adapter state with
    the best validation average is restored at the end.
    """
    _check_lengths(model, cfg)
    params = model.trainable_parameters()
    if not params:
        raise ConfigError("nothing to train: the model has no trainable parameters")
    train_split = dataset.split("train")
    if not train_split.samples:
        raise DatasetError("dataset has no training samples")
    tasks = list(model.tasks) if model.tasks is not None else train_split.tasks
    if dataset.max_token() >= model.config.vocab:
        raise DatasetError(f"dataset token id {dataset.max_token()} outside model vocabulary")
    sampler = BatchSampler(train_split.samples, tasks, cfg.batch_size, cfg.batch_strategy, cfg.seed)
    opt = Adam(params, lr=cfg.learning_rate)
    model.rng = np.random.default_rng([cfg.seed, 1])
    result = TrainResult([], [], validation=[])
    best_state = None

    def validate(step: int) -> None:
        nonlocal best_state
        report = evaluate(model_predictor(model, cfg.max_input_len, cfg.max_output_len), valid)
        score = report["average"]
        result.validation.append((step, score))
        log.info("step %d validation average %.4f", step, score)
        if result.best_score is None or score > result.best_score:
            result.best_score, result.best_step = score, step
            best_state = [p.data.copy() for p in params]

    model.training = True
    try:
        for step in range(cfg.max_steps):
            batch = make_batches(sampler, step)
            samples = [s for s, _ in batch]
            task_ids = np.array([t for _, t in batch], dtype=np.int64)
            tokens, targets, mask = collate(samples, cfg.max_input_len, cfg.max_output_len)
            loss = objective(model.forward(tokens, task_ids), targets, mask)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss {value} at step {step}", step=step)
            loss.backward()
            opt.step()
            opt.zero_grad()
            if not ad.parameters_finite(params):
                raise NumericError(f"non-finite parameter after update at step {step}", step=step)
            result.losses.append(value)
            result.hashes.append(task_mix_hash(task_ids))
            if valid is not None and cfg.eval_interval and (step + 1) % cfg.eval_interval == 0:
                model.training = False
                validate(step + 1)
                model.training = True
    finally:
        model.training = False
    if valid is not None and cfg.eval_interval and (not result.validation or result.validation[-1][0] != cfg.max_steps):
        validate(cfg.max_steps)
    if best_state is not None:
        for p, d in zip(params, best_state):
            p.data = d
    return result


# -- base model ---------------------------------------------------------------------

def pretraining_corpus(n: int, vocab: int, seed: int) -> list[list[int]]:
    """Task-agnostic sequences: Markov-chain text and ``x SEP x EOS`` copies."""
    rng = np.random.default_rng(seed)
    lo = N_SPECIAL
    k = vocab - lo
    trans = rng.dirichlet(np.full(k, 0.2), size=k)
    seqs = []
    for _ in range(n):
        length = int(rng.integers(3, 9))
        x = [int(rng.integers(k))]
        for _ in range(length - 1):
            x.append(int(rng.choice(k, p=trans[x[-1]])))
        x = [t + lo for t in x]
        if rng.random() < 0.5:
            seqs.append(x + [SEP] + x + [EOS])
        else:
            more = [int(rng.choice(k, p=trans[x[-1] - lo])) + lo for _ in range(length)]
            seqs.append(x + more + [EOS])
    return seqs


def pretrain_base(config: ModelConfig = ModelConfig(), seed: int = 0, steps: int = 300,
                  batch_size: int = 32, lr: float = 3e-3) -> ToyLM:
    """Produce the frozen 'pretrained' base: full training on a task-agnostic corpus."""
    model = ToyLM(config, seed=seed)
    corpus = pretraining_corpus(4096, config.vocab, seed + 7919)
    rng = np.random.default_rng(seed + 104729)
    params = model.trainable_parameters()
    opt = Adam(params, lr=lr)
    for _ in range(steps):
        idx = rng.integers(len(corpus), size=batch_size)
        seqs = [corpus[i][: config.context + 1] for i in idx]
        T = max(len(s) for s in seqs) - 1
        tokens = np.full((batch_size, T), PAD, dtype=np.int64)
        targets = np.full((batch_size, T), PAD, dtype=np.int64)
        mask = np.zeros((batch_size, T), dtype=bool)
        for r, s in enumerate(seqs):
            tokens[r, : len(s) - 1] = s[:-1]
            targets[r, : len(s) - 1] = s[1:]
            mask[r, : len(s) - 1] = True
        loss = objective(model.forward(tokens), targets, mask)
        loss.backward()
        opt.step()
        opt.zero_grad()
    for p in params:
        p.requires_grad = False
    return model
