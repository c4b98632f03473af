"""Synthetic multi-task corpus with deliberately imbalanced task sizes.

Token layout (vocabulary ``V``, ``M`` tasks)::

    0 = PAD, 1 = SEP, 2 = EOS, 3 .. 3+M-1 = task sentinels, 3+M .. V-1 = content

Each sample's stored input begins with its task's sentinel; the remaining
input tokens and all output tokens are content tokens.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from moelora.errors import ConfigError, DatasetError

PAD, SEP, EOS = 0, 1, 2
N_SPECIAL = 3
SPLITS = ("train", "valid", "test")
RULE_SEED = 20231106
MIN_LEN, MAX_LEN = 4, 4


def sentinel(task_index: int) -> int:
    return N_SPECIAL + task_index


def content_offset(n_tasks: int) -> int:
    return N_SPECIAL + n_tasks


@dataclass(frozen=True)
class TaskSample:
    task_id: str
    input: tuple[int, ...]
    output: tuple[int, ...]
    split: str = "train"

    def __post_init__(self):
        if not self.output:
            raise DatasetError(f"sample of task {self.task_id!r} has an empty output")
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")


class TaskDataset:
    """Task-tagged samples; task order is the order of first appearance."""

    def __init__(self, samples: Iterable[TaskSample], tasks: Sequence[str] | None = None):
        self.samples = list(samples)
        seen = list(dict.fromkeys(s.task_id for s in self.samples))
        self.tasks = list(tasks) if tasks is not None else seen

    def __len__(self) -> int:
        return len(self.samples)

    def __eq__(self, other) -> bool:
        return isinstance(other, TaskDataset) and self.tasks == other.tasks and self.samples == other.samples

    def split(self, name: str) -> "TaskDataset":
        return TaskDataset([s for s in self.samples if s.split == name], self.tasks)

    def by_task(self) -> dict[str, list[TaskSample]]:
        out: dict[str, list[TaskSample]] = {t: [] for t in self.tasks}
        for s in self.samples:
            out.setdefault(s.task_id, []).append(s)
        return out

    def counts(self, split: str = "train") -> dict[str, int]:
        return {t: len(v) for t, v in self.split(split).by_task().items()}

    def max_token(self) -> int:
        return max((max(s.input + s.output) for s in self.samples), default=-1)


# -- task rules ---------------------------------------------------------------
# Rules operate on content indices 0..C-1; ``tables`` holds fixed lookup tables.

def _rule_tables(n_content: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(RULE_SEED)
    return {
        "perm": rng.permutation(n_content),
        "class7": rng.integers(0, 7, n_content),
        "class5": rng.integers(0, 5, n_content),
    }


def _parity_tag(x, C, tb):
    return [t % 2 for t in x]


def _substitute(x, C, tb):
    return [int(tb["perm"][t]) for t in x]


def _bucket_tag(x, C, tb):
    return [t * 3 // C for t in x]


def _extract_ends(x, C, tb):
    return [x[0], x[-1]]


def _first_class(x, C, tb):
    return [int(tb["class7"][x[0]])]


def _second_class(x, C, tb):
    return [int(tb["class5"][x[1]])]


def _reverse(x, C, tb):
    return list(reversed(x))


def _shift_copy(x, C, tb):
    return [(t + 1) % C for t in x]


@dataclass(frozen=True)
class TaskRule:
    name: str
    metric: str
    apply: Callable


TASK_RULES: dict[str, TaskRule] = {
    r.name: r
    for r in (
        TaskRule("parity_tag", "micro_f1", _parity_tag),
        TaskRule("substitute", "micro_f1", _substitute),
        TaskRule("bucket_tag", "micro_f1", _bucket_tag),
        TaskRule("extract_ends", "micro_f1", _extract_ends),
        TaskRule("first_class", "macro_f1", _first_class),
        TaskRule("second_class", "macro_f1", _second_class),
        TaskRule("reverse", "rouge_l", _reverse),
        TaskRule("shift_copy", "rouge_l", _shift_copy),
    )
}
CLASSIFICATION = [n for n, r in TASK_RULES.items() if r.metric != "rouge_l"]
GENERATION = [n for n, r in TASK_RULES.items() if r.metric == "rouge_l"]

# Train sizes shaped like the eight-task medical benchmark, scaled to a 2000-sample maximum.
DEFAULT_COUNTS_8 = (1139, 959, 629, 1988, 1459, 1321, 725, 2000)


def task_names(n_tasks: int) -> list[str]:
    if n_tasks < 2:
        raise ConfigError("need at least two tasks")
    if n_tasks > len(TASK_RULES):
        raise ConfigError(f"at most {len(TASK_RULES)} synthetic tasks are available")
    if n_tasks == 2:
        return [CLASSIFICATION[0], GENERATION[0]]
    return CLASSIFICATION[: n_tasks - 2] + GENERATION


def metric_for(task: str) -> str:
    rule = TASK_RULES.get(task)
    return rule.metric if rule else "rouge_l"


@dataclass(frozen=True)
class ImbalanceProfile:
    counts: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))
        if not self.counts or min(self.counts) < 1:
            raise ConfigError("every task needs at least one training sample")

    @property
    def ratio(self) -> float:
        return max(self.counts) / min(self.counts)

    @classmethod
    def default(cls, n_tasks: int) -> "ImbalanceProfile":
        if n_tasks == 8:
            return cls(DEFAULT_COUNTS_8)
        return cls(tuple(int(round(c)) for c in np.linspace(2000, 500, n_tasks)))

    def scaled(self, factor: float) -> "ImbalanceProfile":
        return ImbalanceProfile(tuple(max(1, int(round(c * factor))) for c in self.counts))


def apply_rule(task: str, content_input: Sequence[int], n_content: int) -> list[int]:
    """Output content indices for an input of content indices."""
    return TASK_RULES[task].apply(list(content_input), n_content, _rule_tables(n_content))


def _generate_task(j: int, name: str, n_train: int, n_valid: int, n_test: int,
                   n_tasks: int, vocab: int, seed_seq: np.random.SeedSequence) -> list[TaskSample]:
    rng = np.random.default_rng(seed_seq)
    C = vocab - content_offset(n_tasks)
    off = content_offset(n_tasks)
    tables = _rule_tables(C)
    rule = TASK_RULES[name]
    need = n_train + n_valid + n_test
    inputs: dict[tuple[int, ...], None] = {}
    attempts = 0
    while len(inputs) < need:
        attempts += 1
        if attempts > 50 * need + 1000:
            raise ConfigError(f"cannot draw {need} distinct inputs for task {name!r}")
        n = int(rng.integers(MIN_LEN, MAX_LEN + 1))
        inputs.setdefault(tuple(int(t) for t in rng.integers(0, C, n)), None)
    out = []
    for k, x in enumerate(inputs):
        split = "train" if k < n_train else ("valid" if k < n_train + n_valid else "test")
        y = rule.apply(list(x), C, tables)
        out.append(TaskSample(name, (sentinel(j),) + tuple(t + off for t in x),
                              tuple(t + off for t in y), split))
    return out


def generate(seed: int, profile: ImbalanceProfile | None = None, n_tasks: int = 8,
             valid_size: int = 100, test_size: int = 100, vocab: int = 64) -> TaskDataset:
    """Deterministic imbalanced corpus: one rule per task, distinct inputs across splits."""
    names = task_names(n_tasks)
    profile = profile or ImbalanceProfile.default(n_tasks)
    if len(profile.counts) != n_tasks:
        raise ConfigError(f"profile has {len(profile.counts)} counts for {n_tasks} tasks")
    if vocab - content_offset(n_tasks) < 8:
        raise ConfigError("vocabulary too small for the requested number of tasks")
    seqs = np.random.SeedSequence(seed).spawn(n_tasks)
    with ThreadPoolExecutor() as pool:
        parts = pool.map(
            lambda j: _generate_task(j, names[j], profile.counts[j], valid_size, test_size,
                                     n_tasks, vocab, seqs[j]),
            range(n_tasks),
        )
        samples = [s for part in parts for s in part]
    return TaskDataset(samples, names)


# -- persistence ----------------------------------------------------------------

def dumps(ds: TaskDataset) -> str:
    lines = [
        json.dumps({"task_id": s.task_id, "input": list(s.input), "output": list(s.output), "split": s.split},
                   separators=(",", ":"))
        for s in ds.samples
    ]
    return "".join(line + "\n" for line in lines)


def save(ds: TaskDataset, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(ds), encoding="utf-8")
    return path


def _parse_ids(value, field: str, lineno: int) -> tuple[int, ...]:
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) and v >= 0
                                              for v in value):
        raise DatasetError(f"field {field!r} must be a list of nonnegative integers", lineno)
    return tuple(value)


def loads(text: str) -> TaskDataset:
    samples = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"invalid JSON ({exc.msg})", lineno) from None
        if not isinstance(rec, dict):
            raise DatasetError("record must be a JSON object", lineno)
        for key in ("task_id", "input", "output", "split"):
            if key not in rec:
                raise DatasetError(f"missing field {key!r}", lineno)
        try:
            samples.append(TaskSample(str(rec["task_id"]), _parse_ids(rec["input"], "input", lineno),
                                      _parse_ids(rec["output"], "output", lineno), rec["split"]))
        except DatasetError as exc:
            if exc.line is None:
                raise DatasetError(str(exc), lineno) from None
            raise
    return TaskDataset(samples)


def load(path: str | os.PathLike) -> TaskDataset:
    return loads(Path(path).read_text(encoding="utf-8"))
