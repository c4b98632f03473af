"""Greedy decoding and per-task scoring."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from moelora import autodiff as ad
from moelora.datagen import EOS, PAD, SEP, TaskDataset, metric_for
from moelora.metrics import TaskScore, average_score, macro_f1, micro_f1, rouge_l

NONE_CLASS = -1

# (tokens [B, T], task indices [B]) -> logits [B, T, V]
LogitsFn = Callable[[np.ndarray, np.ndarray], ad.Tensor]


def prompt_tokens(inp: Sequence[int], max_input_len: int) -> list[int]:
    """Input truncated so that input plus SEP fits in ``max_input_len``."""
    return list(inp[: max(0, max_input_len - 1)]) + [SEP]


def greedy_decode(logits_fn: LogitsFn, prompts: Sequence[Sequence[int]], task_ids: Sequence[int],
                  max_new: int, context: int) -> list[list[int]]:
    """Batched greedy generation; stops per row at EOS, ``max_new`` tokens or the context limit."""
    seqs = [list(p) for p in prompts]
    outs: list[list[int]] = [[] for _ in prompts]
    active = [i for i in range(len(seqs)) if len(seqs[i]) < context]
    task_ids = np.asarray(task_ids, dtype=np.int64)
    with ad.no_grad():
        for _ in range(max_new):
            if not active:
                break
            width = max(len(seqs[i]) for i in active)
            tokens = np.full((len(active), width), PAD, dtype=np.int64)
            for r, i in enumerate(active):
                tokens[r, : len(seqs[i])] = seqs[i]
            logits = logits_fn(tokens, task_ids[active]).data
            still = []
            for r, i in enumerate(active):
                nxt = int(np.argmax(logits[r, len(seqs[i]) - 1]))
                if nxt == EOS:
                    continue
                outs[i].append(nxt)
                seqs[i].append(nxt)
                if len(seqs[i]) < context:
                    still.append(i)
            active = still
    return outs


def aligned_units(pred: Sequence[int], gold: Sequence[int]) -> tuple[list[int], list[int]]:
    """Position-wise class pairs over the reference length; missing predictions become NONE."""
    return [pred[i] if i < len(pred) else NONE_CLASS for i in range(len(gold))], list(gold)


def score_task(metric: str, preds: Sequence[Sequence[int]], golds: Sequence[Sequence[int]],
               beta: float = 1.0) -> float:
    if metric == "rouge_l":
        return float(np.mean([rouge_l(g, p, beta) for p, g in zip(preds, golds)]))
    p_units, g_units = [], []
    for p, g in zip(preds, golds):
        pu, gu = aligned_units(p, g)
        p_units.extend(pu)
        g_units.extend(gu)
    return micro_f1(p_units, g_units) if metric == "micro_f1" else macro_f1(p_units, g_units)


def evaluate(predict: Callable[[str, list], list[list[int]]], data: TaskDataset,
             beta: float = 1.0) -> dict:
    """Score every task of ``data`` using ``predict(task, samples) -> outputs``.

    Returns ``{task: {"metric": m, "value": v}, ..., "average": mean}``.
    """
    report: dict = {}
    scores = []
    for task, samples in data.by_task().items():
        if not samples:
            continue
        preds = predict(task, samples)
        metric = metric_for(task)
        value = score_task(metric, preds, [s.output for s in samples], beta)
        scores.append(TaskScore(task, metric, value))
        report[task] = {"metric": metric, "value": value}
    report["average"] = average_score(scores)
    return report


def model_predictor(model, max_input_len: int, max_output_len: int, batch_size: int = 256):
    """Predictor decoding with an (adapted or merged) model's ``forward(tokens, task_ids)``."""

    def predict(task: str, samples: list) -> list[list[int]]:
        tid = model.tasks.index(task) if getattr(model, "tasks", None) is not None else 0
        was_training = getattr(model, "training", False)
        model.training = False
        try:
            out = []
            for start in range(0, len(samples), batch_size):
                chunk = samples[start:start + batch_size]
                prompts = [prompt_tokens(s.input, max_input_len) for s in chunk]
                out.extend(greedy_decode(model.forward, prompts, [tid] * len(chunk),
                                         max_output_len, model.config.context))
            return out
        finally:
            model.training = was_training

    return predict


def oracle_predictor(task: str, samples: list) -> list[list[int]]:
    return [list(s.output) for s in samples]
