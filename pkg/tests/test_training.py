import math
from collections import Counter

import numpy as np
import pytest

from moelora.autodiff import Tensor
from moelora.datagen import EOS, PAD, SEP, TaskDataset, TaskSample
from moelora.errors import ConfigError, DatasetError, InvalidObjectiveError, NumericError
from moelora.model import ModelConfig
from moelora.training import (
    Adam, BatchSampler, TrainConfig, collate, encode, make_batches, objective, task_mix_hash, train,
)

from conftest import adapted_toy

# upper 1% point of the chi-squared distribution with 7 degrees of freedom
CHI2_7DF_P01 = 18.475

SMALL = ModelConfig(vocab=32, d_model=16, n_layers=1, n_heads=2, context=24, mlp_ratio=2)
SHORT = dict(max_input_len=12, max_output_len=8, eval_interval=0, dropout=0.0)


def copy_task(n=64, seed=0, task="copy"):
    rng = np.random.default_rng(seed)
    rows = rng.integers(6, 32, (n, 3)).tolist()
    return [TaskSample(task, (3, *x), tuple(x)) for x in rows]


def three_tasks():
    return TaskDataset(copy_task(20, 0, "a") + copy_task(20, 1, "b") + copy_task(20, 2, "c"))


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.learning_rate, c.rank, c.experts, c.top_k, c.task_dim, c.eval_interval) == (1e-3, 16, 8, 2, 64, 50)
        assert (c.max_input_len, c.max_output_len) == (48, 16)

    @pytest.mark.parametrize("bad", [dict(batch_size=0), dict(max_steps=0), dict(learning_rate=-1.0),
                                     dict(batch_strategy="shuffled"), dict(dropout=1.0), dict(rank=0)])
    def test_invalid(self, bad):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)

    def test_round_trip(self):
        c = TrainConfig(rank=8, batch_strategy="RBT")
        assert TrainConfig.from_dict(c.to_dict()) == c


class TestObjective:
    def test_uniform_v64(self):
        tokens, targets, mask = collate([TaskSample("a", (3, 9, 10), (11, 12))], 8, 8)
        logits = Tensor(np.zeros(tokens.shape + (64,)))
        assert float(objective(logits, targets, mask).data) == pytest.approx(math.log(64), abs=1e-12)
        assert float(objective(logits, targets, mask).data) == pytest.approx(4.1589, abs=1e-4)

    def test_certain_model(self):
        tokens, targets, mask = collate([TaskSample("a", (3, 9), (11,))], 8, 8)
        logits = np.full(tokens.shape + (16,), -1e3)
        np.put_along_axis(logits, targets[..., None], 1e3, axis=-1)
        assert float(objective(Tensor(logits), targets, mask).data) == 0.0

    def test_input_positions_masked(self):
        tokens, targets, mask = collate([TaskSample("a", (3, 9, 10, 4), (11, 12))], 8, 8)
        rng = np.random.default_rng(0)
        logits = rng.normal(size=tokens.shape + (16,))
        base = float(objective(Tensor(logits), targets, mask).data)
        logits[~mask] += rng.normal(size=logits[~mask].shape) * 10
        assert float(objective(Tensor(logits), targets, mask).data) == base

    def test_empty_output(self):
        with pytest.raises(InvalidObjectiveError):
            objective(Tensor(np.zeros((1, 3, 8))), np.zeros((1, 3), int), np.zeros((1, 3), bool))


class TestEncoding:
    def test_layout(self):
        seq, plen = encode(TaskSample("a", (3, 20, 21), (30, 31)), 48, 16)
        assert seq == [3, 20, 21, SEP, 30, 31, EOS] and plen == 4

    def test_truncation(self):
        seq, plen = encode(TaskSample("a", tuple(range(3, 13)), tuple(range(20, 30))), 5, 4)
        assert seq == [3, 4, 5, 6, SEP, 20, 21, 22, EOS] and plen == 5

    def test_collate_mask(self):
        tokens, targets, mask = collate([TaskSample("a", (3, 20), (30,)), TaskSample("a", (3, 20, 21), (30, 31))], 48, 16)
        assert tokens[0].tolist() == [3, 20, SEP, 30, PAD, PAD]
        assert targets[0].tolist() == [20, SEP, 30, EOS, PAD, PAD]
        assert mask[0].tolist() == [False, False, True, True, False, False]
        assert mask[1].tolist() == [False, False, False, True, True, True]


class TestSampler:
    def test_bt_single_task_round_robin(self):
        ds = three_tasks()
        s = BatchSampler(ds.samples, ds.tasks, 8, "BT", seed=0)
        seen = []
        for step in range(9):
            ids = {t for _, t in make_batches(s, step)}
            assert len(ids) == 1
            seen.append(ids.pop())
        assert seen == [0, 1, 2] * 3

    def test_mixed_proportional(self):
        counts = [100, 200, 50, 400, 150, 300, 80, 220]
        samples = [TaskSample(f"t{j}", (3, 9), (10,)) for j, c in enumerate(counts) for _ in range(c)]
        s = BatchSampler(samples, [f"t{j}" for j in range(8)], 16, "mixed", seed=1)
        tally = Counter(t for step in range(625) for _, t in s.batch(step))
        n = sum(tally.values())
        assert n == 10_000
        expected = np.array(counts) / sum(counts) * n
        chi2 = sum((tally[j] - expected[j]) ** 2 / expected[j] for j in range(8))
        assert chi2 < CHI2_7DF_P01

    def test_rbt_uniform_over_tasks(self):
        counts = [1000, 20, 300, 40, 500, 60, 700, 80]
        samples = [TaskSample(f"t{j}", (3, 9), (10,)) for j, c in enumerate(counts) for _ in range(c)]
        s = BatchSampler(samples, [f"t{j}" for j in range(8)], 4, "RBT", seed=2)
        tally = Counter(s.batch(step)[0][1] for step in range(10_000))
        chi2 = sum((tally[j] - 1250) ** 2 / 1250 for j in range(8))
        assert chi2 < CHI2_7DF_P01
        assert all(len({t for _, t in s.batch(k)}) == 1 for k in range(50))

    def test_missing_task(self):
        with pytest.raises(DatasetError):
            BatchSampler([TaskSample("a", (3,), (4,))], ["a", "b"], 2)

    def test_mix_hash(self):
        assert task_mix_hash([0, 1, 1]) == task_mix_hash([1, 0, 1]) != task_mix_hash([0, 0, 1])
        assert len(task_mix_hash([3])) == 10


class TestAdam:
    def test_first_step(self):
        p = Tensor([1.0], requires_grad=True)
        opt = Adam([p], lr=0.1)
        p.grad = np.array([2.0])
        opt.step()
        assert abs(p.data[0] - (1.0 - 0.1 * 2.0 / (2.0 + 1e-8))) < 1e-12

    def test_second_step(self):
        p = Tensor([0.0], requires_grad=True)
        opt = Adam([p], lr=0.01)
        for g in (1.0, -3.0):
            p.grad = np.array([g])
            opt.step()
        m = 0.9 * 0.1 * 1.0 + 0.1 * -3.0
        v = 0.999 * 0.001 * 1.0 + 0.001 * 9.0
        mh, vh = m / (1 - 0.9 ** 2), v / (1 - 0.999 ** 2)
        first = -0.01 * 1.0 / (1.0 + 1e-8)
        assert abs(p.data[0] - (first - 0.01 * mh / (math.sqrt(vh) + 1e-8))) < 1e-12


class TestTrain:
    def test_lr_zero_is_noop(self):
        m = adapted_toy(config=SMALL, tasks=["a", "b", "c"])
        before = {n: t.data.copy() for n, t in m.named_tensors().items()}
        train(m, three_tasks(), TrainConfig(max_steps=5, batch_size=4, learning_rate=0.0, **SHORT))
        assert all(np.array_equal(before[n], t.data) for n, t in m.named_tensors().items())

    def test_loss_halves_on_copy_task(self):
        m = adapted_toy(config=SMALL, tasks=["copy"], rank=8, n_experts=2)
        # an untrained base at init scale barely moves the logits; widen embeddings and head
        m.wte.data *= 50
        m.lm_head.data *= 50
        for t in m.adapter_tensors().values():
            if t.name.endswith(".B"):
                t.data[:] = 0.0
        res = train(m, TaskDataset(copy_task(64)), TrainConfig(max_steps=200, batch_size=16, learning_rate=1e-2, **SHORT))
        assert len(res.losses) == 200
        assert np.mean(res.losses[-10:]) <= 0.5 * res.losses[0]

    def test_deterministic(self):
        traces = []
        for _ in range(2):
            m = adapted_toy(config=SMALL, tasks=["a", "b", "c"], dropout=0.1)
            cfg = TrainConfig(max_steps=6, batch_size=4, learning_rate=1e-2, **{**SHORT, "dropout": 0.1})
            traces.append(train(m, three_tasks(), cfg).losses)
        assert traces[0] == traces[1]

    def test_only_adapters_change(self):
        m = adapted_toy(config=SMALL, tasks=["a", "b", "c"])
        before = {n: t.data.copy() for n, t in m.named_tensors().items()}
        train(m, three_tasks(), TrainConfig(max_steps=3, batch_size=4, learning_rate=1e-2, **SHORT))
        changed = {n for n, t in m.named_tensors().items() if not np.array_equal(before[n], t.data)}
        assert changed and changed <= set(m.adapter_tensors())

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_aborts_with_step(self):
        m = adapted_toy(config=SMALL, tasks=["a", "b", "c"])
        with pytest.raises(NumericError) as info:
            train(m, three_tasks(), TrainConfig(max_steps=5, batch_size=4, learning_rate=1e300, **SHORT))
        assert info.value.step is not None and "step" in str(info.value)

    def test_empty_task(self):
        m = adapted_toy(config=SMALL, tasks=["a", "b", "z"])
        with pytest.raises(DatasetError):
            train(m, three_tasks(), TrainConfig(max_steps=1, **SHORT))

    def test_vocab_check(self):
        m = adapted_toy(config=SMALL, tasks=["a"])
        with pytest.raises(DatasetError):
            train(m, TaskDataset([TaskSample("a", (3, 40), (5,))]), TrainConfig(max_steps=1, **SHORT))

    def test_context_check(self):
        m = adapted_toy(config=SMALL, tasks=["a", "b", "c"])
        with pytest.raises(ConfigError):
            train(m, three_tasks(), TrainConfig(max_steps=1, max_input_len=20, max_output_len=8))

    def test_validation_selection(self):
        m = adapted_toy(config=SMALL, tasks=["a", "b", "c"])
        ds = three_tasks()
        valid = TaskDataset([TaskSample(s.task_id, s.input, s.output, "valid") for s in ds.samples[::4]])
        res = train(m, ds, TrainConfig(max_steps=6, batch_size=4, learning_rate=1e-2, **{**SHORT, "eval_interval": 2}), valid)
        assert [s for s, _ in res.validation] == [2, 4, 6]
        assert res.best_score == max(v for _, v in res.validation)

    def test_csv(self, tmp_path):
        m = adapted_toy(config=SMALL, tasks=["a", "b", "c"])
        res = train(m, three_tasks(), TrainConfig(max_steps=4, batch_size=4, **SHORT))
        lines = res.write_csv(tmp_path / "loss.csv").read_text().splitlines()
        assert lines[0] == "step,task_mix_hash,loss" and len(lines) == 5
        step, h, loss = lines[1].split(",")
        assert step == "0" and len(h) == 10 and float(loss) == res.losses[0]
