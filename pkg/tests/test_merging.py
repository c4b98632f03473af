import numpy as np
import pytest

from moelora.adapters import FrozenDense, MoeLoraLayer
from moelora.errors import ConfigError, NonMergeableError
from moelora.gating import InputGate
from moelora.merging import (
    MergedModel, TaskVector, adapter_branch_macs, op_count, recover, recover_all, task_arithmetic_merge,
)
from moelora.model import AdapterSettings, InjectionSpec, ModelConfig, ToyLM, checksum, forward_task, inject

from conftest import TINY, adapted_toy


def toks(B=4, T=7, seed=0):
    return np.random.default_rng(seed).integers(0, TINY.vocab, (B, T))


def max_gap(a, b):
    return float(np.max(np.abs(a - b)))


class TestRecover:
    def test_zero_update_gives_base(self):
        m = ToyLM(TINY, seed=1)
        base = {n: l.weight.data.copy() for n, l in m.layers.items()}
        inject(m, InjectionSpec(), AdapterSettings(rank=4, n_experts=2, task_dim=4), tasks=["a", "b"], seed=1)
        merged = recover(m, "b")
        for n, w in base.items():
            assert np.array_equal(merged.layers[n].weight.data, w)

    def test_single_expert_direct_arithmetic(self):
        m = adapted_toy(n_experts=1, tasks=["a"])
        merged = recover(m, "a")
        for n, layer in m.adapted_layers().items():
            e = layer.experts[0]
            want = layer.weight.data + layer.scaling * e.B.data @ e.A.data
            assert max_gap(merged.layers[n].weight.data, want) < 1e-12

    def test_formula_per_task(self):
        m = adapted_toy(n_experts=2)
        for task in ("a", "c"):
            omega = m.gate.task_weights(task)
            merged = recover(m, task)
            for n, layer in m.adapted_layers().items():
                want = layer.weight.data + layer.scaling * sum(
                    w * e.B.data @ e.A.data for w, e in zip(omega, layer.experts))
                assert max_gap(merged.layers[n].weight.data, want) < 1e-12

    @pytest.mark.parametrize("mode,topology", [("dense", "single_shared"), ("sparse", "single_shared"), ("dense", "per_layer")])
    def test_merged_matches_unmerged(self, mode, topology):
        m = adapted_toy(n_experts=4, gate_mode=mode, top_k=2, topology=topology, rank=4)
        x = toks()
        for task in ("a", "b", "c"):
            gap = max_gap(recover(m, task).forward(x).data, forward_task(m, x, task).data)
            assert gap <= 1e-9

    def test_lora_merge(self):
        m = adapted_toy(kind="lora", tasks=None)
        x = toks()
        assert max_gap(recover(m, None).forward(x).data, m.forward(x).data) <= 1e-9

    def test_merged_is_plain(self):
        merged = recover(adapted_toy(), "a")
        assert merged.model.adapter_kind is None and merged.model.gate is None
        assert all(type(l) is FrozenDense for l in merged.layers.values())
        assert recover(merged, "a") is merged

    def test_source_untouched(self):
        m = adapted_toy()
        before = {n: checksum(t) for n, t in m.named_tensors().items()}
        recover_all(m)
        assert before == {n: checksum(t) for n, t in m.named_tensors().items()}


class TestRecoverAll:
    def test_one_per_task(self):
        out = recover_all(adapted_toy())
        assert sorted(out) == ["a", "b", "c"] and all(isinstance(v, MergedModel) for v in out.values())

    def test_concurrent_matches_serial(self):
        m = adapted_toy()
        serial, par = recover_all(m), recover_all(m, workers=3)
        for t in serial:
            assert serial[t].state().keys() == par[t].state().keys()
            assert all(np.array_equal(serial[t].state()[k], par[t].state()[k]) for k in serial[t].state())

    def test_identical_gate_weights_identical_models(self):
        m = adapted_toy()
        m.gate.E.data[2] = m.gate.E.data[0]
        out = recover_all(m)
        for n in m.adapted_layers():
            assert np.array_equal(out["a"].layers[n].weight.data, out["c"].layers[n].weight.data)

    def test_uniform_gate_same_checksums(self):
        out = recover_all(adapted_toy(gate_mode="uniform"))
        sums = {t: [checksum(l.weight) for l in mm.layers.values()] for t, mm in out.items()}
        assert sums["a"] == sums["b"] == sums["c"]

    def test_input_driven_refused(self):
        m = adapted_toy(gate_mode="input_driven")
        with pytest.raises(NonMergeableError, match="latency"):
            recover(m, "a")
        with pytest.raises(NonMergeableError):
            recover_all(m)


class TestTaskArithmetic:
    def lora_model(self, seed):
        return adapted_toy(kind="lora", tasks=None, seed=0 if seed is None else seed)

    def test_lambda_zero_is_base(self):
        base = ToyLM(TINY)
        vec = TaskVector.from_model("a", self.lora_model(1))
        merged = task_arithmetic_merge(base, [vec], 0.0)
        for n, layer in base.layers.items():
            assert np.array_equal(merged.layers[n].weight.data, layer.weight.data)

    def test_single_vector_matches_lora_merge(self):
        m = adapted_toy(kind="lora", tasks=None, alpha=4.0, rank=4)
        vec = TaskVector.from_model("a", m)
        base = ToyLM(TINY)
        x = toks()
        ta = task_arithmetic_merge(base, [vec], 1.0).forward(x).data
        assert max_gap(ta, recover(m, None).forward(x).data) < 1e-12

    def test_cancellation(self):
        vec = TaskVector.from_model("a", self.lora_model(2))
        neg = TaskVector("b", {n: -d for n, d in vec.deltas.items()})
        base = ToyLM(TINY)
        merged = task_arithmetic_merge(base, [vec, neg], 0.7)
        for n, layer in base.layers.items():
            assert max_gap(merged.layers[n].weight.data, layer.weight.data) < 1e-15

    def test_sum_formula(self):
        vecs = [TaskVector.from_model(t, self.lora_model(s)) for t, s in (("a", 3), ("b", 4))]
        base = ToyLM(TINY)
        merged = task_arithmetic_merge(base, vecs, 0.3)
        for n in vecs[0].deltas:
            want = base.layers[n].weight.data + 0.3 * (vecs[0].deltas[n] + vecs[1].deltas[n])
            assert max_gap(merged.layers[n].weight.data, want) < 1e-15

    def test_moelora_has_no_task_vector(self):
        with pytest.raises(ConfigError):
            TaskVector.from_model("a", adapted_toy())


class TestOpCount:
    def test_merged_equals_base(self):
        base = ToyLM(TINY)
        assert op_count(recover(adapted_toy(), "a"), 10) == op_count(base, 10)

    def test_unmerged_excess(self):
        m = adapted_toy(rank=4)
        extra = sum(10 * 4 * (l.d_in + l.d_out) for l in m.adapted_layers().values())
        assert op_count(m, 10) - op_count(ToyLM(TINY), 10) == extra

    def test_router_counted(self):
        layer = MoeLoraLayer(FrozenDense(np.zeros((8, 6))), rank=4, n_experts=2, router=InputGate(8, 2))
        assert adapter_branch_macs(layer, 5) == 5 * 4 * 14 + 5 * 8 * 2

    def test_scales_with_batch(self):
        m = ToyLM(ModelConfig())
        assert op_count(m, 12, batch=3) == 3 * op_count(m, 12)
