import numpy as np
import pytest

from moelora import autodiff as ad
from moelora.datagen import TaskDataset, TaskSample
from moelora.errors import ConfigError, DimensionError
from moelora.model import (
    AdapterSettings, InjectionSpec, ModelConfig, ToyLM, checksum, forward_task, freeze_pretrained,
    frozen_checksums, inject,
)
from moelora.training import TrainConfig, train

from conftest import TINY, adapted_toy


def toks(B=3, T=6, seed=0, vocab=TINY.vocab):
    return np.random.default_rng(seed).integers(0, vocab, (B, T))


class TestInject:
    def test_all_four_names(self):
        m = ToyLM(ModelConfig())
        inject(m, InjectionSpec(), AdapterSettings(), tasks=["a", "b"])
        assert len(m.adapted_layers()) == 8

    def test_qkv_only(self):
        m = ToyLM(ModelConfig())
        inject(m, InjectionSpec(("query_key_value",)), AdapterSettings(), tasks=["a"])
        assert sorted(m.adapted_layers()) == ["h.0.attention.query_key_value", "h.1.attention.query_key_value"]

    def test_alias_names(self):
        m = ToyLM(ModelConfig())
        inject(m, InjectionSpec(("qkv_proj", "ffn_down")), AdapterSettings(), tasks=["a"])
        assert len(m.adapted_layers()) == 4

    def test_glob_pattern(self):
        m = ToyLM(ModelConfig())
        inject(m, InjectionSpec(("h.1.mlp.*",), kind="lora"), AdapterSettings())
        assert sorted(m.adapted_layers()) == ["h.1.mlp.dense_4h_to_h", "h.1.mlp.dense_h_to_4h"]

    def test_divisibility(self):
        with pytest.raises(ConfigError):
            inject(ToyLM(ModelConfig()), InjectionSpec(), AdapterSettings(rank=16, n_experts=5), tasks=["a"])

    def test_pattern_matches_nothing(self):
        with pytest.raises(ConfigError):
            inject(ToyLM(ModelConfig()), InjectionSpec(("nonexistent",)), AdapterSettings(), tasks=["a"])

    def test_unmatched_untouched(self):
        m = ToyLM(ModelConfig())
        before = checksum(m.layers["h.0.attention.dense"].weight)
        inject(m, InjectionSpec(("query_key_value",)), AdapterSettings(), tasks=["a"])
        assert type(m.layers["h.0.attention.dense"]).__name__ == "FrozenDense"
        assert checksum(m.layers["h.0.attention.dense"].weight) == before

    def test_double_injection(self):
        m = adapted_toy()
        with pytest.raises(ConfigError):
            inject(m, InjectionSpec(), AdapterSettings(rank=4, n_experts=2), tasks=["a"])

    def test_per_layer_gates(self):
        m = adapted_toy(topology="per_layer")
        assert m.gate is None and set(m.layer_gates) == set(m.adapted_layers())


class TestFreeze:
    def test_trainable_set_is_adapters_and_gate(self):
        m = adapted_toy()
        names = {t.name for t in m.trainable_parameters()}
        expect = {f"{n}.experts.{i}.{p}" for n in m.adapted_layers() for i in range(2) for p in "AB"}
        assert names == expect | {"gate.E", "gate.W_T"}

    def test_lora_trainable_set(self):
        m = adapted_toy(kind="lora")
        assert {t.name for t in m.trainable_parameters()} == {
            f"{n}.lora.{p}" for n in m.adapted_layers() for p in "AB"
        }

    def test_no_adapters_refuses_training(self):
        m = ToyLM(TINY)
        freeze_pretrained(m)
        ds = TaskDataset([TaskSample("a", (5, 6), (7,))])
        with pytest.raises(ConfigError):
            train(m, ds, TrainConfig(max_steps=1, max_input_len=8, max_output_len=4))

    def test_frozen_conserved_after_steps(self):
        m = adapted_toy(config=ModelConfig(vocab=24, d_model=8, n_layers=1, n_heads=2, context=16))
        before = frozen_checksums(m)
        ds = TaskDataset([TaskSample(t, (5 + k, 6), (7 + k,)) for k, t in enumerate("abc")])
        train(m, ds, TrainConfig(max_steps=5, batch_size=3, learning_rate=0.05, max_input_len=8,
                                 max_output_len=4, eval_interval=0))
        assert frozen_checksums(m) == before
        assert all(t.grad is None for t in m.base_tensors().values())


class TestForward:
    def test_zero_b_equals_base(self):
        plain = ToyLM(TINY, seed=3)
        adapted = ToyLM(TINY, seed=3)
        inject(adapted, InjectionSpec(), AdapterSettings(rank=4, n_experts=2, task_dim=4), tasks=["a", "b"], seed=3)
        x = toks()
        assert np.array_equal(plain.forward(x).data, adapted.forward(x, [0, 1, 0]).data)

    def test_tasks_change_logits(self):
        m = adapted_toy()
        x = toks()
        assert not np.allclose(forward_task(m, x, "a").data, forward_task(m, x, "b").data)

    def test_uniform_vs_zero_projection(self):
        uni = adapted_toy(gate_mode="uniform")
        dense = adapted_toy(gate_mode="dense")
        # copy adapters so only the gate differs
        for name, t in uni.adapter_tensors().items():
            dense.adapter_tensors()[name].data = t.data.copy()
        dense.gate.W_T.data[:] = 0.0
        x = toks()
        assert np.allclose(forward_task(uni, x, "b").data, forward_task(dense, x, "b").data, atol=1e-13, rtol=0)

    def test_shared_gate_weights_every_layer(self):
        m = adapted_toy()
        seen = []
        for layer in m.adapted_layers().values():
            orig = layer.forward

            def spy(x, omega=None, rng=None, orig=orig):
                seen.append(omega.data[0, 0].copy())
                return orig(x, omega, rng)
            layer.forward = spy
        forward_task(m, toks(B=1), "c")
        assert len(seen) == len(m.adapted_layers())
        assert all(np.array_equal(s, seen[0]) for s in seen)

    def test_causal(self):
        m = adapted_toy()
        x = toks(B=1, T=8)
        y = x.copy()
        y[0, 5:] = (y[0, 5:] + 1) % TINY.vocab
        a, b = forward_task(m, x, "a").data, forward_task(m, y, "a").data
        assert np.allclose(a[0, :5], b[0, :5], atol=1e-13)
        assert not np.allclose(a[0, 5:], b[0, 5:])

    def test_context_limit(self):
        with pytest.raises(DimensionError):
            ToyLM(TINY).forward(np.zeros((1, TINY.context + 1), dtype=int))

    def test_needs_task_ids(self):
        with pytest.raises(ConfigError):
            adapted_toy().forward(toks())

    def test_full_model_gradient(self):
        cfg = ModelConfig(vocab=11, d_model=4, n_layers=1, n_heads=2, context=6, mlp_ratio=2)
        m = adapted_toy(config=cfg, rank=2, n_experts=2, task_dim=3)
        x = toks(B=2, T=4, vocab=11)
        tgt = toks(B=2, T=4, seed=1, vocab=11).reshape(-1)

        def loss():
            logits = forward_task(m, x, "b")
            return ad.cross_entropy(ad.reshape(logits, (-1, 11)), tgt, np.ones(8, bool))
        # also differentiate through a few base tensors to cover the whole network
        for t in [m.wte, m.lm_head, m.norms["h.0.ln_1"]]:
            t.requires_grad = True
        loss().backward()
        for t in m.trainable_parameters():
            numeric = ad.finite_diff_grad(lambda _: loss(), t)
            assert ad.relative_error(t.grad, numeric) < 1e-5, t.name


def test_state_round_trip():
    m = adapted_toy()
    fresh = ToyLM(TINY)
    inject(fresh, InjectionSpec(), AdapterSettings(rank=4, n_experts=2, dropout=0.0, task_dim=4), tasks=["a", "b", "c"])
    fresh.load_state(m.state())
    x = toks()
    assert np.array_equal(forward_task(m, x, "a").data, forward_task(fresh, x, "a").data)
    with pytest.raises(ConfigError):
        ToyLM(TINY).load_state(m.state())
