"""Attention primitives, the grouped block, stochastic depth and MAC accounting."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hiperceiver import numerics as nx
from hiperceiver.attn import (BlockConfig, CostReport, block_costs, count_costs, hip_block, init_attention,
                              init_block, mha, stochastic_depth)
from hiperceiver.numerics import ParamStore, grad_check
from hiperceiver.tokens import ConfigError


def make_block(cfg, cin, seed=0, randomize=True):
    """A block whose zero-initialised projections are re-drawn so every path is exercised."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    params = init_block(store, "b", cfg, cin, rng)
    if randomize:
        for t in store.values():
            t.data = (rng.standard_normal(t.shape) * 0.5).astype(t.data.dtype)
    return params


def with_params(params, names, fn):
    """Wrap ``fn(x)`` so that the named parameters become explicit inputs."""
    def wrapped(x, *tensors):
        for n, t in zip(names, tensors):
            params.store[n] = t
        return fn(x)
    return wrapped


class TestMha:
    def _store(self, d=4, dkv=None, seed=0):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        init_attention(store, "a", d, dkv, rng)
        for t in store.values():
            t.data = (rng.standard_normal(t.shape) * 0.5).astype(t.data.dtype)
        return store

    def test_single_key(self, rng, f64):
        store = self._store(4, 4)
        q = rng.standard_normal((3, 4))
        kv = rng.standard_normal((1, 4))
        out = mha(nx.constant(q), nx.constant(kv), store, "a", 2).data
        kvn = nx.layer_norm(nx.constant(kv), store["a.ln_kv.g"], store["a.ln_kv.b"]).data
        v = kvn @ store["a.v.w"].data + store["a.v.b"].data
        expected = q + (v @ store["a.o.w"].data + store["a.o.b"].data)
        np.testing.assert_allclose(out, np.repeat(expected, 1, axis=0), rtol=1e-10)

    def test_key_permutation_invariance(self, rng, f64):
        store = self._store(4, 6)
        q, kv = rng.standard_normal((3, 4)), rng.standard_normal((5, 6))
        a = mha(nx.constant(q), nx.constant(kv), store, "a", 2).data
        b = mha(nx.constant(q), nx.constant(kv[rng.permutation(5)]), store, "a", 2).data
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_gradient_check(self, rng):
        store = self._store(4, 4)
        names = [n for n in store]
        arrays = [rng.standard_normal((2, 4)), rng.standard_normal((3, 4))] + [store[n].data for n in names]

        def fn(q, kv, *params):
            for n, t in zip(names, params):
                store[n] = t
            return mha(q, kv, store, "a", 2)

        report = grad_check(fn, arrays)
        assert report.passed, str(report)

    def test_heads_must_divide(self):
        with pytest.raises(ConfigError):
            BlockConfig(1, 2, 6, 4, 1).validate()


class TestHipBlock:
    def test_hip16_first_block_shape(self):
        cfg = BlockConfig(groups=16, latents=128, channels=128, heads=4, self_attn_layers=2)
        params = make_block(cfg, 32, randomize=False)
        with nx.no_grad():
            out = hip_block(nx.constant(np.zeros((50_176, 32), dtype=np.float32)), params)
        assert out.shape == (2048, 128)

    def test_group_independence_oracle(self, rng):
        cfg = BlockConfig(groups=2, latents=2, channels=4, heads=2, self_attn_layers=1)
        params = make_block(cfg, 4)
        x = rng.standard_normal((8, 4)).astype(np.float32)
        full = hip_block(nx.constant(x), params).data
        lat = params.latents.data.copy()
        halves = []
        for i in range(2):
            single = make_block(BlockConfig(1, 2, 4, 2, 1), 4)
            for n in params.store:
                single.store[n].data = params.store[n].data
            single.store["b.latents"].data = lat[i:i + 1]
            halves.append(hip_block(nx.constant(x[4 * i:4 * i + 4]), single).data)
        assert np.concatenate(halves).tobytes() == full.tobytes()

    def test_g1_is_global_encode(self, rng):
        cfg = BlockConfig(groups=1, latents=3, channels=4, heads=1, self_attn_layers=2)
        params = make_block(cfg, 4)
        out = hip_block(nx.constant(rng.standard_normal((10, 4))), params)
        assert out.shape == (3, 4)

    def test_gradient_tiny_block(self, rng):
        cfg = BlockConfig(groups=2, latents=2, channels=4, heads=2, self_attn_layers=1)
        params = make_block(cfg, 4)
        names = list(params.store)
        fn = with_params(params, names, lambda x: hip_block(x, params))
        arrays = [rng.standard_normal((8, 4))] + [params.store[n].data for n in names]
        report = grad_check(fn, arrays)
        assert report.passed, str(report)

    def test_divisibility(self):
        params = make_block(BlockConfig(3, 2, 4, 1, 0), 4)
        with pytest.raises(ConfigError, match="3 groups"):
            hip_block(nx.constant(np.zeros((8, 4))), params)

    def test_channel_check(self):
        params = make_block(BlockConfig(2, 2, 4, 1, 0), 4)
        with pytest.raises(ConfigError, match="input channels"):
            hip_block(nx.constant(np.zeros((8, 5))), params)

    def test_parameter_sharing_count(self):
        small = make_block(BlockConfig(1, 8, 16, 2, 2), 8, randomize=False)
        big = make_block(BlockConfig(4, 8, 16, 2, 2), 8, randomize=False)
        assert small.shared_params() == big.shared_params()
        assert big.num_params() == big.shared_params() + 4 * 8 * 16

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 3), st.integers(1, 4), st.integers(0, 1), st.integers(0, 2**20))
    def test_group_locality_bit_exact(self, g, k, size, layers, seed):
        cfg = BlockConfig(groups=g, latents=k, channels=4, heads=2, self_attn_layers=layers)
        params = make_block(cfg, 3, seed=seed)
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, g * size, 3)).astype(np.float32)
        base = hip_block(nx.constant(x), params).data
        i = int(rng.integers(g))
        y = x.copy()
        y[:, i * size:(i + 1) * size] += rng.standard_normal((2, size, 3)).astype(np.float32)
        out = hip_block(nx.constant(y), params).data
        for j in range(g):
            if j != i:
                sl = slice(j * k, (j + 1) * k)
                assert out[:, sl].tobytes() == base[:, sl].tobytes()

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 3), st.integers(2, 5), st.integers(0, 2**20))
    def test_within_group_permutation_invariance(self, g, k, size, seed):
        cfg = BlockConfig(groups=g, latents=k, channels=4, heads=2, self_attn_layers=1)
        params = make_block(cfg, 3, seed=seed)
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((g * size, 3)).astype(np.float32)
        perm = np.concatenate([i * size + rng.permutation(size) for i in range(g)])
        a = hip_block(nx.constant(x), params).data
        b = hip_block(nx.constant(x[perm]), params).data
        assert np.abs(a - b).max() <= 1e-5 * max(np.abs(a).max(), 1e-6)


class TestStochasticDepth:
    def test_rate_zero_identity(self, rng):
        d = nx.constant(rng.standard_normal((4, 3)))
        assert stochastic_depth(d, 0.0, True, rng) is d
        assert stochastic_depth(d, 0.0, False, rng) is d

    def test_eval_identity(self, rng):
        d = nx.constant(rng.standard_normal((4, 3)))
        assert stochastic_depth(d, 0.3, False, None) is d

    def test_drop_frequency(self):
        rng = np.random.default_rng(0)
        out = stochastic_depth(nx.constant(np.ones((10_000, 1))), 0.3, True, rng).data[:, 0]
        dropped = np.mean(out == 0.0)
        assert abs(dropped - 0.3) <= 0.02
        np.testing.assert_allclose(out[out > 0], 1 / 0.7, rtol=1e-6)

    def test_bad_rate(self, rng):
        with pytest.raises(ValueError):
            stochastic_depth(nx.constant(np.ones(2)), 1.0, True, rng)


class TestCosts:
    def test_hip16_first_block_pairs(self):
        cfg = BlockConfig(16, 128, 128, 4, 2)
        c = block_costs(cfg, 50_176, 32)
        assert c["cross_score"] // 128 == 6_422_528 == 50_176 * 128
        assert c["self_score"] // (2 * 128) == 262_144 == 16 * 128 ** 2

    def test_all_groups_one_is_flat_cost(self):
        c = block_costs(BlockConfig(1, 64, 32, 1, 1), 4096, 16)
        assert c["cross_score"] == 4096 * 64 * 32

    def test_report_totals(self):
        class Cfg:
            input_channels = 8
            blocks = [BlockConfig(4, 4, 8, 2, 1), BlockConfig(1, 2, 16, 2, 2)]

        rep = count_costs(Cfg, 64)
        assert rep.total == sum(rep.block_total(b) for b in rep.blocks)
        assert rep.block_total("block1") == sum(rep.blocks["block1"].values())
        assert rep.self_attn_macs_per_layer("block1") == 2 * 2 * 2 * 16

    def test_incompatible_tokens(self):
        class Cfg:
            input_channels = 8
            blocks = [BlockConfig(3, 4, 8, 2, 1)]

        with pytest.raises(ConfigError, match="block 0"):
            count_costs(Cfg, 64)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 2), st.integers(1, 3))
    def test_instrumented_counts_match(self, g, k, size, layers, batch):
        cfg = BlockConfig(groups=g, latents=k, channels=4, heads=2, self_attn_layers=layers)
        params = make_block(cfg, 3, randomize=False)
        x = nx.constant(np.zeros((batch, g * size, 3)))
        with nx.count_macs() as counter:
            hip_block(x, params)
        measured = CostReport.from_counter(counter)
        expected = {op: batch * v for op, v in block_costs(cfg, g * size, 3).items()}
        assert measured.blocks["b"] == expected

    def test_csv(self, tmp_path):
        class Cfg:
            input_channels = 4
            blocks = [BlockConfig(2, 2, 4, 1, 1)]

        path = count_costs(Cfg, 8).to_csv(tmp_path / "c.csv")
        lines = path.read_text().splitlines()
        assert lines[0] == "block,operation,macs"
        assert lines[-1].startswith("model,total,")
