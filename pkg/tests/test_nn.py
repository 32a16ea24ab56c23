import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from popo.errors import NonFiniteError, ShapeError
from popo.nn import AdamState, DenseNet, Layer, adam_step, backward, forward, grad_check, soft_update


def loop_forward(net, x):
    """Independent oracle: forward pass as explicit Python loops."""
    h = [float(v) for v in x]
    for layer in net.layers:
        out = []
        for i in range(layer.weight.shape[0]):
            z = float(layer.bias[i])
            for j in range(layer.weight.shape[1]):
                z += float(layer.weight[i, j]) * h[j]
            if layer.activation == "relu":
                z = max(z, 0.0)
            elif layer.activation == "tanh":
                z = float(np.tanh(z))
            out.append(z)
        h = out
    return np.array(h)


def fd_param_grads(net, x, upstream, eps=1e-5):
    """Central-difference oracle for d<upstream, forward(x)>/d(params)."""
    grads = []
    for p in net.params():
        g = np.zeros_like(p)
        flat_p, flat_g = p.reshape(-1), g.reshape(-1)
        for j in range(flat_p.size):
            orig = flat_p[j]
            flat_p[j] = orig + eps
            hi = float(np.sum(net.forward(x) * upstream))
            flat_p[j] = orig - eps
            lo = float(np.sum(net.forward(x) * upstream))
            flat_p[j] = orig
            flat_g[j] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


class TestForward:
    def test_zero_weights_identity_returns_bias(self):
        b = np.array([1.5, -2.0, 0.25], dtype=np.float64)
        net = DenseNet([Layer(np.zeros((3, 4)), b.copy(), "identity")])
        for x in (np.zeros(4), np.ones(4), np.array([3.0, -1.0, 0.5, 9.0])):
            np.testing.assert_array_equal(forward(net, x), b)

    def test_tanh_at_zero(self):
        net = DenseNet([Layer(np.ones((1, 1)), np.zeros(1), "tanh")])
        assert forward(net, np.array([0.0]))[0] == 0.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(11)
        net = DenseNet.create([5, 7, 4, 3], ["relu", "tanh", "identity"], rng, dtype=np.float64)
        x = rng.standard_normal(5)
        np.testing.assert_allclose(forward(net, x), loop_forward(net, x), rtol=0, atol=1e-12)

    def test_batched_agrees_with_single(self):
        rng = np.random.default_rng(12)
        net = DenseNet.create([4, 6, 2], ["relu", "tanh"], rng, dtype=np.float64)
        xs = rng.standard_normal((5, 4))
        batched = forward(net, xs)
        for i in range(5):
            # GEMM vs GEMV accumulation order may differ in the last ulps
            np.testing.assert_allclose(batched[i], forward(net, xs[i]), rtol=1e-12, atol=0)

    def test_dimension_mismatch_names_layer(self):
        rng = np.random.default_rng(0)
        net = DenseNet.create([4, 3], ["relu"], rng)
        with pytest.raises(ShapeError, match="layer 0"):
            forward(net, np.zeros(5))

    def test_incompatible_layers_rejected(self):
        with pytest.raises(ShapeError, match="layer 1"):
            DenseNet(
                [
                    Layer(np.zeros((3, 4)), np.zeros(3), "relu"),
                    Layer(np.zeros((2, 5)), np.zeros(2), "identity"),
                ]
            )

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 10.0))
    def test_finite_input_gives_finite_output(self, seed, scale):
        rng = np.random.default_rng(seed)
        net = DenseNet.create([3, 8, 8, 2], ["relu", "tanh", "identity"], rng)
        out = forward(net, scale * rng.standard_normal(3).astype(np.float32))
        assert np.all(np.isfinite(out))


class TestBackward:
    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(2)
        net = DenseNet.create([4, 5, 3], ["relu", "identity"], rng, dtype=np.float64)
        grads, dx = backward(net, rng.standard_normal(4), np.zeros(3))
        assert all(np.all(g == 0.0) for g in grads)
        assert np.all(dx == 0.0)

    def test_linear_layer_analytic_gradient(self):
        rng = np.random.default_rng(3)
        w = rng.standard_normal((3, 4))
        net = DenseNet([Layer(w.copy(), np.zeros(3), "identity")])
        x = rng.standard_normal(4)
        up = rng.standard_normal(3)
        (dw, db), dx = backward(net, x, up)
        np.testing.assert_allclose(dw, np.outer(up, x), atol=1e-14)
        np.testing.assert_allclose(db, up, atol=1e-14)
        np.testing.assert_allclose(dx, up @ w, atol=1e-14)

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        net = DenseNet.create([4, 6, 5, 2], ["relu", "tanh", "identity"], rng, dtype=np.float64)
        x = rng.standard_normal(4)
        up = rng.standard_normal(2)
        analytic, _ = backward(net, x, up)
        numeric = fd_param_grads(net, x, up)
        for a, n in zip(analytic, numeric):
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
            assert np.max(np.abs(a - n) / denom) < 1e-4

    def test_batched_grads_sum_over_rows(self):
        rng = np.random.default_rng(5)
        net = DenseNet.create([3, 4, 2], ["tanh", "identity"], rng, dtype=np.float64)
        xs = rng.standard_normal((6, 3))
        ups = rng.standard_normal((6, 2))
        batched, dxs = backward(net, xs, ups)
        singles = [backward(net, xs[i], ups[i]) for i in range(6)]
        for k, g in enumerate(batched):
            np.testing.assert_allclose(g, sum(s[0][k] for s in singles), atol=1e-12)
        for i in range(6):
            np.testing.assert_allclose(dxs[i], singles[i][1], atol=1e-12)

    def test_upstream_shape_mismatch(self):
        rng = np.random.default_rng(6)
        net = DenseNet.create([3, 2], ["identity"], rng)
        with pytest.raises(ShapeError):
            backward(net, np.zeros(3), np.zeros(4))


class TestAdam:
    def test_zero_gradient_fixed_point(self):
        rng = np.random.default_rng(7)
        params = [rng.standard_normal((3, 2)).astype(np.float32), rng.standard_normal(3).astype(np.float32)]
        before = [p.copy() for p in params]
        state = AdamState.for_params(params)
        for _ in range(5):
            adam_step(params, [np.zeros_like(p) for p in params], state)
        for p, b in zip(params, before):
            np.testing.assert_array_equal(p, b)
        assert state.step == 5

    def test_first_step_hand_value(self):
        # p=0, g=1, defaults: m_hat=1, v_hat=1 => delta = lr / (1 + eps)
        p = np.zeros(1, dtype=np.float64)
        state = AdamState.for_params([p], lr=3e-4)
        adam_step([p], [np.ones(1)], state)
        expected = -3e-4 / (1.0 + 1e-8)
        np.testing.assert_allclose(p[0], expected, rtol=0, atol=1e-18)

    def test_identical_params_identical_updates(self):
        a = np.full(4, 0.7, dtype=np.float32)
        b = np.full(4, 0.7, dtype=np.float32)
        g = np.linspace(-1, 1, 4).astype(np.float32)
        state = AdamState.for_params([a, b])
        for _ in range(10):
            adam_step([a, b], [g, g], state)
        np.testing.assert_array_equal(a, b)

    def test_nonfinite_gradient_rejected(self):
        p = np.zeros(2, dtype=np.float32)
        state = AdamState.for_params([p])
        with pytest.raises(NonFiniteError):
            adam_step([p], [np.array([1.0, np.nan], dtype=np.float32)], state)


class TestGradCheck:
    def test_linear_net_near_exact(self):
        rng = np.random.default_rng(8)
        net = DenseNet.create([4, 3], ["identity"], rng, dtype=np.float64)
        assert grad_check(net, rng.standard_normal(4)) < 1e-9

    def test_two_layer_relu_generic_point(self):
        rng = np.random.default_rng(9)
        net = DenseNet.create([5, 8, 3], ["relu", "identity"], rng, dtype=np.float64)
        assert grad_check(net, rng.standard_normal(5)) < 1e-4

    def test_away_from_kinks_is_tight(self):
        rng = np.random.default_rng(10)
        while True:
            net = DenseNet.create([4, 6, 2], ["relu", "identity"], rng, dtype=np.float64)
            x = 2.0 * rng.standard_normal(4)
            z = x @ net.layers[0].weight.T + net.layers[0].bias
            if np.min(np.abs(z)) > 0.1:
                break
        assert grad_check(net, x) < 1e-6

    def test_eps_must_be_positive(self):
        rng = np.random.default_rng(0)
        net = DenseNet.create([2, 2], ["relu"], rng)
        with pytest.raises(ValueError):
            grad_check(net, np.zeros(2), eps=0.0)


# Layer/activation patterns of every network the lab builds, width-reduced so
# grad_check (which sweeps every parameter) stays fast; backprop correctness is
# width-independent. Real-width composite losses are checked in test_acceptance.
REPO_ARCHITECTURES = {
    "critic_trunk": ([6, 24, 24], ["relu", "relu"]),
    "quantile_embed": ([64, 24], ["relu"]),
    "critic_head": ([24, 1], ["identity"]),
    "twin_q": ([6, 24, 24, 1], ["relu", "relu", "identity"]),
    "actor": ([6, 24, 24, 2], ["relu", "relu", "tanh"]),
    "vae_encoder_body": ([6, 30, 30], ["relu", "relu"]),
    "vae_encoder_head": ([30, 4], ["identity"]),
    "vae_decoder": ([8, 30, 30, 2], ["relu", "relu", "tanh"]),
}


@pytest.mark.parametrize("name", sorted(REPO_ARCHITECTURES))
def test_grad_check_all_repo_architectures(name):
    dims, acts = REPO_ARCHITECTURES[name]
    for seed in range(10):
        rng = np.random.default_rng(1000 + seed)
        net = DenseNet.create(dims, acts, rng, dtype=np.float64)
        x = rng.standard_normal(dims[0])
        up = rng.standard_normal(dims[-1])
        assert grad_check(net, x, upstream=up) < 1e-4


def test_forward_backward_deterministic():
    def run():
        rng = np.random.default_rng(21)
        net = DenseNet.create([5, 16, 3], ["relu", "tanh"], rng)
        x = rng.standard_normal((7, 5)).astype(np.float32)
        up = rng.standard_normal((7, 3)).astype(np.float32)
        out = net.forward(x)
        grads, dx = backward(net, x, up)
        return out.tobytes(), b"".join(g.tobytes() for g in grads), dx.tobytes()

    assert run() == run()


def test_soft_update_linearity_and_full_copy():
    rng = np.random.default_rng(22)
    online = DenseNet.create([3, 4, 2], ["relu", "identity"], rng)
    target = DenseNet.create([3, 4, 2], ["relu", "identity"], rng)

    t1 = target.copy()
    soft_update(t1, online, eta=1.0)
    for tp, op in zip(t1.params(), online.params()):
        np.testing.assert_array_equal(tp, op)

    eta = 5e-3
    t2 = target.copy()
    soft_update(t2, online, eta=eta)
    for after, before, op in zip(t2.params(), target.params(), online.params()):
        np.testing.assert_allclose(
            np.linalg.norm((after - before).astype(np.float64)),
            eta * np.linalg.norm((op - before).astype(np.float64)),
            rtol=1e-5,
        )

    with pytest.raises(ValueError):
        soft_update(target, online, eta=0.0)


def test_repeated_soft_updates_converge_geometrically():
    rng = np.random.default_rng(23)
    online = DenseNet.create([3, 4, 2], ["relu", "identity"], rng, dtype=np.float64)
    target = DenseNet.create([3, 4, 2], ["relu", "identity"], rng, dtype=np.float64)
    eta = 0.1
    gap0 = np.linalg.norm(online.params()[0] - target.params()[0])
    for k in range(1, 30):
        soft_update(target, online, eta)
        gap = np.linalg.norm(online.params()[0] - target.params()[0])
        np.testing.assert_allclose(gap, gap0 * (1 - eta) ** k, rtol=1e-9)


class TestCheckpointFormat:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(24)
        net = DenseNet.create([4, 8, 2], ["relu", "tanh"], rng)
        path = tmp_path / "net.net"
        net.save(path)
        loaded = DenseNet.load(path)
        assert loaded.dims == net.dims
        assert loaded.activations == net.activations
        for a, b in zip(loaded.params(), net.params()):
            np.testing.assert_array_equal(a, b)

    def test_blob_layout_is_documented_order(self, tmp_path):
        # independently parse: row-major weights then bias, layer order, LE f32
        rng = np.random.default_rng(25)
        net = DenseNet.create([2, 3, 1], ["relu", "identity"], rng)
        path = tmp_path / "net.net"
        net.save(path)
        from popo.container import read_container

        header, blob = read_container(path)
        flat = np.frombuffer(blob, dtype="<f4")
        w0 = flat[:6].reshape(3, 2)
        b0 = flat[6:9]
        w1 = flat[9:12].reshape(1, 3)
        b1 = flat[12:13]
        np.testing.assert_array_equal(w0, net.layers[0].weight)
        np.testing.assert_array_equal(b0, net.layers[0].bias)
        np.testing.assert_array_equal(w1, net.layers[1].weight)
        np.testing.assert_array_equal(b1, net.layers[1].bias)
        assert header["dims"] == [2, 3, 1]

    def test_truncated_blob_rejected(self, tmp_path):
        rng = np.random.default_rng(26)
        net = DenseNet.create([2, 2], ["relu"], rng)
        path = tmp_path / "net.net"
        net.save(path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-4])
        from popo.errors import TruncatedFileError

        with pytest.raises(TruncatedFileError, match="expected"):
            DenseNet.load(path)
