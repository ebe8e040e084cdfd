import numpy as np
import pytest

from hstsar import tensor as T
from hstsar.attention import AttentionParams, BlockParams, attend, transformer_block
from hstsar.errors import ConfigurationError, DimensionError
from hstsar.topology import build_topology, full_topology, roll_topology_input_indices

from fd import grad_rel_err, numerical_grad


@pytest.fixture(autouse=True)
def _fresh_tape():
    T.reset_tape()
    yield
    T.reset_tape()


def reference_attention(H, p, mask, scale=True):
    """Loop-per-head reference: materialise all scores, -inf outside the mask, normalise."""
    n, d = H.shape
    dh = d // p.heads
    q = H @ p.w_q.data + p.b_q.data
    k = H @ p.w_k.data + p.b_k.data
    v = H @ p.w_v.data + p.b_v.data
    out = np.zeros((n, d))
    for h in range(p.heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T
        if scale:
            s = s / np.sqrt(dh)
        s = np.where(mask, s, -np.inf)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        out[:, sl] = (e / e.sum(axis=1, keepdims=True)) @ v[:, sl]
    return out


def test_singleton_returns_value_projection():
    rng = np.random.default_rng(0)
    p = AttentionParams.init(4, 2, rng)
    p.b_v.data[:] = rng.normal(size=4)
    H = rng.normal(size=(1, 4))
    out = attend(T.Tensor(H), p, full_topology(1)).values.data
    np.testing.assert_allclose(out, H @ p.w_v.data + p.b_v.data, atol=1e-14)


def test_full_equals_all_global():
    rng = np.random.default_rng(1)
    p = AttentionParams.init(6, 3, rng)
    H = T.Tensor(rng.normal(size=(5, 6)))
    a = attend(H, p, full_topology(5)).values.data
    b = attend(H, p, build_topology(5, g=5, w=1)).values.data
    c = attend(H, p, None).values.data
    assert np.max(np.abs(a - b)) < 1e-12
    assert np.max(np.abs(a - c)) < 1e-12


@pytest.mark.parametrize("seed", range(5))
def test_sparse_matches_reference(seed):
    rng = np.random.default_rng(seed)
    topo = build_topology(9, g=1, w=2)  # 8 tokens padded to 9: one global, four blocks
    p = AttentionParams.init(4, 2, rng)
    for t in p.tensors().values():
        t.data[:] = rng.normal(size=t.shape)
    H = rng.normal(size=(topo.n, 4))
    out = attend(T.Tensor(H), p, topo).values.data
    assert np.max(np.abs(out - reference_attention(H, p, topo.mask))) < 1e-10


def test_weights_rows_and_mask():
    rng = np.random.default_rng(2)
    topo = build_topology(7, g=1, w=2)
    p = AttentionParams.init(4, 2, rng)
    out = attend(T.Tensor(rng.normal(size=(7, 4))), p, topo, keep_weights=True)
    w = out.weights
    assert w.shape == (2, 7, 7)
    assert np.all(w >= 0)
    assert np.all(w[:, ~topo.mask] == 0.0)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def test_batched_key_padding_keeps_rows_valid():
    rng = np.random.default_rng(3)
    topo = build_topology(7, g=1, w=2)
    p = AttentionParams.init(4, 1, rng)
    valid = np.ones((2, 7), dtype=bool)
    valid[1, 5:] = False
    out = attend(T.Tensor(rng.normal(size=(2, 7, 4))), p, topo, valid, keep_weights=True)
    w = out.weights
    # non-padding rows never look at padding columns
    assert np.all(w[1, 0, :5, 5:] == 0.0)
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)


def test_dense_attention_commutes_with_roll():
    rng = np.random.default_rng(4)
    n = 8
    p = AttentionParams.init(4, 2, rng)
    H = rng.normal(size=(n, 4))
    perm = roll_topology_input_indices(full_topology(n), 1)
    a = attend(T.Tensor(H[perm]), p, full_topology(n)).values.data
    b = attend(T.Tensor(H), p, full_topology(n)).values.data[perm]
    assert np.max(np.abs(a - b)) < 1e-10


def test_dense_attention_permutation_equivariant():
    rng = np.random.default_rng(5)
    p = AttentionParams.init(4, 2, rng)
    H = rng.normal(size=(6, 4))
    perm = rng.permutation(6)
    a = attend(T.Tensor(H[perm]), p).values.data
    b = attend(T.Tensor(H), p).values.data[perm]
    assert np.max(np.abs(a - b)) < 1e-10


def test_sparse_attention_is_shift_sensitive():
    rng = np.random.default_rng(6)
    topo = build_topology(9, g=1, w=2)
    p = AttentionParams.init(4, 2, rng)
    H = rng.normal(size=(topo.n, 4))
    perm = roll_topology_input_indices(topo, 1)
    a = attend(T.Tensor(H[perm]), p, topo).values.data
    b = attend(T.Tensor(H), p, topo).values.data[perm]
    assert np.max(np.abs(a - b)) > 1e-6


def test_unscaled_matches_literal_formula():
    rng = np.random.default_rng(7)
    p = AttentionParams.init(4, 1, rng)
    H = rng.normal(size=(3, 4))
    out = attend(T.Tensor(H), p, scale=False).values.data
    assert np.max(np.abs(out - reference_attention(H, p, np.ones((3, 3), bool), scale=False))) < 1e-12


def test_heads_must_divide_d():
    with pytest.raises(ConfigurationError):
        AttentionParams.init(6, 4, np.random.default_rng(0))


def test_topology_length_mismatch():
    p = AttentionParams.init(4, 1, np.random.default_rng(0))
    with pytest.raises(DimensionError):
        attend(T.Tensor(np.zeros((5, 4))), p, full_topology(4))


def test_block_with_zero_output_layers_is_identity():
    rng = np.random.default_rng(8)
    block = BlockParams.init(4, 2, 8, rng)
    block.w_o.data[:] = 0.0
    block.w_2.data[:] = 0.0
    H = rng.normal(size=(2, 7, 4))
    out = transformer_block(T.Tensor(H), block, build_topology(7, g=1, w=2))
    np.testing.assert_array_equal(out.data, H)


def test_block_eval_deterministic_and_train_mode_stochastic():
    rng = np.random.default_rng(9)
    block = BlockParams.init(4, 2, 8, rng)
    topo = build_topology(7, g=1, w=2)
    H = T.Tensor(rng.normal(size=(7, 4)))
    a = transformer_block(H, block, topo, dropout=0.5, attn_dropout=0.5).data
    b = transformer_block(H, block, topo, dropout=0.5, attn_dropout=0.5).data
    np.testing.assert_array_equal(a, b)
    c = transformer_block(H, block, topo, dropout=0.5, mode="train", rng=np.random.default_rng(1)).data
    assert not np.array_equal(a, c)


def test_block_gradients_match_finite_differences():
    rng = np.random.default_rng(10)
    d, n = 4, 8
    block = BlockParams.init(d, 2, 8, rng)
    for t in block.tensors().values():
        t.data[:] = rng.uniform(-1, 1, t.shape)
    topo = build_topology(n + 1, g=1, w=2)
    H = T.Tensor(rng.uniform(-1, 1, (topo.n, d)), requires_grad=True)
    probe = rng.normal(size=(topo.n, d))

    def loss():
        return T.sum(T.mul(transformer_block(H, block, topo), T.Tensor(probe)))

    T.backward(loss())
    for t in [H, *block.tensors().values()]:
        def f():
            with T.no_grad():
                return loss().item()

        assert grad_rel_err(t.grad, numerical_grad(f, t.data)) < 1e-4


@pytest.mark.parametrize("n_base,g,w,reps", [(9, 1, 2, True), (12, 0, 4, True), (10, 2, 4, False), (7, 1, 2, False)])
def test_block_path_matches_masked_dense_path(n_base, g, w, reps):
    topo = build_topology(n_base, g, w, insert_reps=reps)
    assert topo.is_block_structured
    rng = np.random.default_rng(n_base + g)
    p = AttentionParams.init(6, 2, rng)
    x = rng.normal(size=(3, topo.n, 6))
    valid = rng.random((3, topo.n)) < 0.7
    grads = []
    for t in (topo, topo.mask):  # the plain array forces the dense route
        H = T.Tensor(x, requires_grad=True)
        out = attend(H, p, t, key_valid=valid).values
        T.backward(T.sum(T.mul(out, T.Tensor(np.cos(x)))))
        grads.append((out.data, H.grad.copy(), p.w_k.grad.copy()))
        T.zero_grad([H, *p.tensors().values()])
        T.reset_tape()
    for a, b in zip(*grads):
        np.testing.assert_allclose(a, b, atol=1e-12, rtol=0)


def test_unstructured_masks_use_the_dense_route():
    topo = build_topology(9, 1, 2, r=2, seed=0)
    assert not topo.is_block_structured
    rng = np.random.default_rng(2)
    p = AttentionParams.init(4, 1, rng)
    x = rng.normal(size=(topo.n, 4))
    np.testing.assert_allclose(attend(T.Tensor(x), p, topo).values.data,
                               reference_attention(x, p, topo.mask), atol=1e-12)
