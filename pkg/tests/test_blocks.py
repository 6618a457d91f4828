import numpy as np
import pytest

from quadranet import autograd as ag
from quadranet import blocks as B
from quadranet.tensor import ShapeError


def test_quadrablock_parameter_count():
    # ln1 2C, 3 C k^2 + C, ln2 2C, C*RC + RC, RC*C + C
    C, k, R = 64, 7, 4
    expected = 2 * C + 3 * C * k * k + C + 2 * C + C * R * C + R * C + R * C * C + C
    assert B.Block(B.BlockSpec("quadra", k, R), C).num_params() == expected == 42816


@pytest.mark.parametrize("kind", ["quadra", "conv", "skip", "attn", "identity"])
def test_blocks_preserve_shape(rng, kind):
    block = B.Block(B.BlockSpec(kind, 3, 2, window=2), 4, rng)
    x = rng.normal(size=(2, 4, 4, 4))
    assert B.block_forward(block, x).shape == x.shape


def test_zeroed_mixers_give_identity(rng):
    for kind in ("quadra", "conv", "skip", "attn"):
        block = B.Block(B.BlockSpec(kind, 3, 2, window=2), 4, rng)
        block.zero_mixers()
        x = rng.normal(size=(1, 4, 4, 4))
        assert np.allclose(B.block_forward(block, x), x, atol=1e-15)


def test_identity_block_has_no_params(rng):
    block = B.Block(B.BlockSpec("identity"), 8, rng)
    x = rng.normal(size=(1, 8, 2, 2))
    assert block.num_params() == 0
    assert np.array_equal(B.block_forward(block, x), x)


def test_convblock_is_quadrablock_without_product(rng):
    """With W_a = 0 the quadratic conv reduces to W_c: the two blocks coincide."""
    q = B.Block(B.BlockSpec("quadra", 3, 2), 4, np.random.default_rng(0))
    c = B.Block(B.BlockSpec("conv", 3, 2), 4, np.random.default_rng(1))
    q.params["mixer.W_a"][:] = 0.0
    c.params["mixer.weight"][:] = q.params["mixer.W_c"]
    for name in ("ln1.gamma", "ln1.beta", "mixer.bias", "ln2.gamma", "ln2.beta",
                 "pw1.weight", "pw1.bias", "pw2.weight", "pw2.bias"):
        c.params[name][...] = q.params[name]
    x = rng.normal(size=(2, 4, 5, 5))
    assert np.allclose(B.quadrablock_forward(q, x), B.convblock_forward(c, x), atol=1e-13)
    with pytest.raises(ValueError):
        B.quadrablock_forward(c, x)


def test_skipblock_has_no_spatial_mixing(rng):
    block = B.Block(B.BlockSpec("skip", expansion=2), 3, rng)
    x = rng.normal(size=(1, 3, 4, 4))
    y = B.skipblock_forward(block, x)
    x2 = x.copy()
    x2[..., 0, 0] += 1.0
    diff = B.skipblock_forward(block, x2) - y
    assert np.count_nonzero(np.abs(diff).sum(axis=1)) == 1


def test_block_channel_mismatch(rng):
    block = B.Block(B.BlockSpec("quadra", 3, 2), 4, rng)
    with pytest.raises(ShapeError):
        B.block_forward(block, rng.normal(size=(1, 3, 4, 4)))


def test_bad_block_specs():
    with pytest.raises(ValueError):
        B.BlockSpec("mlp")
    with pytest.raises(ValueError):
        B.BlockSpec("quadra", kernel=4)
    with pytest.raises(ValueError):
        B.Block(B.BlockSpec("gnconv"), 4)


def test_spec_tags():
    assert B.BlockSpec("quadra", 7, 4).tag == "Q7x4"
    assert B.BlockSpec("identity").tag == "ID"


def test_window_attention_matches_explicit_softmax(rng):
    C, M = 3, 2
    params = B.WindowAttentionParams.init(C, M, rng)
    x = rng.normal(size=(1, C, 4, 4))
    out = B.window_attention_forward(params, x)
    ref = np.zeros_like(x)
    for wi in range(2):
        for wj in range(2):
            tok = x[0, :, wi * M:(wi + 1) * M, wj * M:(wj + 1) * M].reshape(C, -1).T
            q, k, v = tok @ params.W_Q.T, tok @ params.W_K.T, tok @ params.W_V.T
            s = q @ k.T / np.sqrt(C)
            a = np.exp(s - s.max(axis=1, keepdims=True))
            a /= a.sum(axis=1, keepdims=True)
            o = (a @ v) @ params.W_O.T + params.b_O
            ref[0, :, wi * M:(wi + 1) * M, wj * M:(wj + 1) * M] = o.T.reshape(C, M, M)
    assert np.allclose(out, ref, atol=1e-12)


def test_window_attention_states(rng):
    C, M, H = 4, 2, 4
    params = B.WindowAttentionParams.init(C, M, rng)
    tape = ag.Tape()
    x = tape.leaf(rng.normal(size=(1, C, H, H)))
    B.attention_core(x, tape.param(params.W_Q), tape.param(params.W_K), tape.param(params.W_V), M)
    E = C * H * H
    assert ag.state_total(tape, "forward") == (M * M + 3) * E


def test_window_must_divide(rng):
    params = B.WindowAttentionParams.init(2, 3, rng)
    with pytest.raises(ShapeError):
        B.window_attention_forward(params, rng.normal(size=(1, 2, 4, 4)))


@pytest.mark.parametrize("R,n", [(1, 5), (2, 8), (4, 16), (8, 8)])
def test_rank_identity(R, n):
    assert B.rank_identity(R, n, seed=R)


def test_matrix_rank():
    assert B.matrix_rank(np.outer([1.0, 2.0], [3.0, 4.0])) == 1
    assert B.matrix_rank(np.eye(3)) == 3
    assert B.matrix_rank(np.zeros((2, 2))) == 0
