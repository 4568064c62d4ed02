import threading

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from uniwrv.checks import COMPOSITES
from uniwrv.errors import DimensionError, NonFiniteError, UsageError
from uniwrv.tensorkit import REGISTRY, Tape, Tensor, backend, check_function, gradcheck, ops, sg
from uniwrv.tensorkit.tensor import Function

finite = st.floats(-10, 10, allow_nan=False, width=64)


def conv_oracle(x, w, stride, pad):
    """Direct nested loops, zero padding."""
    H, W, cin = x.shape
    k, _, _, cout = w.shape
    xp = np.zeros((H + 2 * pad, W + 2 * pad, cin))
    xp[pad:pad + H, pad:pad + W] = x
    ho = (H + 2 * pad - k) // stride + 1
    wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((ho, wo, cout))
    for i in range(ho):
        for j in range(wo):
            for a in range(k):
                for b in range(k):
                    for m in range(cin):
                        for n in range(cout):
                            out[i, j, n] += xp[i * stride + a, j * stride + b, m] * w[a, b, m, n]
    return out


def bilinear_oracle(x, r, c):
    H, W, _ = x.shape
    r0, c0 = int(np.floor(r)), int(np.floor(c))
    out = np.zeros(x.shape[-1])
    for rr, wr in ((r0, 1 - (r - r0)), (r0 + 1, r - r0)):
        for cc, wc in ((c0, 1 - (c - c0)), (c0 + 1, c - c0)):
            if 0 <= rr < H and 0 <= cc < W:
                out += wr * wc * x[rr, cc]
    return out


# ---------------------------------------------------------------- conv2d


def test_conv_scalar_kernel():
    x = Tensor([[[1.0], [2.0]], [[3.0], [4.0]]])
    out = ops.conv2d(x, Tensor(np.full((1, 1, 1, 1), 2.0)))
    np.testing.assert_array_equal(out.data[..., 0], [[2, 4], [6, 8]])


def test_conv_ones_counts_neighbours():
    out = ops.conv2d(Tensor(np.ones((3, 3, 1))), Tensor(np.ones((3, 3, 1, 1))), pad=1).data[..., 0]
    np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


def test_conv_zero_kernel(rng):
    out = ops.conv2d(Tensor(rng.standard_normal((5, 5, 2))), Tensor(np.zeros((3, 3, 2, 3))), pad=1)
    assert not out.data.any()


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv_matches_loop_oracle(rng, stride, pad):
    x = rng.standard_normal((5, 5, 2))
    w = rng.standard_normal((3, 3, 2, 3))
    got = ops.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).data
    want = conv_oracle(x, w, stride, pad)
    assert got.shape == want.shape
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_conv_channel_mismatch():
    with pytest.raises(DimensionError):
        ops.conv2d(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((3, 3, 3, 1))))


def test_conv_per_sample_kernels(rng):
    x = rng.standard_normal((2, 5, 5, 2))
    w = rng.standard_normal((2, 3, 3, 2, 3))
    got = ops.conv2d(Tensor(x), Tensor(w), pad=1).data
    for b in range(2):
        np.testing.assert_allclose(got[b], conv_oracle(x[b], w[b], 1, 1), rtol=1e-10, atol=1e-12)


# ---------------------------------------------------------------- sampling


def test_bilinear_examples():
    x = Tensor(np.array([[0.0, 1.0], [2.0, 3.0]])[..., None])
    assert ops.bilinear_sample(x, (0.0, 0.0)).data[0] == 0.0
    assert ops.bilinear_sample(x, (0.5, 0.5)).data[0] == 1.5
    assert ops.bilinear_sample(x, (-10.0, -10.0)).data[0] == 0.0


@given(st.floats(-2, 5, allow_nan=False), st.floats(-2, 5, allow_nan=False))
def test_bilinear_matches_oracle(r, c):
    x = np.random.default_rng(5).standard_normal((4, 3, 2))
    got = ops.bilinear_sample(Tensor(x), (r, c)).data
    np.testing.assert_allclose(got, bilinear_oracle(x, r, c), atol=1e-12)


def test_warp_examples():
    x = Tensor(np.array([[0.0, 1.0], [2.0, 3.0]])[..., None])
    shift = np.zeros((2, 2, 2))
    shift[..., 1] = 1.0
    np.testing.assert_array_equal(ops.warp(x, shift).data[..., 0], [[1, 0], [3, 0]])
    shift[..., 1] = 0.5
    np.testing.assert_allclose(ops.warp(x, shift).data[..., 0], [[0.5, 0.5], [2.5, 1.5]])


@given(arrays(np.float64, (3, 4, 2), elements=finite))
def test_warp_zero_flow_is_identity(x):
    np.testing.assert_array_equal(ops.warp(Tensor(x), np.zeros((3, 4, 2))).data, x)


def test_warp_shape_mismatch():
    with pytest.raises(DimensionError):
        ops.warp(Tensor(np.zeros((3, 3, 1))), np.zeros((3, 2, 2)))


def test_backends_agree(rng):
    if len(backend.available()) < 2:
        pytest.skip("compiled kernels not built")
    x = rng.standard_normal((2, 5, 6, 3))
    coords = rng.uniform(-1.5, 6.5, (2, 40, 2))
    gout = rng.standard_normal((2, 40, 3))
    py, cy = backend.get("python"), backend.get("cython")
    np.testing.assert_allclose(py.grid_sample_forward(x, coords), cy.grid_sample_forward(x, coords), atol=1e-12)
    for a, b in zip(py.grid_sample_backward(x, coords, gout, True, True),
                    cy.grid_sample_backward(x, coords, gout, True, True)):
        np.testing.assert_allclose(a, b, atol=1e-12)


# ---------------------------------------------------------------- shuffles, softmax


def test_pixel_unshuffle_shape():
    assert ops.pixel_unshuffle(Tensor(np.zeros((4, 4, 1))), 2).shape == (2, 2, 4)


@given(arrays(np.float64, (4, 6, 3), elements=finite), st.sampled_from([1, 2]))
def test_shuffle_roundtrip(x, r):
    back = ops.pixel_shuffle(ops.pixel_unshuffle(Tensor(x), r), r).data
    np.testing.assert_array_equal(back, x)


def test_unshuffle_constant():
    out = ops.pixel_unshuffle(Tensor(np.full((4, 4, 2), 3.0)), 2).data
    assert out.shape == (2, 2, 8) and np.all(out == 3.0)


def test_unshuffle_indivisible():
    with pytest.raises(DimensionError):
        ops.pixel_unshuffle(Tensor(np.zeros((5, 4, 1))), 2)


def test_softmax_examples():
    np.testing.assert_allclose(ops.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(ops.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(ops.softmax(Tensor([np.log(1.0), np.log(3.0)])).data, [0.25, 0.75], rtol=1e-12)


@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_simplex_and_shift(x, shift):
    a = ops.softmax(Tensor(x)).data
    assert np.all(a > 0) and abs(a.sum() - 1) < 1e-6
    np.testing.assert_allclose(ops.softmax(Tensor(x + shift)).data, a, atol=1e-9)


# ---------------------------------------------------------------- tape semantics


def test_backward_linear():
    x = Tensor(np.arange(4.0), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(2.0 * x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, 2.0)


def test_stop_gradient_blocks_one_factor():
    data = np.array([1.0, -2.0, 3.0])
    x = Tensor(data, requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(sg(x) * x)
    tape.backward(loss)
    np.testing.assert_array_equal(x.grad, data)


def test_stop_gradient_shares_buffer():
    x = Tensor(np.ones(3), requires_grad=True)
    assert sg(x).data is x.data


def test_backward_needs_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(UsageError):
        tape.backward(y)


def test_no_recording_outside_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    y = x * 3.0
    assert y._node is None


def test_unused_leaf_gets_zero_grad():
    x = Tensor(np.ones(2), requires_grad=True)
    z = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape:
        loss = ops.sum(x * 2.0) + ops.sum(sg(z))
    tape.backward(loss)
    np.testing.assert_array_equal(z.grad, 0.0)


def test_non_finite_forward_raises():
    with np.errstate(invalid="ignore"), pytest.raises(NonFiniteError):
        ops.log(Tensor([-1.0]))


def test_tapes_are_thread_local():
    seen = []

    def worker():
        from uniwrv.tensorkit import current_tape

        seen.append(current_tape())

    with Tape():
        t = threading.Thread(target=worker)
        t.start()
        t.join()
    assert seen == [None]


# ---------------------------------------------------------------- gradient checks


PRIMITIVES = sorted(n for n in REGISTRY if n not in COMPOSITES)


@pytest.mark.parametrize("op", PRIMITIVES)
def test_gradcheck_primitive(op, each_backend):
    rep = gradcheck(op, trials=10, eps=1e-5, tol=1e-4, seed=3)
    assert rep.passed, (op, rep.max_rel_error)


def test_gradcheck_unknown_op():
    with pytest.raises(UsageError):
        gradcheck("no_such_op")


class _BrokenSquare(Function):
    @staticmethod
    def forward(ctx, a):
        ctx.save(a=a)
        return a * a

    @staticmethod
    def backward(ctx, g):
        return (3.0 * ctx.a * g,)  # wrong on purpose


def test_gradcheck_catches_corrupted_gradient(rng):
    errs = check_function(_BrokenSquare.apply, [rng.uniform(0.5, 1.5, 5)])
    assert max(errs) > 1e-4
