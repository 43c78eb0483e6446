import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from flexssm.embed import (PatchEmbed, PositionalEmbeds, assemble_sequence, build_resize_1d, build_resize_2d,
                           flex_kernel, flex_pos_embed, flex_temp_embed, patchify)
from flexssm.tensor import ShapeError, Tensor, gradcheck, tsum

sizes = st.integers(1, 64)


def dense(op):
    return op.matrix.toarray()


# ---------------------------------------------------------------- resize operators

@pytest.mark.parametrize("mode", ["linear", "bicubic"])
def test_same_size_is_identity(mode):
    op = build_resize_1d(7, 7, mode)
    assert op.is_identity
    np.testing.assert_array_equal(dense(op), np.eye(7))


def test_linear_two_to_three():
    u, v = np.array([1.0, -2.0, 5.0]), np.array([3.0, 0.5, -1.0])
    out = build_resize_1d(2, 3, "linear")(np.stack([u, v]))
    np.testing.assert_allclose(out, np.stack([u, (u + v) / 2, v]))


def test_single_output_samples_midpoint():
    np.testing.assert_allclose(dense(build_resize_1d(5, 1, "linear")), [[0, 0, 1, 0, 0]])
    np.testing.assert_allclose(dense(build_resize_1d(4, 1, "linear")), [[0, 0.5, 0.5, 0]])


@pytest.mark.parametrize("src,dst", [(2, 3), (5, 9), (8, 3), (7, 14), (14, 7), (3, 1), (1, 4)])
@pytest.mark.parametrize("mode", ["linear", "bicubic"])
def test_matches_pure_python_oracle(src, dst, mode):
    np.testing.assert_allclose(dense(build_resize_1d(src, dst, mode)), oracles.resize_weights(src, dst, mode),
                               atol=1e-14)


def test_zero_lengths_rejected():
    with pytest.raises(ValueError):
        build_resize_1d(0, 3)
    with pytest.raises(ValueError):
        build_resize_1d(3, 0, "bicubic")


@settings(max_examples=60, deadline=None)
@given(src=sizes, dst=sizes, mode=st.sampled_from(["linear", "bicubic"]), c=st.floats(-10, 10))
def test_partition_of_unity(src, dst, mode, c):
    op = build_resize_1d(src, dst, mode)
    np.testing.assert_allclose(np.asarray(op.matrix.sum(axis=1)).ravel(), 1.0, atol=1e-12)
    np.testing.assert_allclose(op(np.full((src, 3), c)), c, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(sh=sizes, sw=sizes, dh=sizes, dw=sizes, seed=st.integers(0, 2 ** 31 - 1))
def test_adjoint_identity_2d(sh, sw, dh, dw, seed):
    r = np.random.default_rng(seed)
    op = build_resize_2d((sh, sw), (dh, dw), "bicubic")
    x, y = r.normal(size=(sh * sw, 2)), r.normal(size=(dh * dw, 2))
    lhs, rhs = np.sum(op(x) * y), np.sum(x * op.T(y))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_2d_is_outer_composition(rng):
    x = rng.normal(size=(4, 6))
    rh, rw = build_resize_1d(4, 7, "bicubic"), build_resize_1d(6, 3, "bicubic")
    sep = rw(rh(x).T).T
    op = build_resize_2d((4, 6), (7, 3), "bicubic")
    np.testing.assert_allclose(op(x.reshape(-1, 1)).reshape(7, 3), sep, atol=1e-13)


# ---------------------------------------------------------------- flexing

def _patch(w):
    return PatchEmbed(Tensor(w), Tensor(np.zeros(w.shape[0])))


def _pos(r, g=3, t=2, D=4):
    return PositionalEmbeds(Tensor(r.normal(size=(g * g, D))), Tensor(r.normal(size=(t, D))),
                            Tensor(r.normal(size=(1, D))), Tensor(r.normal(size=(1, D))))


def test_flex_kernel_identity_is_exact(rng):
    pe = _patch(rng.normal(size=(2, 3, 4, 4)))
    assert flex_kernel(pe, 4) is pe.w


def test_flex_kernel_constant_gain(f64):
    k = flex_kernel(_patch(np.full((2, 3, 4, 4), 0.8)), 8).data
    np.testing.assert_allclose(k, 0.8 / 4, rtol=1e-12)


def smooth_kernel(r, shape):
    """Positive kernel built from a few low-frequency plane waves, like a trained patch filter."""
    ny, nx = shape[-2:]
    y, x = np.arange(ny)[:, None] / (ny - 1), np.arange(nx)[None, :] / (nx - 1)
    w = np.ones(shape)
    for _ in range(3):
        amp = r.uniform(-0.2, 0.2, size=shape[:2] + (1, 1))
        w = w + amp * np.sin(2 * np.pi * (r.uniform(0, 1.5) * y + r.uniform(0, 1.5) * x) + r.uniform(0, 2 * np.pi))
    return w


@pytest.mark.parametrize("p_def,p_new", [(8, 3), (8, 4), (8, 5), (8, 6), (8, 10), (8, 12), (8, 14), (8, 16),
                                         (16, 32)])
@pytest.mark.parametrize("seed", range(4))
def test_constant_video_response_is_gain_compensated(f64, seed, p_def, p_new):
    pe = _patch(smooth_kernel(np.random.default_rng(seed), (4, 3, p_def, p_def)))
    ref = patchify(np.full((1, 1, p_def, p_def, 3), 0.6), pe.w, pe.b, p_def).data
    got = patchify(np.full((1, 1, p_new, p_new, 3), 0.6), flex_kernel(pe, p_new), pe.b, p_new).data
    np.testing.assert_allclose(got, ref, rtol=0.05)


def test_without_gain_constant_response_scales_with_area(f64):
    pe = _patch(np.ones((1, 3, 16, 16)))
    k = flex_kernel(pe, 32).data * 4.0                  # undo the (16/32)^2 gain
    assert np.sum(k) == pytest.approx(4 * np.sum(pe.w.data))


def test_flex_temp_embed_example(f64, rng):
    u, v = rng.normal(size=4), rng.normal(size=4)
    pos = _pos(rng)
    pos.e_temp = Tensor(np.stack([u, v]))
    out = flex_temp_embed(pos, 4).data
    np.testing.assert_allclose(out, np.stack([u, (2 * u + v) / 3, (u + 2 * v) / 3, v]), atol=1e-14)
    assert flex_temp_embed(pos, 2) is pos.e_temp


def test_flex_pos_embed_identity_and_constants(f64, rng):
    pos = _pos(rng)
    assert flex_pos_embed(pos, 3) is pos.e_pos
    pos.e_pos = Tensor(np.full((9, 4), 2.5))
    np.testing.assert_allclose(flex_pos_embed(pos, 7).data, 2.5, atol=1e-12)
    pos.e_temp = Tensor(np.full((2, 4), -1.0))
    np.testing.assert_allclose(flex_temp_embed(pos, 5).data, -1.0, atol=1e-12)


def test_flex_pos_embed_adjoint(f64, rng):
    e = rng.normal(size=(9, 4))
    y = rng.normal(size=(25, 4))
    op = build_resize_2d((3, 3), (5, 5), "bicubic")
    pos = _pos(rng)
    pos.e_pos = Tensor(e)
    lhs = np.sum(flex_pos_embed(pos, 5).data * y)
    assert abs(lhs - np.sum(e * op.T(y))) < 1e-10


def test_flex_errors(rng):
    with pytest.raises(ValueError):
        flex_pos_embed(_pos(rng), 0)
    with pytest.raises(ValueError):
        flex_temp_embed(_pos(rng), 0)
    with pytest.raises(ValueError):
        flex_kernel(_patch(np.ones((1, 3, 4, 4))), 0)


def test_gradcheck_flex_kernel_into_patchify(f64, rng):
    w = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=2), requires_grad=True)
    pe = PatchEmbed(w, b)
    video = Tensor(rng.uniform(size=(1, 2, 10, 10, 3)))
    wt = Tensor(rng.normal(size=(1, 2, 4, 2)))
    assert gradcheck(lambda: tsum(patchify(video, flex_kernel(pe, 5), b, 5) * wt), [w, b]) < 1e-3


def test_gradcheck_flex_embeddings(f64, rng):
    pos = _pos(rng)
    for t in (pos.e_pos, pos.e_temp):
        t.requires_grad = True
    w1, w2 = Tensor(rng.normal(size=(16, 4))), Tensor(rng.normal(size=(5, 4)))
    assert gradcheck(lambda: tsum(flex_pos_embed(pos, 4) * w1), pos.e_pos) < 1e-3
    assert gradcheck(lambda: tsum(flex_temp_embed(pos, 5) * w2), pos.e_temp) < 1e-3


# ---------------------------------------------------------------- patchify and assembly

@pytest.mark.parametrize("H,P,n", [(224, 16, 196), (240, 12, 400), (128, 32, 16)])
def test_token_counts(H, P, n):
    video = np.zeros((1, 1, H, H, 3), dtype=np.float32)
    tok = patchify(video, Tensor(np.zeros((2, 3, P, P))), Tensor(np.zeros(2)), P)
    assert tok.shape == (1, 1, n, 2)


def test_patchify_matches_explicit_loop(f64, rng):
    video = rng.uniform(size=(1, 2, 6, 6, 3))
    k, b = rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    tok = patchify(video, Tensor(k), Tensor(b), 3).data
    for t in range(2):
        for gi in range(2):
            for gj in range(2):
                patch = video[0, t, 3 * gi:3 * gi + 3, 3 * gj:3 * gj + 3, :]        # (P, P, C)
                want = np.einsum("dcij,ijc->d", k, patch) + b
                np.testing.assert_allclose(tok[0, t, gi * 2 + gj], want, atol=1e-12)


def test_patchify_rejects_non_multiple():
    with pytest.raises(ShapeError, match="multiple"):
        patchify(np.zeros((1, 1, 10, 10, 3)), Tensor(np.zeros((2, 3, 4, 4))), Tensor(np.zeros(2)), 4)


def test_assemble_zero_case(rng):
    cls = rng.normal(size=(1, 4))
    z = np.zeros((1, 2, 3, 4))
    seq = assemble_sequence(Tensor(z), Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4))), Tensor(cls)).data
    np.testing.assert_allclose(seq[0, 0], cls[0], rtol=1e-6)
    np.testing.assert_array_equal(seq[0, 1:], 0)
    assert seq.shape == (1, 1 + 2 * 3, 4)


def test_assemble_single_frame_shift(f64, rng):
    tok = rng.normal(size=(1, 1, 5, 4))
    r = rng.normal(size=(1, 4))
    seq = assemble_sequence(Tensor(tok), Tensor(np.zeros((5, 4))), Tensor(r), Tensor(np.zeros((1, 4)))).data
    np.testing.assert_allclose(seq[0, 1:], tok[0, 0] + r, atol=1e-14)


def test_assemble_minimal_hand_case(f64, rng):
    tok = rng.normal(size=(1, 2, 1, 4))
    ep, et, cls, cp = rng.normal(size=(1, 4)), rng.normal(size=(2, 4)), rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
    seq = assemble_sequence(*(Tensor(a) for a in (tok, ep, et, cls, cp))).data[0]
    np.testing.assert_allclose(seq, np.stack([cls[0] + cp[0], tok[0, 0, 0] + ep[0] + et[0],
                                              tok[0, 1, 0] + ep[0] + et[1]]), atol=1e-14)


def test_assemble_row_mismatch():
    with pytest.raises(ShapeError):
        assemble_sequence(Tensor(np.zeros((1, 2, 3, 4))), Tensor(np.zeros((4, 4))), Tensor(np.zeros((2, 4))),
                          Tensor(np.zeros((1, 4))))


@settings(max_examples=30, deadline=None)
@given(T=st.integers(1, 6), G=st.integers(1, 5), B=st.integers(1, 3))
def test_sequence_length_property(T, G, B):
    D = 2
    seq = assemble_sequence(Tensor(np.zeros((B, T, G * G, D))), Tensor(np.zeros((G * G, D))),
                            Tensor(np.zeros((T, D))), Tensor(np.zeros((1, D))))
    assert seq.shape == (B, 1 + T * G * G, D)
