"""ConvLSTM recurrence identities and the scalar oracle."""

import numpy as np
import pytest

from mmseqseg.convlstm import (ConvLstmParams, ConvLstmState, convlstm_sequence,
                               convlstm_step)
from mmseqseg.gradsuite import check_convlstm_sequence, check_convlstm_step
from mmseqseg.tensor import ShapeError, Tensor


def make_params(rng, cx=2, ch=2, k=3, scale=0.3):
    p = ConvLstmParams(cx, ch, k, dtype=np.float64)
    for t in p.named_tensors().values():
        t.data = scale * rng.standard_normal(t.shape)
    return p


def zero_state(n=1, ch=2, hs=4, ws=4):
    return ConvLstmState.zeros(n, ch, hs, ws, dtype=np.float64)


class TestStep:
    def test_zero_everything_gives_zero(self):
        p = ConvLstmParams(2, 2, 3, dtype=np.float64)  # all-zero init
        x = Tensor(np.zeros((1, 2, 4, 4)))
        h, state = convlstm_step(x, zero_state(), p)
        np.testing.assert_array_equal(h.data, 0.0)
        np.testing.assert_array_equal(state.c.data, 0.0)

    def test_saturated_forget_gate_holds_memory(self):
        p = ConvLstmParams(1, 1, 3, dtype=np.float64)
        p.b_f.data = np.array([30.0])  # forget gate ~ 1
        c_prev = np.random.default_rng(0).standard_normal((1, 1, 4, 4))
        state = ConvLstmState(Tensor(np.zeros((1, 1, 4, 4))), Tensor(c_prev))
        _, nxt = convlstm_step(Tensor(np.zeros((1, 1, 4, 4))), state, p)
        np.testing.assert_allclose(nxt.c.data, c_prev, atol=1e-4)

    def test_scalar_recurrence_oracle(self):
        # 1x1 kernel, 1 channel, 1x1 spatial: the cell must match a
        # hand-evaluated scalar LSTM over 5 steps
        rng = np.random.default_rng(1)
        p = ConvLstmParams(1, 1, 1, dtype=np.float64)
        w = {n: rng.standard_normal() for n in p.named_tensors()}
        for n, t in p.named_tensors().items():
            t.data = np.full(t.shape, w[n])
        xs = rng.standard_normal(5)

        def sig(v):
            return 1.0 / (1.0 + np.exp(-v))

        h = c = 0.0
        state = zero_state(1, 1, 1, 1)
        for t in range(5):
            i = sig(xs[t] * w["W_xi"] + h * w["W_hi"] + w["b_i"])
            f = sig(xs[t] * w["W_xf"] + h * w["W_hf"] + w["b_f"])
            g = np.tanh(xs[t] * w["W_xc"] + h * w["W_hc"] + w["b_c"])
            o = sig(xs[t] * w["W_xo"] + h * w["W_ho"] + w["b_o"])
            c = c * f + i * g
            h = o * np.tanh(c)
            x_t = Tensor(np.full((1, 1, 1, 1), xs[t]))
            h_t, state = convlstm_step(x_t, state, p)
            np.testing.assert_allclose(h_t.data[0, 0, 0, 0], h, rtol=1e-6)
            np.testing.assert_allclose(state.c.data[0, 0, 0, 0], c, rtol=1e-6)

    def test_gates_bounded(self):
        rng = np.random.default_rng(2)
        p = make_params(rng)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)) * 5)
        state = ConvLstmState(Tensor(rng.standard_normal((1, 2, 4, 4))),
                              Tensor(rng.standard_normal((1, 2, 4, 4))))
        _, nxt = convlstm_step(x, state, p)
        # |c_t| <= |c_{t-1}| + 1 since f,i in (0,1) and |tanh| < 1
        assert np.all(np.abs(nxt.c.data) <= np.abs(state.c.data) + 1.0)

    def test_spatial_mismatch_raises(self):
        p = ConvLstmParams(1, 1, 3)
        with pytest.raises(ShapeError):
            convlstm_step(Tensor(np.zeros((1, 1, 4, 4))),
                          ConvLstmState.zeros(1, 1, 6, 6), p)

    def test_gradcheck(self):
        report = check_convlstm_step(0, 1e-4)
        assert report.passed, report.max_rel_error


class TestSequence:
    def test_single_step_matches_step(self):
        rng = np.random.default_rng(3)
        p = make_params(rng)
        x = Tensor(rng.standard_normal((1, 2, 4, 4)))
        hs = convlstm_sequence([x], p)
        h_direct, _ = convlstm_step(x, zero_state(), p)
        np.testing.assert_array_equal(hs[0].data, h_direct.data)

    def test_zero_inputs_zero_outputs(self):
        p = ConvLstmParams(2, 2, 3, dtype=np.float64)
        xs = [Tensor(np.zeros((1, 2, 4, 4))) for _ in range(4)]
        for h in convlstm_sequence(xs, p):
            np.testing.assert_array_equal(h.data, 0.0)

    def test_empty_sequence_raises(self):
        with pytest.raises(ShapeError):
            convlstm_sequence([], ConvLstmParams(1, 1, 3))

    def test_parameter_count_constant_in_length(self):
        p = ConvLstmParams(3, 5, 3)
        count = sum(t.size for t in p.named_tensors().values())
        for t_len in (1, 3, 5):
            rng = np.random.default_rng(4)
            xs = [Tensor(rng.standard_normal((1, 3, 4, 4))) for _ in range(t_len)]
            convlstm_sequence(xs, p)
            assert sum(t.size for t in p.named_tensors().values()) == count

    def test_bptt_gradcheck(self):
        report = check_convlstm_sequence(0, 1e-4, steps=3)
        assert report.passed, report.max_rel_error
