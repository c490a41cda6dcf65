"""Recurrent kernels: hand oracles, composition checks, gradient checks.

The LSTM step is verified three ways: against frozen hand-computed values,
against an independent scalar reimplementation written with math.exp only,
and against central finite differences through full unrolled sequences.
"""

import math

import numpy as np
import pytest

from bvqa import autodiff as ad
from bvqa import nncore as nn
from bvqa.errors import ConfigError, ShapeError


def make_lstm(input_dim, hidden, seed=0):
    return nn.init_lstm_params(input_dim, hidden, np.random.default_rng(seed))


def lstm_named(p, prefix="cell"):
    return dict(p.named(prefix))


# ---------------------------------------------------------------------------
# independent scalar oracle, pure python arithmetic


def scalar_lstm_step(p, x, h_prev, c_prev):
    """Step-by-step cell update using python floats and math.exp only."""
    K = p.hidden
    v = list(h_prev) + list(x)

    def gate(W, b, squash):
        out = []
        for r in range(K):
            z = 0.0
            for cidx, vv in enumerate(v):
                z += W[r][cidx] * vv
            out.append(squash(z + b[r]))
        return out

    sig = lambda z: 1.0 / (1.0 + math.exp(-z))
    i = gate(p.W_i.value.tolist(), p.b_i.value.tolist(), sig)
    f = gate(p.W_f.value.tolist(), p.b_f.value.tolist(), sig)
    o = gate(p.W_o.value.tolist(), p.b_o.value.tolist(), sig)
    g = gate(p.W_c.value.tolist(), p.b_c.value.tolist(), math.tanh)
    c = [f[k] * c_prev[k] + i[k] * g[k] for k in range(K)]
    h = [o[k] * math.tanh(c[k]) for k in range(K)]
    return h, c


def all_ones_cell(input_dim=1, hidden=1):
    ones = lambda shape: ad.Node(np.ones(shape), requires_grad=True)
    zeros = lambda shape: ad.Node(np.zeros(shape), requires_grad=True)
    return nn.LstmParams(
        W_i=ones((hidden, hidden + input_dim)), W_f=ones((hidden, hidden + input_dim)),
        W_o=ones((hidden, hidden + input_dim)), W_c=ones((hidden, hidden + input_dim)),
        b_i=zeros(hidden), b_f=zeros(hidden), b_o=zeros(hidden), b_c=zeros(hidden))


class TestLstmStep:
    def test_zero_weights_zero_input_give_zero_state_half_gates(self):
        p = nn.LstmParams(
            **{k: ad.Node(np.zeros((1, 2)), requires_grad=True) for k in ("W_i", "W_f", "W_o", "W_c")},
            **{k: ad.Node(np.zeros(1), requires_grad=True) for k in ("b_i", "b_f", "b_o", "b_c")})
        h, c = nn.lstm_step(p, np.zeros(1), np.zeros(1), np.zeros(1))
        # gates sit at sigmoid(0)=0.5, candidate at tanh(0)=0, so state stays 0
        assert float(h) == 0.0 and float(c) == 0.0

    def test_hand_value_unit_cell(self):
        # scalar cell, all weights one, zero biases, x=1 from zero state
        h, c = nn.lstm_step(all_ones_cell(), np.ones(1), np.zeros(1), np.zeros(1))
        s = 1.0 / (1.0 + math.exp(-1.0))
        assert abs(float(c) - s * math.tanh(1.0)) < 1e-12
        assert abs(float(c) - 0.556766) < 1e-3
        assert abs(float(h) - 0.3696) < 1e-3

    def test_matches_independent_scalar_reimplementation(self):
        rng = np.random.default_rng(7)
        for input_dim, hidden in [(1, 1), (3, 2), (2, 4)]:
            p = make_lstm(input_dim, hidden, seed=int(rng.integers(1 << 30)))
            x = rng.standard_normal(input_dim)
            h0 = rng.standard_normal(hidden)
            c0 = rng.standard_normal(hidden)
            h, c = nn.lstm_step(p, x, h0, c0)
            oh, oc = scalar_lstm_step(p, x.tolist(), h0.tolist(), c0.tolist())
            np.testing.assert_allclose(h.value, oh, rtol=1e-13, atol=1e-15)
            np.testing.assert_allclose(c.value, oc, rtol=1e-13, atol=1e-15)

    def test_fused_and_composed_cells_agree_bitwise(self):
        rng = np.random.default_rng(3)
        p = make_lstm(4, 3, seed=11)
        x, h0, c0 = rng.standard_normal(4), rng.standard_normal(3), rng.standard_normal(3)
        hf, cf = nn.lstm_step(p, x, h0, c0)
        hc, cc = nn.lstm_step_composed(p, x, h0, c0)
        assert np.array_equal(hf.value, hc.value)
        assert np.array_equal(cf.value, cc.value)

    def test_fused_and_composed_gradients_agree(self):
        p = make_lstm(3, 2, seed=5)
        x = np.random.default_rng(9).standard_normal(3)
        named = lstm_named(p)

        grads = {}
        for step in (nn.lstm_step, nn.lstm_step_composed):
            nn.zero_grads(named.items())
            h, c = step(p, x, np.zeros(2), np.zeros(2))
            nn.backward(ad.vsum(ad.add(h, c)))
            grads[step.__name__] = {k: nn.grad_of(n).copy() for k, n in named.items()}
        for k in named:
            np.testing.assert_allclose(grads["lstm_step"][k],
                                       grads["lstm_step_composed"][k],
                                       rtol=1e-12, atol=1e-14)

    def test_shape_errors_name_the_problem(self):
        p = make_lstm(3, 2)
        with pytest.raises(ShapeError, match="input"):
            nn.lstm_step(p, np.zeros(4), np.zeros(2), np.zeros(2))
        with pytest.raises(ShapeError, match="state"):
            nn.lstm_step(p, np.zeros(3), np.zeros(1), np.zeros(2))


class TestLstmForward:
    def test_two_steps_compose(self):
        p = make_lstm(2, 3, seed=1)
        rng = np.random.default_rng(2)
        xs = [rng.standard_normal(2) for _ in range(2)]
        hs, h_last, c_last = nn.lstm_forward(p, xs)
        h1, c1 = nn.lstm_step(p, xs[0], np.zeros(3), np.zeros(3))
        h2, c2 = nn.lstm_step(p, xs[1], h1, c1)
        np.testing.assert_array_equal(hs[0].value, h1.value)
        np.testing.assert_array_equal(h_last.value, h2.value)
        np.testing.assert_array_equal(c_last.value, c2.value)

    def test_empty_sequence_rejected(self):
        with pytest.raises(ShapeError, match="empty"):
            nn.lstm_forward(make_lstm(2, 2), [])

    def test_length_one_sequence(self):
        p = make_lstm(2, 2, seed=4)
        hs, h_last, _ = nn.lstm_forward(p, [np.ones(2)])
        assert len(hs) == 1 and np.array_equal(hs[0].value, h_last.value)


class TestBiLstm:
    def tied(self, input_dim=2, hidden=3, seed=0):
        f = make_lstm(input_dim, hidden, seed)
        return nn.BiLstmParams(fwd=f, bwd=f)

    def test_output_width_and_final_state(self):
        p = nn.init_bilstm_params(2, 3, np.random.default_rng(0))
        xs = [np.ones(2), np.zeros(2), np.ones(2) * 0.5]
        steps, final = nn.bilstm_forward(p, xs)
        assert [s.value.shape for s in steps] == [(6,)] * 3
        f_hs, f_last, _ = nn.lstm_forward(p.fwd, xs)
        b_hs, b_last, _ = nn.lstm_forward(p.bwd, xs[::-1])
        np.testing.assert_array_equal(final.value,
                                      np.concatenate([f_last.value, b_last.value]))
        # final state is NOT the last per-step output: the backward half of
        # the last step is the backward stream's first state
        np.testing.assert_array_equal(steps[-1].value[3:], b_hs[0].value)
        assert not np.array_equal(steps[-1].value, final.value)

    def test_tied_weights_palindrome_mirrors_halves(self):
        p = self.tied()
        rng = np.random.default_rng(5)
        a, b = rng.standard_normal(2), rng.standard_normal(2)
        xs = [a, b, a]  # palindrome
        steps, _ = nn.bilstm_forward(p, xs)
        T = len(xs)
        for t in range(T):
            fwd_half = steps[t].value[:3]
            mirror_bwd_half = steps[T - 1 - t].value[3:]
            np.testing.assert_allclose(fwd_half, mirror_bwd_half, rtol=1e-12)

    def test_tied_weights_reversal_swaps_halves(self):
        p = self.tied(input_dim=3, hidden=2, seed=8)
        rng = np.random.default_rng(6)
        xs = [rng.standard_normal(3) for _ in range(4)]
        steps, final = nn.bilstm_forward(p, xs)
        rsteps, rfinal = nn.bilstm_forward(p, xs[::-1])
        K = 2
        for t in range(4):
            np.testing.assert_allclose(rsteps[t].value[:K],
                                       steps[3 - t].value[K:], rtol=1e-12)
            np.testing.assert_allclose(rsteps[t].value[K:],
                                       steps[3 - t].value[:K], rtol=1e-12)
        np.testing.assert_allclose(rfinal.value,
                                   np.concatenate([final.value[K:], final.value[:K]]),
                                   rtol=1e-12)


class TestFcAndLoss:
    def test_fc_oracle(self):
        p = nn.FcParams(W=ad.Node(np.array([[1.0, 2.0], [0.0, -1.0]]), requires_grad=True),
                        b=ad.Node(np.array([0.5, 0.0]), requires_grad=True))
        out = nn.fc_forward(p, np.array([1.0, 1.0]))
        np.testing.assert_array_equal(out.value, [3.5, -1.0])

    def test_fc_relu(self):
        p = nn.init_fc_params(2, 2, np.random.default_rng(0), activation="relu")
        p.W.value = np.array([[1.0, 0.0], [-1.0, 0.0]])
        p.b.value = np.zeros(2)
        out = nn.fc_forward(p, np.array([2.0, 0.0]))
        np.testing.assert_array_equal(out.value, [2.0, 0.0])

    def test_fc_shape_error(self):
        p = nn.init_fc_params(3, 2, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            nn.fc_forward(p, np.zeros(4))

    def test_mse_examples(self):
        assert float(nn.mse_loss(np.array([1.0, 2.0]), np.array([1.0, 2.0]))) == 0.0
        assert float(nn.mse_loss(np.array([0.0, 0.0]), np.array([1.0, 3.0]))) == 5.0

    def test_mse_length_mismatch(self):
        with pytest.raises(ShapeError, match="mismatch"):
            nn.mse_loss(np.zeros(2), np.zeros(3))

    def test_mse_closed_form_gradient_through_fc(self):
        # loss = mean((Wx+b - y)^2); dL/db = 2(Wx+b-y)/n, dL/dW = outer(that, x)
        rng = np.random.default_rng(12)
        p = nn.init_fc_params(3, 2, rng)
        x = rng.standard_normal(3)
        y = rng.standard_normal(2)
        out = nn.fc_forward(p, x)
        nn.backward(nn.mse_loss(out, y))
        resid = 2.0 * (out.value - y) / 2.0
        np.testing.assert_allclose(nn.grad_of(p.b), resid, rtol=1e-12)
        np.testing.assert_allclose(nn.grad_of(p.W), np.outer(resid, x), rtol=1e-12)


class TestBackwardMachinery:
    def test_non_scalar_loss_rejected(self):
        x = ad.Node(np.zeros(3), requires_grad=True)
        with pytest.raises(ShapeError, match="scalar"):
            nn.backward(ad.add(x, x))

    def test_disconnected_parameter_reads_zero_gradient(self):
        used = ad.Node(np.ones(2), requires_grad=True)
        unused = ad.Node(np.ones(2), requires_grad=True)
        nn.backward(ad.vsum(ad.square(used)))
        np.testing.assert_array_equal(nn.grad_of(unused), np.zeros(2))
        np.testing.assert_allclose(nn.grad_of(used), 2.0 * np.ones(2))

    def test_gradients_accumulate_across_backward_calls(self):
        x = ad.Node(np.array([3.0]), requires_grad=True)
        nn.backward(ad.vsum(ad.square(x)))
        nn.backward(ad.vsum(ad.square(x)))
        np.testing.assert_allclose(x.grad, [12.0])

    def test_finite_diff_matches_backward_on_unrolled_sequence(self):
        p = make_lstm(2, 3, seed=21)
        head = nn.init_fc_params(3, 1, np.random.default_rng(22))
        rng = np.random.default_rng(23)
        xs = [rng.standard_normal(2) for _ in range(4)]
        named = {**lstm_named(p), **dict(head.named("head"))}

        def build():
            _, h_last, _ = nn.lstm_forward(p, xs)
            return nn.mse_loss(nn.fc_forward(head, h_last), np.array([0.7]))

        report = nn.check_gradients(build, named)
        assert report.max_rel_err < 1e-6, report.worst_param

    def test_finite_diff_covers_inputs_too(self):
        p = make_lstm(2, 2, seed=31)
        xs = [ad.Node(v, requires_grad=True)
              for v in np.random.default_rng(32).standard_normal((3, 2))]
        named = {f"x{i}": x for i, x in enumerate(xs)}

        def build():
            _, h_last, _ = nn.lstm_forward(p, xs)
            return ad.vsum(ad.square(h_last))

        report = nn.check_gradients(build, named)
        assert report.max_rel_err < 1e-6

    def test_checker_catches_injected_sign_flip(self):
        p = make_lstm(2, 2, seed=41)
        x = np.random.default_rng(42).standard_normal(2)
        named = lstm_named(p)

        def build():
            h, _ = nn.lstm_step(p, x, np.zeros(2), np.zeros(2))
            return ad.vsum(ad.square(h))

        def flip(grads):
            grads["cell.W_i"] = -grads["cell.W_i"]

        report = nn.check_gradients(build, named, mangle=flip)
        assert not report.passed(1e-4)
        assert report.worst_param == "cell.W_i"


class TestAdam:
    def test_first_step_magnitude(self):
        state = nn.AdamState(lr=0.1)
        params = {"w": np.array([1.0])}
        new, state = nn.adam_update(state, params, {"w": np.array([1.0])})
        assert abs(new["w"].item() - 0.9) < 1e-8
        assert state.t == 1

    def test_zero_gradient_first_step_is_identity(self):
        state = nn.AdamState(lr=0.1)
        new, _ = nn.adam_update(state, {"w": np.array([2.0])}, {"w": np.array([0.0])})
        assert new["w"].item() == 2.0

    def test_quadratic_converges_within_200_steps(self):
        state = nn.AdamState(lr=0.1)
        w = {"x": np.array([5.0])}
        for _ in range(200):
            w, state = nn.adam_update(state, w, {"x": 2.0 * w["x"]})
        assert abs(w["x"].item()) < 1e-2

    def test_name_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="mismatch"):
            nn.adam_update(nn.AdamState(), {"a": np.zeros(1)}, {"b": np.zeros(1)})

    def test_pure_functional_state(self):
        state0 = nn.AdamState(lr=0.1)
        params = {"w": np.array([1.0])}
        grads = {"w": np.array([0.5])}
        nn.adam_update(state0, params, grads)
        assert state0.t == 0 and state0.m == {} and params["w"].item() == 1.0


class TestInit:
    def test_deterministic_by_seed(self):
        a = make_lstm(5, 4, seed=9)
        b = make_lstm(5, 4, seed=9)
        for (ka, na), (kb, nb) in zip(a.named("p"), b.named("p")):
            assert ka == kb
            np.testing.assert_array_equal(na.value, nb.value)

    def test_forget_bias_one_other_biases_zero(self):
        p = make_lstm(3, 4)
        np.testing.assert_array_equal(p.b_f.value, np.ones(4))
        for b in (p.b_i, p.b_o, p.b_c):
            np.testing.assert_array_equal(b.value, np.zeros(4))

    def test_recurrent_blocks_orthogonal(self):
        p = make_lstm(6, 5, seed=13)
        for W in (p.W_i, p.W_f, p.W_o, p.W_c):
            R = W.value[:, :5]
            np.testing.assert_allclose(R.T @ R, np.eye(5), atol=1e-6)

    def test_input_block_within_xavier_bounds(self):
        p = make_lstm(8, 4, seed=14)
        limit = math.sqrt(6.0 / (8 + 4))
        blk = p.W_i.value[:, 4:]
        assert np.all(np.abs(blk) <= limit)

    def test_bad_dims_rejected(self):
        with pytest.raises(ConfigError):
            nn.init_lstm_params(0, 4, np.random.default_rng(0))


class TestCounting:
    def test_single_lstm_closed_form(self):
        assert nn.lstm_param_count(2048, 64) == 540_928

    def test_bilstm_closed_form(self):
        assert nn.bilstm_param_count(2048, 64) == 1_081_856

    def test_counts_match_actual_arrays(self):
        p = nn.init_bilstm_params(7, 3, np.random.default_rng(0))
        assert nn.count_scalars(p.named("x")) == nn.bilstm_param_count(7, 3)
        fc = nn.init_fc_params(7, 5, np.random.default_rng(0))
        assert nn.count_scalars(fc.named("fc")) == nn.fc_param_count(7, 5)

    def test_count_equals_scalars_moved_by_dense_adam_step(self):
        p = make_lstm(3, 2, seed=2)
        named = lstm_named(p)
        params = {k: n.value for k, n in named.items()}
        grads = {k: np.ones_like(v) for k, v in params.items()}
        new, _ = nn.adam_update(nn.AdamState(lr=0.01), params, grads)
        moved = sum(int(np.sum(new[k] != params[k])) for k in params)
        assert moved == nn.lstm_param_count(3, 2)
