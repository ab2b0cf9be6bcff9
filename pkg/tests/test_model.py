import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from udama.errors import ConfigError, DimensionError
from udama.losses import cross_entropy_tape, gaussian_nll_tape, mse_tape
from udama.model import (
    EncoderSpec,
    ModelParams,
    _gru_direction,
    coarse_head,
    discriminate_coarse,
    discriminate_fine,
    encode,
    encode_batch,
    fine_head,
    gradient_reversal,
    gru_cell_forward,
    init_params,
    load_checkpoint,
    predict_batch,
    predict_head,
    predict_vo2max,
    save_checkpoint,
)
from udama.numerics import Tape, Tensor, grad_check

TOY = EncoderSpec(gru_layers=2, hidden_size=3, mlp_sizes=[2], input_features=4, metadata_dim=2,
                  predictor_sizes=[3], disc_sizes=[3, 3])


def toy_params(seed=0, spec=TOY):
    return init_params(spec, np.random.default_rng(seed))


def zeroed(params):
    for t in params.tensors.values():
        if t.requires_grad:
            t.value = np.zeros_like(t.value)
    return params


class Window:
    def __init__(self, X, metadata):
        self.X, self.metadata = X, metadata


class TestEncoderSpec:
    def test_embedding_dim(self):
        assert EncoderSpec(hidden_size=32, mlp_sizes=[16]).embedding_dim == 80

    @pytest.mark.parametrize("kw", [{"gru_layers": 0}, {"hidden_size": 0}, {"mlp_sizes": []}])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            EncoderSpec(**kw)


class TestGruCell:
    def cell(self, H=2, F=2):
        spec = EncoderSpec(gru_layers=1, hidden_size=H, input_features=F)
        return zeroed(init_params(spec, np.random.default_rng(0)))

    def test_zero_weights_halves_state(self):
        params = self.cell()
        h = Tensor(np.array([[0.8, -0.4]]))
        out = gru_cell_forward(Tape(), Tensor(np.ones((1, 2))), h, params, "enc.gru0.fwd")
        np.testing.assert_array_equal(out.value, 0.5 * h.value)

    def test_zero_state_stays_zero(self):
        params = self.cell()
        out = gru_cell_forward(Tape(), Tensor(np.ones((1, 2))), Tensor(np.zeros((1, 2))), params, "enc.gru0.fwd")
        np.testing.assert_array_equal(out.value, 0.0)

    def test_saturated_update_gate(self):
        params = self.cell(H=1, F=1)
        params["enc.gru0.fwd.b_z"].value = np.array([20.0])
        out = gru_cell_forward(Tape(), Tensor([[1.0]]), Tensor([[0.9]]), params, "enc.gru0.fwd")
        assert abs(out.item()) < 1e-8

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            gru_cell_forward(Tape(), Tensor(np.ones((1, 3))), Tensor(np.zeros((1, 2))), self.cell(), "enc.gru0.fwd")

    def test_hand_computed_step(self):
        params = self.cell(H=1, F=1)
        for k, v in {"W_z": 0.3, "U_z": -0.2, "b_z": 0.1, "W_r": 0.5, "U_r": 0.4, "b_r": -0.3,
                     "W_h": 0.7, "U_h": -0.6, "b_h": 0.2}.items():
            params[f"enc.gru0.fwd.{k}"].value = np.full(params[f"enc.gru0.fwd.{k}"].shape, v)
        x, h = 1.5, -0.25
        sig = lambda a: 1 / (1 + math.exp(-a))
        z = sig(0.3 * x - 0.2 * h + 0.1)
        r = sig(0.5 * x + 0.4 * h - 0.3)
        cand = math.tanh(0.7 * x - 0.6 * r * h + 0.2)
        out = gru_cell_forward(Tape(), Tensor([[x]]), Tensor([[h]]), params, "enc.gru0.fwd")
        assert out.item() == pytest.approx((1 - z) * h + z * cand, abs=1e-15)

    def test_fused_path_matches_cell(self):
        params = toy_params(3)
        rng = np.random.default_rng(1)
        T, B = 5, 3
        X = rng.normal(size=(T, B, 4))
        states, last = _gru_direction(Tape(), Tensor(X.reshape(T * B, 4)), T, B, params,
                                      "enc.gru0.fwd", False, True)
        h = Tensor(np.zeros((B, 3)))
        for t in range(T):
            h = gru_cell_forward(Tape(), Tensor(X[t]), h, params, "enc.gru0.fwd")
            np.testing.assert_allclose(states[t].value, h.value, rtol=0, atol=1e-14)
        np.testing.assert_allclose(last.value, h.value, rtol=0, atol=1e-14)


class TestEncoder:
    @settings(max_examples=20, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 4), st.integers(1, 3), st.integers(0, 10**6))
    def test_output_dim(self, H, m, B, seed):
        spec = EncoderSpec(gru_layers=1, hidden_size=H, mlp_sizes=[m], input_features=3, metadata_dim=2)
        rng = np.random.default_rng(seed)
        emb = encode_batch(Tape(record=False), init_params(spec, rng), rng.normal(size=(B, 4, 3)),
                           rng.normal(size=(B, 2)))
        assert emb.shape == (B, 2 * H + m)

    def test_zero_weights_leave_only_mlp_bias(self):
        params = zeroed(toy_params())
        params["enc.mlp.0.b"].value = np.array([0.3, -0.2])
        rng = np.random.default_rng(0)
        emb = encode(Window(rng.normal(size=(6, 4)), rng.normal(size=2)), params)
        np.testing.assert_array_equal(emb[:6], 0.0)
        np.testing.assert_array_equal(emb[6:], np.tanh([0.3, -0.2]))

    def test_identical_windows(self):
        params = toy_params()
        X = np.random.default_rng(2).normal(size=(6, 4))
        a = encode(Window(X, np.ones(2)), params)
        b = encode(Window(X.copy(), np.ones(2)), params)
        assert a.tobytes() == b.tobytes()

    def test_time_reversal_swaps_directions(self):
        spec = EncoderSpec(gru_layers=1, hidden_size=3, mlp_sizes=[2], input_features=4, metadata_dim=2)
        params = toy_params(4, spec)
        # mirror the forward weights into the backward direction
        for k in ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h"):
            params[f"enc.gru0.bwd.{k}"].value = params[f"enc.gru0.fwd.{k}"].value.copy()
        X = np.random.default_rng(5).normal(size=(3, 4))
        a = encode(Window(X, np.ones(2)), params)
        b = encode(Window(X[::-1].copy(), np.ones(2)), params)
        np.testing.assert_allclose(a[:3], b[3:6], atol=1e-15)
        np.testing.assert_allclose(a[3:6], b[:3], atol=1e-15)
        assert not np.allclose(a[:6], b[:6])

    def test_feature_mismatch(self):
        with pytest.raises(DimensionError):
            encode_batch(Tape(), toy_params(), np.zeros((1, 5, 3)), np.zeros((1, 2)))

    def test_metadata_mismatch(self):
        with pytest.raises(DimensionError):
            encode_batch(Tape(), toy_params(), np.zeros((1, 5, 4)), np.zeros((1, 3)))

    def test_batch_permutation(self):
        params = toy_params(6)
        rng = np.random.default_rng(6)
        X, M = rng.normal(size=(5, 7, 4)), rng.normal(size=(5, 2))
        perm = rng.permutation(5)
        a = predict_batch(params, X, M)
        b = predict_batch(params, X[perm], M[perm])
        np.testing.assert_allclose(a[perm], b, rtol=0, atol=1e-13)


class TestHeads:
    def test_predictor_bias(self):
        params = zeroed(toy_params())
        params["pred.1.b"].value = np.array([33.0])
        for e in (np.zeros(8), np.random.default_rng(0).normal(size=8)):
            assert predict_vo2max(e, params) == 33.0

    def test_predictor_selects_coordinate(self):
        spec = EncoderSpec(gru_layers=1, hidden_size=2, mlp_sizes=[2], input_features=1,
                           metadata_dim=1, predictor_sizes=[])
        params = zeroed(init_params(spec, np.random.default_rng(0)))
        params["pred.0.W"].value[0, 0] = 1.0
        e = np.array([1.7, -2.0, 0.3, 0.4, 5.0, 6.0])
        assert predict_vo2max(e, params) == 1.7

    def test_predictor_distinguishes_embeddings(self):
        params = toy_params(1)
        rng = np.random.default_rng(1)
        assert predict_vo2max(rng.normal(size=8), params) != predict_vo2max(rng.normal(size=8), params)

    def test_coarse_zero(self):
        np.testing.assert_array_equal(discriminate_coarse(np.ones(8), zeroed(toy_params())), [0.0, 0.0])

    def test_coarse_bias_posterior(self):
        params = zeroed(toy_params())
        params["dc.2.b"].value = np.array([5.0, -5.0])
        logits = discriminate_coarse(np.ones(8), params)
        post = np.exp(logits) / np.exp(logits).sum()
        np.testing.assert_allclose(post, [1 / (1 + math.exp(-10)), 1 / (1 + math.exp(10))], rtol=1e-15)
        assert post[0] == pytest.approx(0.99995, abs=1e-5)

    def test_fine_zero(self):
        mu, s2 = discriminate_fine(np.ones(8), zeroed(toy_params()))
        assert mu == 0.0
        assert s2 == pytest.approx(math.log(2) + 1e-6, abs=1e-15)
        assert s2 == pytest.approx(0.693148, abs=1e-6)

    def test_fine_floor(self):
        params = zeroed(toy_params())
        params["df.2.b"].value = np.array([0.0, -20.0])
        _, s2 = discriminate_fine(np.ones(8), params)
        assert s2 == pytest.approx(1e-6, rel=0.01)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10**6), st.floats(1.0, 500.0))
    def test_variance_positive(self, seed, scale):
        rng = np.random.default_rng(seed)
        params = toy_params(seed % 7)
        _, s2 = fine_head(Tape(record=False), Tensor(rng.normal(size=(4, 8)) * scale), params)
        assert np.all(s2.value >= 1e-6)

    def test_head_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            coarse_head(Tape(), Tensor(np.ones((1, 7))), toy_params())


class TestGradientReversal:
    def test_forward_identity(self):
        e = Tensor(np.random.default_rng(0).normal(size=(3, 8)))
        assert gradient_reversal(Tape(), e, 0.8).value.tobytes() == e.value.tobytes()

    def test_negative_rejected(self):
        with pytest.raises(ConfigError):
            gradient_reversal(Tape(), Tensor(np.ones((1, 8))), -1.0)

    def _encoder_grads(self, lam):
        params = toy_params(2)
        rng = np.random.default_rng(2)
        X, M = rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 2))
        params.zero_grad()
        tape = Tape()
        emb = encode_batch(tape, params, X, M)
        rev = gradient_reversal(tape, emb, lam)
        tape.backward(cross_entropy_tape(tape, coarse_head(tape, rev, params), np.array([0, 1])))
        return params

    def test_zero_strength_blocks_encoder(self):
        params = self._encoder_grads(0.0)
        for name, t in params.trainable().items():
            if name.startswith("enc."):
                assert not np.any(t.grad), name
        assert np.any(params["dc.0.W"].grad)

    def test_unit_strength_negates(self):
        rng = np.random.default_rng(3)
        e = Tensor(rng.normal(size=(2, 8)), requires_grad=True)
        params = toy_params(3)
        tape = Tape()
        tape.backward(cross_entropy_tape(tape, coarse_head(tape, gradient_reversal(tape, e, 1.0), params),
                                         np.array([1, 0])))
        reversed_grad = e.grad.copy()
        e.zero_grad()
        tape = Tape()
        tape.backward(cross_entropy_tape(tape, coarse_head(tape, e, params), np.array([1, 0])))
        np.testing.assert_array_equal(reversed_grad, -e.grad)


def test_full_model_gradient_check():
    """Every parameter of the combined objective against central differences."""
    spec = EncoderSpec(gru_layers=2, hidden_size=3, mlp_sizes=[2], input_features=4, metadata_dim=2,
                       predictor_sizes=[3], disc_sizes=[3, 3])
    params = init_params(spec, np.random.default_rng(11))
    rng = np.random.default_rng(12)
    X, M = rng.normal(size=(2, 8, 4)), rng.normal(size=(2, 2))
    y, y_c, y_d = np.array([1.2, -0.4]), np.array([0, 1]), np.array([0.5, -1.1])

    def objective(tape, params):
        emb = encode_batch(tape, params, X, M)
        mse = mse_tape(tape, predict_head(tape, emb, params), y)
        cse = cross_entropy_tape(tape, coarse_head(tape, emb, params), y_c)
        mu, s2 = fine_head(tape, emb, params)
        gll = gaussian_nll_tape(tape, mu, s2, y_d)
        return tape.add(tape.add(tape.scale(mse, 0.7), tape.scale(cse, 0.5)), tape.scale(gll, 0.5))

    worst = 0.0
    for name, t in params.trainable().items():
        def f(tape, x, name=name):
            view = ModelParams(spec, {**params.tensors, name: x})
            return objective(tape, view)
        worst = max(worst, grad_check(f, Tensor(t.value.copy()), 1e-5))
    assert worst < 1e-4


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        params = toy_params(9)
        params.set_label_scale(41.234567891234, 7.1)
        save_checkpoint(params, tmp_path / "m.json")
        loaded = load_checkpoint(tmp_path / "m.json")
        assert loaded.equals(params)
        assert loaded.spec == params.spec
        assert loaded.trainable().keys() == params.trainable().keys()

    def test_copy_is_independent(self):
        params = toy_params()
        clone = params.copy()
        clone["pred.0.W"].value[0, 0] += 1.0
        assert not clone.equals(params)
