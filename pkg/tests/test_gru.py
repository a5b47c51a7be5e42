import numpy as np
import pytest

from thermoloop.datagen import Normalization
from thermoloop.gru import (
    ModelDims,
    ModelParams,
    NumericFault,
    PredictorInput,
    decode_candidates,
    encode_control,
    encode_history,
    encode_history_batch,
    forward_batch,
    gru_cell,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
    tensor_shapes,
)

# ---------------------------------------------------------------------------
# Straight-line reference implementation, written before the package code and
# kept deliberately naive: plain loops, no shared helpers.
# ---------------------------------------------------------------------------

def ref_sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def ref_predict(history, currents, p):
    h = np.zeros_like(p.b_z)
    for x in history:
        z = ref_sigmoid(x * p.w_z + h @ p.u_z + p.b_z)
        r = ref_sigmoid(x * p.w_r + h @ p.u_r + p.b_r)
        cand = np.tanh(x * p.w_c + (r * h) @ p.u_c + p.b_c)
        h = (1.0 - z) * h + z * cand
    a1 = np.asarray(currents) @ p.w_i1 + p.b_i1
    h1 = np.where(a1 > 0, a1, 0.0)
    hi = h1 @ p.w_i2 + p.b_i2
    return np.concatenate([h, hi]) @ p.w_y + p.b_y


def zero_params(dims: ModelDims) -> ModelParams:
    return ModelParams(**{name: np.zeros(shape)
                          for name, shape in tensor_shapes(dims).items()})


SMALL = ModelDims(history_len=7, horizon=5, gru_hidden=4, ctrl_hidden=3)


class TestGruCell:
    def test_zero_params_zero_state(self):
        p = zero_params(SMALL)
        h = gru_cell(1.7, np.zeros(4), p)
        assert np.array_equal(h, np.zeros(4))

    def test_zero_params_halve_the_carry(self):
        p = zero_params(SMALL)
        v = np.array([1.0, -2.0, 0.5, 3.0])
        assert np.allclose(gru_cell(0.3, v, p), 0.5 * v)

    def test_scalar_hand_case(self):
        # gru_hidden=1, only the candidate input weight set: h = 0.5*tanh(1)
        dims = ModelDims(history_len=1, horizon=1, gru_hidden=1, ctrl_hidden=1)
        p = zero_params(dims)
        p.w_c[0] = 1.0
        h = gru_cell(1.0, np.zeros(1), p)
        assert h[0] == pytest.approx(0.5 * np.tanh(1.0), abs=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            gru_cell(0.0, np.zeros(3), zero_params(SMALL))

    def test_gate_ranges(self):
        p = init_params(SMALL, seed=3)
        rng = np.random.default_rng(0)
        h = rng.normal(size=4)
        for _ in range(50):
            x = rng.normal()
            z = ref_sigmoid(x * p.w_z + h @ p.u_z + p.b_z)
            r = ref_sigmoid(x * p.w_r + h @ p.u_r + p.b_r)
            cand = np.tanh(x * p.w_c + (r * h) @ p.u_c + p.b_c)
            assert np.all((z > 0) & (z < 1)) and np.all((r > 0) & (r < 1))
            assert np.all((cand > -1) & (cand < 1))
            h = gru_cell(x, h, p)


class TestEncodeHistory:
    def test_zero_params_any_history(self):
        p = zero_params(SMALL)
        assert np.array_equal(encode_history(np.random.default_rng(1).normal(size=7), p),
                              np.zeros(4))

    def test_single_step_equals_cell(self):
        p = init_params(SMALL, seed=1)
        x = 0.83
        assert np.allclose(encode_history([x], p), gru_cell(x, np.zeros(4), p), atol=1e-15)

    def test_three_steps_equal_manual_composition(self):
        p = init_params(SMALL, seed=2)
        xs = [0.3, -1.2, 0.7]
        h = np.zeros(4)
        for x in xs:
            h = gru_cell(x, h, p)
        assert np.allclose(encode_history(xs, p), h, atol=1e-12)

    def test_batch_matches_single(self):
        p = init_params(SMALL, seed=5)
        rng = np.random.default_rng(7)
        hist = rng.normal(size=(6, 7))
        batched = encode_history_batch(hist, p)
        for b in range(6):
            assert np.allclose(batched[b], encode_history(hist[b], p), atol=1e-12)


class TestEncodeControl:
    def test_zero_input_zero_biases(self):
        p = zero_params(SMALL)
        assert np.array_equal(encode_control(np.zeros(5), p), np.zeros(3))

    def test_relu_gates_everything(self):
        p = init_params(SMALL, seed=0)
        p.w_i1[:] = 1.0
        p.b_i1[:] = 0.0
        p.b_i2[:] = np.array([0.5, -1.0, 2.0])
        out = encode_control(-np.ones(5), p)  # every pre-activation is -5
        assert np.array_equal(out, p.b_i2)

    def test_hand_case(self):
        dims = ModelDims(history_len=2, horizon=5, gru_hidden=2, ctrl_hidden=1)
        p = zero_params(dims)
        p.w_i1[:, 0] = [1.0, 0.0, 0.0, 0.0, 0.0]
        p.w_i2[0, 0] = 2.0
        out = encode_control(np.array([3.0, 9.0, 9.0, 9.0, 9.0]), p)
        assert out[0] == pytest.approx(6.0)


class TestPredict:
    def test_zero_params_zero_output(self):
        p = zero_params(SMALL)
        inp = PredictorInput(np.ones(7), np.ones(5))
        assert np.array_equal(predict(inp, p, SMALL), np.zeros(5))

    def test_output_can_ignore_history(self):
        p = init_params(SMALL, seed=9)
        p.w_y[:4, :] = 0.0  # decoder reads only the control embedding
        inp_a = PredictorInput(np.zeros(7), np.ones(5))
        inp_b = PredictorInput(np.random.default_rng(0).normal(size=7), np.ones(5))
        assert np.array_equal(predict(inp_a, p, SMALL), predict(inp_b, p, SMALL))

    def test_matches_reference_implementation(self):
        rng = np.random.default_rng(42)
        for seed in range(5):
            p = init_params(SMALL, seed=seed)
            hist = rng.normal(size=7)
            ctrl = rng.normal(size=5)
            got = predict(PredictorInput(hist, ctrl), p, SMALL)
            want = ref_predict(hist, ctrl, p)
            assert np.allclose(got, want, rtol=1e-12, atol=1e-14)

    def test_bit_reproducible(self):
        p = init_params(SMALL, seed=1)
        inp = PredictorInput(np.linspace(-1, 1, 7), np.linspace(0, 1, 5))
        a = predict(inp, p, SMALL)
        b = predict(inp, p, SMALL)
        assert np.array_equal(a, b)

    def test_zeroing_decoder_row_zeroes_one_step(self):
        p = init_params(SMALL, seed=4)
        p.b_y[:] = 0.0
        inp = PredictorInput(np.linspace(-1, 1, 7), np.linspace(0, 1, 5))
        base = predict(inp, p, SMALL)
        for col in range(5):
            q = p.copy()
            q.w_y[:, col] = 0.0
            out = predict(inp, q, SMALL)
            assert out[col] == 0.0
            mask = np.arange(5) != col
            assert np.array_equal(out[mask], base[mask])

    def test_numeric_fault_names_layer(self):
        p = init_params(SMALL, seed=0)
        p.u_z[0, 0] = np.inf
        with pytest.raises(NumericFault, match="history encoder"):
            predict(PredictorInput(np.ones(7), np.ones(5)), p, SMALL)

    def test_perturbation_bounded_by_weight_norms(self):
        # loose single-step sensitivity bound for a perturbation of the final
        # history sample: |d out| <= ||W_y|| * (||w_c|| + 0.5||w_z|| + 0.25||u_c|| ||w_r||) * eps
        p = init_params(SMALL, seed=11)
        bound_cell = (np.linalg.norm(p.w_c) + 0.5 * np.linalg.norm(p.w_z)
                      + 0.25 * np.linalg.norm(p.u_c, 2) * np.linalg.norm(p.w_r))
        lipschitz = np.linalg.norm(p.w_y[:4], 2) * bound_cell
        hist = np.linspace(-1, 1, 7)
        ctrl = np.linspace(0, 1, 5)
        eps = 1e-3
        base = predict(PredictorInput(hist, ctrl), p, SMALL)
        bumped_hist = hist.copy()
        bumped_hist[-1] += eps
        bumped = predict(PredictorInput(bumped_hist, ctrl), p, SMALL)
        assert np.linalg.norm(bumped - base) <= lipschitz * eps * (1 + 1e-6)


class TestBatchPaths:
    def test_forward_batch_matches_reference(self):
        p = init_params(SMALL, seed=6)
        rng = np.random.default_rng(3)
        hist = rng.normal(size=(9, 7))
        ctrl = rng.normal(size=(9, 5))
        out = forward_batch(hist, ctrl, p)
        for b in range(9):
            assert np.allclose(out[b], ref_predict(hist[b], ctrl[b], p), rtol=1e-12, atol=1e-14)

    def test_decode_candidates_matches_full_forward(self):
        p = init_params(SMALL, seed=8)
        rng = np.random.default_rng(5)
        hist = rng.normal(size=7)
        candidates = rng.normal(size=(20, 5))
        h_t = encode_history(hist, p)
        fast = decode_candidates(h_t, candidates, p)
        slow = forward_batch(np.tile(hist, (20, 1)), candidates, p)
        assert np.allclose(fast, slow, rtol=1e-12, atol=1e-13)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        dims = ModelDims()
        p = init_params(dims, seed=13)
        norm = Normalization(303.2, 4.5, 2.0)
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, p, dims, norm, kind="phys-gru", extra={"lambda": 0.001})
        q, dims2, norm2, meta = load_checkpoint(path)
        assert q == p
        assert dims2 == dims
        assert norm2 == norm
        assert meta["kind"] == "phys-gru"
        assert meta["lambda"] == 0.001

    def test_deterministic_bytes(self, tmp_path):
        dims = SMALL
        p = init_params(dims, seed=2)
        norm = Normalization(300.0, 1.0, 2.0)
        a, b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        save_checkpoint(a, p, dims, norm)
        save_checkpoint(b, p, dims, norm)
        assert open(a, "rb").read() == open(b, "rb").read()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NONSENSE")
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(str(path))

    def test_init_params_shapes_and_bounds(self):
        dims = ModelDims(history_len=10, horizon=5, gru_hidden=8, ctrl_hidden=4)
        p = init_params(dims, seed=0)
        for name, shape in tensor_shapes(dims).items():
            assert getattr(p, name).shape == shape
        assert np.max(np.abs(p.u_z)) <= 1.0 / np.sqrt(8)
        assert np.array_equal(p.b_z, np.zeros(8))
