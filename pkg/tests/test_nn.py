import numpy as np
import pytest

from riskwrap.autodiff import Tensor, cross_entropy_logits, gaussian_nll, mse, parameter
from riskwrap.errors import NonFiniteError, ShapeError
from riskwrap.nn import Layer, SequentialModel, forward, load_checkpoint, load_models, mlp, save_checkpoint, save_models
from riskwrap.optim import SGD

from conftest import finite_difference, max_relative_error


def dense(w, b):
    layer = Layer("dense", len(w), len(w[0]))
    layer.weight, layer.bias = parameter(np.array(w, dtype=float)), parameter(np.array(b, dtype=float))
    return layer


class TestForward:
    def test_identity_dense(self):
        model = SequentialModel([dense(np.eye(2), [0, 0])])
        np.testing.assert_array_equal(forward(model, [[1.0, 2.0]]).data, [[1.0, 2.0]])

    def test_relu(self):
        model = SequentialModel([Layer("relu", 3, 3)])
        np.testing.assert_array_equal(model.forward([[-1.0, 0.0, 2.0]]).data, [[0.0, 0.0, 2.0]])

    def test_hand_matrix_multiply(self):
        model = SequentialModel([dense([[2.0]], [0.5])])
        np.testing.assert_array_equal(model.forward([[3.0]]).data, [[6.5]])

    def test_shape_mismatch_names_layer(self):
        model = mlp([3, 4, 1])
        with pytest.raises(ShapeError, match="layer 0"):
            model.forward(np.ones((2, 5)))

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_non_finite_activation(self):
        model = SequentialModel([dense([[1e308]], [0.0]), Layer("relu", 1, 1), dense([[1e308]], [0.0])])
        with pytest.raises(NonFiniteError):
            model.forward([[10.0]])

    def test_incompatible_layers_rejected(self):
        with pytest.raises(ShapeError):
            SequentialModel([Layer("dense", 2, 3), Layer("dense", 4, 1)])

    def test_dropout_rate_must_be_below_one(self):
        with pytest.raises(ValueError):
            Layer("dropout", 3, 3, dropout_rate=1.0)

    def test_dropout_identity_at_inference(self):
        model = mlp([3, 8, 2], dropout=0.5, seed=1)
        x = np.random.default_rng(0).normal(size=(4, 3))
        a = model.forward(x, mode="infer", rng=1).data
        b = model.forward(x, mode="infer", rng=2).data
        np.testing.assert_array_equal(a, b)

    def test_dropout_masks_follow_seed(self):
        model = mlp([3, 8, 2], dropout=0.5, seed=1)
        x = np.ones((4, 3))
        a = forward(model, x, "train", rng_seed=7).data
        b = forward(model, x, "train", rng_seed=7).data
        c = forward(model, x, "train", rng_seed=8).data
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_inverted_dropout_preserves_expectation(self):
        layer = Layer("dropout", 1, 1, dropout_rate=0.3)
        out = layer(Tensor(np.ones((200_000, 1))), True, np.random.default_rng(0)).data
        assert out.mean() == pytest.approx(1.0, abs=0.01)

    def test_softmax_output_rows(self):
        model = mlp([4, 6, 3], classifier=True)
        p = model.forward(np.random.default_rng(0).normal(size=(5, 4))).data
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def _loss(model, x, y, kind):
    out = model.forward(x, logits=True)
    if kind == "mse":
        return mse(out, y)
    if kind == "nll":
        return gaussian_nll(out[:, :1], out[:, 1:].softplus() + 0.1, y[:, :1])
    return cross_entropy_logits(out, np.eye(out.shape[1])[y.argmax(axis=1)])


class TestModelGradients:
    @pytest.mark.parametrize("kind", ["mse", "nll", "ce"])
    def test_random_three_layer_mlp(self, kind):
        rng = np.random.default_rng(3)
        model = mlp([4, 7, 5, 2], seed=4, classifier=kind == "ce")
        x, y = rng.normal(size=(6, 4)), rng.normal(size=(6, 2))
        _loss(model, x, y, kind).backward()
        params = model.parameters()
        analytic = [p.grad.copy() for p in params]
        numeric = finite_difference(lambda: float(_loss(model, x, y, kind).data), [p.data for p in params])
        for a, n in zip(analytic, numeric):
            assert max_relative_error(a, n) < 1e-4


class TestDeterminism:
    def test_same_seed_same_parameters_after_training(self):
        def run():
            model = mlp([2, 8, 1], seed=5)
            opt = SGD(model.parameters(), lr=0.05)
            rng = np.random.default_rng(0)
            x, y = rng.normal(size=(16, 2)), rng.normal(size=(16, 1))
            for _ in range(10):
                mse(model.forward(x), y).backward()
                opt.step()
            return [p.data.copy() for p in model.parameters()]

        for a, b in zip(run(), run()):
            np.testing.assert_array_equal(a, b)

    def test_glorot_bounds(self):
        model = mlp([10, 30, 1], seed=0)
        limit = np.sqrt(6 / 40)
        w = model.layers[0].weight.data
        assert np.all(np.abs(w) <= limit)
        np.testing.assert_array_equal(model.layers[0].bias.data, 0.0)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        model = mlp([3, 5, 5, 2], seed=9, dropout=0.2)
        save_checkpoint(model, tmp_path / "m.bin")
        back = load_checkpoint(tmp_path / "m.bin")
        assert back.specs() == model.specs()
        for a, b in zip(model.parameters(), back.parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_header_layout(self, tmp_path):
        import json
        import struct

        model = mlp([2, 3, 1], seed=0)
        save_checkpoint(model, tmp_path / "m.bin")
        raw = (tmp_path / "m.bin").read_bytes()
        (n,) = struct.unpack("<Q", raw[:8])
        header = json.loads(raw[8 : 8 + n])
        params = header["models"]["model"]["params"]
        assert [p["offset"] for p in params] == [0, 6, 9, 12]
        body = np.frombuffer(raw[8 + n :], dtype="<f8")
        assert body.size == 13
        np.testing.assert_array_equal(body[:6].reshape(2, 3), model.layers[0].weight.data)

    def test_several_models(self, tmp_path):
        models = {"a": mlp([2, 3, 1], seed=0), "b": mlp([4, 1], seed=1)}
        save_models(tmp_path / "m.bin", models, {"note": 1})
        back, extra = load_models(tmp_path / "m.bin")
        assert set(back) == {"a", "b"} and extra == {"note": 1}

    def test_truncated_file(self, tmp_path):
        save_checkpoint(mlp([2, 3, 1]), tmp_path / "m.bin")
        raw = (tmp_path / "m.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(raw[:-16])
        with pytest.raises(ValueError):
            load_checkpoint(tmp_path / "t.bin")
