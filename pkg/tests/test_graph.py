import numpy as np
import pytest

from riskwrap.autodiff import mse
from riskwrap.errors import UnsupportedLayerError
from riskwrap.graph import (
    FeatureExtractor,
    architecture_json,
    clone_reinitialized,
    dense_widths,
    mirror_decoder,
    model_from_architecture,
    same_parameters,
    split_feature_extractor,
)
from riskwrap.nn import Layer, SequentialModel, mlp
from riskwrap.optim import SGD


def three_layer():
    return SequentialModel([Layer("dense", 3, 4), Layer("relu", 4, 4), Layer("dense", 4, 2)]).initialize(0)


class TestSplit:
    def test_default_split(self):
        ext, head = split_feature_extractor(three_layer())
        assert len(ext) == 2 and len(head) == 1
        assert isinstance(ext, FeatureExtractor) and ext.feature_dim == 4

    def test_explicit_split(self):
        ext, head = split_feature_extractor(three_layer(), 1)
        assert len(ext) == 1 and len(head) == 2

    def test_single_layer_needs_explicit_split(self):
        with pytest.raises(ValueError):
            split_feature_extractor(SequentialModel([Layer("dense", 2, 2)]).initialize(0))

    @pytest.mark.parametrize("bad", [0, 3])
    def test_split_range(self, bad):
        with pytest.raises(ValueError):
            split_feature_extractor(three_layer(), bad)

    @pytest.mark.parametrize("split", [1, 2])
    def test_composition_reproduces_forward(self, split):
        model = three_layer()
        ext, head = split_feature_extractor(model, split)
        x = np.random.default_rng(0).normal(size=(100, 3))
        np.testing.assert_allclose(head.forward(ext.forward(x)).data, model.forward(x).data, atol=1e-12)

    def test_parameters_alias(self):
        model = three_layer()
        ext, _ = split_feature_extractor(model)
        assert ext.parameters()[0] is model.parameters()[0]
        ext.layers[0].weight.data[0, 0] = 42.0
        assert model.layers[0].weight.data[0, 0] == 42.0

    def test_training_extractor_trains_source(self):
        model = three_layer()
        before = model.layers[0].weight.data.copy()
        ext, _ = split_feature_extractor(model)
        opt = SGD(ext.parameters(), lr=0.1)
        mse(ext.forward(np.ones((2, 3))), np.zeros((2, 4))).backward()
        opt.step()
        assert not np.array_equal(model.layers[0].weight.data, before)


class TestClone:
    def test_same_seed_identical(self):
        m = mlp([3, 5, 1], seed=0)
        assert same_parameters(clone_reinitialized(m, 7), clone_reinitialized(m, 7))

    def test_different_seed_differs(self):
        m = mlp([3, 5, 1], seed=0)
        assert not same_parameters(clone_reinitialized(m, 7), clone_reinitialized(m, 8))

    def test_clone_trains_independently(self):
        m = mlp([3, 5, 1], seed=0)
        snapshot = [p.data.copy() for p in m.parameters()]
        c = clone_reinitialized(m, 1)
        opt = SGD(c.parameters(), lr=0.1)
        mse(c.forward(np.ones((4, 3))), np.ones((4, 1))).backward()
        opt.step()
        for p, s in zip(m.parameters(), snapshot):
            np.testing.assert_array_equal(p.data, s)


class TestMirror:
    def test_reversed_widths(self):
        ext = SequentialModel([Layer("dense", 13, 64), Layer("relu", 64, 64), Layer("dense", 64, 32)])
        dec = mirror_decoder(ext, 8)
        assert dense_widths(dec) == [8, 32, 64, 13]
        assert [l.kind for l in dec.layers] == ["dense", "relu", "dense", "relu", "dense"]

    def test_base_case(self):
        dec = mirror_decoder(SequentialModel([Layer("dense", 4, 2)]), 2)
        assert dense_widths(dec) == [2, 4]

    def test_dropout_is_skipped(self):
        ext = SequentialModel([Layer("dense", 3, 6), Layer("dropout", 6, 6, dropout_rate=0.2), Layer("relu", 6, 6)])
        dec = mirror_decoder(ext, 2)
        assert all(l.kind != "dropout" for l in dec.layers)

    def test_roundtrip_shape(self):
        ext = SequentialModel([Layer("dense", 5, 7), Layer("relu", 7, 7), Layer("dense", 7, 3)]).initialize(0)
        dec = mirror_decoder(ext, 2)
        enc = SequentialModel([*ext.layers, Layer("dense", 3, 2)]).initialize(0)
        x = np.random.default_rng(0).normal(size=(6, 5))
        assert dec.forward(enc.forward(x)).shape == x.shape

    def test_unsupported_layer(self):
        ext = SequentialModel([Layer("softmax-output", 3, 3)])
        with pytest.raises(UnsupportedLayerError):
            mirror_decoder(ext, 2)


def test_architecture_json_roundtrip():
    m = mlp([3, 4, 2], dropout=0.1, classifier=True)
    assert model_from_architecture(architecture_json(m)).specs() == m.specs()
