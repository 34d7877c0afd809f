import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riskwrap import VAE, Dropout, Ensemble, TrainConfig, load_wrapped, mlp, predict_with_risk, save_wrapped, train, wrap
from riskwrap.autodiff import Tensor
from riskwrap.epistemic import (
    EnsembleModel,
    VaeConfig,
    dropout_score,
    ensemble_score,
    ensemble_train,
    kl_standard_normal,
    sample_variance,
    vae_score,
    vae_train,
)
from riskwrap.graph import split_feature_extractor
from riskwrap.errors import ConfigError, IncompatibleMetricError
from riskwrap.wrapper import RiskAwareModel


def _data(n=200, d=2, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, d))
    return x, np.sin(x[:, :1]) + 0.1 * rng.normal(size=(n, 1))


def _constant_member(value):
    model = mlp([1, 2, 1], seed=0)
    layer = model.layers[-1]
    layer.weight.data[:] = 0.0
    layer.bias.data[:] = value
    member = RiskAwareModel(model, [])
    member.steps = 1
    return member


class TestSampleVariance:
    def test_single_sample_is_zero(self):
        np.testing.assert_array_equal(sample_variance(np.ones((1, 3))), np.zeros(3))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=2, max_size=12), st.randoms())
    def test_permutation_invariant(self, values, rnd):
        a = np.array(values)[:, None]
        order = list(range(len(values)))
        rnd.shuffle(order)
        b = a[order]
        np.testing.assert_allclose(sample_variance(a), sample_variance(b), rtol=1e-12, atol=1e-12)


class TestDropout:
    def test_tiny_rate_gives_zero_variance(self):
        x, y = _data()
        g = wrap(mlp([2, 16, 1], seed=0), [Dropout(rate=1e-9)])
        train(g, x, y, TrainConfig(epochs=2))
        _, var = dropout_score(g, x, T=10)
        np.testing.assert_allclose(var, 0.0, atol=1e-12)

    def test_equal_pass_seeds_give_zero_variance(self):
        x, y = _data()
        g = wrap(mlp([2, 16, 1], seed=0), [Dropout(rate=0.3)])
        train(g, x, y, TrainConfig(epochs=2))
        _, var = dropout_score(g, x, T=5, pass_seeds=[7] * 5)
        np.testing.assert_allclose(var, 0.0, atol=1e-24)
        _, var = dropout_score(g, x, T=5)
        assert np.all(var > 0)

    def test_T_below_two_rejected(self):
        x, y = _data()
        g = wrap(mlp([2, 8, 1], seed=0), [Dropout()])
        with pytest.raises(ConfigError):
            dropout_score(g, x, T=1)

    def test_no_stochastic_layer_rejected(self):
        g = RiskAwareModel(mlp([2, 8, 1], seed=0), [])
        with pytest.raises(ConfigError):
            dropout_score(g, np.zeros((2, 2)), T=5)

    def test_existing_dropout_conflicts(self):
        with pytest.raises(IncompatibleMetricError):
            wrap(mlp([2, 8, 1], seed=0, dropout=0.2), [Dropout()])

    def test_rate_validation(self):
        with pytest.raises(ConfigError):
            wrap(mlp([2, 8, 1]), [Dropout(rate=1.0)])

    def test_reproducible_for_fixed_seed(self):
        x, y = _data()
        g = wrap(mlp([2, 16, 1], seed=0), [Dropout()])
        train(g, x, y, TrainConfig(epochs=1))
        a = predict_with_risk(g, x, seed=3).risks["dropout"]
        b = predict_with_risk(g, x, seed=3).risks["dropout"]
        np.testing.assert_array_equal(a, b)

    def test_ood_variance_exceeds_training_variance(self):
        x, y = _data(400)
        g = wrap(mlp([2, 64, 64, 1], seed=0), [Dropout(rate=0.2)])
        train(g, x, y, TrainConfig(epochs=30, lr=3e-3))
        _, var_in = dropout_score(g, x, T=30)
        _, var_out = dropout_score(g, x + 8.0, T=30)
        assert var_out.mean() > var_in.mean()


class TestEnsemble:
    def test_constant_members_oracle(self):
        E = EnsembleModel([_constant_member(1.0), _constant_member(3.0)], [0, 1])
        mean, var = ensemble_score(E, np.zeros((4, 1)))
        np.testing.assert_allclose(mean, 2.0)
        np.testing.assert_allclose(var, 2.0)

    def test_duplicate_seeds_give_zero_variance(self):
        x, y = _data()
        E = ensemble_train(mlp([2, 8, 1], seed=0), 3, x, y, TrainConfig(epochs=2), member_seeds=[5, 5, 5])
        _, var = ensemble_score(E, x)
        np.testing.assert_allclose(var, 0.0, atol=1e-24)

    def test_distinct_seeds_required_in_wrapper(self):
        with pytest.raises(ConfigError):
            wrap(mlp([2, 8, 1]), [Ensemble(N=2, member_seeds=(1, 1))])
        with pytest.raises(ConfigError):
            wrap(mlp([2, 8, 1]), [Ensemble(N=1)])

    def test_member_order_does_not_matter(self):
        x, y = _data()
        a = ensemble_train(mlp([2, 8, 1]), 3, x, y, TrainConfig(epochs=2), member_seeds=[1, 2, 3])
        b = EnsembleModel(a.members[::-1], a.seeds[::-1])
        np.testing.assert_allclose(ensemble_score(a, x)[1], ensemble_score(b, x)[1], rtol=1e-12)

    def test_concurrent_training_is_deterministic(self):
        x, y = _data()
        seq = wrap(mlp([2, 8, 1]), [Ensemble(N=3)])
        par = wrap(mlp([2, 8, 1]), [Ensemble(N=3)])
        train(seq, x, y, TrainConfig(epochs=3, workers=1))
        train(par, x, y, TrainConfig(epochs=3, workers=3))
        np.testing.assert_array_equal(
            predict_with_risk(seq, x).risks["ensemble"], predict_with_risk(par, x).risks["ensemble"]
        )

    def test_members_are_independent(self):
        x, y = _data()
        g = wrap(mlp([2, 8, 1]), [Ensemble(N=3)])
        train(g, x, y, TrainConfig(epochs=1))
        params = [m.base.parameters()[0] for m in g.metric("ensemble").members]
        assert len({id(p) for p in params}) == 3
        assert not np.array_equal(params[0].data, params[1].data)

    def test_ood_variance_exceeds_training_variance(self):
        x, y = _data(400)
        g = wrap(mlp([2, 32, 1]), [Ensemble(N=5)])
        train(g, x, y, TrainConfig(epochs=20, lr=3e-3))
        out_in = predict_with_risk(g, x).risks["ensemble"]
        out_far = predict_with_risk(g, x + 8.0).risks["ensemble"]
        assert out_far.mean() > out_in.mean()

    def test_save_load_round_trip(self, tmp_path):
        x, y = _data()
        g = wrap(mlp([2, 8, 1]), [Ensemble(N=3)])
        train(g, x, y, TrainConfig(epochs=1))
        save_wrapped(g, tmp_path / "m")
        h = load_wrapped(tmp_path / "m")
        np.testing.assert_array_equal(predict_with_risk(g, x).risks["ensemble"], predict_with_risk(h, x).risks["ensemble"])


class TestVAE:
    def test_kl_zero_at_standard_normal(self):
        assert kl_standard_normal(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 2)))).item() == 0.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_kl_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        kl = kl_standard_normal(Tensor(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(4, 3)) * 2))
        assert kl.item() >= 0.0

    def test_zero_kl_weight_is_plain_reconstruction(self):
        x, _ = _data(64, 4)
        vae, _ = vae_train(split_feature_extractor(mlp([4, 8, 1]))[0], x,
                           VaeConfig(latent_dim=2, kl_weight=0.0), TrainConfig(epochs=1))
        xt = Tensor(x)
        feats = vae.extractor.forward(xt)
        total = vae.loss(xt, feats, np.random.default_rng(5)).item()
        recon, _ = vae.loss_terms(xt, feats, np.random.default_rng(5))
        assert total == recon.item()

    def test_scores_non_negative_and_ood_higher(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(400, 4))
        extractor = split_feature_extractor(mlp([4, 32, 32, 1]))[0]
        vae, curve = vae_train(extractor, x, VaeConfig(latent_dim=4), TrainConfig(epochs=30, lr=3e-3))
        assert curve[-1] < curve[0]
        s_in = vae_score(vae, x)
        s_out = vae_score(vae, x * 4.0 + 6.0)
        assert np.all(s_in >= 0) and np.all(s_out >= 0)
        assert s_out.mean() > s_in.mean()

    def test_latent_dim_bounds(self):
        extractor = split_feature_extractor(mlp([4, 8, 1]))[0]
        with pytest.raises(ConfigError):
            vae_train(extractor, np.zeros((4, 4)), VaeConfig(latent_dim=9), TrainConfig(epochs=0))
        with pytest.raises(ConfigError):
            wrap(mlp([4, 8, 1]), [VAE(latent_dim=0)])

    def test_wrapped_vae_shares_extractor(self):
        x, y = _data(64, 3)
        g = wrap(mlp([3, 8, 1]), [VAE(latent_dim=2)])
        assert g.metric("vae").vae.extractor is g.extractor
        train(g, x, y, TrainConfig(epochs=1))
        assert np.all(predict_with_risk(g, x).risks["vae"] >= 0)
