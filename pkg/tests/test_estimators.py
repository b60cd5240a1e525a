import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from debal.data import InteractionTable, SyntheticConfig, full_truth_table, generate_confounded
from debal.estimators import (
    Batch,
    EstimatorKind,
    balanced_loss,
    base_loss,
    build_groups,
    dump_terms,
    dr_estimate,
    ips_estimate,
    mixed_second_directional,
    prediction_error,
    uniform_loss,
)
from debal.exceptions import ContractError
from debal.factor import FactorModel, init_model
from debal.oracles import finite_diff_check

from conftest import tiny_instance


def _const(M, N, link="identity", bias=0.0, clip=0.0):
    return FactorModel(np.zeros((M, 1)), np.zeros((N, 1)), np.zeros(M), np.zeros(N), bias, link=link, clip_floor=clip)


def _uniform_weights(kind, batch):
    return {g.key: np.full(len(g.users), g.uniform_weight) for g in build_groups(kind.family, batch)}


class TestKind:
    @pytest.mark.parametrize(
        "name,family,balanced", [("mf", "naive", False), ("bal-dr", "dr", True), ("bal-autodebias", "autodebias", True)]
    )
    def test_parse(self, name, family, balanced):
        k = EstimatorKind.parse(name)
        assert (k.family, k.balanced) == (family, balanced)

    def test_bad_family(self):
        with pytest.raises(ContractError):
            EstimatorKind.parse("snips")

    def test_required_models(self):
        assert EstimatorKind.parse("autodebias").required_models == ("p1", "p2", "e")
        assert EstimatorKind.parse("bal-dr").weight_keys == ("w1", "w2")


class TestPredictionError:
    def test_examples(self):
        assert prediction_error(3.0, 3.0, "squared") == 0.0
        assert prediction_error(1.0, 0.0, "squared") == 1.0
        assert prediction_error(1.0, 0.5, "cross-entropy") == pytest.approx(math.log(2), abs=1e-12)

    def test_domain(self):
        with pytest.raises(ContractError):
            prediction_error(0.5, 0.5, "cross-entropy")
        with pytest.raises(ContractError):
            prediction_error(1.0, 1.0, "cross-entropy")


class TestBaseLoss:
    def test_single_pair_ips(self):
        biased = InteractionTable(1, 1, [0], [0], [math.sqrt(0.4)])
        phi = {"p": _const(1, 1, "sigmoid", clip=0.05)}
        v = base_loss("ips", Batch.full(biased), _const(1, 1), phi, "squared", with_grad=False).value
        assert v == pytest.approx(0.8, rel=1e-12)

    def test_ips_full_observation_is_ideal(self):
        rng = np.random.default_rng(0)
        M, N = 3, 4
        uu, ii = np.divmod(np.arange(M * N), N)
        full = InteractionTable(M, N, uu, ii, rng.normal(size=M * N), role="full-truth")
        theta = init_model(M, N, 2, seed=1)
        phi = {"p": _const(M, N, "sigmoid", bias=50.0)}
        ips = base_loss("ips", Batch.full(full), theta, phi, "squared").value
        ideal = base_loss("ideal", None, theta, truth=full, delta="squared").value
        assert ips == pytest.approx(ideal, rel=1e-12)

    def test_dr_correction_vanishes(self):
        rng = np.random.default_rng(1)
        M, N = 3, 3
        e_model = init_model(M, N, 2, seed=5)
        e_model.set_flat(rng.normal(size=e_model.num_params))
        users, items = np.array([0, 1, 2, 2]), np.array([1, 0, 0, 2])
        # ratings equal the imputed labels, so imputed errors equal the true ones on B
        biased = InteractionTable(M, N, users, items, e_model.predict(users, items))
        theta = init_model(M, N, 2, seed=2)
        batch = Batch.full(biased)
        values = []
        for bias in (-1.0, 0.3, 2.0):
            phi = {"p": _const(M, N, "sigmoid", bias=bias, clip=0.05), "e": e_model}
            values.append(base_loss("dr", batch, theta, phi, "squared").value)
        s = theta.predict(batch.d_users, batch.d_items)
        expected = np.mean((s - e_model.predict(batch.d_users, batch.d_items)) ** 2)
        assert np.allclose(values, expected, rtol=1e-12)

    def test_missing_model(self):
        biased, _, batch, theta, phi = tiny_instance("dr")
        with pytest.raises(ContractError, match="e"):
            base_loss("dr", batch, theta, {"p": phi["p"]})

    def test_terms_sum_to_value(self, tmp_path):
        _, _, batch, theta, phi = tiny_instance("autodebias")
        loss = base_loss("autodebias", batch, theta, phi, "cross-entropy")
        assert loss.terms.sum() == pytest.approx(loss.value, rel=1e-10)
        dump_terms(loss, tmp_path / "t.csv")
        rows = list(csv.reader(open(tmp_path / "t.csv")))
        assert rows[0] == ["user", "item", "term"] and len(rows) == 1 + len(loss.terms)

    def test_minibatch_scaling_is_unbiased(self):
        biased, _, full, theta, phi = tiny_instance("dr", delta="squared", seed=3)
        exact = base_loss("dr", full, theta, phi, "squared", with_grad=False).value
        rng = np.random.default_rng(0)
        draws = [
            base_loss("dr", Batch.sample(biased, rng, 2, 3), theta, phi, "squared", with_grad=False).value
            for _ in range(20000)
        ]
        se = np.std(draws, ddof=1) / math.sqrt(len(draws))
        assert abs(np.mean(draws) - exact) < 4 * se


class TestBalancedLoss:
    def test_two_sample_toy(self):
        biased = InteractionTable(2, 1, [0, 1], [0, 0], [math.sqrt(0.5), math.sqrt(1.5)])
        phi = {"p": _const(2, 1, "sigmoid", clip=0.05)}
        v = balanced_loss("bal-ips", Batch.full(biased), {"w": np.array([0.25, 0.75])}, _const(2, 1), phi, "squared")
        assert v.value == pytest.approx(2.5, rel=1e-12)

    @pytest.mark.parametrize("family", ["naive", "ips", "dr", "autodebias"])
    @pytest.mark.parametrize("delta", ["squared", "cross-entropy"])
    def test_uniform_weights_degenerate(self, family, delta):
        for seed in range(5):
            _, _, batch, theta, phi = tiny_instance(family, delta, seed=seed)
            kind = EstimatorKind(family, True)
            bal = balanced_loss(kind, batch, _uniform_weights(kind, batch), theta, phi, delta)
            base = base_loss(EstimatorKind(family), batch, theta, phi, delta)
            assert bal.value == pytest.approx(base.value, rel=1e-10)
            assert np.allclose(bal.grad_theta, base.grad_theta, rtol=1e-10, atol=1e-14)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), family=st.sampled_from(["ips", "dr", "autodebias"]))
    def test_degeneracy_on_minibatches(self, seed, family):
        biased, _, _, theta, phi = tiny_instance(family, "cross-entropy", seed=seed % 50)
        batch = Batch.sample(biased, np.random.default_rng(seed), 3, 5)
        kind = EstimatorKind(family, True)
        bal = balanced_loss(kind, batch, _uniform_weights(kind, batch), theta, phi, "cross-entropy", with_grad=False)
        base = base_loss(family, batch, theta, phi, "cross-entropy", with_grad=False)
        assert bal.value == pytest.approx(base.value, rel=1e-10)

    def test_weight_count_mismatch(self):
        _, _, batch, theta, phi = tiny_instance("ips")
        with pytest.raises(ContractError):
            balanced_loss("bal-ips", batch, {"w": np.ones(1)}, theta, phi, "cross-entropy")

    def test_non_positive_weights(self):
        _, _, batch, theta, phi = tiny_instance("ips")
        w = np.full(len(batch.b_users), 0.1)
        w[0] = 0.0
        with pytest.raises(ContractError):
            balanced_loss("bal-ips", batch, {"w": w}, theta, phi, "cross-entropy")


class TestUniformLoss:
    def test_mean_of_errors(self):
        u = InteractionTable(1, 2, [0, 0], [0, 1], [math.sqrt(0.2), math.sqrt(0.4)], role="uniform-balance")
        assert uniform_loss(u, _const(1, 2), "squared").value == pytest.approx(0.3, rel=1e-12)

    def test_zero_at_perfect_fit(self):
        theta = init_model(2, 2, 2, seed=0)
        u = InteractionTable(2, 2, [0, 1], [1, 0], theta.predict([0, 1], [1, 0]), role="uniform-balance")
        loss = uniform_loss(u, theta, "squared")
        assert loss.value == 0.0 and not loss.grad_theta.any()

    def test_agrees_with_ideal_when_u_is_d(self):
        world, _, _ = generate_confounded(SyntheticConfig(num_users=4, num_items=5), seed=0)
        truth = full_truth_table(world)
        theta = init_model(4, 5, 2, seed=3)
        a = uniform_loss(truth, theta, "squared").value
        b = base_loss("ideal", None, theta, truth=truth, delta="squared").value
        assert a == b

    def test_empty(self):
        with pytest.raises(ContractError):
            uniform_loss(InteractionTable(1, 1, [], [], []), init_model(1, 1, 1), "squared")


FAMILIES = ["naive", "ips", "dr", "autodebias"]


class TestDerivatives:
    @pytest.mark.parametrize("family", FAMILIES)
    @pytest.mark.parametrize("delta", ["squared", "cross-entropy"])
    @pytest.mark.parametrize("seed", range(3))
    def test_theta_gradient(self, family, delta, seed):
        _, uniform, batch, theta, phi = tiny_instance(family, delta, seed=seed)

        def fun(x):
            loss = base_loss(family, batch, theta.with_flat(x), phi, delta)
            return loss.value, loss.grad_theta

        assert finite_diff_check(fun, theta.flatten()) < 1e-5

    @pytest.mark.parametrize("family", ["ips", "dr", "autodebias"])
    @pytest.mark.parametrize("seed", range(3))
    def test_balanced_theta_gradient(self, family, seed):
        _, _, batch, theta, phi = tiny_instance(family, "cross-entropy", seed=seed)
        kind = EstimatorKind(family, True)
        rng = np.random.default_rng(seed)
        weights = {k: rng.uniform(0.01, 0.2, len(w)) for k, w in _uniform_weights(kind, batch).items()}

        def fun(x):
            loss = balanced_loss(kind, batch, weights, theta.with_flat(x), phi, "cross-entropy")
            return loss.value, loss.grad_theta

        assert finite_diff_check(fun, theta.flatten()) < 1e-5

    @pytest.mark.parametrize("family", ["ips", "dr", "autodebias"])
    @pytest.mark.parametrize("delta", ["squared", "cross-entropy"])
    @pytest.mark.parametrize("seed", range(3))
    def test_mixed_second_directional(self, family, delta, seed):
        _, _, batch, theta, phi = tiny_instance(family, delta, seed=seed)
        groups = build_groups(family, batch)
        v = np.random.default_rng(seed + 100).normal(size=theta.num_params)
        out = mixed_second_directional(groups, theta, phi, v, delta)
        for name, model in phi.items():

            def fun(x, name=name, model=model):
                trial = dict(phi, **{name: model.with_flat(x)})
                return float(base_loss(family, batch, theta, trial, delta).grad_theta @ v)

            err = finite_diff_check(fun, model.flatten(), grad=lambda x, name=name: out[name])
            assert err < 1e-4, (name, err)

    def test_mixed_zero_direction(self):
        _, _, batch, theta, phi = tiny_instance("autodebias")
        out = mixed_second_directional(build_groups("autodebias", batch), theta, phi, np.zeros(theta.num_params), "cross-entropy")
        assert all(not g.any() for g in out.values())

    def test_mixed_independent_of_phi(self):
        _, _, batch, theta, _ = tiny_instance("naive")
        v = np.ones(theta.num_params)
        assert mixed_second_directional(build_groups("naive", batch), theta, {}, v, "cross-entropy") == {}

    def test_mixed_shape_check(self):
        _, _, batch, theta, phi = tiny_instance("ips")
        with pytest.raises(ContractError):
            mixed_second_directional(build_groups("ips", batch), theta, phi, np.zeros(3), "cross-entropy")


class TestUnbiasedness:
    """Array estimators over resampled worlds with known propensities."""

    def test_no_confounding(self):
        world, _, _ = generate_confounded(SyntheticConfig(num_users=8, num_items=8, confound_strength=0.0), seed=4)
        R = 5000
        _, o, e, _ = world.resample(np.random.default_rng(0), size=R)
        o, e = o.reshape(R, -1), e.reshape(R, -1)
        p = world.nominal_propensity.reshape(-1)
        g = world.imputation_oracle().reshape(-1)
        for est in (ips_estimate(o, e, p), dr_estimate(o, e, g, p)):
            diff = est - e.mean(axis=1)
            assert abs(diff.mean()) < 3 * diff.std(ddof=1) / math.sqrt(R)
