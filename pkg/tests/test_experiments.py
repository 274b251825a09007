import json
import math

import numpy as np
import pytest

from bsdr.errors import DomainError, UnsupportedConfigurationError
from bsdr.experiments import (
    ExperimentConfig,
    equal_population,
    generate_dataset,
    heterogeneous_population,
    prefix_length,
    run_action_prediction,
    run_experiment,
    run_generalization,
    run_goal_inference,
    run_parameter_recovery,
    split_dataset,
    split_indices,
)
from bsdr.gridworld import GridSpec
from bsdr.inference import GridAxes, JointParams, OptConfig


@pytest.fixture
def small():
    return GridSpec(3, 3, (0, 0), [(2, 2)], 4)


def cfg(name, spec, **kw):
    base = dict(theta_r=[0.5, -1.0], population={"a0": [2.0, 0.0], "a1": [0.0, 4.0]},
                trajectories_per_agent=20, seeds=[0], opt=OptConfig(max_iter=150, tol=1e-5, gauge="global"))
    base.update(kw)
    return ExperimentConfig(name, spec, **base)


class TestConfig:
    def test_validation(self, small):
        with pytest.raises(DomainError):
            cfg("nope", small)
        with pytest.raises(DomainError):
            cfg("recovery", small, seeds=[])
        with pytest.raises(DomainError):
            cfg("goal_inference", small, fractions=[0.0])
        with pytest.raises(DomainError):
            cfg("action_prediction", small, roster=["bsdr", "oracle"])
        with pytest.raises(DomainError, match="dimension"):
            cfg("action_prediction", small, theta_r=[1.0])

    def test_fingerprint_stable(self, small):
        a, b = cfg("generalization", small), cfg("generalization", small)
        assert a.fingerprint() == b.fingerprint()
        assert a.fingerprint() != cfg("generalization", small, seeds=[1]).fingerprint()
        json.dumps(a.to_dict())


class TestPopulations:
    def test_equal(self):
        pop = equal_population(3, [1.0, 2.0])
        assert list(pop) == ["a0", "a1", "a2"] and all(v == [1.0, 2.0] for v in pop.values())

    def test_heterogeneous(self, small):
        pop = heterogeneous_population(small, 6, scale=4.0, seed=3)
        assert pop == heterogeneous_population(small, 6, scale=4.0, seed=3)
        vals = np.array(list(pop.values()))
        # first half rational everywhere (bias only), second half scale with goal closeness
        assert (vals[:3, 1] == 0).all() and (vals[3:, 0] == 0).all()
        beta = small.features @ vals[3:].T
        assert beta[small.start_index].max() == 0.0
        assert np.all((vals[vals > 0] >= 0.75 * 4.0) & (vals[vals > 0] <= 1.25 * 8.0))

    def test_heterogeneous_one_hot(self):
        spec = GridSpec(3, 3, (0, 0), [(2, 2)], 2, feature_map="one_hot")
        pop = heterogeneous_population(spec, 2)
        assert sum(v > 0 for v in pop["a0"]) == 9
        assert 0 < sum(v > 0 for v in pop["a1"]) < 9

    def test_heterogeneous_needs_spatial_map(self):
        spec = GridSpec(3, 3, (0, 0), [(2, 2)], 2, feature_map="goal_indicators")
        with pytest.raises(UnsupportedConfigurationError):
            heterogeneous_population(spec, 2)


class TestHelpers:
    def test_generation_is_seeded(self, small):
        truth = JointParams([0.5, -1.0], {"a": [1.0, 1.0], "b": [2.0, 0.0]})
        assert generate_dataset(small, truth, 10, 4) == generate_dataset(small, truth, 10, 4)
        assert generate_dataset(small, truth, 10, 4) != generate_dataset(small, truth, 10, 5)
        assert len(generate_dataset(small, truth, 0, 4)) == 0

    def test_split(self, small):
        tr, te = split_indices(20, 0.75, 0, 1)
        assert len(tr) == 15 and sorted(tr + te) == list(range(20))
        assert split_indices(2, 0.99, 0, 0)[1]
        truth = JointParams([0.5, -1.0], {"a": [1.0, 1.0]})
        train, test = split_dataset(generate_dataset(small, truth, 8, 0), 0.5, 0)
        assert len(train) == 4 and len(test) == 4

    @pytest.mark.parametrize("f, T, k", [(0.25, 8, 2), (1.0, 8, 8), (0.3, 10, 3), (0.5, 5, 2), (0.1, 4, 0)])
    def test_prefix_length(self, f, T, k):
        assert prefix_length(f, T) == k


class TestHarnesses:
    def test_recovery(self, small):
        truth_b = {"a0": [1.0, 4.0]}
        axes = GridAxes([[-1.0, 0.0, 0.5], [-1.0, 0.0]], {"a0": [[0.0, 1.0], [0.0, 4.0]]})
        c = cfg("recovery", small, population=truth_b, axes=axes, dataset_sizes=[0, 300], seeds=[0, 1])
        rep = run_parameter_recovery(c)
        rows = {(r["seed"], r["n_trajectories"]): r for r in rep.raw}
        assert set(rows) == {(0, 0), (0, 300), (1, 0), (1, 300)}
        assert rows[(0, 300)]["map_is_truth"] and rows[(1, 300)]["map_is_truth"]
        # with no data the posterior is the (flat) prior
        assert rows[(0, 0)]["mass_at_truth_class"] == pytest.approx(1 / axes.size())
        assert {r["axis"] for r in rep.tables["marginals"]} == set(axes.names)

    def test_recovery_needs_axes(self, small):
        with pytest.raises(DomainError):
            run_parameter_recovery(cfg("recovery", small))

    def test_goal_inference(self):
        spec = GridSpec(5, 5, (2, 4), [(0, 0), (4, 0)], 6)
        pop = heterogeneous_population(spec, 4, seed=0)
        c = cfg("goal_inference", spec, theta_r=[0.0, -1.0], population=pop, trajectories_per_agent=12,
                opt=OptConfig(max_iter=100, tol=1e-5))
        rep = run_goal_inference(c)
        assert rep.summary["max_k0_prior_error"] < 1e-9
        s = rep.summary["bsdr"]
        assert s["1.0"] > s["0.25"]
        assert {r["model"] for r in rep.raw} == {"bsdr", "br"}

    def test_goal_inference_with_known_rationality(self):
        spec = GridSpec(5, 5, (2, 4), [(0, 0), (4, 0)], 6)
        c = cfg("goal_inference", spec, theta_r=[0.0, -1.0], population={"a0": [1.0, 4.0]},
                trajectories_per_agent=12, fit_rationality=False)
        rep = run_goal_inference(c)
        assert rep.summary["bsdr"]["1.0"] > rep.summary["bsdr"]["0.25"]

    def test_generalization_equal_population_ties(self, small):
        c = cfg("generalization", small, population=equal_population(3, [2.0, 0.0]), seeds=[0, 1])
        rep = run_generalization(c)
        by = {}
        for r in rep.raw:
            by.setdefault(r["seed"], {})[r["model"]] = r["policy_true_cost"]
        for costs in by.values():
            assert costs["bsdr"] == costs["br_aggregate"]
        assert rep.summary["optimal_true_cost"] <= min(r["policy_true_cost"] for r in rep.raw) + 1e-12

    def test_action_prediction(self, small):
        rep = run_action_prediction(cfg("action_prediction", small))
        ce = rep.summary["mean_cross_entropy"]
        assert ce["uniform"] == math.log(5)
        assert ce["bsdr_true"] < ce["uniform"]
        assert max(r["max_chain_rule_error"] for r in rep.raw) < 1e-9

    def test_uniform_only_roster_skips_fitting(self, small):
        rep = run_action_prediction(cfg("action_prediction", small, roster=["uniform"]))
        assert [r["model"] for r in rep.raw] == ["uniform"]

    def test_reports_reproducible(self, small):
        c = cfg("action_prediction", small)
        a, b = run_experiment(c), run_experiment(c)
        assert json.dumps(a.to_dict(), sort_keys=True) == json.dumps(b.to_dict(), sort_keys=True)
        assert "wall_clock_seconds" not in a.to_dict()
        assert a.to_dict(include_timing=True)["wall_clock_seconds"] >= 0
