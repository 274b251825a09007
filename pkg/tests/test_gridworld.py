import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bsdr.errors import DomainError, OracleSizeError, SchemaError
from bsdr.gridworld import (
    DELTAS,
    STAY,
    GridSpec,
    State,
    Trajectory,
    action_multiplicity,
    bfs_distance,
    canonical_actions,
    enumerate_paths,
    enumerate_trajectories,
    featurize,
    make_trajectory,
    neighbors,
    validate_trajectory,
)


class TestGridSpec:
    def test_rejects_bad_layouts(self):
        with pytest.raises(DomainError):
            GridSpec(0, 3, (0, 0), [(0, 1)], 2)
        with pytest.raises(DomainError):
            GridSpec(3, 3, (0, 0), [(0, 1)], 0)
        with pytest.raises(DomainError):
            GridSpec(3, 3, (0, 0), [], 2)
        with pytest.raises(DomainError, match="start"):
            GridSpec(3, 3, (1, 1), [(2, 2)], 2, obstacles=[(1, 1)])
        with pytest.raises(DomainError, match="goal"):
            GridSpec(3, 3, (0, 0), [(5, 2)], 2)
        with pytest.raises(DomainError, match="feature map"):
            GridSpec(3, 3, (0, 0), [(2, 2)], 2, feature_map="rbf")

    def test_value_semantics(self):
        a = GridSpec(3, 3, (0, 0), [(2, 2)], 2, obstacles=[(1, 1), (0, 2)])
        b = GridSpec(3, 3, State(0, 0), ((2, 2),), 2, obstacles=[(0, 2), (1, 1), (1, 1)])
        assert a == b and hash(a) == hash(b)
        assert a.obstacles == (State(0, 2), State(1, 1))

    def test_dict_round_trip(self, spec_obst):
        assert GridSpec.from_dict(spec_obst.to_dict()) == spec_obst

    def test_from_dict_errors(self, spec3):
        d = spec3.to_dict()
        d["colour"] = "red"
        with pytest.raises(DomainError, match="unknown"):
            GridSpec.from_dict(d)
        d = spec3.to_dict()
        del d["horizon"]
        with pytest.raises(DomainError, match="horizon"):
            GridSpec.from_dict(d)

    def test_cells_skip_obstacles(self, spec_obst):
        assert spec_obst.n_states == 12 - 2
        assert (1, 1) not in spec_obst.cells
        assert [spec_obst.index_of(c) for c in spec_obst.cells] == list(range(spec_obst.n_states))

    def test_tables_are_read_only(self, spec3):
        with pytest.raises(ValueError):
            spec3.succ[0, 0] = 3
        with pytest.raises(ValueError):
            spec3.features[0, 0] = 3.0


class TestDynamics:
    def test_walls_alias_to_stay(self, spec3):
        nb = neighbors((0, 0), spec3)
        assert nb[0] == (0, 0)  # up off the top edge
        assert nb[1] == (0, 1)
        assert nb[2] == (0, 0)  # left off the edge
        assert nb[3] == (1, 0)
        assert nb[STAY] == (0, 0)

    def test_obstacles_alias_to_stay(self, spec_obst):
        nb = neighbors((0, 1), spec_obst)
        assert nb[3] == (0, 1)  # (1, 1) is blocked

    def test_succ_matches_deltas(self, spec_obst):
        for i, (x, y) in enumerate(spec_obst.cells):
            for a, (dx, dy) in enumerate(DELTAS):
                tgt = (x + dx, y + dy)
                expect = tgt if spec_obst.is_valid(tgt) else (x, y)
                assert spec_obst.cells[spec_obst.succ[i, a]] == expect

    def test_bfs_distance(self, spec_obst):
        assert bfs_distance(spec_obst, (0, 1), (0, 1)) == 0
        assert bfs_distance(spec_obst, (0, 1), (3, 2)) == 4
        walled = GridSpec(3, 1, (0, 0), [(2, 0)], 2, obstacles=[(1, 0)])
        assert bfs_distance(walled, (0, 0), (2, 0)) == -1


class TestFeatures:
    def test_bias_goal_dist(self, spec3):
        np.testing.assert_array_equal(featurize((0, 0), spec3), [1.0, 0.0])
        np.testing.assert_array_equal(featurize((2, 2), spec3), [1.0, 1.0])
        np.testing.assert_allclose(featurize((1, 1), spec3), [1.0, 0.5])

    def test_nearest_goal(self, spec_obst):
        # goals (3,0) and (3,2); cell (3,1) is one step from both
        f = featurize((3, 1), spec_obst)
        dmax = max(min(abs(x - 3) + abs(y - gy) for gy in (0, 2)) for x, y in spec_obst.cells)
        assert f[1] == pytest.approx(1 - 1 / dmax)

    def test_one_hot(self):
        spec = GridSpec(3, 2, (0, 0), [(2, 1)], 2, feature_map="one_hot")
        F = spec.features
        assert F.shape == (6, 6)
        np.testing.assert_array_equal(F, np.eye(6))
        assert featurize((1, 1), spec)[1 * 3 + 1] == 1.0

    def test_goal_indicators(self, spec_obst):
        spec = GridSpec.from_dict({**spec_obst.to_dict(), "feature_map": "goal_indicators"})
        np.testing.assert_array_equal(featurize((3, 0), spec), [1, 1, 0])
        np.testing.assert_array_equal(featurize((3, 2), spec), [1, 0, 1])
        np.testing.assert_array_equal(featurize((0, 0), spec), [1, 0, 0])


class TestEnumeration:
    def test_count_and_order(self, spec3):
        acts, states = enumerate_paths(spec3)
        assert acts.shape == (125, 3) and states.shape == (125, 4)
        assert acts[0].tolist() == [0, 0, 0] and acts[-1].tolist() == [4, 4, 4]
        assert (states[:, 0] == spec3.start_index).all()

    def test_cap(self, spec3):
        with pytest.raises(OracleSizeError):
            enumerate_paths(spec3, cap=124)

    def test_multiplicities_sum_to_total(self, spec_obst):
        trajs = enumerate_trajectories(spec_obst)
        distinct = {t.states for t in trajs}
        total = sum(action_multiplicity(Trajectory(s), spec_obst) for s in distinct)
        assert total == 5**spec_obst.horizon


class TestValidation:
    def test_valid_path(self, spec3):
        xi = Trajectory([(0, 0), (1, 0), (1, 1), (2, 1)], [3, 1, 3])
        np.testing.assert_array_equal(validate_trajectory(xi, spec3), [0, 1, 4, 5])

    @pytest.mark.parametrize("states, step", [
        ([(1, 0), (1, 0), (1, 1), (2, 1)], 0),
        ([(0, 0), (2, 0), (2, 1), (2, 2)], 1),
        ([(0, 0), (1, 0), (1, 1), (9, 9)], 3),
    ])
    def test_offending_step(self, spec3, states, step):
        with pytest.raises(SchemaError) as err:
            validate_trajectory(Trajectory(states), spec3)
        assert err.value.step == step
        assert f"step {step}" in str(err.value)

    def test_wrong_length(self, spec3):
        with pytest.raises(SchemaError, match="expected 4"):
            validate_trajectory(Trajectory([(0, 0), (1, 0)]), spec3)

    def test_action_mismatch(self, spec3):
        with pytest.raises(SchemaError, match="action"):
            validate_trajectory(Trajectory([(0, 0), (1, 0), (1, 1), (2, 1)], [3, 3, 3]), spec3)

    def test_canonical_actions_pick_smallest_alias(self, spec3):
        idx = np.array([0, 0, 1, 1])
        # (0,0)->(0,0) is up, left or stay; (1,0)->(1,0) is up or stay
        assert canonical_actions(idx, spec3).tolist() == [0, 3, 0]


@given(st.integers(0, 5**4 - 1))
def test_make_trajectory_round_trip(k):
    spec = GridSpec(3, 3, (1, 1), [(0, 0)], 4, obstacles=[(2, 1)])
    acts, states = enumerate_paths(spec)
    xi = make_trajectory(states[k], spec, acts[k])
    np.testing.assert_array_equal(validate_trajectory(xi, spec), states[k])
