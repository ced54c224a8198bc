import numpy as np
import pytest

from rlab.algorithms import Checkpoint, CqlConfig, RedsConfig
from rlab.dataset import estimate_model, generate_dataset
from rlab.harness import (DivergenceReport, ExperimentConfig, audit_heteroskedasticity,
                          canonical_method, cells_past_hallway, expand_grid,
                          hallway_components, heatmap_from_counts, is_non_increasing,
                          mass_past_hallway, method_config, monotonicity_check, oracle_select,
                          read_pgm, results_table, sweep, evaluate_policy)
from rlab.mdp import (TabularMdp, TabularPolicy, build_gridworld, greedy_policy, load_layout,
                      value_iteration)

TWO_ROOMS = "#########\n#S..#...#\n#...H...#\n#...#..G#\n#########\n"


@pytest.fixture(scope="module")
def didactic_mdp():
    return build_gridworld(load_layout("didactic-24x16"))


@pytest.fixture
def small_layout(tmp_path):
    path = tmp_path / "tworooms.txt"
    path.write_text(TWO_ROOMS)
    return str(path)


def test_optimal_policy_always_succeeds(didactic_mdp):
    _, q = value_iteration(didactic_mdp)
    rate, heat = evaluate_policy(didactic_mdp, greedy_policy(q), 50, 400, seed=0)
    assert rate == 1.0
    # the absorbed tail counts, so the goal cell holds most of the mass
    gx, gy = didactic_mdp.grid.goal
    assert heat.freq[gy, gx] == heat.freq.max()


def test_horizon_one_cannot_reach_distant_goal(didactic_mdp):
    pi = TabularPolicy.uniform(didactic_mdp.n_states, 5)
    rate, _ = evaluate_policy(didactic_mdp, pi, 200, 1, seed=0)
    assert rate == 0.0


def test_evaluation_deterministic_and_mass_conserving(didactic_mdp):
    pi = TabularPolicy.uniform(didactic_mdp.n_states, 5)
    r1, h1 = evaluate_policy(didactic_mdp, pi, 30, 100, seed=4)
    r2, h2 = evaluate_policy(didactic_mdp, pi, 30, 100, seed=4)
    assert r1 == r2
    np.testing.assert_array_equal(h1.freq, h2.freq)
    assert h1.freq.sum() == pytest.approx(1.0)
    assert h1.freq[h1.walls].sum() == 0


def test_episode_starting_at_terminal_is_success():
    T = np.zeros((2, 1, 2))
    T[0, 0, 0] = T[1, 0, 1] = 1.0
    mdp = TabularMdp(T, np.zeros((2, 1)), np.array([0.0, 1.0]), 0.9, frozenset({1}))
    rate, heat = evaluate_policy(mdp, TabularPolicy(np.ones((2, 1))), 5, 10, seed=0)
    assert rate == 1.0 and heat is None
    with pytest.raises(ValueError):
        evaluate_policy(mdp, TabularPolicy(np.ones((2, 1))), 0, 10, seed=0)


def test_pgm_round_trip(didactic_mdp):
    counts = np.arange(didactic_mdp.n_states, dtype=float)
    heat = heatmap_from_counts(didactic_mdp, counts)
    pix = read_pgm(heat.to_pgm())
    assert pix.shape == (16, 24)
    assert np.all(pix[heat.walls] == 0)
    assert pix[~heat.walls].min() == 1 and pix.max() == 255
    x, y = didactic_mdp.cells[-1]
    assert pix[y, x] == 255
    with pytest.raises(ValueError):
        read_pgm(b"P2\n1 1\n255\n\x00")


def test_svg_has_one_rect_per_cell(didactic_mdp):
    heat = heatmap_from_counts(didactic_mdp, np.ones(didactic_mdp.n_states))
    assert heat.to_svg().count("<rect") == 24 * 16


def _ck(it, score):
    return Checkpoint(it, np.zeros((1, 1)), TabularPolicy(np.ones((1, 1))), eval_success=score)


def test_oracle_select_ties_go_to_earliest():
    picked = oracle_select([_ck(100, 0.5), _ck(50, 0.5), _ck(150, 0.4)])
    assert picked.iteration == 50
    assert oracle_select([_ck(0, None), _ck(50, 0.0)]).iteration == 50
    with pytest.raises(ValueError):
        oracle_select([])


def test_hallway_geometry(didactic_mdp):
    grid = didactic_mdp.grid
    comps = hallway_components(grid)
    assert comps[1] == [(7, 12), (8, 12)] and comps[2] == [(15, 3), (16, 3)]
    past = set(cells_past_hallway(grid, 1))
    assert grid.goal in past and (20, 5) in past and (10, 5) not in past
    assert len(past) == 62
    with pytest.raises(ValueError):
        cells_past_hallway(grid, 2)


def test_mass_past_hallway_bounds(didactic_mdp):
    goal = didactic_mdp.state_of(didactic_mdp.grid.goal)
    counts = np.zeros(didactic_mdp.n_states)
    counts[goal] = 3
    grid = didactic_mdp.grid
    assert mass_past_hallway(heatmap_from_counts(didactic_mdp, counts), grid) == 1.0
    counts[:] = 0
    counts[0] = 1
    assert mass_past_hallway(heatmap_from_counts(didactic_mdp, counts), grid) == 0.0


def test_method_config_and_aliases():
    assert canonical_method("cql") == "cql_closed"
    assert canonical_method("reds_grad") == "reds_grad"
    cfg = method_config("reds", {"alpha": 0.5, "n_iters": 10.0})
    assert isinstance(cfg, RedsConfig) and cfg.n_iters == 10 and cfg.alpha == 0.5
    assert isinstance(method_config("cql", {}), CqlConfig)
    with pytest.raises(ValueError):
        method_config("cql", {"tau": 1.0})
    with pytest.raises(ValueError):
        ExperimentConfig(method="awr", params={"alpha": 1.0})
    with pytest.raises(ValueError):
        ExperimentConfig(seeds=())


def test_expand_grid():
    base = ExperimentConfig(method="cql", params={"n_iters": 5})
    assert expand_grid(base, {}) == [base]
    cells = expand_grid(base, {"alpha": [0.1, 1.0], "data_seed": [1, 2, 3]})
    assert len(cells) == 6
    assert cells[0].params == {"n_iters": 5, "alpha": 0.1} and cells[0].data_seed == 1
    assert cells[-1].label == "cql_alpha=1_n_iters=5"


def test_sweep_independent_of_jobs(small_layout, tmp_path):
    base = ExperimentConfig(method="cql", params={"n_iters": 60}, layout=small_layout,
                            variant="homogeneous", n_traj=40, data_horizon=30,
                            seeds=(0, 1), eval_episodes=20, eval_horizon=50)
    grid = {"alpha": [0.1, 1.0]}
    serial = sweep(base, grid, jobs=1, results_csv=tmp_path / "a.csv")
    parallel = sweep(base, grid, jobs=2, results_csv=tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_text() == (tmp_path / "b.csv").read_text()
    assert [r.successes for r in serial] == [r.successes for r in parallel]
    lines = results_table(serial).splitlines()
    assert lines[0].startswith("method,alpha,n_iters,seed,success")
    assert len(lines) == 1 + 2 * 2
    assert len(sweep(base, {}, jobs=4)) == 1


def test_small_layout_past_first_hallway(small_layout):
    grid = load_layout(small_layout)
    assert len(cells_past_hallway(grid, 0)) == 9


def test_audit_uniform_data_with_uniform_policy():
    mdp, pi_b, data = generate_dataset(variant="homogeneous")
    report, conc = audit_heteroskedasticity(data, pi_b)
    assert report.states_counted > 150
    assert report.std < 0.01
    model = estimate_model(data, mdp.n_states, mdp.n_actions)
    report, conc = audit_heteroskedasticity(data, model.pi_beta_hat, mdp)
    assert report.std == 0.0 and report.max == 0.0 and conc.value == 0.0
    again = DivergenceReport.from_csv(report.to_csv())
    assert again.summary() == report.summary()


def test_monotonicity_rows(didactic_mdp):
    _, _, data = generate_dataset(n_traj=100, horizon=100, seed=2)
    model = estimate_model(data, didactic_mdp.n_states, didactic_mdp.n_actions)
    rows = monotonicity_check(model, didactic_mdp, [1.0], CqlConfig(n_iters=50))
    assert len(rows) == 1 and rows[0][0] == 1.0 and rows[0][1] >= 0
    assert is_non_increasing(rows)
    assert is_non_increasing([(0.1, 1.0), (1.0, 1.04), (5.0, 0.5)])
    assert not is_non_increasing([(0.1, 1.0), (1.0, 1.2)])
