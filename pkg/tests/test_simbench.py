import json

import numpy as np
import pytest

from driftscape.errors import DegenerateGrid
from driftscape.estimate import OptimizerConfig
from driftscape.potential import GaussianComponent, MixturePotential, standard_potential
from driftscape.simbench import (
    GridSpec,
    Scenario,
    StudyConfig,
    centers_recovered,
    default_grid,
    default_scenario,
    default_theta,
    grid_csv,
    map_metrics,
    normalize_method,
    run_study,
    simulate,
    simulate_replication,
    theta_from_values,
    param_values,
)
from driftscape.stats import energy_test


def test_default_scenario_shape():
    sc = default_scenario()
    np.testing.assert_array_equal(sc.theta_true.potential.centers, [[0, 0], [6, 4]])
    assert (sc.g, sc.n, sc.replications) == (10, 500, 10)


def test_scenario_validation():
    with pytest.raises(ValueError):
        Scenario(default_theta(), n=1)
    with pytest.raises(ValueError):
        Scenario(default_theta(), replications=0)


def test_simulate_n2_single_increment(rng):
    d = simulate(Scenario(default_theta(), g=3, n=2), rng)
    assert len(d) == 3 and all(len(t) == 2 for t in d) and d.n_segments == 3
    np.testing.assert_array_equal(d.tracks[0].positions[0], [3.0, 2.0])


def test_replication_substreams_independent_of_count():
    sc5 = Scenario(default_theta(), g=2, n=5, replications=5, seed=9)
    sc2 = Scenario(default_theta(), g=2, n=5, replications=2, seed=9)
    a = simulate_replication(sc5, 1)
    b = simulate_replication(sc2, 1)
    for ta, tb in zip(a, b):
        np.testing.assert_array_equal(ta.positions, tb.positions)


def test_exact_and_euler_fine_modes_agree():
    sc = Scenario(default_theta(0.7), g=20_000, n=2, dt=1.0)
    a = simulate(sc, np.random.default_rng(1), "exact")
    b = simulate(sc, np.random.default_rng(2), "euler-fine")
    ea = np.array([t.positions[-1] for t in a])
    eb = np.array([t.positions[-1] for t in b])
    assert energy_test(ea, eb).p_value > 0.01


def test_map_metrics_identity_and_symmetry():
    p = default_theta().potential
    m = map_metrics(p, p)
    assert m.ise == 0 and np.all(m.abs_error_grid == 0)
    q = p.translated([0.3, 0.0])
    grid = default_grid(p)  # the default grid follows the second argument
    assert map_metrics(p, q, grid).ise == pytest.approx(map_metrics(q, p, grid).ise, rel=1e-12)


def test_ise_self_consistency():
    p = default_theta().potential
    q = p.translated([0.2, -0.1])
    m = map_metrics(q, p)
    assert m.ise == pytest.approx(np.sum(m.abs_error_grid**2) * m.grid_spec.cell_area, rel=1e-12)


def test_ise_increases_with_shift():
    p = standard_potential()
    grid = default_grid(p)
    vals = [map_metrics(p.translated([d, 0.0]), p, grid).ise for d in (0.1, 0.5, 1.0)]
    assert 0 < vals[0] < vals[1] < vals[2]


def test_ise_quadrature_refinement():
    p = default_theta().potential
    q = MixturePotential([GaussianComponent(0.4, (0.3, 0.2), [[0.6, 0.1], [0.1, 0.4]]), GaussianComponent(0.6, (5.5, 4.2), [[0.3, 0.0], [0.0, 0.5]])])
    grid = default_grid(p)
    a = map_metrics(q, p, grid).ise
    b = map_metrics(q, p, grid.refined(2)).ise
    assert abs(a - b) < 0.01 * b


def test_ise_against_closed_form():
    # two unit-weight isotropic bumps: integral of (phi_a - phi_b)^2 has a closed form
    p = standard_potential()
    q = p.translated([1.0, 0.0])
    exact = 2 * np.pi * (1 - np.exp(-0.25))
    grid = GridSpec((-9, 10), (-9.5, 9.5), 400)
    assert map_metrics(q, p, grid).ise == pytest.approx(exact, rel=1e-6)


@pytest.mark.parametrize("xr,yr,res", [((0, 0), (0, 1), 10), ((1, 0), (0, 1), 10), ((0, 1), (0, 1), 0), ((0, np.inf), (0, 1), 5)])
def test_degenerate_grid(xr, yr, res):
    with pytest.raises(DegenerateGrid):
        GridSpec(xr, yr, res)


def test_grid_csv_layout():
    g = GridSpec((0, 2), (0, 1), 2)
    text = grid_csv(g, np.arange(4.0).reshape(2, 2))
    assert text.splitlines() == ["x,y,value", "0.5,0.25,0.0", "0.5,0.75,1.0", "1.5,0.25,2.0", "1.5,0.75,3.0"]


def test_centers_recovered_matching():
    t = default_theta()
    swapped = MixturePotential(t.potential.components[::-1])
    from driftscape.potential import ModelParams

    assert centers_recovered(ModelParams(swapped, 0.3), t)
    assert not centers_recovered(ModelParams(swapped.translated([0.6, 0]), 0.3), t)


def test_normalize_method():
    assert normalize_method("adaptive-kessler") == "adaptive_kessler"
    assert normalize_method("EA-MCEM") == "ea_mcem"
    with pytest.raises(ValueError):
        normalize_method("milstein")


def test_run_study_single_row_and_deterministic():
    sc = Scenario(default_theta(), g=3, n=60, dt=1.0, replications=1, seed=4)
    cfg = StudyConfig(methods=("euler",), optimizer=OptimizerConfig(restarts=1, max_evals=300))
    a = run_study(sc, cfg)
    b = run_study(sc, cfg)
    assert len(a["replications"]) == 1 and list(a["replications"][0]["fits"]) == ["euler"]
    assert a["summary"]["euler"]["fits"] == 1
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)
    assert a["schema_version"] == 1


def test_param_values_round_trip():
    t = default_theta()
    assert param_values(theta_from_values(param_values(t), 2)) == param_values(t)
