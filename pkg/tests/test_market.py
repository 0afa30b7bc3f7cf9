import json
import math

import numpy as np
import pytest
from scipy.spatial import cKDTree

from screendual.market import (PriceMenu, best_response, best_responses, bunching_summary, directional_jump,
                               ic_ir_check, price_menu, simulate_market)
from screendual.model import Grid, ModelConfig, ScalarField, gradient
from screendual.region import EXCLUDED, classify_regions


@pytest.fixture
def cfg():
    return ModelConfig(n_grid=33)


@pytest.fixture(scope="module")
def market64(primal64):
    cfg, u, _ = primal64
    return cfg, u, simulate_market(u, cfg)


def _quadratic_menu(n=41, side=1.5):
    g = Grid(0.0, n, side)
    Y1, Y2 = g.mesh()
    return PriceMenu(g, 0.5 * (Y1**2 + Y2**2))


def test_menu_of_half_square_is_self_dual(cfg):
    u = ScalarField.from_function(cfg.grid, lambda a, b: 0.5 * (a**2 + b**2))
    menu = price_menu(u, cfg, product_grid=Grid(0.0, 33))
    Y1, Y2 = menu.grid.mesh()
    assert np.max(np.abs(menu.values - 0.5 * (Y1**2 + Y2**2))) <= cfg.h
    assert menu.values[0, 0] == 0.0


def test_menu_of_zero_payoff_is_linear(cfg):
    menu = price_menu(ScalarField(cfg.grid, np.zeros((33, 33))), cfg, product_grid=Grid(0.0, 33))
    Y1, Y2 = menu.grid.mesh()
    assert np.allclose(menu.values, Y1 + Y2, atol=1e-14)


def test_default_product_grid_covers_gradients(primal32):
    cfg, u, _ = primal32
    menu = price_menu(u, cfg)
    G = gradient(u).values
    assert menu.grid.lo == 0.0 and menu.grid.h == pytest.approx(cfg.h)
    assert menu.grid.lo + menu.grid.side >= G.max()
    # v(0) = -min u = 0 for an admissible payoff
    assert menu.values[0, 0] == pytest.approx(0.0, abs=1e-12)


def test_best_response_quadratic_menu():
    menu = _quadratic_menu()
    y, util = best_response(menu, (0.6, 0.8))
    h = menu.grid.h
    assert abs(y[0] - 0.6) <= h and abs(y[1] - 0.8) <= h
    assert util == pytest.approx(0.5, abs=h)


def test_best_response_outside_option_only():
    g = Grid(0.0, 11)
    v = np.full((11, 11), math.inf)
    v[0, 0] = 0.0
    y, util = best_response(PriceMenu(g, v), (0.7, 0.9))
    assert y == (0.0, 0.0) and util == 0.0


def test_tie_breaks():
    g = Grid(0.0, 2)
    # products (0,0), (0,1), (1,0), (1,1); the agent (1,1) is indifferent between (0,1) and (1,0)
    v = np.array([[0.0, 0.5], [0.5, math.inf]])
    assert best_response(PriceMenu(g, v), (1.0, 1.0)) == ((0.0, 1.0), 0.5)
    # free products: every product ties for the zero agent, the largest y1 + y2 wins
    y, util = best_response(PriceMenu(Grid(0.0, 5), np.zeros((5, 5))), (0.0, 0.0))
    assert y == (1.0, 1.0) and util == 0.0


def test_best_responses_independent_of_threads(monkeypatch):
    menu = _quadratic_menu()
    X = np.random.default_rng(0).uniform(0, 1, (3000, 2))
    monkeypatch.setenv("SCREENDUAL_THREADS", "1")
    y1, u1 = best_responses(menu, X, chunk=256)
    monkeypatch.setenv("SCREENDUAL_THREADS", "3")
    y3, u3 = best_responses(menu, X, chunk=256)
    assert np.array_equal(y1, y3) and np.array_equal(u1, u3)


def test_replay_matches_reduced_objective(market64):
    cfg, _, out = market64
    h = cfg.h
    assert abs(out.profit - out.phi) <= 20 * h
    assert abs(out.exclusion_fraction - 1 / 3) <= 3 * h
    assert out.histogram[:, 2].sum() == pytest.approx(cfg.node_weights().sum(), abs=1e-12)
    assert np.isfinite(out.profit)


def test_ic_ir_on_random_pairs(market64):
    rep = ic_ir_check(market64[2], pairs=10_000)
    assert rep["pairs"] == 10_000
    assert rep["ic_ok"] and rep["ir_ok"]
    assert rep["worst_ic_gain"] <= 1e-12 and rep["min_utility"] >= 0.0


def test_bunched_products_carry_mass(market64):
    b = bunching_summary(market64[2])
    assert b["n_bunched_products"] > 0
    assert b["min_bunched_mass"] > 0 and b["bunched_mass"] > 0
    assert all(c >= 3 for c in b["counts"])


def test_excluded_agents_take_outside_option(market64):
    _, u, out = market64
    ex = classify_regions(u).labels == EXCLUDED
    assert ex.any()
    assert np.all(out.products[ex] == 0.0)


def test_products_lie_in_gradient_range(market64):
    cfg, u, out = market64
    G = gradient(u).values.reshape(-1, 2)
    inner = np.ones(out.utility.shape, dtype=bool)
    # the top and right edges tie with every product in their outward normal cone
    inner[-1, :] = inner[:, -1] = False
    d, _ = cKDTree(G).query(out.products[inner])
    assert np.max(d) <= math.sqrt(2) * cfg.h
    assert np.all(out.histogram[:, :2] >= 0.0)


def test_utility_bounded_by_payoff(market64):
    # Fenchel-Young: x.y - v(y) <= u(x) for every product, with equality on the excluded set
    _, u, out = market64
    assert np.all(out.utility <= u.values + 1e-12)
    ex = classify_regions(u).labels == EXCLUDED
    assert np.all(out.utility[ex] == 0.0)


def test_menu_equals_conjugate_on_sold_products(market64):
    cfg, u, out = market64
    G = gradient(u).values
    X1, X2 = cfg.grid.mesh()
    n = cfg.n_grid
    worst = 0.0
    for i in range(3, n - 3, 4):
        for j in range(3, n - 3, 4):
            y = G[i, j]
            worst = max(worst, abs(out.menu.price(y) - (X1[i, j] * y[0] + X2[i, j] * y[1] - u.values[i, j])))
    assert worst <= 5 * cfg.h


def test_price_kink_across_exact_bunches():
    # u depends on x1 + x2 only: each antidiagonal segment buys one product on the diagonal
    cfg = ModelConfig(n_grid=41)
    h = cfg.h
    u = ScalarField.from_function(cfg.grid, lambda a, b: 0.25 * np.maximum(a + b - 0.8, 0.0) ** 2)
    out = simulate_market(u, cfg)
    b = bunching_summary(out)
    assert b["n_bunched_products"] > 10
    Y = out.products.reshape(-1, 2)
    A = out.agents.reshape(-1, 2)
    long_bunches = 0
    for y in b["products"]:
        sel = np.all(Y == y, axis=1)
        across = (A[sel, 0] - A[sel, 1]) / math.sqrt(2)
        extent = across.max() - across.min()
        jump = directional_jump(out.menu, y, (1, -1))
        # the discrete subdifferential adds at most the two end cells of the segment
        assert extent - 1e-12 <= jump <= extent + 2 * math.sqrt(2) * h + 1e-12
        assert abs(directional_jump(out.menu, y, (1, 1))) <= 5 * h
        if extent >= 10 * h:
            long_bunches += 1
            assert jump > 10 * h
    assert long_bunches > 10


def test_no_kink_without_bunching():
    cfg = ModelConfig(n_grid=41)
    u = ScalarField.from_function(cfg.grid, lambda a, b: 0.5 * (a**2 + b**2))
    out = simulate_market(u, cfg)
    assert bunching_summary(out)["n_bunched_products"] == 0
    jumps = [directional_jump(out.menu, y, d) for y in out.histogram[:, :2]
             for d in ((1, 0), (0, 1), (1, 1), (1, -1))]
    jumps = np.array([j for j in jumps if np.isfinite(j)])
    assert jumps.size > 0 and np.max(np.abs(jumps)) <= 5 * cfg.h


def test_diagonal_products_kink_across_the_line(market64):
    # the diagonal carries the blunt product line; v bends more across it than along it
    _, _, out = market64
    diag = [y for y in out.histogram[:, :2] if y[0] == y[1] and y[0] > 0]
    checked = 0
    for y in diag:
        across = directional_jump(out.menu, y, (1, -1))
        along = directional_jump(out.menu, y, (1, 1))
        if np.isfinite(across) and np.isfinite(along):
            checked += 1
            assert across >= along - 1e-12
    assert checked > 10


def test_simulation_deterministic_and_serializable(tmp_path, primal32):
    cfg, u, _ = primal32
    o1 = simulate_market(u, cfg)
    o2 = simulate_market(u, cfg)
    assert np.array_equal(o1.products, o2.products) and o1.profit == o2.profit
    d = json.loads(o1.to_json())
    assert {"profit", "phi", "profit_minus_phi", "exclusion_fraction", "min_utility"} <= set(d)
    p = tmp_path / "histogram.csv"
    o1.write_histogram_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "y1,y2,mass" and len(lines) == 1 + o1.histogram.shape[0]
    assert sum(float(r.split(",")[2]) for r in lines[1:]) == pytest.approx(1.0, abs=1e-12)
