import json
import math

import numpy as np
import pytest

from screendual.fbp import blunt_profile, exclusion_boundary
from screendual.model import Grid, ScalarField
from screendual.region import (BLUNT, CUSTOMIZED, EXCLUDED, LABEL_NAMES, TARGETED, RegionThresholds,
                               classify_regions, extract_bunches, segments_to_json)


def _blunt_field(n=41, a=0.0, t_min=0.3):
    g = Grid(a, n)
    X1, X2 = g.mesh()
    t = np.maximum(X1 + X2, 2 * a + t_min)
    return ScalarField(g, blunt_profile(t, a)[0] - blunt_profile(2 * a + t_min, a)[0])


def test_zero_field_all_excluded():
    g = Grid(0.0, 17)
    m = classify_regions(ScalarField(g, np.zeros((17, 17))))
    assert np.all(m.labels == EXCLUDED)
    assert m.fractions()["Excluded"] == pytest.approx(1.0)


def test_quadratic_all_customized():
    g = Grid(0.0, 17)
    m = classify_regions(ScalarField.from_function(g, lambda a, b: 0.5 * (a**2 + b**2)))
    assert np.all(m.labels == CUSTOMIZED)
    assert np.allclose(m.lam1, 1.0) and np.allclose(m.lam2, 1.0)


def test_blunt_strip_labels_and_direction():
    u = _blunt_field()
    m = classify_regions(u)
    X1, X2 = u.grid.mesh()
    t = X1 + X2
    h = u.grid.h
    strip = (t >= exclusion_boundary(0.0) + 2 * h) & (t <= 1.6)
    assert np.all(m.labels[strip] == BLUNT)
    # null direction of g(x1 + x2) is (1, -1)
    assert np.allclose(m.null_angle[strip], -0.25 * math.pi, atol=1e-9)


def test_blunt_strip_segments_antidiagonal():
    u = _blunt_field()
    segs = extract_bunches(u, classify_regions(u))
    assert segs
    for s in segs:
        assert abs(math.degrees(s.theta) + 45.0) <= 3.0


def test_quadratic_has_no_bunches():
    g = Grid(0.0, 17)
    u = ScalarField.from_function(g, lambda a, b: 0.5 * (a**2 + b**2))
    assert extract_bunches(u, classify_regions(u)) == []


def test_thresholds_default_scale_with_h():
    assert RegionThresholds().rank_tol(0.01) == pytest.approx(0.1)
    assert RegionThresholds(tau_rank=0.5).rank_tol(0.01) == 0.5


@pytest.mark.parametrize("fixture", ["primal32", "primal64"])
def test_primal_solution_regions(fixture, request):
    cfg, u, _ = request.getfixturevalue(fixture)
    m = classify_regions(u)
    h = cfg.h
    # labels partition the node set
    assert set(np.unique(m.labels)) <= set(LABEL_NAMES)
    assert sum(m.fractions().values()) == pytest.approx(1.0)
    ex = m.labels == EXCLUDED
    assert np.all(np.abs(m.lam1[ex]) + np.abs(m.lam2[ex]) <= m.tau_rank)
    assert np.all(m.lam1[m.labels == CUSTOMIZED] >= m.tau_rank)
    # area of the exclusion triangle, (sqrt(6)/3)^2 / 2 = 1/3
    assert abs(m.area(EXCLUDED) - 1 / 3) <= 2 * h
    # symmetric input gives a symmetric mask
    assert np.array_equal(m.labels, m.labels.T)
    # along the diagonal: Excluded, then BluntBunch, then Customized, never TargetedBunch
    diag = [int(m.labels[i, i]) for i in range(cfg.n_grid)]
    assert TARGETED not in diag
    order = {EXCLUDED: 0, BLUNT: 1, CUSTOMIZED: 2}
    ranks = [order[k] for k in diag]
    assert ranks == sorted(ranks)


def test_primal_bunches(primal64):
    cfg, u, _ = primal64
    m = classify_regions(u)
    segs = extract_bunches(u, m)
    assert segs
    h = cfg.h
    for s in segs:
        assert s.residual <= 1.5 * h
        assert s.spread <= 10 * h
    thetas = [s.theta for s in segs]
    assert thetas == sorted(thetas)
    data = json.loads(segments_to_json(segs))
    assert len(data) == len(segs) and set(data[0]) == {"p", "q", "theta", "y", "residual", "spread"}


def test_mask_csv(tmp_path, primal32):
    _, u, _ = primal32
    m = classify_regions(u)
    p = tmp_path / "regions.csv"
    m.write_csv(p)
    lines = p.read_text().splitlines()
    assert lines[0] == "x1,x2,label,lam1,lam2"
    assert len(lines) == 1 + u.grid.n**2
