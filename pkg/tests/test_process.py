"""Linear-predictor composition, region integrals, range-map decay."""

import logging
import math

import numpy as np
import pytest
from shapely.geometry import Polygon

import isdm
from isdm import SpecError
from isdm.process import eval_linear_predictor, region_membership

# exact integral of exp(2x) over the unit square
_EXACT_MU = (math.e**2 - 1.0) / 2.0


def _xy_covariates(mesh):
    return (
        isdm.CovariateField("x", mesh.vertices[:, 0].copy()),
        isdm.CovariateField("y", mesh.vertices[:, 1].copy()),
    )


# ---------------------------------------------------------------------------
# composition


def test_eta_is_the_sum_of_its_parts(mesh_coarse):
    rng = np.random.default_rng(3)
    u = 0.2 * rng.standard_normal(mesh_coarse.n_vertices)
    square = Polygon([(0.2, 0.2), (0.8, 0.2), (0.8, 0.8), (0.2, 0.8)])
    term = isdm.RangeMapTerm("expert", (square,), gamma=1.5)
    model = isdm.ProcessModel(
        mesh_coarse, covariates=_xy_covariates(mesh_coarse), range_terms=(term,)
    )
    lp = isdm.LinearPredictor(
        intercept="proc",
        terms=(("x", "beta_x"), ("y", "beta_y")),
        fields=("xi",),
        range_terms=("expert",),
    )
    state = {
        "betas": {"beta_x": 1.7, "beta_y": -0.4},
        "intercepts": {"proc": 0.9},
        "log_gammas": {"expert": math.log(2.0)},
        "fields": {"xi": u},
    }
    eta = model.eta_at_vertices(lp, state)
    v = mesh_coarse.vertices
    want = (
        0.9
        + 1.7 * v[:, 0]
        - 0.4 * v[:, 1]
        + u
        - 2.0 * term.distances(v)
    )
    np.testing.assert_allclose(eta, want, rtol=0, atol=1e-12)
    assert lp.referenced_betas() == ("beta_x", "beta_y")


def test_eta_at_points_interpolates_linearly(mesh_coarse):
    # linear covariates are reproduced exactly by barycentric interpolation
    model = isdm.ProcessModel(mesh_coarse, covariates=_xy_covariates(mesh_coarse))
    lp = isdm.LinearPredictor(intercept="a", terms=(("x", "bx"), ("y", "by")))
    state = {"betas": {"bx": 2.0, "by": -1.0}, "intercepts": {"a": 0.25}}
    rng = np.random.default_rng(8)
    pts = rng.uniform(0.05, 0.95, size=(30, 2))
    eta = model.eta_at(lp, state, pts)
    np.testing.assert_allclose(
        eta, 0.25 + 2.0 * pts[:, 0] - 1.0 * pts[:, 1], atol=1e-12
    )
    single = eval_linear_predictor(model, lp, state, (0.5, 0.5))
    assert single == pytest.approx(0.75, abs=1e-12)
    assert isdm.intensity(model, lp, state, (0.5, 0.5)) == pytest.approx(
        math.exp(0.75), rel=1e-12
    )


def test_range_term_falls_back_to_own_gamma(mesh_coarse):
    square = Polygon([(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)])
    term = isdm.RangeMapTerm("rm", (square,), gamma=3.0)
    model = isdm.ProcessModel(mesh_coarse, range_terms=(term,))
    lp = isdm.LinearPredictor(range_terms=("rm",))
    # no log_gammas entry: the term's stored gamma applies (everything inside
    # the polygon here, so eta is 0 regardless; check via a smaller map)
    eta = model.eta_at_vertices(lp, {})
    np.testing.assert_array_equal(eta, np.zeros(mesh_coarse.n_vertices))


# ---------------------------------------------------------------------------
# state validation


def test_missing_state_entries_are_spec_errors(mesh_coarse):
    model = isdm.ProcessModel(mesh_coarse, covariates=_xy_covariates(mesh_coarse))
    with pytest.raises(SpecError, match="state has no intercept"):
        model.eta_at_vertices(isdm.LinearPredictor(intercept="zz"), {})
    with pytest.raises(SpecError, match="state has no coefficient"):
        model.eta_at_vertices(
            isdm.LinearPredictor(terms=(("x", "bx"),)), {"betas": {}}
        )
    with pytest.raises(SpecError, match="state has no field realization"):
        model.eta_at_vertices(isdm.LinearPredictor(fields=("xi",)), {"fields": {}})


def test_check_predictor_rejects_unknown_names(mesh_coarse):
    model = isdm.ProcessModel(mesh_coarse, covariates=_xy_covariates(mesh_coarse))
    with pytest.raises(SpecError, match="unknown covariate"):
        model.check_predictor(isdm.LinearPredictor(terms=(("elev", "b"),)))
    with pytest.raises(SpecError, match="unknown range term"):
        model.check_predictor(isdm.LinearPredictor(range_terms=("rm",)))
    with pytest.raises(SpecError, match="unknown field component"):
        model.check_predictor(isdm.LinearPredictor(fields=("xi",)), fields=())
    # and the happy path is silent
    model.check_predictor(
        isdm.LinearPredictor(terms=(("x", "b"),), fields=("xi",)), fields=("xi",)
    )


def test_model_rejects_duplicate_or_misaligned_inputs(mesh_coarse):
    x = isdm.CovariateField("x", mesh_coarse.vertices[:, 0].copy())
    with pytest.raises(SpecError, match="duplicate covariate"):
        isdm.ProcessModel(mesh_coarse, covariates=(x, x))
    short = isdm.CovariateField("s", np.zeros(3))
    with pytest.raises(SpecError, match="vertices"):
        isdm.ProcessModel(mesh_coarse, covariates=(short,))
    sq = Polygon([(0, 0), (1, 0), (1, 1), (0, 1)])
    term = isdm.RangeMapTerm("rm", (sq,))
    with pytest.raises(SpecError, match="duplicate range term"):
        isdm.ProcessModel(mesh_coarse, range_terms=(term, term))


# ---------------------------------------------------------------------------
# covariate fields


def test_covariate_from_points_nearest_neighbor(mesh_coarse):
    # sampling exactly at the vertices must reproduce the vertex values
    vals = np.arange(mesh_coarse.n_vertices, dtype=float)
    cov = isdm.CovariateField.from_points(
        mesh_coarse, mesh_coarse.vertices, vals, "idx"
    )
    np.testing.assert_array_equal(cov.values, vals)


def test_covariate_validation(mesh_coarse):
    with pytest.raises(ValueError, match="finite"):
        isdm.CovariateField("bad", np.array([1.0, np.nan]))
    with pytest.raises(ValueError):
        isdm.CovariateField("bad", np.zeros((4, 2)))
    with pytest.raises(ValueError, match="no data points"):
        isdm.CovariateField.from_points(mesh_coarse, np.zeros((0, 2)), [], "e")
    with pytest.raises(ValueError, match="differ"):
        isdm.CovariateField.from_points(
            mesh_coarse, [(0.5, 0.5)], [1.0, 2.0], "m"
        )


# ---------------------------------------------------------------------------
# range maps


def test_range_map_distance_and_covariate():
    sq = Polygon([(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)])
    term = isdm.RangeMapTerm("rm", (sq,), gamma=2.0)
    d = term.distances([(0.5, 0.5), (1.5, 0.5), (0.5, -0.25)])
    np.testing.assert_allclose(d, [0.0, 0.5, 0.25], atol=1e-12)
    assert isdm.range_covariate(term, (0.5, 0.5)) == 0.0
    assert isdm.range_covariate(term, (1.5, 0.5)) == pytest.approx(-1.0, abs=1e-12)


def test_range_map_union_of_polygons():
    a = Polygon([(0, 0), (1, 0), (1, 1), (0, 1)])
    b = Polygon([(3, 0), (4, 0), (4, 1), (3, 1)])
    term = isdm.RangeMapTerm("rm", (a, b))
    # midpoint between the two patches: nearest wins
    assert term.distances([(2.2, 0.5)])[0] == pytest.approx(0.8, abs=1e-12)
    assert term.distances([(3.5, 0.5)])[0] == 0.0


def test_range_map_validation():
    sq = Polygon([(0, 0), (1, 0), (1, 1), (0, 1)])
    with pytest.raises(ValueError, match="no polygons"):
        isdm.RangeMapTerm("rm", ())
    with pytest.raises(ValueError, match="invalid polygon"):
        isdm.RangeMapTerm("rm", (Polygon(),))
    with pytest.raises(ValueError, match="invalid polygon"):
        isdm.RangeMapTerm("rm", (sq, "not a polygon"))
    with pytest.raises(ValueError, match="nonnegative"):
        isdm.RangeMapTerm("rm", (sq,), gamma=-0.5)


# ---------------------------------------------------------------------------
# region integrals


def test_region_mean_converges_to_exact_integral(unit_square):
    # mu(A) for eta = 2x on the unit square; dual-cell quadrature error
    # must shrink under refinement and end below 1%
    errors = []
    for h in (0.2, 0.15, 0.1):
        mesh = isdm.build_mesh(unit_square, h)
        model = isdm.ProcessModel(
            mesh, covariates=(isdm.CovariateField("x", mesh.vertices[:, 0].copy()),)
        )
        lp = isdm.LinearPredictor(terms=(("x", "b"),))
        mu = isdm.region_mean(mesh, model, lp, {"betas": {"b": 2.0}})
        errors.append(abs(mu - _EXACT_MU) / _EXACT_MU)
    assert errors[0] > errors[1] > errors[2]
    assert errors[2] < 0.01


def test_region_mean_constant_intensity(mesh_mid):
    # eta = c: mu = |A| * e^c up to the exact-area property of the mesh
    model = isdm.ProcessModel(mesh_mid)
    lp = isdm.LinearPredictor(intercept="a")
    mu = isdm.region_mean(mesh_mid, model, lp, {"intercepts": {"a": 1.3}})
    assert mu == pytest.approx(math.exp(1.3), rel=1e-9)


def test_region_mean_whole_domain_region_matches_none(mesh_mid):
    model = isdm.ProcessModel(mesh_mid)
    lp = isdm.LinearPredictor(intercept="a")
    state = {"intercepts": {"a": 0.4}}
    whole = Polygon([(-0.1, -0.1), (1.1, -0.1), (1.1, 1.1), (-0.1, 1.1)])
    assert isdm.region_mean(mesh_mid, model, lp, state, whole) == isdm.region_mean(
        mesh_mid, model, lp, state
    )


def test_region_membership_small_box(mesh_mid):
    box = Polygon([(0.3, 0.3), (0.7, 0.3), (0.7, 0.7), (0.3, 0.7)])
    mask = region_membership(mesh_mid, box)
    v = mesh_mid.vertices
    want = (
        (v[:, 0] >= 0.3) & (v[:, 0] <= 0.7) & (v[:, 1] >= 0.3) & (v[:, 1] <= 0.7)
    )
    np.testing.assert_array_equal(mask, want)
    assert region_membership(mesh_mid, None).all()


def test_empty_region_warns_and_returns_zero(mesh_coarse, caplog):
    model = isdm.ProcessModel(mesh_coarse)
    lp = isdm.LinearPredictor(intercept="a")
    far = Polygon([(5.0, 5.0), (5.1, 5.0), (5.1, 5.1), (5.0, 5.1)])
    with caplog.at_level(logging.WARNING, logger="isdm.process"):
        mu = isdm.region_mean(
            mesh_coarse, model, lp, {"intercepts": {"a": 0.0}}, far
        )
    assert mu == 0.0
    assert any("captures no dual-mesh cell" in r.message for r in caplog.records)


# ---------------------------------------------------------------------------
# occupancy link


def test_occupancy_probability_values():
    assert isdm.occupancy_probability(0.0) == 0.0
    assert isdm.occupancy_probability(math.log(2.0)) == pytest.approx(0.5, rel=1e-15)
    assert isdm.occupancy_probability(1.0) == pytest.approx(
        0.6321205588285577, rel=1e-15
    )
    arr = isdm.occupancy_probability(np.array([0.0, 1.0]))
    np.testing.assert_allclose(arr, [0.0, 0.6321205588285577], rtol=1e-15)
    with pytest.raises(ValueError, match="nonnegative"):
        isdm.occupancy_probability(-0.1)
