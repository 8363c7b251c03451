"""Log-intensity composition: covariates, fixed effects, range maps, fields.

The linear predictor eta(s) is a sum of covariate effects, an intercept,
an optional range-map decay term and interpolated random-field components;
the point-process intensity is exp(eta).  Region means use the dual-mesh
quadrature: a dual cell belongs to a region iff its generating vertex does
(no partial-cell clipping), so integrals are weighted vertex sums.

Parameter values and field realizations are passed in a plain "state"
mapping, kept separate from the immutable structure so the same predictor
can be evaluated at any point of parameter space:

    state = {
        "betas": {beta_name: value},
        "intercepts": {key: value},
        "log_gammas": {range_term_name: value},
        "fields": {component_name: per-vertex array},
    }
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import shapely
from scipy.spatial import cKDTree
from shapely.geometry import Polygon

from .errors import SpecError
from .mesh import TriangulatedDomain, _as_points

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CovariateField:
    """A named covariate stored as values at mesh vertices."""

    name: str
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1 or not np.isfinite(v).all():
            raise ValueError(f"covariate {self.name!r} must be a finite 1-d array")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_points(cls, mesh, xy, values, name):
        """Project scattered covariate observations to vertices by nearest neighbor."""
        xy = _as_points(xy)
        values = np.asarray(values, dtype=float)
        if len(xy) == 0:
            raise ValueError(f"covariate {name!r} has no data points")
        if len(xy) != len(values):
            raise ValueError("coordinate and value counts differ")
        _, nearest = cKDTree(xy).query(mesh.vertices)
        return cls(name, values[nearest])


@dataclass(frozen=True)
class RangeMapTerm:
    """Expert range map entering eta as rho(s) = -gamma * d(s, R).

    d(s, R) is zero inside any of the range polygons and the Euclidean
    distance to the nearest polygon otherwise; gamma >= 0 is enforced by
    optimizing log gamma, which carries a Normal(prior_mean, prior_sd)
    prior.
    """

    name: str
    polygons: tuple
    gamma: float = 1.0
    prior_mean: float = 0.0
    prior_sd: float = 1.0

    def __post_init__(self):
        if not self.polygons:
            raise ValueError(f"range term {self.name!r} has no polygons")
        for p in self.polygons:
            if not isinstance(p, Polygon) or p.is_empty:
                raise ValueError(f"range term {self.name!r}: invalid polygon")
        if self.gamma < 0:
            raise ValueError("gamma must be nonnegative")

    def distances(self, points) -> np.ndarray:
        """d(p, R): zero inside, distance to the nearest polygon outside."""
        pts = shapely.points(_as_points(points))
        d = np.min(
            np.column_stack([shapely.distance(pts, poly) for poly in self.polygons]),
            axis=1,
        )
        return d


def range_covariate(term: RangeMapTerm, p) -> float:
    """rho(p) = -gamma * d(p, R) for the term's own gamma value."""
    return float(-term.gamma * term.distances(p)[0])


@dataclass(frozen=True)
class LinearPredictor:
    """Structure of one dataset's eta: which named pieces it sums.

    intercept and the beta names key into the state dict; sharing a name
    across predictors shares the parameter.
    """

    intercept: str | None = None
    terms: tuple = ()  # (covariate_name, beta_name) pairs
    fields: tuple = ()  # field component names
    range_terms: tuple = ()  # RangeMapTerm names

    def referenced_betas(self):
        return tuple(beta for _, beta in self.terms)


class ProcessModel:
    """Mesh plus the named covariates, range terms and predictors of a model."""

    def __init__(self, mesh: TriangulatedDomain, covariates=(), range_terms=()):
        self.mesh = mesh
        self.covariates = {}
        for cov in covariates:
            if cov.name in self.covariates:
                raise SpecError(f"duplicate covariate name {cov.name!r}")
            if len(cov.values) != mesh.n_vertices:
                raise SpecError(
                    f"covariate {cov.name!r} has {len(cov.values)} values for "
                    f"{mesh.n_vertices} vertices"
                )
            self.covariates[cov.name] = cov
        self.range_terms = {}
        for term in range_terms:
            if term.name in self.range_terms:
                raise SpecError(f"duplicate range term name {term.name!r}")
            self.range_terms[term.name] = term

    def check_predictor(self, lp: LinearPredictor, fields=()):
        for cov_name, _ in lp.terms:
            if cov_name not in self.covariates:
                raise SpecError(f"predictor references unknown covariate {cov_name!r}")
        for name in lp.range_terms:
            if name not in self.range_terms:
                raise SpecError(f"predictor references unknown range term {name!r}")
        for name in lp.fields:
            if name not in fields:
                raise SpecError(f"predictor references unknown field component {name!r}")

    def eta_at_vertices(self, lp: LinearPredictor, state) -> np.ndarray:
        """eta at every mesh vertex (the quadrature nodes)."""
        eta = np.zeros(self.mesh.n_vertices)
        self._accumulate(lp, state, eta, points=None)
        return eta

    def eta_at(self, lp: LinearPredictor, state, points) -> np.ndarray:
        """eta at arbitrary in-domain points (covariates and fields interpolated)."""
        pts = _as_points(points)
        eta = np.zeros(len(pts))
        self._accumulate(lp, state, eta, points=pts)
        return eta

    def _accumulate(self, lp, state, eta, points):
        betas = state.get("betas", {})
        intercepts = state.get("intercepts", {})
        log_gammas = state.get("log_gammas", {})
        fields = state.get("fields", {})
        mesh = self.mesh

        def at(values):
            if points is None:
                return values
            return mesh.interpolate_at(values, points)

        if lp.intercept is not None:
            try:
                eta += intercepts[lp.intercept]
            except KeyError:
                raise SpecError(f"state has no intercept {lp.intercept!r}") from None
        for cov_name, beta_name in lp.terms:
            cov = self.covariates.get(cov_name)
            if cov is None:
                raise SpecError(f"unknown covariate {cov_name!r}")
            try:
                beta = betas[beta_name]
            except KeyError:
                raise SpecError(f"state has no coefficient {beta_name!r}") from None
            eta += beta * at(cov.values)
        for name in lp.fields:
            try:
                eta += at(np.asarray(fields[name], dtype=float))
            except KeyError:
                raise SpecError(f"state has no field realization {name!r}") from None
        for name in lp.range_terms:
            term = self.range_terms.get(name)
            if term is None:
                raise SpecError(f"unknown range term {name!r}")
            gamma = np.exp(log_gammas[name]) if name in log_gammas else term.gamma
            where = mesh.vertices if points is None else points
            eta -= gamma * term.distances(where)
        return eta


def eval_linear_predictor(model: ProcessModel, lp: LinearPredictor, state, p) -> float:
    """eta(p) = sum_i beta_i X_i(p) + rho(p) + interpolated fields + intercept."""
    return float(model.eta_at(lp, state, p)[0])


def intensity(model: ProcessModel, lp: LinearPredictor, state, p) -> float:
    """Point-process intensity lambda(p) = exp(eta(p))."""
    with np.errstate(over="ignore"):
        return float(np.exp(eval_linear_predictor(model, lp, state, p)))


def region_membership(mesh: TriangulatedDomain, region) -> np.ndarray:
    """Boolean mask of vertices whose dual cell belongs to the region."""
    if region is None:
        return np.ones(mesh.n_vertices, dtype=bool)
    return shapely.covers(region, shapely.points(mesh.vertices))


def region_mean(mesh: TriangulatedDomain, model, lp, state, region=None) -> float:
    """Expected point count mu(B) = sum over dual cells in B of A(s) exp(eta(s)).

    region=None integrates over the whole domain.  A region that captures
    no dual cell yields 0 with a warning.
    """
    mask = region_membership(mesh, region)
    if not mask.any():
        log.warning("region captures no dual-mesh cell; region mean is 0")
        return 0.0
    eta = model.eta_at_vertices(lp, state)
    return float(np.sum(mesh.dual_areas[mask] * np.exp(eta[mask])))


def occupancy_probability(mu) -> float:
    """P(region occupied) = 1 - exp(-mu) for a Poisson count with mean mu."""
    mu_arr = np.asarray(mu, dtype=float)
    if (mu_arr < 0).any():
        raise ValueError("region mean must be nonnegative")
    out = -np.expm1(-mu_arr)
    return float(out) if np.isscalar(mu) or mu_arr.ndim == 0 else out
