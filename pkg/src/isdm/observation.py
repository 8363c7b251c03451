"""Per-dataset observation log-likelihoods.

Each supported data type contributes an independent term to the joint
likelihood given the latent log-intensity.  The functions here are pure:
they take the linear predictor already evaluated at the relevant sites
(and, for point patterns, at the quadrature vertices) so the same kernels
serve direct unit tests and the assembled joint model.

Numerical guards: occupancy probabilities are clamped to
[1e-12, 1 - 1e-12] before logs, with clamp events counted in an optional
diagnostics dict; Poisson means may overflow to inf during line search,
which propagates to a -inf log-likelihood rather than an exception.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln
from shapely.geometry import Polygon

from .errors import DataError
from .mesh import _as_points

_P_FLOOR = 1e-12
# Regions larger than this multiple of max_edge are refused: the
# constant-surface approximation behind the regional likelihood only
# holds for regions small relative to the mesh resolution.
REGION_DIAMETER_FACTOR = 3.0


# ---------------------------------------------------------------------------
# dataset containers


@dataclass(frozen=True)
class CountDataset:
    """Point counts r at sites, with optional visit durations.

    With use_duration_offset, log(duration) enters the count mean as an
    offset (log E = alpha + log t).  With overdispersion, each unique site
    gets a Gaussian log-scale noise term estimated jointly.
    """

    dataset_id: str
    sites: np.ndarray
    counts: np.ndarray
    durations: np.ndarray | None = None
    use_duration_offset: bool = True
    overdispersion: bool = False

    def __post_init__(self):
        sites = _as_points(self.sites) if len(np.atleast_1d(self.sites)) else np.empty((0, 2))
        counts = np.asarray(self.counts)
        if counts.shape != (len(sites),):
            raise ValueError("counts must align with sites")
        if counts.size and (counts < 0).any():
            raise ValueError("counts must be nonnegative")
        if counts.size and not np.issubdtype(counts.dtype, np.integer):
            if not np.all(counts == np.floor(counts)):
                raise ValueError("counts must be integers")
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "counts", counts.astype(np.int64))
        if self.durations is not None:
            d = np.asarray(self.durations, dtype=float)
            if d.shape != (len(sites),):
                raise ValueError("durations must align with sites")
            if d.size and (d <= 0).any():
                raise ValueError("durations must be positive")
            object.__setattr__(self, "durations", d)
        # map each record to its unique site, for the overdispersion terms
        if len(sites):
            _, index = np.unique(sites, axis=0, return_inverse=True)
        else:
            index = np.empty(0, dtype=np.int64)
        object.__setattr__(self, "site_index", index.reshape(-1))

    @property
    def n_unique_sites(self) -> int:
        return int(self.site_index.max()) + 1 if len(self.site_index) else 0


@dataclass(frozen=True)
class OccupancyDataset:
    """Detection/non-detection records over repeated visits per site.

    log_effort is a known offset on the log-intensity scale (per site or
    scalar): the per-visit detection rate is effort * lambda(site).
    """

    dataset_id: str
    sites: np.ndarray
    visits: np.ndarray
    detections: np.ndarray
    log_effort: float | np.ndarray | None = None

    def __post_init__(self):
        sites = _as_points(self.sites) if len(np.atleast_1d(self.sites)) else np.empty((0, 2))
        visits = np.asarray(self.visits, dtype=np.int64)
        detections = np.asarray(self.detections, dtype=np.int64)
        if visits.shape != (len(sites),) or detections.shape != (len(sites),):
            raise ValueError("visits and detections must align with sites")
        if visits.size and (visits < 1).any():
            raise ValueError("visits must be >= 1")
        if detections.size and ((detections < 0) | (detections > visits)).any():
            raise ValueError("detections must satisfy 0 <= n <= visits")
        object.__setattr__(self, "sites", sites)
        object.__setattr__(self, "visits", visits)
        object.__setattr__(self, "detections", detections)
        if self.log_effort is not None:
            eff = np.broadcast_to(
                np.asarray(self.log_effort, dtype=float), (len(sites),)
            ).copy()
            if not np.isfinite(eff).all():
                raise ValueError("log_effort must be finite")
            object.__setattr__(self, "log_effort", eff)


@dataclass(frozen=True)
class PresenceOnlyDataset:
    """Observed point locations only; observation bias enters through log q(s).

    bias_covariates/bias_field name the pieces of the bias linear
    predictor; bias_intercept controls whether the dataset estimates its
    own thinning intercept (it aliases the process intercept when only
    presence-only data is present).
    """

    dataset_id: str
    points: np.ndarray
    bias_covariates: tuple = ()
    bias_field: str | None = None
    bias_intercept: bool = False

    def __post_init__(self):
        pts = (
            _as_points(self.points)
            if len(np.atleast_1d(self.points))
            else np.empty((0, 2))
        )
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "bias_covariates", tuple(self.bias_covariates))

    @property
    def n_points(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class RegionalListDataset:
    """Presence/absence over small regions (constant-surface approximation)."""

    dataset_id: str
    regions: tuple
    present: np.ndarray

    def __post_init__(self):
        present = np.asarray(self.present, dtype=bool)
        if len(self.regions) != len(present):
            raise ValueError("regions and present flags must align")
        for r in self.regions:
            if not isinstance(r, Polygon) or r.is_empty:
                raise ValueError("regions must be non-empty polygons")
        object.__setattr__(self, "regions", tuple(self.regions))
        object.__setattr__(self, "present", present)


@dataclass
class ObservationParams:
    """The per-dataset parameter block theta_d.

    intercept is the effort/area intercept (alpha = log E for counts,
    log E_occ for occupancy); site_effects are the overdispersion latents
    eps aligned with the dataset's unique sites; log_overdisp_sd is
    log sigma_eps.
    """

    intercept: float = 0.0
    site_effects: np.ndarray | None = None
    log_overdisp_sd: float = 0.0
    bias_intercept: float = 0.0
    bias_coefs: tuple = ()


# ---------------------------------------------------------------------------
# likelihood kernels (value + derivative wrt the per-row linear predictor)


def poisson_count_terms(counts, log_theta):
    counts = np.asarray(counts, dtype=float)
    log_theta = np.asarray(log_theta, dtype=float)
    with np.errstate(over="ignore"):
        theta = np.exp(log_theta)
    ll = float(np.sum(counts * log_theta - theta - gammaln(counts + 1.0)))
    return ll, counts - theta


def occupancy_cloglog_terms(visits, detections, zeta, diagnostics=None):
    """Binomial cloglog terms; zeta = eta + log E_occ per site.

    log(1 - p) = -lambda exactly (lambda = e^zeta), so only log p needs the
    clamp; the binomial coefficient is omitted (constant in parameters).
    """
    n = np.asarray(detections, dtype=float)
    big_n = np.asarray(visits, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    with np.errstate(over="ignore"):
        lam = np.exp(zeta)
    p_raw = -np.expm1(-lam)
    p = np.clip(p_raw, _P_FLOOR, 1.0 - _P_FLOOR)
    if diagnostics is not None:
        clamped = int(np.sum(p != p_raw))
        if clamped:
            diagnostics["occupancy_p_clamped"] = (
                diagnostics.get("occupancy_p_clamped", 0) + clamped
            )
    miss = big_n - n
    # lam can overflow to inf; keep 0 * inf out of the sums.
    miss_lam = miss * np.where(miss > 0.0, lam, 0.0)
    ll = float(np.sum(n * np.log(p) - miss_lam))
    # d/dzeta: n * lam * e^{-lam} / p - (N - n) * lam; lam*e^{-lam} = exp(zeta - lam)
    zl = np.where(np.isfinite(lam), zeta - lam, -np.inf)
    grad = n * np.exp(zl) / p - miss_lam
    return ll, grad


def po_point_process_terms(log_phi_points, log_phi_vertices, dual_areas):
    """Core of both presence-only forms: sum log phi(s_i) - quadrature integral.

    Returns (value, grad wrt log phi at data points, grad wrt log phi at
    vertices).
    """
    log_phi_points = np.asarray(log_phi_points, dtype=float)
    log_phi_vertices = np.asarray(log_phi_vertices, dtype=float)
    with np.errstate(over="ignore"):
        weighted = np.asarray(dual_areas, dtype=float) * np.exp(log_phi_vertices)
    value = float(np.sum(log_phi_points) - np.sum(weighted))
    return value, np.ones(len(log_phi_points)), -weighted


def regional_terms(present, mu, diagnostics=None):
    """Regional list terms; mu is the region mean count per record."""
    present = np.asarray(present, dtype=bool)
    mu = np.asarray(mu, dtype=float)
    p_raw = -np.expm1(-mu)
    p = np.clip(p_raw, _P_FLOOR, 1.0 - _P_FLOOR)
    if diagnostics is not None:
        clamped = int(np.sum(present & (p != p_raw)))
        if clamped:
            diagnostics["regional_p_clamped"] = (
                diagnostics.get("regional_p_clamped", 0) + clamped
            )
    ll = float(np.sum(np.where(present, np.log(p), -mu)))
    grad_mu = np.where(present, np.exp(-mu) / p, -1.0)
    return ll, grad_mu


# ---------------------------------------------------------------------------
# public per-dataset log-likelihoods


def count_loglik(ds: CountDataset, eta_sites, params: ObservationParams) -> float:
    """Poisson count log-likelihood, Sum r log theta - theta - log r!.

    log theta = intercept + [log duration] + eta + [site effect]; the
    site-effect Normal(0, sigma_eps^2) penalty is a prior contribution and
    lives with the joint model, not here.
    """
    log_theta = params.intercept + np.asarray(eta_sites, dtype=float)
    if ds.use_duration_offset and ds.durations is not None:
        log_theta = log_theta + np.log(ds.durations)
    if ds.overdispersion:
        if params.site_effects is None:
            raise ValueError("overdispersion enabled but no site_effects given")
        log_theta = log_theta + np.asarray(params.site_effects)[ds.site_index]
    ll, _ = poisson_count_terms(ds.counts, log_theta)
    return ll


def occupancy_loglik(
    ds: OccupancyDataset, eta_sites, params: ObservationParams, diagnostics=None
) -> float:
    """Binomial cloglog log-likelihood with p = 1 - exp(-exp(eta + log E_occ))."""
    zeta = np.asarray(eta_sites, dtype=float) + params.intercept
    ll, _ = occupancy_cloglog_terms(ds.visits, ds.detections, zeta, diagnostics)
    return ll


def po_loglik_direct(
    ds: PresenceOnlyDataset, log_phi_points, log_phi_vertices, dual_areas
) -> float:
    """Thinned point-process log-likelihood, direct form.

    Sum_i log phi(s_i) - Sum_v A(v) phi(v) - log M!, with log phi = eta +
    log q evaluated by the caller at the data points and at the quadrature
    vertices.
    """
    log_phi_points = np.asarray(log_phi_points, dtype=float)
    if log_phi_points.shape != (ds.n_points,):
        raise ValueError("log_phi_points must align with the dataset points")
    with np.errstate(over="ignore"):
        integral = float(np.asarray(dual_areas) @ np.exp(log_phi_vertices))
    return float(log_phi_points.sum()) - integral - math.lgamma(ds.n_points + 1)


def po_loglik_quadrature(
    ds: PresenceOnlyDataset, log_phi_points, log_phi_vertices, dual_areas
) -> float:
    """Thinned point-process log-likelihood as a weighted Poisson regression.

    Quadrature nodes sit at the mesh vertices with the dual areas as
    weights and pseudo-response 0; data points carry unit nominal weight
    with pseudo-response 1 in the response term only, contributing
    log phi(s_i) each (the quadrature nodes already integrate phi over the
    whole domain).  Exceeds the direct form by exactly log M!, the
    data-only constant.
    """
    log_phi_points = np.asarray(log_phi_points, dtype=float)
    if log_phi_points.shape != (ds.n_points,):
        raise ValueError("log_phi_points must align with the dataset points")
    m = ds.n_points
    v = len(np.atleast_1d(log_phi_vertices))
    log_phi = np.concatenate([log_phi_points, np.asarray(log_phi_vertices, dtype=float)])
    weights = np.concatenate([np.ones(m), np.asarray(dual_areas, dtype=float)])
    response = np.concatenate([np.ones(m), np.zeros(v)])
    area_weight = np.concatenate([np.zeros(m), np.asarray(dual_areas, dtype=float)])
    with np.errstate(over="ignore"):
        terms = weights * response * log_phi - area_weight * np.exp(log_phi)
    return float(terms.sum())


def region_diameter(region: Polygon) -> float:
    pts = np.asarray(region.convex_hull.exterior.coords)
    diff = pts[:, None, :] - pts[None, :, :]
    return float(np.sqrt((diff**2).sum(axis=2)).max())


def check_regions(ds: RegionalListDataset, mesh, factor=REGION_DIAMETER_FACTOR):
    """Reject regions too large for the constant-surface approximation.

    Also requires every region to capture at least one dual-mesh cell.
    """
    if mesh.max_edge is not None:
        limit = factor * mesh.max_edge
        for i, region in enumerate(ds.regions):
            diam = region_diameter(region)
            if diam > limit:
                raise DataError(
                    f"region {i} of dataset {ds.dataset_id!r} has diameter "
                    f"{diam:g}, above the small-region limit {limit:g} "
                    f"({factor} * max_edge); the constant-surface "
                    "approximation does not apply",
                    row=i,
                )
    from .process import region_membership

    for i, region in enumerate(ds.regions):
        if not region_membership(mesh, region).any():
            raise DataError(
                f"region {i} of dataset {ds.dataset_id!r} does not intersect "
                "the triangulated domain",
                row=i,
            )


def regional_list_loglik(
    ds: RegionalListDataset, mu_regions, mesh=None, diagnostics=None
) -> float:
    """Presence/absence over regions: present ? log(1 - e^-mu) : -mu.

    Pass the mesh to enforce the small-region diameter precondition.
    """
    if mesh is not None:
        check_regions(ds, mesh)
    mu = np.asarray(mu_regions, dtype=float)
    if mu.shape != (len(ds.regions),):
        raise ValueError("mu_regions must align with the dataset regions")
    ll, _ = regional_terms(ds.present, mu, diagnostics)
    return ll


_THINNING_KINDS = ("sampling", "detection", "reporting")


def thinning_link(kind, coefficients, covariate_values=None, p=None):
    """Logistic thinning probability b(s), psi(s) or gamma_rep(s).

    coefficients[0] is the intercept; the rest pair with the columns of
    covariate_values (one row per point).  p is accepted for signature
    symmetry when covariate_values already holds the values at the points.
    """
    if kind not in _THINNING_KINDS:
        raise ValueError(f"kind must be one of {_THINNING_KINDS}, got {kind!r}")
    coefs = np.asarray(coefficients, dtype=float)
    if coefs.ndim != 1 or len(coefs) < 1:
        raise ValueError("coefficients must be a 1-d array with an intercept")
    lin = coefs[0]
    if len(coefs) > 1:
        x = np.asarray(covariate_values, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if x.shape[1] != len(coefs) - 1:
            raise ValueError(
                f"{x.shape[1]} covariate columns for {len(coefs) - 1} coefficients"
            )
        lin = lin + x @ coefs[1:]
    out = expit(lin)
    return float(out) if np.ndim(out) == 0 else out
