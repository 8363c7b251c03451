"""Gaussian random fields with Matern (nu=1) correlation on mesh nodes.

Two interchangeable prior representations are provided: an exact dense
covariance built from the Matern correlation function (desk scale, used as
the reference in tests) and a sparse precision matrix assembled from the
linear finite-element mass and stiffness matrices of the mesh (the
scalable path).  Both expose the same log-density and sampling interface.

Hyperparameters are carried on the (log tau, log kappa) scale throughout;
the marginal variance of the field is 1 / (4 pi tau^2 kappa^2).
"""

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.spatial.distance import squareform, pdist
from scipy.special import k0, k1

from .errors import MeshError, NumericsError

_LOG_2PI = math.log(2.0 * math.pi)
_JITTER = 1e-8
DENSE_LIMIT = 3000


@dataclass(frozen=True)
class MaternParams:
    """Matern field hyperparameters on the optimization (log) scale.

    The smoothness nu is fixed at 1; only (log_tau, log_kappa) vary.
    """

    log_tau: float
    log_kappa: float
    nu: int = 1

    def __post_init__(self):
        if self.nu != 1:
            raise ValueError("only nu = 1 is supported")
        if not (math.isfinite(self.log_tau) and math.isfinite(self.log_kappa)):
            raise ValueError("log_tau and log_kappa must be finite")

    @property
    def tau(self) -> float:
        return math.exp(self.log_tau)

    @property
    def kappa(self) -> float:
        return math.exp(self.log_kappa)


def marginal_variance(params: MaternParams) -> float:
    """Stationary variance sigma_u^2 = 1 / (4 pi tau^2 kappa^2)."""
    return 1.0 / (4.0 * math.pi * params.tau**2 * params.kappa**2)


def log_tau_for_variance(sigma2_u: float, kappa: float) -> float:
    """The log tau that yields marginal variance sigma2_u at a given kappa.

    Inverse of marginal_variance: log tau = -log(4 pi sigma_u^2 kappa^2) / 2.
    """
    if sigma2_u <= 0 or kappa <= 0:
        raise ValueError("sigma2_u and kappa must be positive")
    return -0.5 * math.log(4.0 * math.pi * sigma2_u * kappa**2)


def kappa_for_range(corr_range: float) -> float:
    """kappa from the distance at which correlation drops to ~0.13 (sqrt(8)/range)."""
    if corr_range <= 0:
        raise ValueError("range must be positive")
    return math.sqrt(8.0) / corr_range


def matern_correlation(params: MaternParams, d):
    """Matern correlation at distance d for nu = 1: kappa*d * K1(kappa*d).

    Continuous at d = 0 with value 1; strictly decreasing for d > 0.
    """
    d_arr = np.asarray(d, dtype=float)
    if (d_arr < 0).any():
        raise ValueError("distances must be nonnegative")
    x = params.kappa * d_arr
    with np.errstate(invalid="ignore"):
        out = np.where(x > 0, x * k1(np.where(x > 0, x, 1.0)), 1.0)
    return float(out) if np.isscalar(d) or d_arr.ndim == 0 else out


def matern_dcorrelation_dlogkappa(params: MaternParams, d):
    """Derivative of matern_correlation with respect to log kappa.

    d/dx [x K1(x)] = -x K0(x), so the log-kappa derivative is -(kappa d)^2 K0(kappa d);
    zero at d = 0.
    """
    d_arr = np.asarray(d, dtype=float)
    x = params.kappa * d_arr
    with np.errstate(invalid="ignore"):
        out = np.where(x > 0, -(x**2) * k0(np.where(x > 0, x, 1.0)), 0.0)
    return float(out) if np.isscalar(d) or d_arr.ndim == 0 else out


@dataclass(frozen=True)
class FieldRealization:
    """Node values of one field draw; length matches the mesh vertex count."""

    node_values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.node_values, dtype=float)
        if v.ndim != 1 or not np.isfinite(v).all():
            raise ValueError("node_values must be a finite 1-d array")
        object.__setattr__(self, "node_values", v)


def _node_values(realization) -> np.ndarray:
    if isinstance(realization, FieldRealization):
        return realization.node_values
    return np.asarray(realization, dtype=float)


class FieldPrior:
    """Zero-mean Gaussian prior over mesh node values.

    representation is "dense-covariance" or "sparse-precision"; matrix is
    the corresponding symmetric positive-definite matrix.  The Cholesky
    factor and log-determinant are computed once at construction.
    """

    def __init__(self, representation, matrix, params, dual_areas=None, stiffness=None):
        if representation not in ("dense-covariance", "sparse-precision"):
            raise ValueError(f"unknown representation {representation!r}")
        self.representation = representation
        self.params = params
        # assembly byproducts kept for hyperparameter derivatives
        self._dual_areas = dual_areas
        self._stiffness = stiffness
        self._inv = None

        if representation == "dense-covariance":
            m = np.asarray(matrix, dtype=float)
        else:
            m = matrix.tocsr()
        asym = _max_asymmetry(m)
        scale = _max_abs(m)
        if asym > 1e-10 * max(scale, 1.0):
            raise NumericsError(
                f"prior matrix asymmetric by {asym:g} (relative to scale {scale:g})"
            )
        m = _symmetrize(m)
        self.matrix = m
        dense = m if representation == "dense-covariance" else m.toarray()
        try:
            self._chol = np.linalg.cholesky(dense)
        except np.linalg.LinAlgError as e:
            raise NumericsError(f"prior matrix is not positive definite: {e}") from e
        self._logdet = 2.0 * np.log(np.diag(self._chol)).sum()
        self.n = len(dense)

    def log_density(self, realization) -> float:
        u = _node_values(realization)
        if u.shape != (self.n,):
            raise ValueError(f"realization length {u.shape} != prior dimension {self.n}")
        if self.representation == "sparse-precision":
            quad = float(u @ (self.matrix @ u))
            return -0.5 * self.n * _LOG_2PI + 0.5 * self._logdet - 0.5 * quad
        w = sla.cho_solve((self._chol, True), u)
        return -0.5 * self.n * _LOG_2PI - 0.5 * self._logdet - 0.5 * float(u @ w)

    def grad_node_values(self, realization) -> np.ndarray:
        """d log_density / d u."""
        u = _node_values(realization)
        if self.representation == "sparse-precision":
            return -(self.matrix @ u)
        return -sla.cho_solve((self._chol, True), u)

    def _inverse(self) -> np.ndarray:
        if self._inv is None:
            eye = np.eye(self.n)
            self._inv = sla.cho_solve((self._chol, True), eye)
        return self._inv

    def hyper_grads(self, realization, need_kappa=True):
        """(d log_density / d log_tau, d log_density / d log_kappa) at this prior's params.

        Only the sparse-precision path is supported; the dense path is a
        validation tool, not a fitting path.  The log_kappa derivative
        needs the dense inverse of Q (a trace term); pass need_kappa=False
        to skip it when kappa is held fixed.
        """
        if self.representation != "sparse-precision":
            raise NotImplementedError("hyperparameter gradients need the sparse path")
        u = _node_values(realization)
        q_u = self.matrix @ u
        d_logtau = self.n - float(u @ q_u)
        if not need_kappa:
            return d_logtau, None
        # dQ/dlogkappa = 4 tau^2 kappa^2 (kappa^2 C + G)
        p = self.params
        scale = 4.0 * p.tau**2 * p.kappa**2
        dq = scale * (
            sp.diags(p.kappa**2 * self._dual_areas) + self._stiffness
        )
        dq = dq.tocoo()
        qinv = self._inverse()
        trace = float(np.sum(qinv[dq.row, dq.col] * dq.data))
        quad = float(u @ (dq.tocsr() @ u))
        d_logkappa = 0.5 * trace - 0.5 * quad
        return d_logtau, d_logkappa

    def sample(self, seed) -> FieldRealization:
        rng = np.random.default_rng(seed)
        z = rng.standard_normal(self.n)
        if self.representation == "dense-covariance":
            return FieldRealization(self._chol @ z)
        # precision Q = L L^T: solve L^T x = z so that Cov(x) = Q^-1
        x = sla.solve_triangular(self._chol, z, trans="T", lower=True)
        return FieldRealization(x)


def _max_asymmetry(m) -> float:
    if sp.issparse(m):
        diff = (m - m.T).tocoo()
        return float(np.abs(diff.data).max()) if diff.nnz else 0.0
    return float(np.abs(m - m.T).max()) if m.size else 0.0


def _max_abs(m) -> float:
    if sp.issparse(m):
        return float(np.abs(m.tocoo().data).max()) if m.nnz else 0.0
    return float(np.abs(m).max()) if m.size else 0.0


def _symmetrize(m):
    if sp.issparse(m):
        return ((m + m.T) * 0.5).tocsr()
    return (m + m.T) * 0.5


def build_dense_covariance(mesh, params: MaternParams, dense_limit=DENSE_LIMIT) -> FieldPrior:
    """Exact Matern covariance over mesh vertices, with diagonal jitter.

    Entries are sigma_u^2 * matern_correlation(dist(i, j)); 1e-8 * sigma_u^2
    is added to the diagonal so the Cholesky factorization tolerates
    near-duplicate vertices.
    """
    n = mesh.n_vertices
    if n > dense_limit:
        raise ValueError(
            f"mesh has {n} vertices, over the dense limit {dense_limit}; "
            "use build_sparse_precision instead"
        )
    d = pdist(mesh.vertices)
    if len(d) and d.min() == 0.0:
        raise MeshError("mesh has duplicate vertices (zero pairwise distance)")
    sigma2 = marginal_variance(params)
    cov = sigma2 * squareform(matern_correlation(params, d))
    np.fill_diagonal(cov, sigma2 * (1.0 + _JITTER))
    return FieldPrior("dense-covariance", cov, params)


def fem_matrices(mesh):
    """Lumped mass diagonal and stiffness matrix of the P1 basis on the mesh.

    The lumped mass diagonal coincides with the barycentric dual-cell
    areas.  Cached on the mesh.
    """
    cached = mesh._cache.get("fem")
    if cached is not None:
        return cached
    v, t = mesh.vertices, mesh.triangles
    areas = mesh.triangle_areas
    if (areas <= 0).any():
        raise MeshError("degenerate triangle in finite-element assembly")
    # gradient of the hat function at vertex i: (b_i, c_i) / (2 A)
    b = np.empty((len(t), 3))
    c = np.empty((len(t), 3))
    for k, (j, l) in enumerate(((1, 2), (2, 0), (0, 1))):
        b[:, k] = v[t[:, j], 1] - v[t[:, l], 1]
        c[:, k] = v[t[:, l], 0] - v[t[:, j], 0]
    rows, cols, vals = [], [], []
    for i in range(3):
        for j in range(3):
            rows.append(t[:, i])
            cols.append(t[:, j])
            vals.append((b[:, i] * b[:, j] + c[:, i] * c[:, j]) / (4.0 * areas))
    g = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(mesh.n_vertices, mesh.n_vertices),
    ).tocsr()
    g = _symmetrize(g)
    out = (mesh.dual_areas.copy(), g)
    mesh._cache["fem"] = out
    return out


def build_sparse_precision(mesh, params: MaternParams) -> FieldPrior:
    """Finite-element precision Q = tau^2 (kappa^4 C + 2 kappa^2 G + G C^-1 G).

    C is the lumped (diagonal) mass matrix, G the stiffness matrix of the
    linear basis; the result is the sparse Gaussian-Markov approximation
    to the nu = 1 Matern field on the mesh.
    """
    c_diag, g = fem_matrices(mesh)
    if (c_diag <= 0).any():
        raise MeshError("singular lumped mass matrix (degenerate triangle)")
    tau2 = params.tau**2
    kappa2 = params.kappa**2
    gcg = (g @ sp.diags(1.0 / c_diag)) @ g
    q = tau2 * (kappa2**2 * sp.diags(c_diag) + 2.0 * kappa2 * g + gcg)
    return FieldPrior(
        "sparse-precision", q.tocsr(), params, dual_areas=c_diag, stiffness=g
    )


def field_log_density(realization, prior: FieldPrior) -> float:
    """Mean-zero multivariate normal log-density, normalizing constant included."""
    return prior.log_density(realization)


def sample_field(prior: FieldPrior, seed) -> FieldRealization:
    """One field draw; deterministic given the seed."""
    return prior.sample(seed)
