"""Joint model over heterogeneous datasets: assembly, MAP fit, curvature.

A ModelSpec binds one process model (covariates, range terms, random-field
components) to any number of datasets, each with its own observation
likelihood.  The spec compiles to sparse design matrices mapping one flat
parameter vector to the per-record linear predictors, so the joint
negative log-likelihood and its exact gradient are cheap to evaluate:

    - field components contribute their Gaussian log-density (sparse
      finite-element precision by default);
    - fixed effects, hyperparameters, range decay and overdispersion
      scales carry Gaussian priors (penalties on the log scale where
      positivity is required);
    - datasets contribute through the `observation` kernels, with
      presence-only patterns entering in the quadrature form.

Estimation is penalized maximum likelihood (MAP) by limited-memory
quasi-Newton descent, optionally profiling the latent field values with
an inner Newton solve on large meshes.  Curvature at the optimum comes
from central finite differences of the analytic gradient and feeds both
standard errors and delta-method prediction uncertainty.

Parameter layout (deterministic, in this order): beta coefficients
(sorted by name), intercepts (sorted by key), per-dataset bias blocks
(binding order; intercept first, then coefficients), log gamma per range
term (sorted), log overdispersion sd per dataset (binding order), field
hyperparameters [log_tau, log_kappa] per component (sorted), field node
values per component (sorted), overdispersion site effects per dataset
(binding order).
"""

import logging
import math
from dataclasses import dataclass, field as dataclass_field, replace

import numpy as np
import scipy.linalg as sla
import scipy.optimize
import scipy.sparse as sp

from .errors import NumericsError, OutsideDomainError, SpecError
from .mesh import _as_points
from .observation import (
    CountDataset,
    OccupancyDataset,
    PresenceOnlyDataset,
    RegionalListDataset,
    check_regions,
    occupancy_cloglog_terms,
    poisson_count_terms,
    po_point_process_terms,
    regional_terms,
)
from .process import LinearPredictor, ProcessModel, region_membership
from .random_field import (
    MaternParams,
    build_dense_covariance,
    build_sparse_precision,
)

log = logging.getLogger(__name__)

_LOG_2PI = math.log(2.0 * math.pi)
# latent profiling kicks in above this vertex count unless overridden
PROFILE_THRESHOLD = 500


# ---------------------------------------------------------------------------
# specification types


@dataclass(frozen=True)
class FieldComponent:
    """One random-field component (a species field or the shared bias field).

    zero_integral_sd, when set, softly penalizes the area-weighted
    integral of the field toward zero (an identifiability aid for the
    bias field); off by default.
    """

    name: str
    params: MaternParams
    role: str = "ecological"  # "ecological" | "bias"
    fix_log_tau: bool = False
    fix_log_kappa: bool = False
    representation: str = "sparse-precision"
    zero_integral_sd: float | None = None

    def __post_init__(self):
        if self.role not in ("ecological", "bias"):
            raise SpecError(f"unknown field role {self.role!r}")
        if self.representation not in ("sparse-precision", "dense-covariance"):
            raise SpecError(f"unknown representation {self.representation!r}")
        if self.zero_integral_sd is not None and self.zero_integral_sd <= 0:
            raise SpecError("zero_integral_sd must be positive when set")


@dataclass(frozen=True)
class DatasetBinding:
    """One dataset attached to the shared process through its predictor."""

    dataset: object
    predictor: LinearPredictor
    species: str | None = None


@dataclass(frozen=True)
class PriorConfig:
    """Penalty settings for MAP estimation.

    fixed_sd is the Normal(0, sd^2) prior on every fixed effect (betas,
    intercepts, bias coefficients); None drops the penalty entirely (flat
    prior).  Hyperparameter priors are Normal(center, hyper_sd) on the log
    scale, centered on each component's initial values unless overridden
    in hyper_centers.
    """

    fixed_sd: float | None = 10.0
    hyper_sd: float = 1.0
    hyper_centers: dict = dataclass_field(default_factory=dict)
    overdisp_prior: tuple = (0.0, 1.0)  # Normal on log sigma_eps


class ModelSpec:
    """The bound collection of datasets sharing one process model."""

    def __init__(self, process: ProcessModel, components=(), bindings=(), priors=None):
        self.process = process
        self.components = {}
        for comp in components:
            if comp.name in self.components:
                raise SpecError(f"duplicate field component {comp.name!r}")
            self.components[comp.name] = comp
        bias = [c.name for c in self.components.values() if c.role == "bias"]
        if len(bias) > 1:
            raise SpecError("at most one bias field component is supported")
        self.bias_component = bias[0] if bias else None
        self.bindings = list(bindings)
        self.priors = priors if priors is not None else PriorConfig()
        self._compiled = None
        self._validate()

    def _validate(self):
        if not self.bindings:
            log.warning("model specification binds no datasets (prior-only)")
        for comp in self.components.values():
            if comp.representation == "dense-covariance" and not (
                comp.fix_log_tau and comp.fix_log_kappa
            ):
                raise SpecError(
                    f"component {comp.name!r}: the dense-covariance representation "
                    "is a validation path; fitting hyperparameters requires "
                    "sparse-precision (or fix both hyperparameters)"
                )
        ecological = {
            n for n, c in self.components.items() if c.role == "ecological"
        }
        seen_ids = set()
        for b in self.bindings:
            ds = b.dataset
            if ds.dataset_id in seen_ids:
                raise SpecError(f"duplicate dataset id {ds.dataset_id!r}")
            seen_ids.add(ds.dataset_id)
            self.process.check_predictor(b.predictor, fields=ecological)
            if isinstance(ds, PresenceOnlyDataset):
                if ds.bias_field is not None and ds.bias_field != self.bias_component:
                    raise SpecError(
                        f"dataset {ds.dataset_id!r} references bias field "
                        f"{ds.bias_field!r}, which is not the spec's bias component"
                    )
                for name in ds.bias_covariates:
                    if name not in self.process.covariates:
                        raise SpecError(
                            f"dataset {ds.dataset_id!r}: unknown bias covariate {name!r}"
                        )
            elif isinstance(ds, RegionalListDataset):
                check_regions(ds, self.process.mesh)
            self._check_inside(ds)

    def _check_inside(self, ds):
        pts = None
        if isinstance(ds, (CountDataset, OccupancyDataset)):
            pts = ds.sites
        elif isinstance(ds, PresenceOnlyDataset):
            pts = ds.points
        if pts is None or len(pts) == 0:
            return
        inside = self.process.mesh.contains(pts)
        if not inside.all():
            bad = np.where(~inside)[0]
            raise OutsideDomainError(
                f"dataset {ds.dataset_id!r}: {len(bad)} records fall outside the "
                f"domain (record indices {bad[:10].tolist()}{'...' if len(bad) > 10 else ''})",
                points=pts[bad],
            )

    def compiled(self) -> "JointModel":
        if self._compiled is None:
            self._compiled = JointModel(self)
        return self._compiled


# ---------------------------------------------------------------------------
# parameter layout


class ParameterLayout:
    """Deterministic flat ordering of every parameter in a spec.

    See the module docstring for the block order.  Coordinates carry
    readable names ("beta[x]", "hyper[xi:log_tau]", "field[xi:12]", ...);
    flattening/unflattening is a bijection by construction.
    """

    def __init__(self, spec: ModelSpec):
        self.blocks = []  # (kind, key, offset, size)
        self._index = {}
        self.names = []
        offset = 0

        def add(kind, key, size, names):
            nonlocal offset
            self.blocks.append((kind, key, offset, size))
            self._index[(kind, key)] = (offset, size)
            self.names.extend(names)
            offset += size

        betas = sorted(
            {bn for b in spec.bindings for bn in b.predictor.referenced_betas()}
        )
        for name in betas:
            add("beta", name, 1, [f"beta[{name}]"])
        alphas = sorted(
            {
                b.predictor.intercept
                for b in spec.bindings
                if b.predictor.intercept is not None
            }
        )
        for key in alphas:
            add("alpha", key, 1, [f"alpha[{key}]"])
        for b in spec.bindings:
            ds = b.dataset
            if isinstance(ds, PresenceOnlyDataset):
                names, size = [], 0
                if ds.bias_intercept:
                    names.append(f"bias[{ds.dataset_id}:intercept]")
                    size += 1
                for cov in ds.bias_covariates:
                    names.append(f"bias[{ds.dataset_id}:{cov}]")
                    size += 1
                if size:
                    add("bias", ds.dataset_id, size, names)
        for name in sorted(spec.process.range_terms):
            add("log_gamma", name, 1, [f"log_gamma[{name}]"])
        for b in spec.bindings:
            ds = b.dataset
            if isinstance(ds, CountDataset) and ds.overdispersion:
                add("log_odsd", ds.dataset_id, 1, [f"log_odsd[{ds.dataset_id}]"])
        comp_names = sorted(spec.components)
        for name in comp_names:
            add(
                "hyper",
                name,
                2,
                [f"hyper[{name}:log_tau]", f"hyper[{name}:log_kappa]"],
            )
        n = spec.process.mesh.n_vertices
        for name in comp_names:
            add("field", name, n, [f"field[{name}:{i}]" for i in range(n)])
        for b in spec.bindings:
            ds = b.dataset
            if isinstance(ds, CountDataset) and ds.overdispersion:
                k = ds.n_unique_sites
                add(
                    "eps",
                    ds.dataset_id,
                    k,
                    [f"eps[{ds.dataset_id}:{i}]" for i in range(k)],
                )

        self.total = offset
        self.fixed = np.zeros(self.total, dtype=bool)
        self.latent_mask = np.zeros(self.total, dtype=bool)
        for kind, key, off, size in self.blocks:
            if kind == "hyper":
                comp = spec.components[key]
                self.fixed[off] = comp.fix_log_tau
                self.fixed[off + 1] = comp.fix_log_kappa
            elif kind in ("field", "eps"):
                self.latent_mask[off : off + size] = True

    def has(self, kind, key) -> bool:
        return (kind, key) in self._index

    def slice_of(self, kind, key) -> slice:
        off, size = self._index[(kind, key)]
        return slice(off, off + size)

    def coord(self, kind, key, sub=0) -> int:
        off, size = self._index[(kind, key)]
        if not 0 <= sub < size:
            raise IndexError(f"sub-index {sub} out of range for block {kind}[{key}]")
        return off + sub

    def singleton_coords(self):
        """(name, index) for every non-latent coordinate."""
        for kind, key, off, size in self.blocks:
            if kind in ("field", "eps"):
                continue
            for i in range(size):
                yield self.names[off + i], off + i


@dataclass
class ParameterVector:
    """A point in parameter space under a fixed layout."""

    layout: ParameterLayout
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.layout.total,):
            raise ValueError(
                f"expected {self.layout.total} parameter values, got {v.shape}"
            )
        self.values = v

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.layout, self.values.copy())

    def get(self, kind, key):
        out = self.values[self.layout.slice_of(kind, key)]
        return float(out[0]) if out.size == 1 else out.copy()

    def set(self, kind, key, value):
        self.values[self.layout.slice_of(kind, key)] = value

    def named(self) -> dict:
        """Values of all non-latent coordinates, keyed by coordinate name."""
        return {
            name: float(self.values[i])
            for name, i in self.layout.singleton_coords()
        }


# ---------------------------------------------------------------------------
# compiled joint model


@dataclass
class _Design:
    """Per-binding sparse designs mapping the flat vector to predictors."""

    binding: DatasetBinding
    kind: str
    rows_sites: object = None  # csr over record rows
    offset: np.ndarray | None = None
    gamma_sites: list = dataclass_field(default_factory=list)
    rows_verts: object = None  # csr over mesh vertices
    gamma_verts: list = dataclass_field(default_factory=list)
    region_masks: list | None = None
    n_records: int = 0


class JointModel:
    """A ModelSpec compiled to designs; evaluates the joint objective."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.mesh = spec.process.mesh
        self.layout = ParameterLayout(spec)
        self._prior_cache = {}
        self._used_gammas = set()
        self.designs = [self._compile_binding(b) for b in spec.bindings]
        self.dead_coords = self._find_dead()
        self.has_regional = any(d.kind == "regional" for d in self.designs)
        self.n_records = int(sum(d.n_records for d in self.designs))

    # -- compilation --

    def _rows(self, lp: LinearPredictor, points=None, po_ds=None):
        """Sparse design rows for a predictor at points (None = mesh vertices).

        Returns (csr_matrix, [(log_gamma coordinate, distances)]).  When
        po_ds is given, its bias block (intercept, coefficients, bias
        field) is appended to each row.
        """
        lay = self.layout
        mesh = self.mesh
        if points is None:
            n_rows = mesh.n_vertices
            tri_idx = None
        else:
            points = _as_points(points)
            n_rows = len(points)
            tri_idx, bary = mesh.locate_many(points)
            if (tri_idx < 0).any():
                raise OutsideDomainError(
                    f"{int((tri_idx < 0).sum())} design points outside the domain"
                )
        rows, cols, vals = [], [], []
        arange = np.arange(n_rows)

        def put(col, values):
            rows.append(arange)
            cols.append(np.full(n_rows, col))
            vals.append(np.broadcast_to(values, (n_rows,)))

        def put_field(comp_name):
            off = lay.slice_of("field", comp_name).start
            if points is None:
                rows.append(arange)
                cols.append(off + arange)
                vals.append(np.ones(n_rows))
            else:
                corners = mesh.triangles[tri_idx]
                for k in range(3):
                    rows.append(arange)
                    cols.append(off + corners[:, k])
                    vals.append(bary[:, k])

        def covariate_values(name):
            cov = self.spec.process.covariates[name]
            if points is None:
                return cov.values
            return (cov.values[mesh.triangles[tri_idx]] * bary).sum(axis=1)

        if lp.intercept is not None:
            put(lay.coord("alpha", lp.intercept), 1.0)
        for cov_name, beta_name in lp.terms:
            put(lay.coord("beta", beta_name), covariate_values(cov_name))
        for comp_name in lp.fields:
            put_field(comp_name)
        gammas = []
        for term_name in lp.range_terms:
            term = self.spec.process.range_terms[term_name]
            where = mesh.vertices if points is None else points
            gammas.append((lay.coord("log_gamma", term_name), term.distances(where)))
            self._used_gammas.add(term_name)
        if po_ds is not None:
            sub = 0
            if po_ds.bias_intercept:
                put(lay.coord("bias", po_ds.dataset_id, sub), 1.0)
                sub += 1
            for cov_name in po_ds.bias_covariates:
                put(lay.coord("bias", po_ds.dataset_id, sub), covariate_values(cov_name))
                sub += 1
            if po_ds.bias_field is not None:
                put_field(po_ds.bias_field)
        if rows:
            mat = sp.coo_matrix(
                (
                    np.concatenate(vals),
                    (np.concatenate(rows), np.concatenate(cols)),
                ),
                shape=(n_rows, lay.total),
            ).tocsr()
        else:
            mat = sp.csr_matrix((n_rows, lay.total))
        return mat, gammas

    def _compile_binding(self, b: DatasetBinding) -> _Design:
        ds = b.dataset
        lay = self.layout
        if isinstance(ds, CountDataset):
            mat, gammas = self._rows(b.predictor, ds.sites)
            offset = np.zeros(len(ds.sites))
            if ds.use_duration_offset and ds.durations is not None:
                offset = np.log(ds.durations)
            if ds.overdispersion:
                eps_off = lay.slice_of("eps", ds.dataset_id).start
                eps = sp.coo_matrix(
                    (
                        np.ones(len(ds.sites)),
                        (np.arange(len(ds.sites)), eps_off + ds.site_index),
                    ),
                    shape=mat.shape,
                ).tocsr()
                mat = mat + eps
            return _Design(
                b, "count", rows_sites=mat, offset=offset, gamma_sites=gammas,
                n_records=len(ds.sites),
            )
        if isinstance(ds, OccupancyDataset):
            mat, gammas = self._rows(b.predictor, ds.sites)
            offset = ds.log_effort  # known per-site offset, may be None
            return _Design(
                b, "occupancy", rows_sites=mat, offset=offset,
                gamma_sites=gammas, n_records=len(ds.sites),
            )
        if isinstance(ds, PresenceOnlyDataset):
            mat_p, gammas_p = self._rows(b.predictor, ds.points, po_ds=ds)
            mat_v, gammas_v = self._rows(b.predictor, None, po_ds=ds)
            return _Design(
                b, "po", rows_sites=mat_p, gamma_sites=gammas_p,
                rows_verts=mat_v, gamma_verts=gammas_v, n_records=ds.n_points,
            )
        if isinstance(ds, RegionalListDataset):
            mat_v, gammas_v = self._rows(b.predictor, None)
            masks = [region_membership(self.mesh, r) for r in ds.regions]
            return _Design(
                b, "regional", rows_verts=mat_v, gamma_verts=gammas_v,
                region_masks=masks, n_records=len(ds.regions),
            )
        raise SpecError(f"unsupported dataset type {type(ds).__name__}")

    def _find_dead(self):
        """Structurally unused coordinates: no design row or penalty references them."""
        dead = []
        for name in sorted(self.spec.process.range_terms):
            if name not in self._used_gammas:
                dead.append(self.layout.coord("log_gamma", name))
        return np.asarray(dead, dtype=np.int64)

    # -- priors and field densities --

    def _prior(self, comp: FieldComponent, values: np.ndarray):
        lt = values[self.layout.coord("hyper", comp.name, 0)]
        lk = values[self.layout.coord("hyper", comp.name, 1)]
        cached = self._prior_cache.get(comp.name)
        if cached is not None and cached[0] == (lt, lk):
            return cached[1]
        params = MaternParams(log_tau=float(lt), log_kappa=float(lk))
        if comp.representation == "dense-covariance":
            prior = build_dense_covariance(self.mesh, params)
        else:
            prior = build_sparse_precision(self.mesh, params)
        self._prior_cache[comp.name] = ((lt, lk), prior)
        return prior

    def _hyper_center(self, comp: FieldComponent):
        override = self.spec.priors.hyper_centers.get(comp.name)
        if override is not None:
            return float(override[0]), float(override[1])
        return comp.params.log_tau, comp.params.log_kappa

    def fixed_effect_coords(self) -> np.ndarray:
        coords = []
        for kind, key, off, size in self.layout.blocks:
            if kind in ("beta", "alpha", "bias"):
                coords.extend(range(off, off + size))
        return np.asarray(coords, dtype=np.int64)

    # -- evaluation --

    def negloglik_grad(self, values, diagnostics=None, want_terms=False):
        """Joint negative log-likelihood and its exact gradient.

        The returned value is -fsum(term values), so it is invariant to
        dataset permutation to the last bit; the gradient covers the full
        layout (fixed coordinates included).
        """
        lay = self.layout
        spec = self.spec
        terms = {}
        grad = np.zeros(lay.total)

        for name in sorted(spec.components):
            comp = spec.components[name]
            prior = self._prior(comp, values)
            sl = lay.slice_of("field", name)
            u = values[sl]
            terms[f"field[{name}]"] = prior.log_density(u)
            grad[sl] += prior.grad_node_values(u)
            free_tau = not lay.fixed[lay.coord("hyper", name, 0)]
            free_kappa = not lay.fixed[lay.coord("hyper", name, 1)]
            if free_tau or free_kappa:
                d_lt, d_lk = prior.hyper_grads(u, need_kappa=free_kappa)
                if free_tau:
                    grad[lay.coord("hyper", name, 0)] += d_lt
                if free_kappa:
                    grad[lay.coord("hyper", name, 1)] += d_lk
            if comp.zero_integral_sd is not None:
                zsd = comp.zero_integral_sd
                integral = float(self.mesh.dual_areas @ u)
                terms[f"penalty[zero_integral:{name}]"] = _normal_logpdf(
                    integral, 0.0, zsd
                )
                grad[sl] += -(integral / zsd**2) * self.mesh.dual_areas

        hyper_prior = 0.0
        sd = spec.priors.hyper_sd
        for name in sorted(spec.components):
            comp = spec.components[name]
            center = self._hyper_center(comp)
            for sub in (0, 1):
                c = lay.coord("hyper", name, sub)
                if lay.fixed[c]:
                    continue
                x = values[c]
                hyper_prior += _normal_logpdf(x, center[sub], sd)
                grad[c] += -(x - center[sub]) / sd**2
        if spec.components:
            terms["prior[hyper]"] = hyper_prior

        if spec.priors.fixed_sd is not None:
            coords = self.fixed_effect_coords()
            if len(coords):
                fsd = spec.priors.fixed_sd
                x = values[coords]
                terms["prior[fixed_effects]"] = float(
                    np.sum(-0.5 * _LOG_2PI - math.log(fsd) - 0.5 * (x / fsd) ** 2)
                )
                grad[coords] += -x / fsd**2

        for name in sorted(self._used_gammas):
            term = spec.process.range_terms[name]
            c = lay.coord("log_gamma", name)
            x = values[c]
            terms[f"prior[log_gamma:{name}]"] = _normal_logpdf(
                x, term.prior_mean, term.prior_sd
            )
            grad[c] += -(x - term.prior_mean) / term.prior_sd**2

        for d in self.designs:
            ds = d.binding.dataset
            if d.kind == "count" and ds.overdispersion:
                lo_c = lay.coord("log_odsd", ds.dataset_id)
                lo = values[lo_c]
                mean, psd = spec.priors.overdisp_prior
                terms[f"prior[log_odsd:{ds.dataset_id}]"] = _normal_logpdf(lo, mean, psd)
                grad[lo_c] += -(lo - mean) / psd**2
                sl = lay.slice_of("eps", ds.dataset_id)
                eps = values[sl]
                sigma2 = math.exp(2.0 * lo)
                terms[f"prior[site_effects:{ds.dataset_id}]"] = float(
                    np.sum(-0.5 * _LOG_2PI - lo - 0.5 * eps**2 / sigma2)
                )
                grad[sl] += -eps / sigma2
                grad[lo_c] += float(np.sum(eps**2 / sigma2 - 1.0))

        for d in self.designs:
            ll = self._dataset_term(d, values, grad, diagnostics)
            terms[f"data[{d.binding.dataset.dataset_id}]"] = ll

        total = -math.fsum(terms.values())
        if want_terms:
            return total, -grad, terms
        return total, -grad

    def _zeta(self, mat, gammas, values, offset=None):
        z = mat @ values
        if offset is not None:
            z = z + offset
        for col, dist in gammas:
            z = z - math.exp(values[col]) * dist
        return z

    def _backprop(self, mat, gammas, values, g_rows, grad):
        grad += mat.T @ g_rows
        for col, dist in gammas:
            grad[col] += float(np.dot(g_rows, -math.exp(values[col]) * dist))

    def _dataset_term(self, d: _Design, values, grad, diagnostics=None) -> float:
        ds = d.binding.dataset
        if d.kind == "count":
            zeta = self._zeta(d.rows_sites, d.gamma_sites, values, d.offset)
            ll, g = poisson_count_terms(ds.counts, zeta)
            self._backprop(d.rows_sites, d.gamma_sites, values, g, grad)
            return ll
        if d.kind == "occupancy":
            zeta = self._zeta(d.rows_sites, d.gamma_sites, values, d.offset)
            ll, g = occupancy_cloglog_terms(ds.visits, ds.detections, zeta, diagnostics)
            self._backprop(d.rows_sites, d.gamma_sites, values, g, grad)
            return ll
        if d.kind == "po":
            zeta_p = self._zeta(d.rows_sites, d.gamma_sites, values)
            zeta_v = self._zeta(d.rows_verts, d.gamma_verts, values)
            ll, g_p, g_v = po_point_process_terms(
                zeta_p, zeta_v, self.mesh.dual_areas
            )
            self._backprop(d.rows_sites, d.gamma_sites, values, g_p, grad)
            self._backprop(d.rows_verts, d.gamma_verts, values, g_v, grad)
            return ll
        if d.kind == "regional":
            eta_v = self._zeta(d.rows_verts, d.gamma_verts, values)
            with np.errstate(over="ignore"):
                cell = self.mesh.dual_areas * np.exp(eta_v)
            mu = np.array([float(cell[m].sum()) for m in d.region_masks])
            ll, g_mu = regional_terms(ds.present, mu, diagnostics)
            g_vert = np.zeros(self.mesh.n_vertices)
            for r, mask in enumerate(d.region_masks):
                g_vert[mask] += g_mu[r] * cell[mask]
            self._backprop(d.rows_verts, d.gamma_verts, values, g_vert, grad)
            return ll
        raise AssertionError(d.kind)

    # -- latent profiling --

    def latent_curvature_rows(self, d: _Design, values):
        """Per-row -d2(loglik)/dzeta2 weights for the inner Newton solve."""
        ds = d.binding.dataset
        if d.kind == "count":
            zeta = self._zeta(d.rows_sites, d.gamma_sites, values, d.offset)
            with np.errstate(over="ignore"):
                return np.exp(zeta)
        if d.kind == "occupancy":
            zeta = self._zeta(d.rows_sites, d.gamma_sites, values, d.offset)
            return _occupancy_curvature(ds.visits, ds.detections, zeta)
        if d.kind == "po":
            zeta_v = self._zeta(d.rows_verts, d.gamma_verts, values)
            with np.errstate(over="ignore"):
                return self.mesh.dual_areas * np.exp(zeta_v)
        raise SpecError(
            "latent profiling does not support regional datasets; fit jointly"
        )

    def latent_hessian(self, values) -> np.ndarray:
        """Dense Hessian of the negative log-likelihood over latent coordinates."""
        lay = self.layout
        lat = np.where(lay.latent_mask)[0]
        pos = np.full(lay.total, -1, dtype=np.int64)
        pos[lat] = np.arange(len(lat))
        h = np.zeros((len(lat), len(lat)))
        for name in sorted(self.spec.components):
            comp = self.spec.components[name]
            prior = self._prior(comp, values)
            sl = lay.slice_of("field", name)
            block = pos[sl.start : sl.stop]
            if prior.representation == "sparse-precision":
                q = prior.matrix.toarray()
            else:
                q = prior._inverse()
            h[np.ix_(block, block)] += q
            if comp.zero_integral_sd is not None:
                a = self.mesh.dual_areas / comp.zero_integral_sd
                h[np.ix_(block, block)] += np.outer(a, a)
        for d in self.designs:
            ds = d.binding.dataset
            if d.kind == "count" and ds.overdispersion:
                sl = lay.slice_of("eps", ds.dataset_id)
                lo = values[lay.coord("log_odsd", ds.dataset_id)]
                block = pos[sl.start : sl.stop]
                h[block, block] += math.exp(-2.0 * lo)
            w = self.latent_curvature_rows(d, values)
            mat = d.rows_sites if d.kind in ("count", "occupancy") else d.rows_verts
            d_lat = mat[:, lat]
            piece = (d_lat.T @ sp.diags(np.clip(w, 0.0, None)) @ d_lat).toarray()
            h += piece
        return h


def _occupancy_curvature(visits, detections, zeta):
    n = np.asarray(detections, dtype=float)
    big_n = np.asarray(visits, dtype=float)
    zeta = np.asarray(zeta, dtype=float)
    with np.errstate(over="ignore", invalid="ignore"):
        lam = np.exp(zeta)
        p = np.clip(-np.expm1(-lam), 1e-12, 1.0 - 1e-12)
        a = np.exp(zeta - lam)  # lam * exp(-lam)
        d2 = n * (a * (1.0 - lam) / p - (a / p) ** 2) - (big_n - n) * lam
    d2 = np.nan_to_num(d2, nan=0.0, posinf=0.0, neginf=0.0)
    return np.clip(-d2, 0.0, None)


def _normal_logpdf(x, mean, sd) -> float:
    return -0.5 * _LOG_2PI - math.log(sd) - 0.5 * ((x - mean) / sd) ** 2


# ---------------------------------------------------------------------------
# spec-level entry points


def joint_negloglik(spec: ModelSpec, theta) -> float:
    """-[field log-densities + prior log-densities + dataset log-likelihoods]."""
    model = spec.compiled()
    values = theta.values if isinstance(theta, ParameterVector) else np.asarray(theta)
    value, _ = model.negloglik_grad(values)
    return value


def gradient(spec: ModelSpec, theta) -> np.ndarray:
    """Exact analytic gradient of joint_negloglik over the full layout."""
    model = spec.compiled()
    values = theta.values if isinstance(theta, ParameterVector) else np.asarray(theta)
    _, g = model.negloglik_grad(values)
    return g


def decompose_negloglik(spec: ModelSpec, theta) -> dict:
    """Named parts whose fsum is -joint_negloglik (fields, priors, datasets)."""
    model = spec.compiled()
    values = theta.values if isinstance(theta, ParameterVector) else np.asarray(theta)
    _, _, terms = model.negloglik_grad(values, want_terms=True)
    return terms


def default_init(spec: ModelSpec) -> ParameterVector:
    """Default starting point: zero effects, data-driven intercepts, prior-mean scales."""
    model = spec.compiled()
    lay = model.layout
    values = np.zeros(lay.total)
    area = spec.process.mesh.boundary.area
    suggestions = {}
    for b in spec.bindings:
        key = b.predictor.intercept
        if key is None:
            continue
        ds = b.dataset
        if isinstance(ds, PresenceOnlyDataset):
            alpha = math.log(max(ds.n_points, 0.5) / area)
        elif isinstance(ds, CountDataset) and len(ds.counts):
            exposure = (
                float(ds.durations.sum())
                if (ds.use_duration_offset and ds.durations is not None)
                else float(len(ds.counts))
            )
            alpha = math.log((ds.counts.sum() + 0.5) / exposure)
        elif isinstance(ds, OccupancyDataset) and len(ds.visits):
            prevalence = (ds.detections.sum() + 0.5) / (ds.visits.sum() + 1.0)
            alpha = math.log(-math.log1p(-prevalence))
            if ds.log_effort is not None:
                alpha -= float(np.mean(ds.log_effort))
        else:
            continue
        suggestions.setdefault(key, []).append(alpha)
    for key, vals in suggestions.items():
        values[lay.coord("alpha", key)] = float(np.mean(vals))
    for name in sorted(spec.components):
        comp = spec.components[name]
        sl = lay.slice_of("hyper", name)
        values[sl.start] = comp.params.log_tau
        values[sl.start + 1] = comp.params.log_kappa
    for name in sorted(spec.process.range_terms):
        term = spec.process.range_terms[name]
        values[lay.coord("log_gamma", name)] = term.prior_mean
    for b in spec.bindings:
        ds = b.dataset
        if isinstance(ds, CountDataset) and ds.overdispersion:
            values[lay.coord("log_odsd", ds.dataset_id)] = spec.priors.overdisp_prior[0]
    return ParameterVector(lay, values)


# ---------------------------------------------------------------------------
# fitting


@dataclass(frozen=True)
class FitOptions:
    max_iterations: int = 500
    profile_latents: bool | None = None  # None = auto above PROFILE_THRESHOLD vertices
    gradient_tol_scale: float = 1e-6


@dataclass
class FitResult:
    vector: ParameterVector
    neg_loglik: float
    gradient_norm: float
    converged: bool
    n_iterations: int
    n_evaluations: int
    message: str
    decomposition: dict
    diagnostics: dict
    standard_errors: dict | None = None
    covariance: np.ndarray | None = None
    covariance_coords: np.ndarray | None = None
    se_status: str = "not-computed"


def fit_map(spec: ModelSpec, init=None, options: FitOptions | None = None) -> FitResult:
    """MAP estimation by L-BFGS-B with the exact analytic gradient.

    Convergence is declared when the free-gradient infinity norm falls
    below gradient_tol_scale * (1 + |neg_loglik|); non-convergence is
    flagged on the result, never raised.  With profile_latents (default
    on above PROFILE_THRESHOLD mesh vertices), the latent field and
    overdispersion values are solved by an inner Newton loop per outer
    iterate, which keeps the outer gradient exact at the inner optimum.
    """
    model = spec.compiled()
    opts = options or FitOptions()
    vec = init.copy() if init is not None else default_init(spec)
    if vec.layout is not model.layout:
        if vec.layout.names != model.layout.names:
            raise SpecError("init vector layout does not match the spec")
    values = vec.values.copy()
    free = ~model.layout.fixed

    has_latents = bool(model.layout.latent_mask.any())
    profile = opts.profile_latents
    if profile is None:
        profile = (
            has_latents
            and not model.has_regional
            and model.mesh.n_vertices > PROFILE_THRESHOLD
        )
    if profile and model.has_regional:
        raise SpecError(
            "latent profiling does not support regional datasets; "
            "set profile_latents=False"
        )
    if profile and not has_latents:
        profile = False

    diagnostics = {}
    if profile:
        res_values, info = _fit_profiled(model, values, free, opts)
    else:
        res_values, info = _fit_joint(model, values, free, opts)
    values = res_values

    final_diag = {}
    f, g, terms = model.negloglik_grad(values, diagnostics=final_diag, want_terms=True)
    gnorm = float(np.abs(g[free]).max()) if free.any() else 0.0
    converged = bool(gnorm < opts.gradient_tol_scale * (1.0 + abs(f)))
    if not converged:
        log.warning(
            "optimizer stopped without meeting the gradient criterion "
            "(|g|_inf = %.3g at f = %.6g)", gnorm, f,
        )
    diagnostics.update(info)
    diagnostics.update(final_diag)
    diagnostics["prior_only"] = model.n_records == 0
    diagnostics["dead_parameters"] = [
        model.layout.names[c] for c in model.dead_coords
    ]
    return FitResult(
        vector=ParameterVector(model.layout, values),
        neg_loglik=float(f),
        gradient_norm=gnorm,
        converged=converged,
        n_iterations=info.get("n_iterations", 0),
        n_evaluations=info.get("n_evaluations", 0),
        message=info.get("message", ""),
        decomposition=terms,
        diagnostics=diagnostics,
    )


_BAD_OBJECTIVE = 1e25


def _sanitize(f, g):
    if not np.isfinite(f):
        return _BAD_OBJECTIVE, np.zeros_like(g)
    g = np.where(np.isfinite(g), g, 0.0)
    return f, g


def _guarded_eval(model, values):
    """Objective/gradient that treats numeric blowups as a very bad point.

    The prior factorization can overflow when a hyperparameter runs far
    out (exp(log_tau) past float range); the optimizer just needs to see
    a bad value there, not a crash.
    """
    try:
        f, g = model.negloglik_grad(values)
    except (OverflowError, NumericsError):
        return _BAD_OBJECTIVE, np.zeros_like(values)
    return _sanitize(f, g)


def _fit_joint(model, values, free, opts):
    work = values.copy()

    def fun(x):
        work[free] = x
        f, g = _guarded_eval(model, work)
        return f, g[free]

    res = scipy.optimize.minimize(
        fun,
        values[free],
        jac=True,
        method="L-BFGS-B",
        options=dict(
            maxiter=opts.max_iterations,
            maxfun=20 * opts.max_iterations,
            ftol=1e-14,
            gtol=1e-9,
            maxcor=30,
        ),
    )
    # a restart clears the quasi-Newton memory and often tightens the last digits
    n_iter, n_eval = int(res.nit), int(res.nfev)
    f0, g0 = fun(res.x)
    if np.abs(g0).max() >= opts.gradient_tol_scale * (1.0 + abs(f0)):
        res2 = scipy.optimize.minimize(
            fun, res.x, jac=True, method="L-BFGS-B",
            options=dict(
                maxiter=opts.max_iterations,
                maxfun=20 * opts.max_iterations,
                ftol=1e-15,
                gtol=1e-10,
                maxcor=30,
            ),
        )
        n_iter += int(res2.nit)
        n_eval += int(res2.nfev)
        if res2.fun <= res.fun:
            res = res2
    work[free] = res.x
    info = {
        "n_iterations": n_iter,
        "n_evaluations": n_eval,
        "message": str(res.message),
        "mode": "joint",
    }
    return work.copy(), info


def _fit_profiled(model, values, free, opts):
    lay = model.layout
    lat_free = free & lay.latent_mask
    out_free = free & ~lay.latent_mask
    lat_idx = np.where(lat_free)[0]
    work = values.copy()
    inner_stats = {"solves": 0, "iterations": 0}

    def solve_latents():
        for _ in range(50):
            f, g = _guarded_eval(model, work)
            if f >= _BAD_OBJECTIVE:
                return f  # outer point is numerically out of range
            gl = g[lat_idx]
            if np.abs(gl).max() < 1e-11 * (1.0 + abs(f)):
                return f
            try:
                h = model.latent_hessian(work)
            except (OverflowError, NumericsError):
                return f
            h[np.diag_indices_from(h)] += 1e-10
            try:
                c = sla.cho_factor(h, lower=True)
                step = -sla.cho_solve(c, gl)
            except np.linalg.LinAlgError:
                step = -np.linalg.solve(h + 1e-6 * np.eye(len(h)), gl)
            slope = float(gl @ step)
            t = 1.0
            base = f
            while t > 1e-10:
                work[lat_idx] += t * step
                f_new = _guarded_eval(model, work)[0]
                if f_new <= base + 1e-4 * t * slope:
                    break
                work[lat_idx] -= t * step
                t *= 0.5
            else:
                return base  # line search stalled; accept the current point
            inner_stats["iterations"] += 1
        return _guarded_eval(model, work)[0]

    def fun(x):
        work[out_free] = x
        f = solve_latents()
        inner_stats["solves"] += 1
        if f >= _BAD_OBJECTIVE:
            return _BAD_OBJECTIVE, np.zeros(int(out_free.sum()))
        f, g = _guarded_eval(model, work)
        return f, g[out_free]

    # restart loop: inner-solve noise can abort the line search early, so
    # rebuild the L-BFGS memory from the current point until progress stops.
    n_iter = 0
    n_eval = 0
    message = ""
    f_prev = None
    for _ in range(8):
        res = scipy.optimize.minimize(
            fun,
            work[out_free],
            jac=True,
            method="L-BFGS-B",
            options=dict(
                maxiter=opts.max_iterations,
                maxfun=20 * opts.max_iterations,
                ftol=1e-14,
                gtol=1e-9,
                maxcor=30,
            ),
        )
        work[out_free] = res.x
        n_iter += int(res.nit)
        n_eval += int(res.nfev)
        message = str(res.message)
        f_now = float(res.fun)
        if f_prev is not None and f_now >= f_prev - 1e-10 * (1.0 + abs(f_now)):
            break
        f_prev = f_now
    solve_latents()
    info = {
        "n_iterations": n_iter,
        "n_evaluations": n_eval,
        "message": message,
        "mode": "profiled",
        "inner_newton": dict(inner_stats),
    }
    return work.copy(), info


# ---------------------------------------------------------------------------
# curvature, standard errors, prediction


def laplace_standard_errors(
    spec: ModelSpec, fit: FitResult, step_scale: float = 1e-4
) -> FitResult:
    """Curvature-based standard errors at the optimum.

    The dense Hessian over the free, structurally used parameters is
    computed by central finite differences of the analytic gradient.  If
    it is not positive definite the SEs are withheld (non-fatal) and the
    result is flagged; dead parameters always have their SE withheld.
    """
    model = spec.compiled()
    lay = model.layout
    mask = ~lay.fixed
    mask[model.dead_coords] = False
    idx = np.where(mask)[0]
    x = fit.vector.values
    k = len(idx)
    hess = np.empty((k, k))
    for j, cj in enumerate(idx):
        h = step_scale * max(1.0, abs(x[cj]))
        xp = x.copy()
        xp[cj] += h
        _, gp = model.negloglik_grad(xp)
        xm = x.copy()
        xm[cj] -= h
        _, gm = model.negloglik_grad(xm)
        hess[:, j] = (gp[idx] - gm[idx]) / (2.0 * h)
    hess = 0.5 * (hess + hess.T)
    try:
        factor = sla.cho_factor(hess, lower=True)
    except np.linalg.LinAlgError:
        log.warning("Hessian at the optimum is not positive definite; SEs withheld")
        fit.se_status = "withheld-indefinite-hessian"
        fit.standard_errors = None
        fit.covariance = None
        fit.covariance_coords = None
        return fit
    cov = sla.cho_solve(factor, np.eye(k))
    pos = np.full(lay.total, -1, dtype=np.int64)
    pos[idx] = np.arange(k)
    ses = {}
    for name, c in lay.singleton_coords():
        if pos[c] >= 0:
            ses[name] = float(math.sqrt(max(cov[pos[c], pos[c]], 0.0)))
        elif c in model.dead_coords:
            ses[name] = None  # structurally unused: SE withheld
    fit.standard_errors = ses
    fit.covariance = cov
    fit.covariance_coords = idx
    fit.se_status = "ok"
    return fit


@dataclass
class PredictionGrid:
    """Log-intensity predictions with delta-method standard errors."""

    points: np.ndarray
    mean: np.ndarray
    se: np.ndarray | None
    species: str | None
    n_dropped: int
    include_bias: bool


def predict_grid(
    spec: ModelSpec,
    fit: FitResult,
    resolution: int = 50,
    species=None,
    include_bias: bool = False,
    grid_points=None,
) -> PredictionGrid:
    """Predict the process log-intensity eta-hat on a grid.

    The predictor of the first non-presence-only binding of the selected
    species supplies the intercept (falling back to the first binding);
    observation-bias terms are excluded, and include_bias=True adds back
    only the interpolated bias-field layer.  Grid points outside the
    domain are dropped and counted.
    """
    model = spec.compiled()
    lay = model.layout
    candidates = [
        b for b in spec.bindings if species is None or b.species == species
    ]
    if not candidates:
        raise SpecError(f"no dataset binding for species {species!r}")
    reference = next(
        (b for b in candidates if not isinstance(b.dataset, PresenceOnlyDataset)),
        candidates[0],
    )
    if grid_points is None:
        xmin, ymin, xmax, ymax = spec.process.mesh.boundary.bounds
        xs = np.linspace(xmin, xmax, resolution)
        ys = np.linspace(ymin, ymax, resolution)
        gx, gy = np.meshgrid(xs, ys)
        grid_points = np.column_stack([gx.ravel(), gy.ravel()])
    else:
        grid_points = _as_points(grid_points)
    inside = spec.process.mesh.contains(grid_points)
    n_dropped = int((~inside).sum())
    pts = grid_points[inside]

    rows, gammas = model._rows(reference.predictor, pts)
    values = fit.vector.values
    mean = rows @ values
    for col, dist in gammas:
        mean = mean - math.exp(values[col]) * dist
    if include_bias:
        if spec.bias_component is None:
            raise SpecError("include_bias=True but the spec has no bias component")
        bias_lp = LinearPredictor(fields=(spec.bias_component,))
        # reuse the row builder so the bias layer is interpolated identically
        bias_rows, _ = model._rows(bias_lp, pts)
        rows = rows + bias_rows
        mean = mean + bias_rows @ values

    se = None
    if fit.covariance is not None:
        cov_idx = fit.covariance_coords
        a = np.asarray(rows[:, cov_idx].todense())
        pos = {c: j for j, c in enumerate(cov_idx)}
        for col, dist in gammas:
            j = pos.get(col)
            if j is not None:
                a[:, j] += -math.exp(values[col]) * dist
        se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", a, fit.covariance, a), 0.0))

    return PredictionGrid(
        points=pts,
        mean=np.asarray(mean),
        se=se,
        species=species,
        n_dropped=n_dropped,
        include_bias=include_bias,
    )


def compose_case_study_spec(
    datasets_by_species: dict,
    mesh,
    covariates=(),
    range_terms=(),
    field_params: MaternParams | None = None,
    bias_params: MaternParams | None = None,
    priors: PriorConfig | None = None,
    fix_hypers: bool = False,
) -> ModelSpec:
    """Multi-species composition: shared field per species, one bias field.

    Every species gets its own Matern component entering all of its
    predictors and its own coefficients over the shared covariate set;
    intercepts are per (species, dataset).  If any species brings
    presence-only data, a single bias field component is created and
    attached to every presence-only dataset.  fix_hypers=True treats the
    supplied Matern parameters as known instead of estimating them.
    """
    if not datasets_by_species:
        raise SpecError("no species supplied")
    covariates = tuple(covariates)
    process = ProcessModel(mesh, covariates, range_terms)
    if field_params is None or bias_params is None:
        from .random_field import kappa_for_range, log_tau_for_variance

        xmin, ymin, xmax, ymax = mesh.boundary.bounds
        diameter = math.hypot(xmax - xmin, ymax - ymin)
        kappa0 = kappa_for_range(diameter / 5.0)
        default = MaternParams(
            log_tau=log_tau_for_variance(1.0, kappa0), log_kappa=math.log(kappa0)
        )
        field_params = field_params or default
        bias_params = bias_params or default

    components = []
    bindings = []
    any_po = any(
        isinstance(ds, PresenceOnlyDataset)
        for dss in datasets_by_species.values()
        for ds in dss
    )
    if any_po:
        components.append(
            FieldComponent(
                name="xi_bias",
                params=bias_params,
                role="bias",
                fix_log_tau=fix_hypers,
                fix_log_kappa=fix_hypers,
            )
        )
    for sp_name in sorted(datasets_by_species):
        datasets = list(datasets_by_species[sp_name])
        if not datasets:
            raise SpecError(f"species {sp_name!r} has no data")
        comp_name = f"xi_{sp_name}"
        components.append(
            FieldComponent(
                name=comp_name,
                params=field_params,
                fix_log_tau=fix_hypers,
                fix_log_kappa=fix_hypers,
            )
        )
        for ds in datasets:
            lp = LinearPredictor(
                intercept=f"{sp_name}:{ds.dataset_id}",
                terms=tuple((c.name, f"{sp_name}:{c.name}") for c in covariates),
                fields=(comp_name,),
            )
            if isinstance(ds, PresenceOnlyDataset):
                ds = replace(ds, bias_field="xi_bias")
            bindings.append(DatasetBinding(dataset=ds, predictor=lp, species=sp_name))
    return ModelSpec(process, components, bindings, priors)
