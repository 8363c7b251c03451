"""Synthetic data generation from the point-process model.

The point pattern sampler works triangle by triangle: on each triangle
the log-intensity is linear, so exp(eta) is bounded by its largest
corner value; candidate points are drawn from a homogeneous process at
a padded bound and thinned by exp(eta(p)) / bound.  Each triangle draws
from its own spawned random substream, so the output is reproducible
and independent of triangle evaluation order.

Observation-level simulators (thinning to presence-only records, count,
detection and regional-list draws) mirror the observation likelihoods
exactly; fitting the model to its own simulated output is the main
correctness check for both sides.
"""

import logging
import math
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .errors import SpecError
from .mesh import TriangulatedDomain, _as_points
from .process import region_membership

log = logging.getLogger(__name__)

SAFETY_FACTOR = 1.2


def _seed_sequence(seed) -> np.random.SeedSequence:
    if isinstance(seed, np.random.SeedSequence):
        return seed
    return np.random.SeedSequence(seed)


def simulate_lgcp(mesh: TriangulatedDomain, eta_vertices, seed) -> np.ndarray:
    """Draw one realization of the point process with intensity exp(eta).

    eta is the per-vertex log-intensity, interpolated linearly within
    triangles.  Per triangle, candidates arrive as Poisson(bound * area)
    uniform points and are kept with probability exp(eta(p)) / bound,
    bound = 1.2 * max corner intensity.  If a candidate ever exceeded the
    bound the bound is doubled and that triangle is redrawn from a fresh
    substream (cannot happen for linear eta; the guard protects future
    interpolation changes).  Returns an (M, 2) array, possibly empty.
    """
    eta = np.asarray(eta_vertices, dtype=float)
    if eta.shape != (mesh.n_vertices,):
        raise ValueError(
            f"eta must have one value per vertex ({mesh.n_vertices}), got {eta.shape}"
        )
    root = _seed_sequence(seed)
    streams = root.spawn(mesh.n_triangles)
    tri_xy = mesh.vertices[mesh.triangles]  # (T, 3, 2)
    tri_eta = eta[mesh.triangles]  # (T, 3)
    areas2 = np.abs(
        (tri_xy[:, 1, 0] - tri_xy[:, 0, 0]) * (tri_xy[:, 2, 1] - tri_xy[:, 0, 1])
        - (tri_xy[:, 2, 0] - tri_xy[:, 0, 0]) * (tri_xy[:, 1, 1] - tri_xy[:, 0, 1])
    )
    out = []
    for t in range(mesh.n_triangles):
        area = 0.5 * areas2[t]
        with np.errstate(over="ignore"):
            bound = SAFETY_FACTOR * float(np.exp(tri_eta[t].max()))
        if not math.isfinite(bound):
            raise SpecError(f"intensity overflows on triangle {t}; eta too large")
        seq = streams[t]
        while True:
            rng = np.random.default_rng(seq)
            n = rng.poisson(bound * area)
            if n == 0:
                break
            r1 = rng.random(n)
            r2 = rng.random(n)
            s = np.sqrt(r1)
            bary = np.column_stack([1.0 - s, s * (1.0 - r2), s * r2])
            pts = bary @ tri_xy[t]
            lam = np.exp(bary @ tri_eta[t])
            if (lam > bound).any():
                bound *= 2.0
                seq = seq.spawn(1)[0]
                continue
            keep = rng.random(n) < lam / bound
            if keep.any():
                out.append(pts[keep])
            break
    if not out:
        return np.empty((0, 2))
    return np.vstack(out)


def thin_pattern(points, q, seed) -> np.ndarray:
    """Independent thinning: keep each point with its retention probability.

    q is either an array aligned with points or a callable mapping an
    (M, 2) array to probabilities; values must lie in [0, 1].
    """
    pts = _as_points(points) if len(np.atleast_1d(points)) else np.empty((0, 2))
    if len(pts) == 0:
        return pts
    probs = np.asarray(q(pts) if callable(q) else q, dtype=float)
    if probs.shape != (len(pts),):
        raise ValueError("retention probabilities must align with points")
    if (probs < 0).any() or (probs > 1).any():
        raise ValueError("retention probabilities must lie in [0, 1]")
    rng = np.random.default_rng(_seed_sequence(seed))
    return pts[rng.random(len(pts)) < probs]


def simulate_counts(theta, seed) -> np.ndarray:
    """Poisson counts with the given per-record means."""
    theta = np.asarray(theta, dtype=float)
    if theta.size and ((theta < 0).any() or not np.isfinite(theta).all()):
        raise ValueError("count means must be finite and nonnegative")
    rng = np.random.default_rng(_seed_sequence(seed))
    return rng.poisson(theta)


def simulate_occupancy(lam, visits, seed) -> np.ndarray:
    """Detections out of `visits` with per-visit probability 1 - exp(-lam)."""
    lam = np.asarray(lam, dtype=float)
    visits = np.asarray(visits, dtype=np.int64)
    if lam.size and (lam < 0).any():
        raise ValueError("occupancy intensities must be nonnegative")
    p = -np.expm1(-lam)
    rng = np.random.default_rng(_seed_sequence(seed))
    return rng.binomial(visits, p)


def simulate_regional(mu, seed) -> np.ndarray:
    """Presence indicators: Bernoulli(1 - exp(-mu)) per region."""
    mu = np.asarray(mu, dtype=float)
    if mu.size and (mu < 0).any():
        raise ValueError("region means must be nonnegative")
    rng = np.random.default_rng(_seed_sequence(seed))
    return rng.random(len(mu)) < -np.expm1(-mu)


def uniform_sites(mesh: TriangulatedDomain, n: int, seed) -> np.ndarray:
    """n sites uniform over the domain (rejection from the bounding box)."""
    rng = np.random.default_rng(_seed_sequence(seed))
    xmin, ymin, xmax, ymax = mesh.boundary.bounds
    out = np.empty((0, 2))
    while len(out) < n:
        cand = np.column_stack(
            [
                rng.uniform(xmin, xmax, size=4 * n),
                rng.uniform(ymin, ymax, size=4 * n),
            ]
        )
        cand = cand[mesh.contains(cand)]
        out = np.vstack([out, cand])
    return out[:n]


@dataclass
class SimulatedSuite:
    """One synthetic realization across all requested dataset blocks."""

    eta_vertices: np.ndarray
    datasets: dict = dataclass_field(default_factory=dict)
    truth: dict = dataclass_field(default_factory=dict)


def simulate_suite(mesh: TriangulatedDomain, eta_vertices, blocks, seed) -> SimulatedSuite:
    """Simulate every dataset block from one shared intensity surface.

    Each block is a mapping with "dataset_id" and "kind":

      kind "presence_only": optional "log_thinning" (per-vertex array or
        callable on points) multiplies the intensity before observation;
      kind "counts": "sites" ((K,2) array, or an integer to place sites
        uniformly), optional "durations", optional "log_rep" per-vertex
        reporting surface;
      kind "occupancy": "sites", "visits" (int or array), optional
        "log_effort" per-vertex;
      kind "regional": "regions" (list of polygons), presence drawn from
        the regional void probability.

    Randomness is split by spawning one substream per block in order, so
    adding a block never changes the draws of earlier blocks.
    """
    eta = np.asarray(eta_vertices, dtype=float)
    if eta.shape != (mesh.n_vertices,):
        raise ValueError("eta must have one value per vertex")
    root = _seed_sequence(seed)
    streams = root.spawn(len(blocks) + 1)
    suite = SimulatedSuite(eta_vertices=eta)
    with np.errstate(over="ignore"):
        mass = float(np.sum(mesh.dual_areas * np.exp(eta)))
    suite.truth["expected_points"] = mass

    for k, block in enumerate(blocks):
        ds_id = block["dataset_id"]
        kind = block["kind"]
        sub = streams[k].spawn(2)
        if kind == "presence_only":
            pts = simulate_lgcp(mesh, eta, sub[0])
            thinning = block.get("log_thinning")
            if thinning is not None:
                if callable(thinning):
                    q = lambda p: np.exp(np.clip(thinning(p), None, 0.0))
                else:
                    logq = np.asarray(thinning, dtype=float)
                    q = lambda p: np.exp(
                        np.clip(mesh.interpolate_at(logq, p), None, 0.0)
                    )
                pts = thin_pattern(pts, q, sub[1])
            suite.datasets[ds_id] = {"kind": kind, "points": pts}
            suite.truth[ds_id] = {"n_points": int(len(pts))}
        elif kind == "counts":
            sites = block["sites"]
            if np.isscalar(sites):
                sites = uniform_sites(mesh, int(sites), sub[0].spawn(1)[0])
            sites = _as_points(sites)
            durations = block.get("durations")
            if durations is not None:
                durations = np.broadcast_to(
                    np.asarray(durations, dtype=float), (len(sites),)
                ).copy()
            eta_s = mesh.interpolate_at(eta, sites)
            log_theta = eta_s.copy()
            if durations is not None:
                log_theta += np.log(durations)
            rep = block.get("log_rep")
            if rep is not None:
                log_theta += mesh.interpolate_at(np.asarray(rep, dtype=float), sites)
            counts = simulate_counts(np.exp(log_theta), sub[1])
            suite.datasets[ds_id] = {
                "kind": kind,
                "sites": sites,
                "counts": counts,
                "durations": durations,
            }
            suite.truth[ds_id] = {"expected_total": float(np.exp(log_theta).sum())}
        elif kind == "occupancy":
            sites = block["sites"]
            if np.isscalar(sites):
                sites = uniform_sites(mesh, int(sites), sub[0].spawn(1)[0])
            sites = _as_points(sites)
            visits = np.broadcast_to(
                np.asarray(block.get("visits", 1), dtype=np.int64), (len(sites),)
            ).copy()
            lam = np.exp(mesh.interpolate_at(eta, sites))
            effort = block.get("log_effort")
            if effort is not None:
                lam = lam * np.exp(
                    mesh.interpolate_at(np.asarray(effort, dtype=float), sites)
                )
            detections = simulate_occupancy(lam, visits, sub[1])
            suite.datasets[ds_id] = {
                "kind": kind,
                "sites": sites,
                "visits": visits,
                "detections": detections,
            }
            suite.truth[ds_id] = {"mean_probability": float(np.mean(-np.expm1(-lam)))}
        elif kind == "regional":
            regions = list(block["regions"])
            with np.errstate(over="ignore"):
                cell = mesh.dual_areas * np.exp(eta)
            mu = np.array(
                [float(cell[region_membership(mesh, r)].sum()) for r in regions]
            )
            present = simulate_regional(mu, sub[1])
            suite.datasets[ds_id] = {
                "kind": kind,
                "regions": regions,
                "present": present,
            }
            suite.truth[ds_id] = {"region_means": mu.tolist()}
        else:
            raise SpecError(f"unknown dataset kind {kind!r} in block {ds_id!r}")
    return suite
