"""Command-line entry point: mesh / simulate / fit / predict / score / validate.

One JSON configuration file drives every subcommand; paths inside it are
resolved relative to the file itself, and all randomness stems from the
config seed.  Exit codes: 0 success, 2 configuration error, 3 data or
domain error, 4 optimizer non-convergence (the summary is still
written).  Every failure prints a one-line machine-readable JSON error
record to stderr.

The engine computes single-threaded for determinism; --threads caps the
worker count of any module that declares parallelism and is exported to
the linear-algebra thread pools as a best-effort hint.
"""

import argparse
import json
import logging
import math
import os
import sys

import numpy as np

from . import __version__
from .dataio import (
    format_number,
    load_boundary,
    load_config,
    load_json,
    load_regions,
    read_counts_csv,
    read_occupancy_csv,
    read_po_csv,
    read_points_csv_verbatim,
    read_covariates_csv,
    save_json,
    write_counts_csv,
    write_occupancy_csv,
    write_po_csv,
    write_predictions_csv,
    write_regions,
)
from .errors import (
    ConfigError,
    DataError,
    EngineError,
    MeshError,
    NumericsError,
    OutsideDomainError,
    SpecError,
)
from .inference import (
    DatasetBinding,
    FieldComponent,
    FitOptions,
    FitResult,
    ModelSpec,
    ParameterVector,
    PriorConfig,
    fit_map,
    laplace_standard_errors,
    predict_grid,
)
from .mesh import TriangulatedDomain, build_mesh
from .observation import (
    CountDataset,
    OccupancyDataset,
    PresenceOnlyDataset,
    RegionalListDataset,
)
from .process import CovariateField, LinearPredictor, ProcessModel, RangeMapTerm
from .random_field import (
    MaternParams,
    build_sparse_precision,
    kappa_for_range,
    log_tau_for_variance,
)
from .simulate import simulate_suite, uniform_sites

log = logging.getLogger("isdm")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NONCONVERGED = 4


def _emit_error(kind: str, exc: Exception):
    record = {"error": kind, "type": type(exc).__name__, "message": str(exc)}
    row = getattr(exc, "row", None)
    path = getattr(exc, "path", None)
    if row is not None:
        record["row"] = row
    if path is not None:
        record["path"] = str(path)
    print(json.dumps(record, sort_keys=True), file=sys.stderr)


def _resolve(cfg_dir: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(cfg_dir, path)


# ---------------------------------------------------------------------------
# config -> model pieces


def _field_params(block) -> MaternParams:
    variance = block.get("variance", 1.0)
    corr_range = block.get("range", 1.0)
    kappa = kappa_for_range(corr_range)
    return MaternParams(
        log_tau=log_tau_for_variance(variance, kappa),
        log_kappa=math.log(kappa),
    )


def _get_mesh(cfg, cfg_dir):
    """Build the mesh, or reuse a cached artifact that matches the config."""
    dom = cfg["domain"]
    boundary = load_boundary(_resolve(cfg_dir, dom["boundary"]))
    max_edge = float(dom["max_edge"])
    mesh_path = _resolve(cfg_dir, dom.get("mesh_path", "mesh.json"))
    if os.path.exists(mesh_path):
        try:
            mesh = TriangulatedDomain.load(mesh_path)
        except (DataError, MeshError) as e:
            raise DataError(
                f"cached mesh {mesh_path} is unreadable: {e}", path=mesh_path
            ) from None
        same_edge = mesh.max_edge == max_edge
        same_area = math.isclose(
            mesh.boundary.area, boundary.area, rel_tol=1e-12, abs_tol=0.0
        )
        if same_edge and same_area:
            log.info("cache hit: %s", mesh_path)
            return mesh, mesh_path, True
        log.info("cached mesh does not match the config; rebuilding")
    mesh = build_mesh(boundary, max_edge)
    mesh.save(mesh_path)
    return mesh, mesh_path, False


def _covariates(cfg, cfg_dir, mesh):
    out = []
    for block in cfg.get("covariates", []):
        name = block["name"]
        if block["source"] == "coordinate":
            axis = block.get("axis", "x")
            values = mesh.vertices[:, 0 if axis == "x" else 1]
            out.append(CovariateField(name, values))
        else:
            path = block.get("path")
            if not path:
                raise ConfigError(f"covariate {name!r}: csv source needs a path")
            table = read_covariates_csv(_resolve(cfg_dir, path))
            if name not in table:
                raise DataError(
                    f"covariate file has no rows named {name!r}", path=path
                )
            xy, values = table[name]
            out.append(CovariateField.from_points(mesh, xy, values, name))
    return out


def _range_terms(cfg, cfg_dir):
    block = cfg.get("range_map")
    if not block:
        return []
    polys = [p for p, _ in load_regions(_resolve(cfg_dir, block["path"]))]
    return [
        RangeMapTerm(
            name=block["name"],
            polygons=tuple(polys),
            gamma=block.get("gamma", 1.0),
            prior_mean=block.get("prior_mean", 0.0),
            prior_sd=block.get("prior_sd", 1.0),
        )
    ]


def _components(cfg):
    out = []
    if cfg.get("field"):
        block = cfg["field"]
        out.append(
            FieldComponent(
                name="xi",
                params=_field_params(block),
                role="ecological",
                fix_log_tau=bool(block.get("fix_variance", False)),
                fix_log_kappa=bool(block.get("fix_range", False)),
            )
        )
    if cfg.get("bias_field"):
        block = cfg["bias_field"]
        out.append(
            FieldComponent(
                name="xi_bias",
                params=_field_params(block),
                role="bias",
                fix_log_tau=bool(block.get("fix_variance", False)),
                fix_log_kappa=bool(block.get("fix_range", False)),
                zero_integral_sd=block.get("zero_integral_sd"),
            )
        )
    return out


def _load_dataset(block, cfg_dir):
    kind = block["kind"]
    path = _resolve(cfg_dir, block["path"])
    ds_id = block["id"]
    if kind == "presence_only":
        points = read_po_csv(path)
        return PresenceOnlyDataset(
            dataset_id=ds_id,
            points=points,
            bias_covariates=tuple(block.get("bias_covariates", [])),
            bias_field="xi_bias" if block.get("use_bias_field", False) else None,
            bias_intercept=bool(block.get("bias_intercept", False)),
        )
    if kind == "counts":
        sites, counts, durations = read_counts_csv(path)
        return CountDataset(
            dataset_id=ds_id,
            sites=sites,
            counts=counts,
            durations=durations,
            use_duration_offset=bool(block.get("duration_offset", True)),
            overdispersion=bool(block.get("overdispersion", False)),
        )
    if kind == "occupancy":
        sites, visits, detections = read_occupancy_csv(path)
        eff = block.get("log_effort")
        return OccupancyDataset(
            dataset_id=ds_id, sites=sites, visits=visits, detections=detections,
            log_effort=None if eff is None else float(eff),
        )
    if kind == "regional":
        feats = load_regions(path, require_present=True)
        return RegionalListDataset(
            dataset_id=ds_id,
            regions=tuple(p for p, _ in feats),
            present=np.array([props["present"] for _, props in feats], dtype=bool),
        )
    raise ConfigError(f"unknown dataset kind {kind!r}")


def _build_spec(cfg, cfg_dir, mesh) -> ModelSpec:
    if "fit" not in cfg:
        raise ConfigError("config has no `fit` block")
    covs = _covariates(cfg, cfg_dir, mesh)
    terms = _range_terms(cfg, cfg_dir)
    process = ProcessModel(mesh, covs, terms)
    components = _components(cfg)
    has_field = any(c.role == "ecological" for c in components)
    priors_block = cfg.get("priors", {})
    priors = PriorConfig(
        fixed_sd=priors_block.get("fixed_sd", 10.0),
        hyper_sd=priors_block.get("hyper_sd", 1.0),
    )
    bindings = []
    for block in cfg["fit"]["datasets"]:
        ds = _load_dataset(block, cfg_dir)
        lp = LinearPredictor(
            intercept=block.get("intercept_key", block["id"]),
            terms=tuple((c, c) for c in block.get("covariates", [])),
            fields=("xi",) if (has_field and block.get("use_field", True)) else (),
            range_terms=(
                (cfg["range_map"]["name"],)
                if (block.get("use_range_map", False) and cfg.get("range_map"))
                else ()
            ),
        )
        bindings.append(DatasetBinding(dataset=ds, predictor=lp))
    return ModelSpec(process, components, bindings, priors)


def _fit_options(cfg) -> FitOptions:
    block = cfg.get("optimizer", {})
    return FitOptions(
        max_iterations=block.get("max_iterations", 500),
        profile_latents=block.get("profile_latents"),
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_mesh(cfg, cfg_dir, args) -> int:
    mesh, mesh_path, cache_hit = _get_mesh(cfg, cfg_dir)
    tri_area = float(mesh.dual_areas.sum())
    rel = abs(tri_area - mesh.boundary.area) / mesh.boundary.area
    print(f"mesh: {mesh.n_vertices} vertices, {mesh.n_triangles} triangles")
    print(f"area ok (relative error {format_number(rel)})")
    print(f"{'cache hit' if cache_hit else 'written'}: {mesh_path}")
    return EXIT_OK


def cmd_simulate(cfg, cfg_dir, args) -> int:
    if "simulate" not in cfg:
        raise ConfigError("config has no `simulate` block")
    sim = cfg["simulate"]
    out_dir = _resolve(cfg_dir, sim["output_dir"])
    os.makedirs(out_dir, exist_ok=True)
    mesh, _, _ = _get_mesh(cfg, cfg_dir)
    covs = {c.name: c for c in _covariates(cfg, cfg_dir, mesh)}
    seed = int(cfg.get("seed", 0))
    root = np.random.SeedSequence(seed)
    field_seed, suite_seed, sites_seed = root.spawn(3)

    intercept = float(sim.get("intercept", 0.0))
    betas = sim.get("betas", {})
    truth_params = {}
    eta = np.full(mesh.n_vertices, intercept)
    truth_params[f"alpha[{sim.get('intercept_key', 'proc')}]"] = intercept
    for name, beta in betas.items():
        if name not in covs:
            raise ConfigError(f"simulate block references unknown covariate {name!r}")
        eta = eta + float(beta) * covs[name].values
        truth_params[f"beta[{name}]"] = float(beta)

    truth = {"seed": seed, "parameters": truth_params}
    if cfg.get("field") and sim.get("sample_field", True):
        params = _field_params(cfg["field"])
        prior = build_sparse_precision(mesh, params)
        realization = prior.sample(field_seed)
        eta = eta + realization.node_values
        truth["field"] = {
            "log_tau": params.log_tau,
            "log_kappa": params.log_kappa,
        }

    blocks = []
    site_streams = sites_seed.spawn(len(sim["datasets"]))
    for k, block in enumerate(sim["datasets"]):
        kind = block["kind"]
        entry = {"dataset_id": block["id"], "kind": kind}
        if kind == "presence_only":
            thin = block.get("thinning")
            if thin is not None:
                logq = np.full(mesh.n_vertices, float(thin.get("intercept", 0.0)))
                for name, c in thin.get("coefficients", {}).items():
                    if name not in covs:
                        raise ConfigError(
                            f"thinning references unknown covariate {name!r}"
                        )
                    logq = logq + float(c) * covs[name].values
                entry["log_thinning"] = logq
        elif kind in ("counts", "occupancy"):
            if "sites_path" in block:
                sites = read_po_csv(_resolve(cfg_dir, block["sites_path"]))
            elif "n_sites" in block:
                sites = uniform_sites(mesh, int(block["n_sites"]), site_streams[k])
            else:
                raise ConfigError(
                    f"dataset {block['id']!r} needs n_sites or sites_path"
                )
            entry["sites"] = sites
            if kind == "counts":
                if "duration" in block:
                    entry["durations"] = np.full(len(sites), float(block["duration"]))
                if "log_reporting" in block:
                    entry["log_rep"] = np.full(
                        mesh.n_vertices, float(block["log_reporting"])
                    )
            else:
                entry["visits"] = int(block.get("visits", 1))
                if "log_effort" in block:
                    entry["log_effort"] = np.full(
                        mesh.n_vertices, float(block["log_effort"])
                    )
        elif kind == "regional":
            if "regions_path" not in block:
                raise ConfigError(f"dataset {block['id']!r} needs regions_path")
            feats = load_regions(_resolve(cfg_dir, block["regions_path"]))
            entry["regions"] = [p for p, _ in feats]
        else:
            raise ConfigError(f"unknown dataset kind {kind!r}")
        blocks.append(entry)

    suite = simulate_suite(mesh, eta, blocks, suite_seed)
    truth["expected_points"] = suite.truth["expected_points"]
    truth["datasets"] = {}
    for entry in blocks:
        ds_id = entry["dataset_id"]
        data = suite.datasets[ds_id]
        truth["datasets"][ds_id] = suite.truth.get(ds_id, {})
        kind = data["kind"]
        if kind == "presence_only":
            write_po_csv(os.path.join(out_dir, f"{ds_id}.csv"), data["points"])
        elif kind == "counts":
            write_counts_csv(
                os.path.join(out_dir, f"{ds_id}.csv"),
                data["sites"],
                data["counts"],
                data["durations"],
            )
        elif kind == "occupancy":
            write_occupancy_csv(
                os.path.join(out_dir, f"{ds_id}.csv"),
                data["sites"],
                data["visits"],
                data["detections"],
            )
        elif kind == "regional":
            write_regions(
                os.path.join(out_dir, f"{ds_id}.geojson"),
                data["regions"],
                data["present"],
            )
    save_json(os.path.join(out_dir, "truth.json"), truth)
    print(f"simulated {len(blocks)} dataset(s) into {out_dir}")
    return EXIT_OK


def cmd_fit(cfg, cfg_dir, args) -> int:
    mesh, _, _ = _get_mesh(cfg, cfg_dir)
    spec = _build_spec(cfg, cfg_dir, mesh)
    fit = fit_map(spec, options=_fit_options(cfg))
    fit = laplace_standard_errors(spec, fit)
    out_path = _resolve(cfg_dir, cfg["fit"]["output"])
    summary = {
        "command": "fit",
        "converged": fit.converged,
        "neg_loglik": fit.neg_loglik,
        "gradient_norm": fit.gradient_norm,
        "n_iterations": fit.n_iterations,
        "n_evaluations": fit.n_evaluations,
        "message": fit.message,
        "estimates": fit.vector.named(),
        "standard_errors": fit.standard_errors,
        "se_status": fit.se_status,
        "decomposition": fit.decomposition,
        "diagnostics": fit.diagnostics,
        "layout_names": fit.vector.layout.names,
        "parameter_values": fit.vector.values,
        "covariance": fit.covariance,
        "covariance_coords": fit.covariance_coords,
        "mesh": {"n_vertices": mesh.n_vertices, "n_triangles": mesh.n_triangles},
    }
    save_json(out_path, summary)
    for d in sorted(fit.decomposition):
        if d.startswith("data["):
            print(f"loglik {d} = {format_number(fit.decomposition[d])}")
    print(
        f"{'converged' if fit.converged else 'NOT CONVERGED'}: "
        f"neg_loglik {format_number(fit.neg_loglik)}, "
        f"|grad| {format_number(fit.gradient_norm)}, summary {out_path}"
    )
    return EXIT_OK if fit.converged else EXIT_NONCONVERGED


def _load_fit_for_predict(spec, summary_path) -> FitResult:
    doc = load_json(summary_path)
    model = spec.compiled()
    names = doc.get("layout_names")
    if names != model.layout.names:
        raise DataError(
            "fit summary layout does not match the spec built from this config",
            path=summary_path,
        )
    vec = ParameterVector(
        model.layout, np.asarray(doc["parameter_values"], dtype=float)
    )
    cov = doc.get("covariance")
    cov_coords = doc.get("covariance_coords")
    return FitResult(
        vector=vec,
        neg_loglik=float(doc.get("neg_loglik", math.nan)),
        gradient_norm=float(doc.get("gradient_norm", math.nan)),
        converged=bool(doc.get("converged", False)),
        n_iterations=int(doc.get("n_iterations", 0)),
        n_evaluations=int(doc.get("n_evaluations", 0)),
        message=str(doc.get("message", "")),
        decomposition=doc.get("decomposition", {}),
        diagnostics=doc.get("diagnostics", {}),
        standard_errors=doc.get("standard_errors"),
        covariance=None if cov is None else np.asarray(cov, dtype=float),
        covariance_coords=(
            None if cov_coords is None else np.asarray(cov_coords, dtype=np.int64)
        ),
        se_status=doc.get("se_status", "not-computed"),
    )


def cmd_predict(cfg, cfg_dir, args) -> int:
    if "predict" not in cfg:
        raise ConfigError("config has no `predict` block")
    blk = cfg["predict"]
    mesh, _, _ = _get_mesh(cfg, cfg_dir)
    spec = _build_spec(cfg, cfg_dir, mesh)
    fit = _load_fit_for_predict(spec, _resolve(cfg_dir, blk["fit_summary"]))
    if not fit.converged:
        log.warning("predicting from a non-converged fit")
    coord_strings = None
    grid_points = None
    if "points" in blk:
        pts_path = _resolve(cfg_dir, blk["points"])
        grid_points, coord_strings = read_points_csv_verbatim(pts_path)
    grid = predict_grid(
        spec,
        fit,
        resolution=int(blk.get("resolution", 50)),
        species=blk.get("species"),
        include_bias=bool(blk.get("include_bias", False)),
        grid_points=grid_points,
    )
    if coord_strings is not None and grid.n_dropped:
        inside = mesh.contains(grid_points)
        coord_strings = [cs for cs, ok in zip(coord_strings, inside) if ok]
    out_path = _resolve(cfg_dir, blk["output"])
    write_predictions_csv(
        out_path, grid.points, grid.mean,
        grid.se, species=blk.get("species"), coord_strings=coord_strings,
    )
    if grid.n_dropped:
        print(
            f"dropped {grid.n_dropped} out-of-domain grid point(s)", file=sys.stderr
        )
    print(f"predictions: {len(grid.points)} point(s) -> {out_path}")
    return EXIT_OK


def cmd_score(cfg, cfg_dir, args) -> int:
    if "score" not in cfg:
        raise ConfigError("config has no `score` block")
    blk = cfg["score"]
    truth = load_json(_resolve(cfg_dir, blk["truth"]))
    summary = load_json(_resolve(cfg_dir, blk["fit_summary"]))
    estimates = summary.get("estimates", {})
    ses = summary.get("standard_errors") or {}
    z_threshold = float(blk.get("z_threshold", 1.96))
    params = truth.get("parameters")
    if not params:
        raise DataError("truth file has no `parameters` block", path=blk["truth"])
    report = {}
    covered, with_se = 0, 0
    for name in sorted(params):
        true_v = float(params[name])
        if name not in estimates:
            raise DataError(
                f"truth parameter {name!r} is missing from the fit estimates",
                path=blk["fit_summary"],
            )
        est = float(estimates[name])
        bias = est - true_v
        entry = {"estimate": est, "truth": true_v, "bias": bias}
        se = ses.get(name)
        if se is not None:
            z = abs(bias) / se if se > 0 else math.inf
            entry["z"] = z
            entry["covered"] = bool(z <= z_threshold)
            with_se += 1
            covered += int(entry["covered"])
        report[name] = entry
    out = {
        "parameters": report,
        "n_parameters": len(report),
        "mean_abs_bias": float(np.mean([abs(v["bias"]) for v in report.values()])),
        "coverage_fraction": (covered / with_se) if with_se else None,
        "z_threshold": z_threshold,
    }
    for name in sorted(report):
        e = report[name]
        z_txt = f", z {format_number(e['z'])}" if "z" in e else ""
        print(
            f"{name}: estimate {format_number(e['estimate'])}, "
            f"truth {format_number(e['truth'])}, bias {format_number(e['bias'])}{z_txt}"
        )
    if "output" in blk:
        save_json(_resolve(cfg_dir, blk["output"]), out)
    else:
        print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_validate(cfg, cfg_dir, args) -> int:
    mesh, mesh_path, cache_hit = _get_mesh(cfg, cfg_dir)
    print(f"mesh ok: {mesh.n_vertices} vertices ({mesh_path})")
    if "fit" in cfg:
        spec = _build_spec(cfg, cfg_dir, mesh)
        n_records = spec.compiled().n_records
        print(f"fit block ok: {len(spec.bindings)} dataset(s), {n_records} record(s)")
    if "simulate" in cfg:
        print(f"simulate block ok: {len(cfg['simulate']['datasets'])} dataset(s)")
    print("config ok")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="isdm",
        description="Integrated species distribution modeling engine",
    )
    parser.add_argument("--version", action="version", version=f"isdm {__version__}")
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="cap worker threads (modules are single-threaded by default)",
    )
    parser.add_argument(
        "-v", "--verbose", action="store_true", help="debug-level logging"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, desc in [
        ("mesh", cmd_mesh, "build and cache the triangulated domain"),
        ("simulate", cmd_simulate, "generate synthetic datasets plus a truth file"),
        ("fit", cmd_fit, "fit the joint model and write a summary JSON"),
        ("predict", cmd_predict, "evaluate the fitted surface on a grid"),
        ("score", cmd_score, "compare fit estimates against simulation truth"),
        ("validate", cmd_validate, "check the config and data files without fitting"),
    ]:
        p = sub.add_parser(name, help=desc)
        p.add_argument("--config", required=True, help="path to the run config JSON")
        p.set_defaults(func=fn)
    return parser


def _cap_threads(n):
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    for var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        os.environ[var] = str(n)
    log.info("worker threads capped at %d", n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        _cap_threads(args.threads)
        cfg = load_config(args.config)
        cfg_dir = os.path.dirname(os.path.abspath(args.config))
        return args.func(cfg, cfg_dir, args)
    except ConfigError as e:
        _emit_error("config", e)
        return EXIT_CONFIG
    except (DataError, MeshError, SpecError, OutsideDomainError, NumericsError) as e:
        _emit_error("data", e)
        return EXIT_DATA
    except EngineError as e:  # any other engine failure counts as a data error
        _emit_error("data", e)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
