"""Shared fixtures: meshes are expensive enough to build once per session."""

import json

import numpy as np
import pytest

import isdm

UNIT_SQUARE = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]


def _box_feature(x0, y0, x1, y1):
    ring = [[x0, y0], [x1, y0], [x1, y1], [x0, y1], [x0, y0]]
    return {
        "type": "Feature",
        "properties": {},
        "geometry": {"type": "Polygon", "coordinates": [ring]},
    }


CLI_BOUNDARY = {"type": "FeatureCollection", "features": [_box_feature(0, 0, 1, 1)]}

CLI_REGIONS = {
    "type": "FeatureCollection",
    "features": [
        _box_feature(0.05, 0.05, 0.25, 0.25),
        _box_feature(0.6, 0.6, 0.8, 0.8),
        _box_feature(0.65, 0.1, 0.85, 0.3),
    ],
}

# One config drives the whole pipeline: mesh -> simulate -> fit -> predict -> score.
CLI_CONFIG = {
    "seed": 11,
    "domain": {"boundary": "boundary.geojson", "max_edge": 0.12, "mesh_path": "mesh.json"},
    "covariates": [{"name": "x", "source": "coordinate", "axis": "x"}],
    "field": {"variance": 0.36, "range": 0.3, "fix_variance": True, "fix_range": True},
    "simulate": {
        "output_dir": "sim",
        "intercept": 4.5,
        "intercept_key": "proc",
        "betas": {"x": 1.2},
        "sample_field": True,
        "datasets": [
            {
                "id": "po",
                "kind": "presence_only",
                "thinning": {"intercept": -0.5, "coefficients": {"x": -1.0}},
            },
            {"id": "counts", "kind": "counts", "n_sites": 25, "duration": 2.0},
            {"id": "occ", "kind": "occupancy", "n_sites": 30, "visits": 3, "log_effort": -4.0},
            {"id": "reg", "kind": "regional", "regions_path": "regions.geojson"},
        ],
    },
    "fit": {
        "output": "fit.json",
        "datasets": [
            {
                "id": "po",
                "kind": "presence_only",
                "path": "sim/po.csv",
                "intercept_key": "proc",
                "covariates": ["x"],
                "bias_intercept": True,
                "bias_covariates": ["x"],
            },
            {
                "id": "counts",
                "kind": "counts",
                "path": "sim/counts.csv",
                "intercept_key": "proc",
                "covariates": ["x"],
            },
            {
                "id": "occ",
                "kind": "occupancy",
                "path": "sim/occ.csv",
                "intercept_key": "proc",
                "covariates": ["x"],
                "log_effort": -4.0,
            },
            {
                "id": "reg",
                "kind": "regional",
                "path": "sim/reg.geojson",
                "intercept_key": "proc",
                "covariates": ["x"],
            },
        ],
    },
    "predict": {
        "fit_summary": "fit.json",
        "output": "pred.csv",
        "resolution": 20,
        "include_bias": False,
    },
    "score": {"truth": "sim/truth.json", "fit_summary": "fit.json", "output": "score.json"},
}


def write_cli_tree(root):
    """Materialize the example config tree under root; returns the config path."""
    (root / "boundary.geojson").write_text(json.dumps(CLI_BOUNDARY))
    (root / "regions.geojson").write_text(json.dumps(CLI_REGIONS))
    (root / "config.json").write_text(json.dumps(CLI_CONFIG))
    return root / "config.json"


@pytest.fixture(scope="session")
def unit_square():
    return list(UNIT_SQUARE)


@pytest.fixture(scope="session")
def mesh_coarse():
    # 36 vertices
    return isdm.build_mesh(UNIT_SQUARE, 0.25)


@pytest.fixture(scope="session")
def mesh_mid():
    # 84 vertices
    return isdm.build_mesh(UNIT_SQUARE, 0.15)


@pytest.fixture(scope="session")
def mesh_fine():
    # 166 vertices
    return isdm.build_mesh(UNIT_SQUARE, 0.1)


@pytest.fixture(scope="session")
def matern_mid():
    """range 0.5, sigma_u^2 = 0.25; generic small-field settings."""
    kappa = isdm.kappa_for_range(0.5)
    return isdm.MaternParams(
        log_tau=isdm.log_tau_for_variance(0.25, kappa),
        log_kappa=float(np.log(kappa)),
    )
