"""Small model builders shared by the tests."""

import json
import math
import os
from dataclasses import replace

import numpy as np
from scipy.optimize import brentq

from nmbc.calibration import informative
from nmbc.geometry import GeometryGrid, fit_surrogate, load_grid
from nmbc.model import parse_model
from nmbc.synth import example_model_dir

import oracles


def linear_grid(mtu, dof, l0, arm, lo=-0.6, hi=0.6, n=9):
    """Grid for L = l0 - arm * theta, so the moment arm dL/dtheta is -arm."""
    knots = np.linspace(lo, hi, n)
    return GeometryGrid(mtu, (dof,), (knots,), l0 - arm * knots)


def toy_model(units, joint="ankle", mvc=None, lo=-0.6, hi=0.6):
    """In-memory one-joint model. ``units`` maps name -> (MtuParams, l0, arm, emg)."""
    grids = {name: linear_grid(name, joint, l0, arm, lo, hi) for name, (_, l0, arm, _) in units.items()}
    doc = {
        "schema_version": 1,
        "name": "toy",
        "joints": [{"name": joint, "range": [lo, hi]}],
        "mvc": mvc or {u[3]: 1.0 for u in units.values() if u[3]},
        "mtus": [{"name": name, "joints": [joint], "emg": emg, "params": p.to_dict()}
                 for name, (p, _, _, emg) in units.items()],
    }
    return parse_model(doc, grids=grids)


def surrogate(fn, dofs=("a",), n=11):
    knots = tuple(np.linspace(-1.0, 1.0, n) for _ in dofs)
    if len(dofs) == 1:
        values = fn(knots[0])
    else:
        values = fn(*np.meshgrid(*knots, indexing="ij"))
    return fit_surrogate(GeometryGrid("m", tuple(dofs), knots, values))


def scaled_example(which, factor):
    """Example model with every geometry length multiplied by ``factor``."""
    base = os.path.join(example_model_dir(), which)
    with open(os.path.join(base, "model.json"), encoding="utf-8") as fh:
        doc = json.load(fh)
    grids = {}
    for m in doc["mtus"]:
        g = load_grid(os.path.join(base, m["geometry"]), m["name"])
        grids[m["name"]] = replace(g, lmt_values=np.asarray(g.lmt_values) * factor)
    return parse_model(doc, base, grids=grids)


def oracle_strain(f):
    if f <= 0:
        return 0.0
    return brentq(lambda e: oracles.tendon(e) - f, 0.0, 1.0, xtol=1e-15)


def grid_oracle(samples, l_opt_c, l_slack_c, n=200, half=0.05):
    """Exhaustive search of the squared length error over an n x n box."""
    used = informative(samples)
    target = np.array([s.lmt_scaled for s in used])
    eps = np.array([oracle_strain(s.fnorm_max * math.cos(s.alpha)) for s in used])
    fib = np.array([s.lnorm_unscaled * math.cos(s.alpha) for s in used])
    lo_grid = np.linspace(l_opt_c * (1 - half), l_opt_c * (1 + half), n)
    ls_grid = np.linspace(l_slack_c * (1 - half), l_slack_c * (1 + half), n)
    pred = (ls_grid[None, :, None] * (1 + eps) + lo_grid[:, None, None] * fib)
    err = np.sum((pred - target) ** 2, axis=2)
    i, j = np.unravel_index(np.argmin(err), err.shape)
    return lo_grid[i], ls_grid[j], float(err[i, j])
