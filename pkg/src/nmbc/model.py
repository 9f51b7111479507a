"""Model schema, model files and time-series traces.

A model file is a single JSON document (``schema_version`` 1)::

    {
      "schema_version": 1,
      "name": "right_leg",
      "joints": [{"name": "ankle_r", "range": [-0.5, 0.6]}],
      "mvc": {"sol_r": 1.0},
      "mtus": [{
        "name": "sol_r", "joints": ["ankle_r"], "emg": "sol_r",
        "geometry": "geometry/sol_r.csv",
        "params": {"shape_factor": -1.0, "f_max_iso": 3549.0, "l_opt": 0.05,
                   "l_slack": 0.25, "alpha_opt": 0.436, "damping": 0.1}
      }]
    }

Joint ranges are in radians. ``emg`` names any channel of the MVC table (a
donor channel is allowed) or is ``null``/``"none"`` for zero activation.
Geometry paths are relative to the model file.
"""

import csv
import json
import math
import os
from dataclasses import dataclass, field, replace
from types import MappingProxyType

import numpy as np

from .errors import DataError
from .geometry import fit_surrogate, load_grid

SCHEMA_VERSION = 1
E_MIN = -3.0
DEFAULT_DAMPING = 0.1


@dataclass(frozen=True)
class JointDef:
    name: str
    angle_range: tuple

    def __post_init__(self):
        lo, hi = self.angle_range
        if not lo < hi:
            raise DataError(f"joint {self.name!r}: range min {lo} must be < max {hi}")


@dataclass(frozen=True)
class MtuParams:
    shape_factor: float
    f_max_iso: float
    l_opt: float
    l_slack: float
    alpha_opt: float
    damping: float = DEFAULT_DAMPING

    def __post_init__(self):
        problems = []
        if not E_MIN <= self.shape_factor < 0:
            problems.append(f"shape_factor {self.shape_factor} not in [-3, 0)")
        if not self.f_max_iso > 0:
            problems.append(f"f_max_iso {self.f_max_iso} must be > 0")
        if not self.l_opt > 0:
            problems.append(f"l_opt {self.l_opt} must be > 0")
        if not self.l_slack > 0:
            problems.append(f"l_slack {self.l_slack} must be > 0")
        if not 0 <= self.alpha_opt < math.pi / 2:
            problems.append(f"alpha_opt {self.alpha_opt} not in [0, pi/2)")
        if not self.damping >= 0:
            problems.append(f"damping {self.damping} must be >= 0")
        if problems:
            raise DataError("; ".join(problems))

    def to_dict(self):
        return {"shape_factor": self.shape_factor, "f_max_iso": self.f_max_iso, "l_opt": self.l_opt,
                "l_slack": self.l_slack, "alpha_opt": self.alpha_opt, "damping": self.damping}


@dataclass(frozen=True)
class MtuDef:
    name: str
    spanned_joints: tuple
    emg_channel: str | None
    params: MtuParams
    geometry_path: str | None = None


@dataclass(frozen=True, eq=False)
class ModelDef:
    name: str
    joints: tuple
    mtus: tuple
    mvc: MappingProxyType
    geometry: MappingProxyType  # mtu name -> GeometrySurrogate

    @property
    def joint_names(self):
        return tuple(j.name for j in self.joints)

    @property
    def mtu_names(self):
        return tuple(m.name for m in self.mtus)

    @property
    def emg_channels(self):
        return tuple(self.mvc)

    def mtu(self, name):
        for m in self.mtus:
            if m.name == name:
                return m
        raise KeyError(name)

    def params(self):
        return {m.name: m.params for m in self.mtus}

    def with_params(self, params):
        """Copy with some or all MTU parameters replaced."""
        mtus = tuple(replace(m, params=params.get(m.name, m.params)) for m in self.mtus)
        return replace(self, mtus=mtus)

    def structure(self):
        """Plain-data view, handy for equality checks."""
        return {
            "name": self.name,
            "joints": [(j.name, tuple(j.angle_range)) for j in self.joints],
            "mtus": [(m.name, m.spanned_joints, m.emg_channel, m.params.to_dict()) for m in self.mtus],
            "mvc": dict(self.mvc),
        }


def _field(obj, key, where, kind=None):
    if not isinstance(obj, dict) or key not in obj:
        raise DataError(f"{where}: missing field {key!r}")
    val = obj[key]
    if kind is not None and not isinstance(val, kind):
        raise DataError(f"{where}.{key}: expected {getattr(kind, '__name__', kind)}, got {type(val).__name__}")
    return val


def _number(obj, key, where):
    val = _field(obj, key, where)
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise DataError(f"{where}.{key}: expected a number, got {val!r}")
    return float(val)


def parse_model(doc, base_dir=".", grids=None, source="<model>"):
    """Validate a decoded model document. ``grids`` may supply GeometryGrid
    objects by MTU name instead of reading files."""
    if not isinstance(doc, dict):
        raise DataError(f"{source}: top level must be an object")
    version = _field(doc, "schema_version", source)
    if version != SCHEMA_VERSION:
        raise DataError(f"{source}: unsupported schema_version {version!r}")
    name = doc.get("name", os.path.splitext(os.path.basename(source))[0])

    joints = []
    for i, j in enumerate(_field(doc, "joints", source, list)):
        where = f"{source}: joints[{i}]"
        rng = _field(j, "range", where, list)
        if len(rng) != 2:
            raise DataError(f"{where}.range: expected [min, max]")
        joints.append(JointDef(_field(j, "name", where, str), (float(rng[0]), float(rng[1]))))
    names = [j.name for j in joints]
    dup = {n for n in names if names.count(n) > 1}
    if dup:
        raise DataError(f"{source}: duplicate joint names {sorted(dup)}")
    if not joints:
        raise DataError(f"{source}: model has no joints")

    mvc_doc = _field(doc, "mvc", source, dict)
    mvc = {}
    for ch, v in mvc_doc.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not v > 0:
            raise DataError(f"{source}: mvc[{ch!r}] must be a positive number, got {v!r}")
        mvc[ch] = float(v)

    mtus = []
    surrogates = {}
    joint_by_name = {j.name: j for j in joints}
    for i, m in enumerate(_field(doc, "mtus", source, list)):
        where = f"{source}: mtus[{i}]"
        mname = _field(m, "name", where, str)
        where = f"{source}: mtu {mname!r}"
        spanned = tuple(_field(m, "joints", where, list))
        if not spanned:
            raise DataError(f"{where}: spans no joints")
        for jn in spanned:
            if jn not in joint_by_name:
                raise DataError(f"{where}: unknown joint {jn!r}")
        emg = m.get("emg")
        if emg in (None, "none"):
            emg = None
        elif emg not in mvc:
            raise DataError(f"{where}: EMG channel {emg!r} has no MVC entry")
        pdoc = _field(m, "params", where, dict)
        try:
            params = MtuParams(
                shape_factor=_number(pdoc, "shape_factor", where + ".params"),
                f_max_iso=_number(pdoc, "f_max_iso", where + ".params"),
                l_opt=_number(pdoc, "l_opt", where + ".params"),
                l_slack=_number(pdoc, "l_slack", where + ".params"),
                alpha_opt=_number(pdoc, "alpha_opt", where + ".params"),
                damping=float(pdoc.get("damping", DEFAULT_DAMPING)),
            )
        except DataError as exc:
            raise DataError(f"{where}: {exc}") from None
        gpath = None
        if grids is not None and mname in grids:
            grid = grids[mname]
        else:
            rel = _field(m, "geometry", where, str)
            gpath = os.path.normpath(os.path.join(base_dir, rel))
            if not os.path.exists(gpath):
                raise DataError(f"{where}: geometry file {gpath} not found")
            grid = load_grid(gpath, mname)
        if set(grid.dofs) != set(spanned):
            raise DataError(f"{where}: geometry DOFs {grid.dofs} do not match spanned joints {spanned}")
        for jn in spanned:
            jd = joint_by_name[jn]
            if not grid.covers(jn, *jd.angle_range):
                raise DataError(f"{where}: geometry grid does not cover range of joint {jn!r}")
        surrogates[mname] = fit_surrogate(grid)
        mtus.append(MtuDef(mname, spanned, emg, params, gpath))
    mnames = [m.name for m in mtus]
    dup = {n for n in mnames if mnames.count(n) > 1}
    if dup:
        raise DataError(f"{source}: duplicate MTU names {sorted(dup)}")
    if not mtus:
        raise DataError(f"{source}: model has no muscle-tendon units")
    return ModelDef(name, tuple(joints), tuple(mtus), MappingProxyType(mvc), MappingProxyType(surrogates))


def load_model(path):
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    return parse_model(doc, os.path.dirname(os.path.abspath(path)), source=path)


def model_document(model, out_dir):
    mtus = []
    for m in model.mtus:
        entry = {"name": m.name, "joints": list(m.spanned_joints), "emg": m.emg_channel,
                 "params": m.params.to_dict()}
        if m.geometry_path is not None:
            entry["geometry"] = os.path.relpath(m.geometry_path, out_dir).replace(os.sep, "/")
        mtus.append(entry)
    return {
        "schema_version": SCHEMA_VERSION,
        "name": model.name,
        "joints": [{"name": j.name, "range": list(j.angle_range)} for j in model.joints],
        "mvc": dict(model.mvc),
        "mtus": mtus,
    }


def save_model(model, path):
    out_dir = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_document(model, out_dir), fh, indent=2)
        fh.write("\n")


# --- traces ------------------------------------------------------------------


@dataclass(frozen=True)
class Frame:
    t: float
    values: MappingProxyType


@dataclass(frozen=True, eq=False)
class Trace:
    """Time-stamped multichannel samples, immutable after construction."""

    time: np.ndarray
    channels: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))

    def __post_init__(self):
        t = np.array(self.time, dtype=float)
        if t.ndim != 1:
            raise DataError("trace time must be one-dimensional")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            k = int(np.argmax(np.diff(t) <= 0)) + 1
            raise DataError(f"trace time not strictly increasing at row {k} (t={t[k]})")
        t.flags.writeable = False
        chans = {}
        for name, v in dict(self.channels).items():
            a = np.array(v, dtype=float)
            if a.shape != t.shape:
                raise DataError(f"channel {name!r} has {a.size} samples, time has {t.size}")
            a.flags.writeable = False
            chans[name] = a
        object.__setattr__(self, "time", t)
        object.__setattr__(self, "channels", MappingProxyType(chans))

    def __len__(self):
        return self.time.size

    def __getitem__(self, name):
        return self.channels[name]

    @property
    def names(self):
        return tuple(self.channels)

    def frame(self, k):
        return Frame(float(self.time[k]), MappingProxyType({n: float(v[k]) for n, v in self.channels.items()}))

    def frames(self):
        for k in range(len(self)):
            yield self.frame(k)

    def select(self, names):
        missing = [n for n in names if n not in self.channels]
        if missing:
            raise DataError(f"trace is missing channels {missing}")
        return Trace(self.time, {n: self.channels[n] for n in names})

    def until(self, t_end):
        """Prefix with samples at or before ``t_end``."""
        k = int(np.searchsorted(self.time, t_end, side="right"))
        return Trace(self.time[:k], {n: v[:k] for n, v in self.channels.items()})

    def with_channels(self, extra):
        merged = dict(self.channels)
        merged.update(extra)
        return Trace(self.time, merged)

    @property
    def dt(self):
        return float(np.median(np.diff(self.time))) if len(self) > 1 else float("nan")


_UNIT_SCALE = {"rad": 1.0, "deg": math.pi / 180.0}


def _split_unit(header):
    h = header.strip()
    if h.endswith("]") and "[" in h:
        name, unit = h[:-1].split("[", 1)
        unit = unit.strip().lower()
        if unit not in _UNIT_SCALE:
            raise DataError(f"unknown unit {unit!r} in column {header!r}")
        return name.strip(), _UNIT_SCALE[unit]
    return h, 1.0


def load_trace(path, expected_channels=None):
    """Read a CSV trace; first column must be ``time`` (seconds).

    Column headers may carry a unit suffix, ``ankle_r[deg]``, which is
    converted to radians.
    """
    path = os.fspath(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if not header or header[0].strip() != "time":
            raise DataError(f"{path}: first column must be 'time'")
        cols = [_split_unit(h) for h in header[1:]]
        ncol = len(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != ncol:
                raise DataError(f"{path}:{lineno}: expected {ncol} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                bad = next(i for i, v in enumerate(row) if not _is_float(v))
                raise DataError(f"{path}:{lineno}: non-numeric value {row[bad]!r} in column {header[bad]!r}") from None
    data = np.array(rows, dtype=float).reshape(-1, ncol)
    t = data[:, 0]
    if t.size > 1 and not np.all(np.diff(t) > 0):
        k = int(np.argmax(np.diff(t) <= 0)) + 1
        raise DataError(f"{path}:{k + 2}: time not strictly increasing (t={t[k]})")
    channels = {}
    for i, (name, scale) in enumerate(cols, start=1):
        channels[name] = data[:, i] * scale if scale != 1.0 else data[:, i]
    if expected_channels is not None:
        missing = [c for c in expected_channels if c not in channels]
        if missing:
            raise DataError(f"{path}: missing channel columns {missing}")
    return Trace(t, channels)


def _is_float(v):
    try:
        float(v)
        return True
    except ValueError:
        return False


def write_trace(trace, path, channels=None):
    names = list(channels) if channels is not None else list(trace.names)
    cols = [trace.time] + [trace[n] for n in names]
    data = np.column_stack(cols) if cols[0].size else np.empty((0, len(cols)))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(["time"] + names) + "\n")
        for row in data:
            fh.write(",".join(format(v, ".17g") for v in row) + "\n")
