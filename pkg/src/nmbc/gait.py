"""Stride segmentation and per-cycle summaries."""

import logging
import math
import re
from dataclasses import dataclass

import numpy as np
from scipy.signal import find_peaks

log = logging.getLogger(__name__)

N_POINTS = 101
DEFAULT_MIN_PERIOD = 0.8
PROMINENCE_FRACTION = 0.2
OUTLIER_IQR_FACTOR = 3.0


@dataclass(frozen=True, eq=False)
class GaitCycle:
    index: int
    t_start: float
    t_end: float
    i_start: int
    i_end: int
    resampled: dict
    rms: dict


@dataclass(frozen=True)
class ConditionSummary:
    label: str
    mean_rms: dict
    count_before: dict
    count_after: dict


def segment(knee_angle, time, min_period=DEFAULT_MIN_PERIOD):
    """Peak indices of the knee angle delimiting strides.

    Peaks need a prominence of 20% of the signal's peak-to-peak range and
    are at least ``min_period`` seconds apart. Returns a list of
    (i_start, i_end) index pairs, one per consecutive peak pair.
    """
    x = np.asarray(knee_angle, dtype=float)
    t = np.asarray(time, dtype=float)
    if t.size < 3 or t[-1] - t[0] <= 2 * min_period:
        log.warning("trace too short to segment (%.3f s)", t[-1] - t[0] if t.size else 0.0)
        return []
    span = float(np.ptp(x))
    if span == 0.0:
        log.warning("constant knee angle: no strides found")
        return []
    dt = float(np.median(np.diff(t)))
    distance = max(1, int(round(min_period / dt)))
    peaks, _ = find_peaks(x, prominence=PROMINENCE_FRACTION * span, distance=distance)
    if peaks.size < 2:
        log.warning("fewer than two knee peaks: no strides found")
        return []
    return list(zip(peaks[:-1].tolist(), peaks[1:].tolist()))


def cycle_rms(values):
    """Root mean square over a cycle's native samples."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("empty cycle")
    return float(np.sqrt(np.mean(v * v)))


def resample_cycle(time, values, i_start, i_end, n=N_POINTS):
    t = time[i_start:i_end + 1]
    grid = np.linspace(t[0], t[-1], n)
    return np.interp(grid, t, values[i_start:i_end + 1])


def make_cycles(trace, boundaries, channels=None):
    names = trace.names if channels is None else channels
    cycles = []
    for k, (i0, i1) in enumerate(boundaries):
        res = {c: resample_cycle(trace.time, trace[c], i0, i1) for c in names}
        rms = {c: cycle_rms(trace[c][i0:i1]) for c in names}
        cycles.append(GaitCycle(k, float(trace.time[i0]), float(trace.time[i1]), i0, i1, res, rms))
    return cycles


def remove_outliers(values, factor=OUTLIER_IQR_FACTOR):
    """Drop values above Q3 + factor * IQR."""
    v = list(values)
    if len(v) < 4:
        log.warning("outlier removal needs at least 4 values, got %d; passing through", len(v))
        return v
    q1, q3 = np.percentile(v, [25, 75])
    fence = q3 + factor * (q3 - q1)
    return [x for x in v if x <= fence]


def summarize(label, cycles, channels=None):
    if not cycles:
        names = channels or ()
        return ConditionSummary(label, {c: float("nan") for c in names}, {c: 0 for c in names},
                                {c: 0 for c in names})
    names = channels or list(cycles[0].rms)
    mean_rms, before, after = {}, {}, {}
    for c in names:
        vals = [cy.rms[c] for cy in cycles]
        kept = remove_outliers(vals)
        mean_rms[c] = float(np.mean(kept))
        before[c] = len(vals)
        after[c] = len(kept)
    return ConditionSummary(label, mean_rms, before, after)


def average_sides(left, right, label=None):
    """Channel-wise mean of two per-side summaries (same channel keys)."""
    mean_rms = {c: 0.5 * (left.mean_rms[c] + right.mean_rms[c]) for c in left.mean_rms}
    before = {c: left.count_before[c] + right.count_before[c] for c in left.count_before}
    after = {c: left.count_after[c] + right.count_after[c] for c in left.count_after}
    return ConditionSummary(label or left.label, mean_rms, before, after)


def percent_change(assisted, nonassisted):
    """100 * (assisted - nonassisted) / nonassisted per channel; NaN where the
    non-assisted mean is zero."""
    if set(assisted.mean_rms) != set(nonassisted.mean_rms):
        raise ValueError("summaries cover different channels")
    out = {}
    for c, base in nonassisted.mean_rms.items():
        out[c] = float("nan") if base == 0 else 100.0 * (assisted.mean_rms[c] - base) / base
    return out


_SIDE = re.compile(r"_([lr])(?=_|$)")


def side_of(channel):
    m = _SIDE.search(channel)
    return m.group(1) if m else None


def strip_side(channel):
    return _SIDE.sub("", channel, count=1)


# --- sessions ----------------------------------------------------------------

REPORT_COLUMNS = ("condition", "channel", "mean_rms", "n_cycles", "n_kept", "percent_change")


def merge_traces(traces):
    """Interpolate every channel onto the first trace's time base."""
    from .model import Trace

    base = traces[0]
    chans = dict(base.channels)
    for tr in traces[1:]:
        for name in tr.names:
            if name in chans:
                raise ValueError(f"channel {name!r} appears in more than one file")
            chans[name] = np.interp(base.time, tr.time, tr[name])
    return Trace(base.time, chans)


def summarize_condition(label, trace, knee, channels=None, min_period=DEFAULT_MIN_PERIOD):
    """Per-channel summaries, each channel cut at its own side's knee peaks.

    ``knee`` maps side letter to knee channel, or is a single channel name
    used for every channel. Returns {channel: ConditionSummary}.
    """
    knees = knee if isinstance(knee, dict) else {None: knee}
    names = channels or [c for c in trace.names if c not in knees.values()]
    bounds = {}
    out = {}
    for c in names:
        kname = knees.get(side_of(c)) or knees.get(None) or next(iter(knees.values()))
        if kname not in bounds:
            bounds[kname] = segment(trace[kname], trace.time, min_period)
        cycles = make_cycles(trace, bounds[kname], [c])
        out[c] = summarize(label, cycles, [c])
    return out


def analyze_session(session, load=None):
    """Report rows for a session description.

    ``session`` is a dict with ``conditions`` (list of {label, files}),
    ``baseline`` (label of the non-assisted condition), ``knee`` (channel
    name, or {side: channel}) and optional ``channels`` and ``min_period``.
    Files are merged per condition with :func:`merge_traces`. Besides the
    per-channel rows, channels present on both sides get a side-averaged
    row under the side-less name.
    """
    from .model import load_trace

    load = load or load_trace
    conds = session["conditions"]
    labels = [c["label"] for c in conds]
    baseline = session.get("baseline", labels[0])
    if baseline not in labels:
        raise ValueError(f"baseline condition {baseline!r} not in session")
    knee = session["knee"]
    min_period = session.get("min_period", DEFAULT_MIN_PERIOD)
    summaries = {}
    for c in conds:
        tr = merge_traces([load(f) for f in c["files"]])
        per = summarize_condition(c["label"], tr, knee, session.get("channels"), min_period)
        merged = dict(per)
        # side-averaged entries
        by_base = {}
        for ch in per:
            if side_of(ch) is not None:
                by_base.setdefault(strip_side(ch), {})[side_of(ch)] = per[ch]
        for base, sides in by_base.items():
            if set(sides) == {"l", "r"} and base not in merged:
                l, r = sides["l"], sides["r"]
                cl, cr = next(iter(l.mean_rms)), next(iter(r.mean_rms))
                merged[base] = ConditionSummary(
                    c["label"], {base: 0.5 * (l.mean_rms[cl] + r.mean_rms[cr])},
                    {base: l.count_before[cl] + r.count_before[cr]},
                    {base: l.count_after[cl] + r.count_after[cr]})
        summaries[c["label"]] = merged
    rows = []
    base_s = summaries[baseline]
    for label in labels:
        for ch, s in summaries[label].items():
            pc = None
            if label != baseline and ch in base_s:
                pc = percent_change(s, base_s[ch])[ch]
                if math.isnan(pc):
                    pc = None
            rows.append({"condition": label, "channel": ch, "mean_rms": s.mean_rms[ch],
                         "n_cycles": s.count_before[ch], "n_kept": s.count_after[ch], "percent_change": pc})
    return rows
