"""Frame metrics, best-of-K selection, diversity score and action transitions.

Frame indices inside traces count from the first generated frame, so the
default diversity windows ``(10, 25)`` and ``(25, 40)`` skip the first ten
generated frames.  Windows are half-open ``[start, stop)``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionMismatch, FrameTooSmall
from .synthdata import STILL, _atomic_write_bytes

DEFAULT_WINDOWS = ((10, 25), (25, 40))
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
RESERVED_COLUMNS = ("lpips", "fvd")   # filled by external tools, left blank here


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionMismatch(f"frame shapes differ: {x.shape} vs {y.shape}")
    return x, y


def mse(x, y) -> float:
    x, y = _pair(x, y)
    return float(np.mean((x - y) ** 2))


def psnr(x, y) -> float:
    """``10 log10(1 / MSE)`` for unit-range frames; ``inf`` when identical."""
    err = mse(x, y)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _local_mean(img, w):
    win = sliding_window_view(img, w.shape, axis=(-2, -1))
    return np.einsum("...ij,ij->...", win, w)


def ssim(x, y, data_range: float = 1.0) -> float:
    """Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5)."""
    x, y = _pair(x, y)
    if x.ndim != 2:
        raise DimensionMismatch(f"ssim expects 2-D frames, got shape {x.shape}")
    if min(x.shape) < SSIM_WINDOW:
        raise FrameTooSmall(f"frame {x.shape} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    return float(ssim_map(x, y, data_range).mean())


def ssim_map(x, y, data_range: float = 1.0) -> np.ndarray:
    """Local SSIM values; accepts stacks of frames ``(..., H, W)``."""
    w = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx, my = _local_mean(x, w), _local_mean(y, w)
    vx = _local_mean(x * x, w) - mx * mx
    vy = _local_mean(y * y, w) - my * my
    cxy = _local_mean(x * y, w) - mx * my
    num = (2 * mx * my + c1) * (2 * cxy + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return num / den


def frame_curves(ground_truth, trace) -> dict[str, np.ndarray]:
    """Per-frame MSE, PSNR and SSIM of one trace against its ground truth."""
    gt, tr = _pair(ground_truth, trace)
    if gt.ndim != 3:
        raise DimensionMismatch(f"expected (T, H, W) clips, got {gt.shape}")
    err = ((gt - tr) ** 2).mean((1, 2))
    with np.errstate(divide="ignore"):
        ps = np.where(err == 0.0, np.inf, 10.0 * np.log10(1.0 / np.where(err == 0.0, 1.0, err)))
    if min(gt.shape[1:]) < SSIM_WINDOW:
        raise FrameTooSmall(f"frame {gt.shape[1:]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    ss = ssim_map(gt, tr).mean((1, 2))
    return {"mse": err, "psnr": ps, "ssim": ss}


_HIGHER_IS_BETTER = {"mse": False, "psnr": True, "ssim": True}


def best_of_k(ground_truth, traces, metric: str = "mse") -> tuple[int, np.ndarray]:
    """Trace whose mean metric over the horizon is best; ties go to the lowest id.

    Returns ``(trace_id, per_frame_curve)``.
    """
    if metric not in _HIGHER_IS_BETTER:
        raise ValueError(f"metric must be one of {sorted(_HIGHER_IS_BETTER)}")
    if len(traces) < 1:
        raise ValueError("best_of_k needs at least one trace")
    curves = [frame_curves(ground_truth, t)[metric] for t in traces]
    scores = np.array([c.mean() for c in curves])
    # argmax/argmin return the first optimum, which is the lowest id
    best = int(np.argmax(scores) if _HIGHER_IS_BETTER[metric] else np.argmin(scores))
    return best, curves[best]


def _window_slice(window, horizon):
    a, b = window
    if not (0 <= a < b <= horizon):
        raise ValueError(f"window {window} outside horizon {horizon}")
    if b - a < 2:
        raise ValueError("a window needs at least two frames")
    return slice(a, b)


def classify_traces(traces, classifier, window) -> np.ndarray:
    """Classifier verdict per trace over ``window``."""
    out = []
    for tr in traces:
        tr = np.asarray(tr)
        out.append(int(classifier(tr[_window_slice(window, len(tr))])))
    return np.asarray(out, dtype=np.int64)


def _changed(context_actions, verdicts) -> int:
    # a STILL verdict differs from any motion action and equals a STILL context
    return int(np.sum(np.asarray(context_actions) != np.asarray(verdicts)))


def diversity_score(traces, context_actions, classifier, window=DEFAULT_WINDOWS[0]) -> float:
    """Fraction of traces whose classified action over ``window`` differs from the context action."""
    ctx = np.asarray(context_actions, dtype=np.int64)
    if len(ctx) != len(traces):
        raise DimensionMismatch(f"{len(traces)} traces but {len(ctx)} context actions")
    if len(ctx) == 0:
        raise ValueError("diversity_score needs at least one trace")
    verdicts = classify_traces(traces, classifier, window)
    return _changed(ctx, verdicts) / len(ctx)


def transition_matrix(traces, context_actions, classifier, window=DEFAULT_WINDOWS[0],
                      num_actions: int | None = None) -> np.ndarray:
    """Counts ``(context action, classified action)``.

    Shape ``(K, K + 1)``; the last column counts STILL verdicts so rows always
    sum to the number of traces per context action.
    """
    ctx = np.asarray(context_actions, dtype=np.int64)
    if len(ctx) != len(traces):
        raise DimensionMismatch(f"{len(traces)} traces but {len(ctx)} context actions")
    verdicts = classify_traces(traces, classifier, window)
    return transition_counts(ctx, verdicts, num_actions)


def transition_counts(context_actions, verdicts, num_actions: int | None = None) -> np.ndarray:
    ctx = np.asarray(context_actions, dtype=np.int64)
    verdicts = np.asarray(verdicts, dtype=np.int64)
    if num_actions is None:
        num_actions = int(max(ctx.max(initial=-1), verdicts.max(initial=-1))) + 1
    if (ctx < 0).any() or (ctx >= num_actions).any():
        raise ValueError("context actions must be motion actions in [0, K)")
    counts = np.zeros((num_actions, num_actions + 1), dtype=np.int64)
    cols = np.where(verdicts == STILL, num_actions, verdicts)
    np.add.at(counts, (ctx, cols), 1)
    return counts


def off_diagonal_mass(counts) -> Fraction:
    """``1 - trace / total`` as an exact fraction."""
    counts = np.asarray(counts)
    total = int(counts.sum())
    if total == 0:
        raise ValueError("empty transition matrix")
    k = counts.shape[0]
    return 1 - Fraction(int(np.trace(counts[:, :k])), total)


def branch_point_ratio(stats, boundaries, margin: int = 3) -> tuple[float, float, float]:
    """Mean statistic at segment boundaries over its mean at mid-segment frames.

    ``stats`` is a list of per-frame arrays, ``boundaries`` the matching lists
    of boundary frame indices.  Mid-segment frames are at least ``margin``
    frames from every boundary; frame 0 counts as neither.  Returns
    ``(ratio, boundary_mean, mid_mean)``.
    """
    at, mid = [], []
    for s, b in zip(stats, boundaries):
        s = np.asarray(s, dtype=np.float64)
        b = np.asarray(b, dtype=np.int64)
        t = np.arange(1, len(s))
        is_b = np.isin(t, b)
        far = np.all(np.abs(t[:, None] - b[None, :]) >= margin, axis=1) if len(b) else np.ones(len(t), bool)
        at.append(s[t[is_b]])
        mid.append(s[t[far & ~is_b]])
    at, mid = np.concatenate(at), np.concatenate(mid)
    if len(at) == 0 or len(mid) == 0:
        raise ValueError("need both boundary and mid-segment frames")
    return float(at.mean() / mid.mean()), float(at.mean()), float(mid.mean())


# -- report ------------------------------------------------------------------

@dataclass
class EvalReport:
    """Everything ``evaluate`` writes.

    ``curves`` rows are ``(context_id, trace_id, frame, mse, psnr, ssim)``.
    ``best`` maps metric name to ``(context_id, trace_id, curve)`` winners.
    """
    curves: list = field(default_factory=list)
    best: dict = field(default_factory=dict)
    diversity: dict = field(default_factory=dict)
    transitions: dict = field(default_factory=dict)
    action_names: list = field(default_factory=list)
    num_contexts: int = 0
    num_traces: int = 0

    def summary_rows(self) -> list[tuple]:
        rows = [("num_contexts", "", self.num_contexts), ("num_traces", "", self.num_traces)]
        for metric, winners in sorted(self.best.items()):
            if not winners:
                continue
            curve = np.mean([c for _, _, c in winners], axis=0)
            rows.append((f"best_of_k_{metric}", "all", _fmt(float(np.mean(curve)))))
            for lo, hi in ((0, 10), (10, 25), (25, 40)):
                if hi <= len(curve):
                    rows.append((f"best_of_k_{metric}", f"{lo}-{hi}", _fmt(float(np.mean(curve[lo:hi])))))
        for window, score in sorted(self.diversity.items()):
            rows.append(("diversity", f"{window[0]}-{window[1]}", _fmt(score)))
        return rows


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return repr(v)


def _csv_bytes(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode("utf-8")


def write_report(report: EvalReport, out_dir) -> list[Path]:
    """Serialize a report as CSV files under ``out_dir``; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, header, rows):
        path = out / name
        _atomic_write_bytes(path, _csv_bytes(header, rows))
        written.append(path)

    put("curves.csv", ("context_id", "trace_id", "generated_frame", "mse", "psnr", "ssim") + RESERVED_COLUMNS,
        ((c, k, t, _fmt(m), _fmt(p), _fmt(s), "", "") for c, k, t, m, p, s in report.curves))
    best_rows = []
    for metric, winners in sorted(report.best.items()):
        for ctx, k, curve in winners:
            best_rows += [(metric, ctx, k, t, _fmt(v)) for t, v in enumerate(curve)]
    put("best_of_k.csv", ("metric", "context_id", "trace_id", "generated_frame", "value"), best_rows)
    put("summary.csv", ("metric", "window", "value") + RESERVED_COLUMNS,
        ((m, w, v, "", "") for m, w, v in report.summary_rows()))
    names = list(report.action_names) + ["still"]
    for window, counts in sorted(report.transitions.items()):
        k = counts.shape[0]
        put(f"transitions_{window[0]}-{window[1]}.csv", ["context_action"] + names[:k] + ["still"],
            ([names[a]] + [int(v) for v in counts[a]] for a in range(k)))
    return written
