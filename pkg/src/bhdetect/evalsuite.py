"""Scoring of tracker output against ground truth: detection range, false
alarms per hour, SOC curves over the window length, and zero-false-alarm search.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tracker
from .errors import ContractError, InsufficientDataError

MATCH_RADIUS_PX = 5.0

# Reported flight-test results (window, mean range m, SEOM m). Documentation
# constants for side-by-side reporting; synthetic runs are never checked
# against them.
FLIGHT_TEST_REFERENCE = {
    "headon": {"window": 31, "mean_range_m": 1560.0, "seom_m": 109.0, "cases": 10},
    "stationary": {"window": 15, "mean_range_m": 1972.0, "seom_m": 120.0, "cases": 2},
    "vehicles": {"window": 19, "mean_range_m": 1923.0, "seom_m": 423.0, "cases": 4},
    "multi": {"window": 22, "mean_range_m": 1720.0, "seom_m": None, "cases": 1},
}
FLIGHT_TEST_SOC_ANCHORS = {31: 0.0, 16: 48.0}  # window -> false alarms per hour


@dataclass
class EvalCase:
    case_id: str
    masks: object  # sequence of (H, W) binary masks
    truth: list  # list[scenegen.FrameTruth]
    frame_rate_hz: float = 15.0
    _candidates: list | None = field(default=None, repr=False)

    @property
    def n_frames(self) -> int:
        return len(self.truth)

    def candidates(self) -> list:
        if self._candidates is None:
            self._candidates = [tracker.extract_candidates(m, k) for k, m in enumerate(self.masks)]
        return self._candidates


@dataclass
class CaseResult:
    case_id: str
    detected: bool
    detection_range_m: float | None
    false_alarm_count: int
    n_frames: int
    target_ranges_m: list  # first detection range per truth target (None if missed)
    vehicle_false_alarms: int = 0


@dataclass
class EvalReport:
    window: int
    cases: list[CaseResult]
    mean_range_m: float | None
    seom_m: float | None
    fa_per_hour: float
    total_frames: int

    @property
    def n_detected(self) -> int:
        return sum(c.detected for c in self.cases)

    @property
    def false_alarms(self) -> int:
        return sum(c.false_alarm_count for c in self.cases)


@dataclass
class SocPoint:
    window: int
    mean_detection_range_m: float | None
    false_alarms_per_hour: float
    n_cases: int
    n_detected: int
    seom_m: float | None


def _chebyshev(a, b) -> float:
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def _frame(truth, k: int):
    if not 0 <= k < len(truth):
        raise ContractError(f"event frame {k} outside truth range [0, {len(truth)})")
    return truth[k]


def match_target(event, truth, radius: float = MATCH_RADIUS_PX) -> int | None:
    """Index of the nearest visible true target within ``radius`` (Chebyshev)."""
    ft = _frame(truth, event.frame_index)
    best, best_d = None, math.inf
    for i, t in enumerate(ft.targets):
        if not t.visible:
            continue
        d = _chebyshev(event.centroid, (t.cy, t.cx))
        if d <= radius and d < best_d:
            best, best_d = i, d
    return best


def classify_events(events, truth, radius: float = MATCH_RADIUS_PX):
    """Split events into (valid, false_alarms). Vehicles never validate."""
    valid, false = [], []
    for e in events:
        (valid if match_target(e, truth, radius) is not None else false).append(e)
    return valid, false


def detection_range(event, truth, radius: float = MATCH_RADIUS_PX) -> float:
    i = match_target(event, truth, radius)
    if i is None:
        raise ContractError(f"event {event} does not match any visible target")
    return truth[event.frame_index].targets[i].range_m


def near_vehicle(event, truth, radius: float = MATCH_RADIUS_PX) -> bool:
    return any(_chebyshev(event.centroid, (v.cy, v.cx)) <= radius for v in _frame(truth, event.frame_index).vehicles)


def false_alarms_per_hour(fa_count: int, total_frames: int, frame_rate_hz: float) -> float:
    if total_frames < 1 or frame_rate_hz <= 0:
        raise ContractError("need total_frames >= 1 and frame_rate_hz > 0")
    return fa_count / (total_frames / (frame_rate_hz * 3600.0))


def seom(values) -> float:
    """Standard error of the mean (sample sd with n - 1, divided by sqrt(n))."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise InsufficientDataError(f"SEOM needs at least 2 values, got {v.size}")
    return float(v.std(ddof=1) / math.sqrt(v.size))


def evaluate_case(case: EvalCase, window: int, radius: float = MATCH_RADIUS_PX) -> CaseResult:
    events = tracker.run_candidates(case.candidates(), window)
    n_targets = len(case.truth[0].targets) if case.truth else 0
    first: list = [None] * n_targets
    first_frame = [math.inf] * n_targets
    fa = veh = 0
    for e in events:
        i = match_target(e, case.truth, radius)
        if i is None:
            fa += 1
            veh += near_vehicle(e, case.truth, radius)
        elif e.frame_index < first_frame[i]:
            first_frame[i] = e.frame_index
            first[i] = case.truth[e.frame_index].targets[i].range_m
    hits = [(f, r) for f, r in zip(first_frame, first) if r is not None]
    rng = max(hits, key=lambda fr: (-fr[0], fr[1]))[1] if hits else None
    return CaseResult(case.case_id, bool(hits), rng, fa, case.n_frames, first, veh)


def evaluate(cases, window: int, radius: float = MATCH_RADIUS_PX) -> EvalReport:
    results = [evaluate_case(c, window, radius) for c in cases]
    ranges = [r.detection_range_m for r in results if r.detected]
    total_frames = sum(r.n_frames for r in results)
    rate = cases[0].frame_rate_hz if cases else 15.0
    return EvalReport(
        window=window,
        cases=results,
        mean_range_m=float(np.mean(ranges)) if ranges else None,
        seom_m=seom(ranges) if len(ranges) >= 2 else None,
        fa_per_hour=false_alarms_per_hour(sum(r.false_alarm_count for r in results), total_frames, rate),
        total_frames=total_frames,
    )


def soc_curve(cases, windows, radius: float = MATCH_RADIUS_PX) -> list[SocPoint]:
    """One operating point per window length, sorted by window."""
    points = []
    for w in sorted(set(windows)):
        rep = evaluate(cases, w, radius)
        points.append(
            SocPoint(w, rep.mean_range_m, rep.fa_per_hour, len(rep.cases), rep.n_detected, rep.seom_m)
        )
    return points


@dataclass
class ZfaResult:
    window: int | None  # None when no window up to w_max is alarm-free
    report: EvalReport | None
    scanned: list[tuple[int, int]]  # (window, pooled false alarms)

    @property
    def found(self) -> bool:
        return self.window is not None


def zfa_search(cases, w_max: int, radius: float = MATCH_RADIUS_PX) -> ZfaResult:
    """Smallest window in [1, w_max] with zero pooled false alarms (linear scan)."""
    if w_max < 1:
        raise ContractError("w_max must be >= 1")
    scanned = []
    for w in range(1, w_max + 1):
        rep = evaluate(cases, w, radius)
        scanned.append((w, rep.false_alarms))
        if rep.false_alarms == 0:
            return ZfaResult(w, rep, scanned)
    return ZfaResult(None, None, scanned)


# ----------------------------------------------------------------------- output


def _fmt(v) -> str:
    return "nan" if v is None else repr(float(v))


def soc_csv(points) -> str:
    lines = ["W,mean_range_m,seom_m,fa_per_hour,n_detected,n_cases\n"]
    for p in points:
        lines.append(
            f"{p.window},{_fmt(p.mean_detection_range_m)},{_fmt(p.seom_m)},"
            f"{_fmt(p.false_alarms_per_hour)},{p.n_detected},{p.n_cases}\n"
        )
    return "".join(lines)


def zfa_csv(report: EvalReport) -> str:
    lines = ["case,W,detected,detection_range_m,false_alarms\n"]
    for c in report.cases:
        lines.append(
            f"{c.case_id},{report.window},{int(c.detected)},{_fmt(c.detection_range_m)},{c.false_alarm_count}\n"
        )
    return "".join(lines)


def format_report(name: str, report: EvalReport) -> str:
    """One-paragraph summary in the usual "mean range and SEOM" style."""
    lines = [f"{name}: W={report.window}, detected {report.n_detected}/{len(report.cases)} cases"]
    for c in report.cases:
        rng = f"{c.detection_range_m:.0f} m" if c.detected else "missed"
        lines.append(f"  {c.case_id}: {rng}, {c.false_alarm_count} false alarms")
    if report.mean_range_m is not None:
        s = f", SEOM {report.seom_m:.0f} m" if report.seom_m is not None else ""
        lines.append(f"  mean detection range {report.mean_range_m:.0f} m{s}")
    ref = FLIGHT_TEST_REFERENCE.get(name)
    if ref:
        s = f", SEOM {ref['seom_m']:.0f} m" if ref["seom_m"] is not None else ""
        lines.append(f"  flight-test reference: W={ref['window']}, mean {ref['mean_range_m']:.0f} m{s}")
    return "\n".join(lines)


def soc_svg(points, width: int = 480, height: int = 360) -> str:
    """Mean detection range against false alarms per hour, one marker per W."""
    pts = [p for p in points if p.mean_detection_range_m is not None]
    m = 50
    if pts:
        xs = [p.false_alarms_per_hour for p in pts]
        ys = [p.mean_detection_range_m for p in pts]
    else:
        xs, ys = [0.0], [0.0]
    x_hi = max(xs) or 1.0
    y_lo, y_hi = min(ys), max(ys)
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 1.0, y_hi + 1.0

    def sx(v):
        return m + (width - 2 * m) * v / x_hi

    def sy(v):
        return height - m - (height - 2 * m) * (v - y_lo) / (y_hi - y_lo)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{m}" y1="{height - m}" x2="{width - m}" y2="{height - m}" stroke="black"/>',
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{height - m}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">false alarms per hour</text>',
        f'<text x="14" y="{height / 2}" transform="rotate(-90 14 {height / 2})" text-anchor="middle" '
        f'font-size="12">mean detection range (m)</text>',
        f'<text x="{m}" y="{height - m + 14}" font-size="10">0</text>',
        f'<text x="{width - m}" y="{height - m + 14}" font-size="10" text-anchor="end">{x_hi:.0f}</text>',
        f'<text x="{m - 4}" y="{sy(y_lo):.1f}" font-size="10" text-anchor="end">{y_lo:.0f}</text>',
        f'<text x="{m - 4}" y="{sy(y_hi):.1f}" font-size="10" text-anchor="end">{y_hi:.0f}</text>',
    ]
    if pts:
        poly = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in zip(xs, ys))
        out.append(f'<polyline points="{poly}" fill="none" stroke="steelblue"/>')
        for p, x, y in zip(pts, xs, ys):
            out.append(
                f'<text x="{sx(x):.1f}" y="{sy(y) + 4:.1f}" font-size="12" text-anchor="middle">*</text>'
                f'<title>W={p.window}</title>'
            )
    out.append("</svg>\n")
    return "\n".join(out)
