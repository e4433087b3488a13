"""Persistence filter over per-frame aircraft masks.

Candidates are 8-connected blobs of aircraft pixels. A track survives only
while every successive frame supplies a candidate inside the 10x10 gate
around its last centroid; once it has been present for W successive frames a
single detection is declared.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ContractError, SequencingError

GATE_HALF_WIDTH = 5.0
_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class Candidate:
    centroid: tuple[float, float]  # (row, col)
    pixel_count: int
    frame_index: int


@dataclass
class Track:
    id: int
    last_centroid: tuple[float, float]
    consecutive_count: int = 1
    history: list[tuple[float, float]] = field(default_factory=list)
    declared: bool = False


@dataclass(frozen=True)
class DetectionEvent:
    track_id: int
    frame_index: int
    centroid: tuple[float, float]


@dataclass
class TrackerState:
    tracks: list[Track] = field(default_factory=list)
    next_id: int = 0
    last_frame: int | None = None


def extract_candidates(mask: np.ndarray, frame_index: int = 0, min_pixels: int = 1) -> list[Candidate]:
    """8-connected components of a binary mask, ordered by centroid (row, col)."""
    labels, n = ndimage.label(np.asarray(mask) > 0, structure=_EIGHT)
    if n == 0:
        return []
    rows, cols = np.nonzero(labels)
    lab = labels[rows, cols]
    counts = np.bincount(lab, minlength=n + 1)[1:]
    r_mean = np.bincount(lab, weights=rows, minlength=n + 1)[1:] / np.maximum(counts, 1)
    c_mean = np.bincount(lab, weights=cols, minlength=n + 1)[1:] / np.maximum(counts, 1)
    cands = [
        Candidate((float(r), float(c)), int(k), frame_index)
        for r, c, k in zip(r_mean, c_mean, counts)
        if k >= min_pixels
    ]
    return sorted(cands, key=lambda cd: cd.centroid)


def gate_match(track_centroid, candidate_centroid, half_width: float = GATE_HALF_WIDTH) -> bool:
    """True iff the candidate lies in the 10x10 box centred on the track."""
    return (
        abs(candidate_centroid[0] - track_centroid[0]) <= half_width
        and abs(candidate_centroid[1] - track_centroid[1]) <= half_width
    )


def step(state: TrackerState, candidates, frame_index: int, window: int):
    """Advance the tracker by one frame; returns ``(state, events)``.

    Association is greedy on Euclidean centroid distance (ties broken by
    lower track id, then candidate order). Unmatched tracks are dropped,
    unmatched candidates open new tracks. ``state`` is updated in place.
    """
    if window < 1:
        raise ContractError(f"window must be >= 1, got {window}")
    if state.last_frame is not None and frame_index <= state.last_frame:
        raise SequencingError(f"frame {frame_index} does not follow frame {state.last_frame}")
    state.last_frame = frame_index
    candidates = list(candidates)

    pairs = []
    for t in state.tracks:
        for j, cd in enumerate(candidates):
            if gate_match(t.last_centroid, cd.centroid):
                d = math.hypot(cd.centroid[0] - t.last_centroid[0], cd.centroid[1] - t.last_centroid[1])
                pairs.append((d, t.id, j, t))
    pairs.sort(key=lambda p: p[:3])

    used_tracks: set[int] = set()
    used_cands: set[int] = set()
    survivors = []
    events = []
    for _, tid, j, t in pairs:
        if tid in used_tracks or j in used_cands:
            continue
        used_tracks.add(tid)
        used_cands.add(j)
        c = candidates[j].centroid
        t.last_centroid = c
        t.consecutive_count += 1
        t.history.append(c)
        survivors.append(t)

    for j, cd in enumerate(candidates):
        if j not in used_cands:
            survivors.append(Track(state.next_id, cd.centroid, 1, [cd.centroid]))
            state.next_id += 1

    survivors.sort(key=lambda t: t.id)
    for t in survivors:
        if not t.declared and t.consecutive_count >= window:
            t.declared = True
            events.append(DetectionEvent(t.id, frame_index, t.last_centroid))
    state.tracks = survivors
    return state, events


def run_candidates(candidate_lists, window: int) -> list[DetectionEvent]:
    state = TrackerState()
    events = []
    for k, cands in enumerate(candidate_lists):
        state, ev = step(state, cands, k, window)
        events.extend(ev)
    return events


def run_sequence(masks, window: int, min_pixels: int = 1) -> list[DetectionEvent]:
    """Fold :func:`step` over a mask sequence starting from an empty state."""
    return run_candidates(
        (extract_candidates(m, k, min_pixels) for k, m in enumerate(masks)), window
    )


def events_csv(events) -> str:
    rows = ["frame,track_id,centroid_row,centroid_col\n"]
    rows += [f"{e.frame_index},{e.track_id},{e.centroid[0]!r},{e.centroid[1]!r}\n" for e in events]
    return "".join(rows)
