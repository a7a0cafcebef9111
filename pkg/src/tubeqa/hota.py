"""HOTA evaluation of predicted tubelets against ground truth.

For each localization threshold ``alpha`` the matching between predicted and
ground-truth detections is chosen, per sequence, to maximize

    HOTA_alpha**2 = sum_{g,p} n_gp**2 / (G_g + P_p - n_gp) / (G + P - TP)

where ``n_gp`` counts frames in which gt track ``g`` is matched to predicted
track ``p`` (with IoU >= alpha), ``G_g``/``P_p`` are per-track detection counts
and ``G``/``P``/``TP`` are totals.  The search runs frame by frame over the
maximal one-to-one matchings, keeping the Pareto front of count matrices; the
score is increasing in every ``n_gp`` so nothing optimal is pruned.  When the
front grows past ``max_states`` the sequence falls back to the usual per-frame
assignment weighted by track-level Jaccard alignment and is flagged as
approximate in the report.

Sequences are combined the usual way: DetA from summed TP/FN/FP, AssA as the
TP-weighted mean of per-sequence association scores.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .tubelet import BoundingBox, Tubelet, iou

ALPHAS: tuple[float, ...] = tuple(round(0.05 * k, 2) for k in range(1, 20))


@dataclass
class TrackSet:
    tracks: dict[str, list[Tubelet]]
    role: str = "prediction"

    def __post_init__(self):
        if self.role not in ("prediction", "ground_truth"):
            raise ValueError(f"unknown role {self.role!r}")
        for seq, tubes in self.tracks.items():
            ids = [t.object_id for t in tubes]
            if len(set(ids)) != len(ids):
                raise ValueError(f"{seq}: duplicate object_id among {self.role} tracks")


@dataclass
class AlphaCounts:
    tp: int = 0
    fn: int = 0
    fp: int = 0
    assoc_sum: float = 0.0

    def add(self, other: "AlphaCounts") -> None:
        self.tp += other.tp
        self.fn += other.fn
        self.fp += other.fp
        self.assoc_sum += other.assoc_sum


@dataclass
class AlphaScore:
    alpha: float
    tp: int
    fn: int
    fp: int
    det_a: float
    ass_a: float
    hota: float


@dataclass
class HOTAReport:
    alphas: list[AlphaScore]
    hota: float
    det_a: float
    ass_a: float
    per_sequence: dict[str, dict] = field(default_factory=dict)
    flags: dict[str, list[str]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "hota": self.hota,
            "det_a": self.det_a,
            "ass_a": self.ass_a,
            "alphas": [vars(a) for a in self.alphas],
            "per_sequence": self.per_sequence,
            "flags": self.flags,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HOTAReport":
        return cls(
            [AlphaScore(**a) for a in d["alphas"]],
            d["hota"],
            d["det_a"],
            d["ass_a"],
            d.get("per_sequence", {}),
            d.get("flags", {}),
        )


def _scores(counts: AlphaCounts, alpha: float) -> AlphaScore:
    denom = counts.tp + counts.fn + counts.fp
    det_a = counts.tp / denom if denom else 0.0
    ass_a = counts.assoc_sum / counts.tp if counts.tp else 0.0
    return AlphaScore(alpha, counts.tp, counts.fn, counts.fp, det_a, ass_a, math.sqrt(det_a * ass_a))


def _iou_matrix(pred: Sequence[BoundingBox], gt: Sequence[BoundingBox]) -> np.ndarray:
    m = np.zeros((len(pred), len(gt)))
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            m[i, j] = iou(p, g)
    return m


def match_scores(iou_mat: np.ndarray, alpha: float, secondary: np.ndarray | None = None) -> list[tuple[int, int]]:
    """One-to-one matching on an IoU matrix; returns (row, col) pairs.

    Maximizes the number of pairs with IoU >= alpha, then the summed IoU
    (times ``secondary`` when given).
    """
    iou_mat = np.asarray(iou_mat, dtype=float)
    if iou_mat.size == 0:
        return []
    feasible = iou_mat >= alpha
    score = iou_mat if secondary is None else iou_mat * secondary
    big = min(iou_mat.shape) + 1.0
    weight = np.where(feasible, big + score, 0.0)
    rows, cols = linear_sum_assignment(weight, maximize=True)
    return [(int(r), int(c)) for r, c in zip(rows, cols) if feasible[r, c]]


def match_frame(
    pred: Sequence[BoundingBox], gt: Sequence[BoundingBox], alpha: float, secondary: np.ndarray | None = None
) -> list[tuple[int, int]]:
    """Match predicted to ground-truth boxes of one frame; returns (pred, gt) index pairs."""
    return match_scores(_iou_matrix(pred, gt), alpha, secondary)


def _maximal_matchings(feasible: list[tuple[int, int]]) -> list[tuple[tuple[int, int], ...]]:
    """All maximal one-to-one matchings over a list of feasible (gt, pred) edges."""
    out = set()

    def rec(chosen, used_g, used_p, start):
        extended = False
        for k in range(len(feasible)):
            g, p = feasible[k]
            if g in used_g or p in used_p:
                continue
            extended = True
            if k >= start:
                rec(chosen + (feasible[k],), used_g | {g}, used_p | {p}, k + 1)
        if not extended:
            out.add(tuple(sorted(chosen)))

    rec((), frozenset(), frozenset(), 0)
    return sorted(out)


def hota_objective(n: Mapping[tuple[int, int], int], g_count: Sequence[int], p_count: Sequence[int]) -> float:
    """HOTA_alpha squared for one sequence given the pair-count matrix."""
    tp = sum(n.values())
    denom = sum(g_count) + sum(p_count) - tp
    if tp == 0 or denom == 0:
        return 0.0
    assoc = sum(c * c / (g_count[g] + p_count[p] - c) for (g, p), c in n.items() if c)
    return assoc / denom


def _pareto(states: set[tuple[int, ...]]) -> set[tuple[int, ...]]:
    ordered = sorted(states, key=lambda s: -sum(s))
    keep: list[tuple[int, ...]] = []
    for s in ordered:
        if not any(all(a >= b for a, b in zip(k, s)) for k in keep):
            keep.append(s)
    return set(keep)


@dataclass
class _Sequence:
    frames: list[tuple[list[int], list[int], np.ndarray]]
    g_count: list[int]
    p_count: list[int]


def _prepare(gt: list[Tubelet], pred: list[Tubelet]) -> _Sequence:
    frames = sorted({f for t in gt for f in t.boxes} | {f for t in pred for f in t.boxes})
    per_frame = []
    for f in frames:
        gi = [i for i, t in enumerate(gt) if f in t.boxes]
        pi = [i for i, t in enumerate(pred) if f in t.boxes]
        m = _iou_matrix([gt[i].boxes[f] for i in gi], [pred[i].boxes[f] for i in pi])
        per_frame.append((gi, pi, m))
    return _Sequence(per_frame, [len(t) for t in gt], [len(t) for t in pred])


def _counts_from_state(state, pairs, seq: _Sequence) -> AlphaCounts:
    n = dict(zip(pairs, state))
    tp = sum(state)
    assoc = sum(c * c / (seq.g_count[g] + seq.p_count[p] - c) for (g, p), c in n.items() if c)
    return AlphaCounts(tp, sum(seq.g_count) - tp, sum(seq.p_count) - tp, assoc)


def _exact(seq: _Sequence, alpha: float, max_states: int) -> AlphaCounts | None:
    ng, npred = len(seq.g_count), len(seq.p_count)
    pairs = [(g, p) for g in range(ng) for p in range(npred)]
    pair_index = {gp: k for k, gp in enumerate(pairs)}
    states = {tuple(0 for _ in pairs)}
    for gi, pi, m in seq.frames:
        edges = [(gi[a], pi[b]) for a in range(len(gi)) for b in range(len(pi)) if m[a, b] >= alpha]
        if not edges:
            continue
        options = _maximal_matchings(edges)
        nxt = set()
        for s in states:
            for opt in options:
                s2 = list(s)
                for gp in opt:
                    s2[pair_index[gp]] += 1
                nxt.add(tuple(s2))
        states = _pareto(nxt) if len(options) > 1 else nxt
        if len(states) > max_states:
            return None

    def key(s):
        n = dict(zip(pairs, s))
        return (hota_objective(n, seq.g_count, seq.p_count), sum(s), s)

    best = max(states, key=key)
    return _counts_from_state(best, pairs, seq)


def _approximate(seq: _Sequence, alpha: float) -> AlphaCounts:
    ng, npred = len(seq.g_count), len(seq.p_count)
    potential = np.zeros((ng, npred))
    for gi, pi, m in seq.frames:
        if m.size == 0:
            continue
        row = m.sum(axis=1, keepdims=True)
        col = m.sum(axis=0, keepdims=True)
        sim = m / np.maximum(row + col - m, np.finfo(float).eps)
        potential[np.ix_(gi, pi)] += sim
    gc = np.asarray(seq.g_count, dtype=float)[:, None]
    pc = np.asarray(seq.p_count, dtype=float)[None, :]
    align = potential / np.maximum(gc + pc - potential, np.finfo(float).eps)
    n: dict[tuple[int, int], int] = {}
    for gi, pi, m in seq.frames:
        if m.size == 0:
            continue
        for a, b in match_scores(m, alpha, align[np.ix_(gi, pi)]):
            n[(gi[a], pi[b])] = n.get((gi[a], pi[b]), 0) + 1
    pairs = sorted(n)
    return _counts_from_state(tuple(n[p] for p in pairs), pairs, seq)


def compute_hota(
    pred: TrackSet, gt: TrackSet, alphas: Sequence[float] = ALPHAS, max_states: int = 100_000
) -> HOTAReport:
    seqs = sorted(set(gt.tracks) | set(pred.tracks))
    flags: dict[str, list[str]] = {
        "missing_in_prediction": sorted(set(gt.tracks) - set(pred.tracks)),
        "missing_in_ground_truth": sorted(set(pred.tracks) - set(gt.tracks)),
        "approximate": [],
    }
    totals = [AlphaCounts() for _ in alphas]
    per_sequence = {}
    for name in seqs:
        seq = _prepare(gt.tracks.get(name, []), pred.tracks.get(name, []))
        seq_counts = []
        for k, alpha in enumerate(alphas):
            counts = _exact(seq, alpha, max_states)
            if counts is None:
                counts = _approximate(seq, alpha)
                if name not in flags["approximate"]:
                    flags["approximate"].append(name)
            totals[k].add(counts)
            seq_counts.append(_scores(counts, alpha))
        per_sequence[name] = {
            "hota": sum(s.hota for s in seq_counts) / len(seq_counts),
            "det_a": sum(s.det_a for s in seq_counts) / len(seq_counts),
            "ass_a": sum(s.ass_a for s in seq_counts) / len(seq_counts),
        }
    scores = [_scores(c, a) for c, a in zip(totals, alphas)]
    n = len(scores)
    return HOTAReport(
        scores,
        sum(s.hota for s in scores) / n,
        sum(s.det_a for s in scores) / n,
        sum(s.ass_a for s in scores) / n,
        per_sequence,
        flags,
    )


def write_report(report: HOTAReport, path, meta: dict | None = None) -> None:
    doc = report.to_dict()
    if meta:
        doc = {"meta": meta, **doc}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def read_report(path) -> HOTAReport:
    return HOTAReport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
