"""Export of shifted reference points ranked by accumulated attention."""
from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass

import numpy as np

from .backbone import ModelAssembly, forward_video
from .errors import ContractError
from .tensor import no_grad


@dataclass(frozen=True)
class PointRecord:
    stage: int
    pathway: str
    rank: int
    point: int
    t: float
    h: float
    w: float
    frame: int          # nearest frame index for temporal coordinates between frames
    importance: float


FIELDS = tuple(PointRecord.__dataclass_fields__)


def trace_video(model: ModelAssembly, frames) -> dict:
    """Run one clip ``(T, H_img, W_img, 3)`` and collect every pathway's trace."""
    trace: dict = {}
    with no_grad():
        forward_video(model, frames, trace)
    return trace


def top_points(points: np.ndarray, importance: np.ndarray, topk: int | None) -> np.ndarray:
    """Indices of the ``topk`` most important points, importance descending,
    ties broken by point index."""
    order = np.lexsort((np.arange(importance.size), -importance))
    return order if topk is None else order[:topk]


def export_points(model: ModelAssembly, frames, topk: int | None = 50,
                  tolerance: float = 1e-4) -> tuple[list[PointRecord], dict]:
    """Per stage and pathway, the top-k shifted points and the total importance.

    Raises :class:`ContractError` if a pathway's importances do not sum to
    the token count ``T*H*W``.
    """
    tokens = int(np.prod(model.backbone.feature_shape))
    trace = trace_video(model, frames)
    records, totals = [], {}
    for stage in sorted(trace):
        for pathway in ("spatial", "temporal"):
            entry = trace[stage].get(pathway)
            if not entry:
                continue
            pts = np.asarray(entry["points"]).reshape(-1, 3)
            imp = np.asarray(entry["importance"]).reshape(-1)
            total = float(imp.sum())
            if abs(total - tokens) > tolerance:
                raise ContractError(f"stage {stage} {pathway}: importance sums to {total}, expected {tokens}")
            totals[(stage, pathway)] = total
            for rank, j in enumerate(top_points(pts, imp, topk)):
                t, h, w = (float(v) for v in pts[j])
                records.append(PointRecord(stage, pathway, rank, int(j), t, h, w,
                                           int(np.floor(t + 0.5)), float(imp[j])))
    return records, totals


def records_to_csv(records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(FIELDS)
    for r in records:
        row = list(astuple(r))
        for i in (4, 5, 6, 8):
            row[i] = repr(row[i])
        writer.writerow(row)
    return buf.getvalue()
