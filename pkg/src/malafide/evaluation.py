"""Fixed-polarity EER and the white-box / black-box evaluation matrix.

Polarity is never flipped: higher scores always mean bona fide. An attack that
pushes spoof scores above bona fide scores therefore yields EERs above 50%.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .attack import MalafideFilter, apply_filter
from .metrics import compute_eer, far_frr  # noqa: F401

SETTINGS = ("baseline", "white", "black")


def score_partition(detector, images, filt: MalafideFilter | None = None) -> np.ndarray:
    """Score images in order, filtering each one first when ``filt`` is given."""
    images = np.asarray(images, dtype=np.float64)
    if not getattr(detector, "frozen", False):
        raise ValueError("detector must be frozen")
    if filt is not None:
        images = apply_filter(images, filt)
    return detector.scores(images)


@dataclass
class EvalReport:
    cells: dict[tuple, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["detector", "attack", "filter_size", "setting", "eer_percent"])
        for (det, attack, size, setting), eer in sorted(self.cells.items(), key=_cell_order):
            w.writerow([det, attack, "" if size is None else size, setting, f"{eer:.6f}"])
        return buf.getvalue()

    def to_table(self) -> str:
        """Aligned text table: baseline block, then one W/B block per filter-training detector."""
        dets = sorted({k[0] for k in self.cells})
        attacks = sorted({k[1] for k in self.cells})
        sizes = sorted({k[2] for k in self.cells if k[2] is not None})
        black = any(k[3] == "black" for k in self.cells)
        width = 9
        head = "".join(f"{a:>{width * max(len(dets), 2 if black else 1)}}" for a in attacks)
        lines = [f"{'EER [%]':<14}{head}"]

        def fmt(v):
            return f"{v:>{width}.2f}" if v is not None else f"{'-':>{width}}"

        lines.append(f"{'baseline':<14}" + "".join(f"{d:>{width}}" for _ in attacks for d in dets))
        lines.append(f"{'no filter':<14}" + "".join(fmt(self.cells.get((d, a, None, 'baseline'))) for a in attacks for d in dets))
        for d in dets:
            cols = ("white", "black") if black else ("white",)
            lines.append("")
            lines.append(f"{'trained on ' + d:<14}" + "".join(f"{s[0].upper():>{width}}" for _ in attacks for s in cols))
            for L in sizes:
                row = "".join(fmt(self.cells.get((d, a, L, s))) for a in attacks for s in cols)
                lines.append(f"{f'{L}x{L}':<14}{row}")
        return "\n".join(lines) + "\n"


def _cell_order(item):
    (det, attack, size, setting), _ = item
    return (det, attack, -1 if size is None else size, SETTINGS.index(setting))


def cross_eval(detectors: dict, filters: dict, bona_part2, spoofs_part2: dict, sizes=None, metadata=None) -> EvalReport:
    """Build the full EER matrix on Part 2.

    ``filters`` maps ``(attack_id, L, trained_on_detector_id)`` to a filter.
    White cells score a filter on the detector it was trained on; black cells
    score it on the other detector. Cells are keyed by the training detector,
    except baseline cells, keyed by the scoring detector. Bona fide images are
    never filtered.
    """
    if len(detectors) > 2:
        raise ValueError("cross evaluation supports one or two detectors")
    for name, d in detectors.items():
        if not getattr(d, "frozen", False):
            raise ValueError(f"detector {name!r} is not frozen")
    if sizes is None:
        sizes = sorted({L for (_, L, _) in filters})
    sizes = sorted(int(L) for L in sizes)
    det_ids = sorted(detectors)
    attacks = sorted(spoofs_part2)
    missing = [(a, L, d) for d in det_ids for a in attacks for L in sizes if (a, L, d) not in filters]
    if missing:
        listing = ", ".join(f"attack={a} size={L} detector={d}" for a, L, d in missing)
        raise KeyError(f"missing filters for {len(missing)} cell(s): {listing}")

    report = EvalReport(metadata=dict(metadata or {}))
    bona_scores = {d: score_partition(detectors[d], bona_part2) for d in det_ids}
    for d in det_ids:
        for a in attacks:
            report.cells[(d, a, None, "baseline")] = compute_eer(
                bona_scores[d], score_partition(detectors[d], spoofs_part2[a])
            )
    for d in det_ids:
        others = [o for o in det_ids if o != d]
        for a in attacks:
            for L in sizes:
                filt = filters[(a, L, d)]
                filtered = apply_filter(spoofs_part2[a], filt)
                report.cells[(d, a, L, "white")] = compute_eer(bona_scores[d], detectors[d].scores(filtered))
                for o in others:
                    report.cells[(d, a, L, "black")] = compute_eer(bona_scores[o], detectors[o].scores(filtered))
    report.metadata.setdefault("detectors", det_ids)
    report.metadata.setdefault("attacks", attacks)
    report.metadata.setdefault("sizes", sizes)
    return report
