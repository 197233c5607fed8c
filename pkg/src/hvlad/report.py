"""Aggregation of evaluation reports into comparison tables and curves.

Runs are grouped by ``(variant, K, n_targets)``. Each group becomes one table
row whose accuracies are rendered as ``mean ± std`` percentages over the runs
(sample std, so at least two runs are needed for a spread).
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigMismatch
from .metrics import aggregate_mean_std, format_mean_std
from .traineval import EvalReport

COLUMNS = ("variant", "clusters", "n_targets", "runs", "top1", "top5", "step")


def load_reports(paths):
    return [EvalReport.from_json(Path(p).read_text(encoding="utf-8")) for p in paths]


def group_reports(reports, allow_mixed=False):
    """Ordered mapping ``(variant, K, n_targets) -> [EvalReport]``.

    Several variants in one report is almost always a mistake (a stray run
    directory), so it is refused unless ``allow_mixed``. A cluster or target
    sweep over a single variant is fine.
    """
    if not reports:
        raise ValueError("no reports to aggregate")
    variants = sorted({r.variant for r in reports})
    if len(variants) > 1 and not allow_mixed:
        raise ConfigMismatch(f"reports mix variants {variants}; pass --group to compare them")
    groups = {}
    for r in sorted(reports, key=lambda r: (r.group_key, r.seed, r.checkpoint)):
        groups.setdefault(r.group_key, []).append(r)
    for key, runs in groups.items():
        classes = {r.n_classes for r in runs}
        if len(classes) > 1:
            raise ConfigMismatch(f"group {key} mixes class counts {sorted(classes)}")
    return groups


def _cell(values):
    pct = [100.0 * v for v in values]
    if len(pct) == 1:
        return f"{pct[0]:.2f}"
    return format_mean_std(*aggregate_mean_std(pct))


@dataclass
class SummaryRow:
    variant: str
    clusters: int
    n_targets: int
    runs: int
    top1: str
    top5: str
    step: int

    def fields(self):
        return [str(getattr(self, c)) for c in COLUMNS]


def summarize(groups) -> list:
    rows = []
    for (variant, K, n_targets), runs in groups.items():
        rows.append(SummaryRow(variant, K, n_targets, len(runs),
                               _cell([r.top1 for r in runs]), _cell([r.top5 for r in runs]),
                               max(r.step for r in runs)))
    return rows


def table_text(rows, sep="\t") -> str:
    lines = [sep.join(COLUMNS)] + [sep.join(r.fields()) for r in rows]
    return "\n".join(lines) + "\n"


def mean_curve(runs):
    """Step axis and mean smoothed top-1 over runs that share the same steps."""
    steps = [tuple(s[0] for s in r.series) for r in runs]
    if len(set(steps)) != 1:
        raise ConfigMismatch("runs in a group were checkpointed at different steps")
    return np.array(steps[0]), np.mean([r.smoothed for r in runs], axis=0)


def group_label(key):
    variant, K, n_targets = key
    label = variant if variant in ("baseline1", "baseline3") else f"{variant} K={K}"
    return f"{label} targets={n_targets}"
