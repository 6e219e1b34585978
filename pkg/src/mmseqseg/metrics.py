"""Volumetric evaluation: per-class IU / MeanIU plus Dice, PPV and
Sensitivity over the clinical tumor regions.

All counting is exact integer arithmetic on confusion matrices; the
region scores binarize both volumes by membership in the region's
label set.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class RegionSpec:
    name: str
    labels: frozenset

    def __post_init__(self):
        if not self.labels:
            raise ValueError("region label set must be nonempty")
        if 0 in self.labels:
            raise ValueError("label 0 (normal tissue) cannot be in a region")


DEFAULT_REGIONS = (
    RegionSpec("complete", frozenset({1, 2, 3, 4})),
    RegionSpec("core", frozenset({1, 3, 4})),
    RegionSpec("enhancing", frozenset({4})),
)


def confusion(pred, truth, k):
    """K x K counts; entry (t, p) = voxels with true t predicted p."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.max() >= k or truth.max() >= k:
        raise ValueError(f"labels must be below {k}")
    idx = truth.reshape(-1).astype(np.int64) * k + pred.reshape(-1)
    return np.bincount(idx, minlength=k * k).reshape(k, k)


def mean_iu(cm):
    """Per-class IU and their mean over classes with nonempty union."""
    cm = np.asarray(cm, dtype=np.int64)
    k = cm.shape[0]
    diag = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - diag
    iu = np.full(k, np.nan)
    included = union > 0
    iu[included] = diag[included] / union[included]
    return iu, float(iu[included].mean())


def region_counts(pred, truth, region):
    pred_in = np.isin(pred, list(region.labels))
    truth_in = np.isin(truth, list(region.labels))
    return (int(np.count_nonzero(pred_in & truth_in)),
            int(np.count_nonzero(pred_in)),
            int(np.count_nonzero(truth_in)))


def scores_from_counts(inter, npred, ntruth):
    """Dice/PPV/Sensitivity with the empty-region conventions: both
    empty -> all 1; exactly one empty -> 0 (undefined ratio reported 0)."""
    if npred == 0 and ntruth == 0:
        return 1.0, 1.0, 1.0
    dice = 2.0 * inter / (npred + ntruth)
    ppv = inter / npred if npred else 0.0
    sens = inter / ntruth if ntruth else 0.0
    return dice, ppv, sens


def region_scores(pred, truth, region):
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    return scores_from_counts(*region_counts(pred, truth, region))


@dataclass
class MetricsReport:
    iu: np.ndarray
    mean_iu: float
    regions: dict = field(default_factory=dict)  # name -> (dice, ppv, sens)

    def to_text(self):
        """Canonical report: stable key order for diff-based testing."""
        lines = [f"mean_iu={self.mean_iu:.10g}"]
        for c, v in enumerate(self.iu):
            lines.append(f"iu[{c}]={'nan' if np.isnan(v) else format(v, '.10g')}")
        for name in sorted(self.regions):
            d, p, s = self.regions[name]
            lines.append(f"region[{name}].dice={d:.10g}")
            lines.append(f"region[{name}].ppv={p:.10g}")
            lines.append(f"region[{name}].sensitivity={s:.10g}")
        return "".join(l + "\n" for l in lines)


def evaluate(pred_volumes, truth_volumes, k, regions=DEFAULT_REGIONS):
    """Aggregate report over paired label volumes (voxel-pooled)."""
    cm = np.zeros((k, k), dtype=np.int64)
    counts = {r.name: [0, 0, 0] for r in regions}
    for pred, truth in zip(pred_volumes, truth_volumes):
        cm += confusion(pred, truth, k)
        for r in regions:
            i, p, t = region_counts(pred, truth, r)
            counts[r.name][0] += i
            counts[r.name][1] += p
            counts[r.name][2] += t
    iu, miu = mean_iu(cm)
    report = MetricsReport(iu=iu, mean_iu=miu)
    for r in regions:
        report.regions[r.name] = scores_from_counts(*counts[r.name])
    return report
