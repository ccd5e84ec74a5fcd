"""Detection metrics, confidence calibration and prompt score densities."""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .errors import DegenerateInput, InsufficientData
from .geometry import iou

log = logging.getLogger(__name__)

THRESHOLDS = (0.25, 0.5, 0.75)
N_BINS = 10
GRID_POINTS = 512
Z_95 = 1.96

SPLIT_NONE = 'none'
SPLIT_MEDIAN = 'median'
GOOD = 'Good'
BAD = 'Bad'
ALL = 'All'


@dataclass
class EvalSample(object):
    """Ground truth and consolidated predictions of one image."""

    image_id: str
    ground_truth: list = field(default_factory=list)
    predictions: list = field(default_factory=list)


def metric_name(threshold):
    """Return the report key of a threshold, e.g. ``mAP@50``."""
    return 'mAP@{0}'.format(int(round(threshold * 100)))


def _confidence(prediction):
    sigma = getattr(prediction, 'sigma', None)
    return 1.0 if sigma is None else float(sigma)


def _envelope_area(precision, recall):
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(samples, iou_threshold):
    """Single-class AP over globally pooled detections.

    Detections are ranked by sigma (unscored ones count as 1.0, keeping input
    order) and greedily matched to the highest-IoU unmatched ground truth of
    their image. AP is the area under the precision envelope.

    :param samples:       list of EvalSample
    :param iou_threshold: minimal IoU of a true positive
    :return: AP in [0, 1]
    """
    total_gt = sum(len(s.ground_truth) for s in samples)
    pooled = [(_confidence(p), i, p)
              for i, s in enumerate(samples) for p in s.predictions]
    if total_gt == 0:
        return 1.0 if not pooled else 0.0
    if not pooled:
        return 0.0
    pooled.sort(key=lambda item: -item[0])

    taken = [set() for _ in samples]
    hits = np.zeros(len(pooled))
    for rank, (_, index, prediction) in enumerate(pooled):
        best, best_iou = None, 0.0
        for g, truth in enumerate(samples[index].ground_truth):
            if g in taken[index]:
                continue
            overlap = iou(prediction.box, truth)
            if overlap > best_iou:
                best, best_iou = g, overlap
        if best is not None and best_iou >= iou_threshold:
            taken[index].add(best)
            hits[rank] = 1.0
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    return _envelope_area(tp / (tp + fp), tp / total_gt)


def evaluate(samples, thresholds=THRESHOLDS):
    """AP at every threshold, keyed like ``mAP@25``."""
    return {metric_name(t): average_precision(samples, t) for t in thresholds}


def calibration_pairs(samples):
    """Pair every scored prediction with its best IoU against ground truth.

    :return: list of ``(sigma, iou)``
    """
    pairs = []
    for sample in samples:
        for prediction in sample.predictions:
            if getattr(prediction, 'sigma', None) is None:
                continue
            best = max([iou(prediction.box, t) for t in sample.ground_truth],
                       default=0.0)
            pairs.append((float(prediction.sigma), best))
    return pairs


def significance_marker(p_value):
    """Return ``***``, ``**``, ``*`` or ``ns`` for a p-value."""
    if p_value is None:
        return 'ns'
    if p_value < 0.001:
        return '***'
    if p_value < 0.01:
        return '**'
    if p_value < 0.05:
        return '*'
    return 'ns'


def pearson_p_value(r, n):
    """Two-sided p-value of Pearson's r via the t-distribution."""
    if n < 3:
        return None
    if abs(r) >= 1.0:
        return 0.0
    t = r * math.sqrt((n - 2) / (1.0 - r * r))
    return float(2.0 * stats.t.sf(abs(t), n - 2))


@dataclass
class ReliabilityBin(object):
    """One equal-width confidence bin of the reliability diagram."""

    lower: float
    upper: float
    count: int = 0
    mean_confidence: float = None
    mean_iou: float = None
    ci_halfwidth: float = None


@dataclass
class CalibrationReport(object):
    """Agreement between reliability scores and localization quality."""

    n: int
    mean_iou: float
    mean_sigma: float
    std_sigma: float
    mae: float
    pearson_r: float = None
    pearson_p: float = None
    spearman_rho: float = None
    spearman_p: float = None
    kendall_tau: float = None
    kendall_p: float = None
    degenerate: bool = False
    bins: list = field(default_factory=list)

    @property
    def pearson_marker(self):
        """Significance marker of Pearson's r."""
        return significance_marker(self.pearson_p)

    def to_dict(self):
        """Serialize to a JSON-friendly dict."""
        return {
            'n': self.n,
            'mean_iou': self.mean_iou,
            'mean_sigma': self.mean_sigma,
            'std_sigma': self.std_sigma,
            'mae': self.mae,
            'pearson_r': self.pearson_r,
            'pearson_p': self.pearson_p,
            'pearson_marker': self.pearson_marker,
            'spearman_rho': self.spearman_rho,
            'spearman_p': self.spearman_p,
            'spearman_marker': significance_marker(self.spearman_p),
            'kendall_tau': self.kendall_tau,
            'kendall_p': self.kendall_p,
            'kendall_marker': significance_marker(self.kendall_p),
            'degenerate': self.degenerate,
            'bins': [vars(b).copy() for b in self.bins],
        }


def _bins(sigma, overlap, n_bins):
    index = np.clip(np.floor(sigma * n_bins).astype(int), 0, n_bins - 1)
    bins = []
    for b in range(n_bins):
        members = index == b
        count = int(members.sum())
        rb = ReliabilityBin(lower=b / float(n_bins),
                            upper=(b + 1) / float(n_bins), count=count)
        if count:
            rb.mean_confidence = float(sigma[members].mean())
            rb.mean_iou = float(overlap[members].mean())
            spread = float(overlap[members].std(ddof=1)) if count > 1 else 0.0
            rb.ci_halfwidth = Z_95 * spread / math.sqrt(count)
        bins.append(rb)
    return bins


def calibration(pairs, n_bins=N_BINS):
    """Calibration statistics of ``(sigma, iou)`` pairs.

    Correlations need at least three pairs. When either variable is constant
    the correlations are reported as zero and the report is flagged
    degenerate.

    :param pairs:  list of ``(sigma, iou)``
    :param n_bins: reliability diagram bins over [0, 1]
    :return: CalibrationReport
    """
    if not pairs:
        raise DegenerateInput('Calibration needs at least one pair')
    data = np.asarray(pairs, dtype=float)
    sigma, overlap = data[:, 0], data[:, 1]
    n = len(data)
    report = CalibrationReport(
        n=n,
        mean_iou=float(overlap.mean()),
        mean_sigma=float(sigma.mean()),
        std_sigma=float(sigma.std()),
        mae=float(np.abs(sigma - overlap).mean()),
        bins=_bins(sigma, overlap, n_bins))
    if n < 3:
        return report
    if np.ptp(sigma) == 0 or np.ptp(overlap) == 0:
        log.warning('Calibration input is constant, correlations undefined')
        report.degenerate = True
        report.pearson_r = report.spearman_rho = report.kendall_tau = 0.0
        report.pearson_p = report.spearman_p = report.kendall_p = 1.0
        return report
    r = float(np.clip(stats.pearsonr(sigma, overlap)[0], -1.0, 1.0))
    report.pearson_r = r
    report.pearson_p = pearson_p_value(r, n)
    rho, rho_p = stats.spearmanr(sigma, overlap)
    tau, tau_p = stats.kendalltau(sigma, overlap)
    report.spearman_rho, report.spearman_p = float(rho), float(rho_p)
    report.kendall_tau, report.kendall_p = float(tau), float(tau_p)
    return report


@dataclass
class KdeCurve(object):
    """Gaussian kernel density of prompt scores on a regular grid."""

    grid: np.ndarray
    density: np.ndarray
    bandwidth: float
    label: str = ALL
    n: int = 0

    def to_dict(self):
        """Serialize to a JSON-friendly dict."""
        return {'label': self.label, 'n': self.n, 'bandwidth': self.bandwidth,
                'grid': self.grid.tolist(), 'density': self.density.tolist()}


def _curve(values, label):
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        raise InsufficientData('KDE needs at least 2 scores for {0}, got {1}'
                               .format(label, len(values)))
    spread = float(values.std(ddof=1))
    if spread == 0:
        raise InsufficientData('KDE bandwidth degenerates: all {0} scores '
                               'are equal'.format(label))
    estimator = stats.gaussian_kde(values, bw_method='scott')
    h = spread * estimator.factor
    grid = np.linspace(values.min() - 4 * h, values.max() + 4 * h,
                       GRID_POINTS)
    return KdeCurve(grid=grid, density=estimator(grid), bandwidth=h,
                    label=label, n=len(values))


def kde(scores, split=SPLIT_NONE):
    """Estimate the score density, optionally split at the median.

    The bandwidth follows Scott's rule, ``h = s * n ** (-1 / 5)`` with the
    sample standard deviation ``s``.

    :param scores: prompt scores
    :param split:  ``none`` for one ``All`` curve, ``median`` for ``Good``
                   (top half) and ``Bad`` (bottom half) curves
    :return: list of KdeCurve
    """
    scores = [float(s) for s in scores]
    if split == SPLIT_NONE:
        return [_curve(scores, ALL)]
    if split != SPLIT_MEDIAN:
        raise ValueError('Unknown split: {0}'.format(split))
    ranked = sorted(scores, reverse=True)
    half = len(ranked) // 2
    return [_curve(ranked[:half], GOOD), _curve(ranked[half:], BAD)]


def relative_improvement(baseline, treated):
    """Relative change in percent; ``None`` for a non-positive baseline."""
    if baseline is None or treated is None or baseline <= 0:
        return None
    return 100.0 * (treated - baseline) / baseline


def format_delta(delta):
    """Render a relative change like ``+92.3%``."""
    if delta is None:
        return 'undefined'
    if round(delta, 1) == 0:
        return '0.0%'
    return '{0:+.1f}%'.format(delta)


def improvement_table(baseline, treated):
    """Relative improvement of every metric the two runs share.

    :param baseline: dict metric -> value
    :param treated:  dict metric -> value
    :return: list of ``(metric, delta)``; delta is rounded to one decimal
             or ``None`` when undefined
    """
    rows = []
    for metric, value in baseline.items():
        if metric not in treated:
            continue
        delta = relative_improvement(value, treated[metric])
        rows.append((metric, None if delta is None
                     else round(delta, 1) + 0.0))
    return rows


def _cumulative(records):
    last = max(r.generation for r in records)
    for g in range(last + 1):
        pool = [r.score for r in records
                if r.generation <= g and r.score is not None]
        yield g, pool


def top_k_trajectory(records, k=3):
    """Mean of the k best scores of the cumulative pool per generation.

    :param records: PromptRecords of a history
    :return: list of ``(generation, mean)``
    """
    if not records:
        return []
    trajectory = []
    for g, pool in _cumulative(records):
        if pool:
            top = sorted(pool, reverse=True)[:k]
            trajectory.append((g, math.fsum(top) / len(top)))
    return trajectory


def kde_by_generation(records):
    """KDE of the cumulative score pool after every generation.

    Generations whose pool cannot support a density are skipped.

    :return: dict generation -> KdeCurve
    """
    curves = {}
    if not records:
        return curves
    for g, pool in _cumulative(records):
        try:
            curves[g] = _curve(pool, ALL)
        except InsufficientData as exc:
            log.debug('No KDE for generation %s: %s', g, exc)
    return curves


def render_text(report):
    """Plain-text rendering of an evaluation report dict."""
    lines = []
    for key, value in sorted(report.get('metrics', {}).items()):
        lines.append('{0:<10} {1:.4f}'.format(key, value))
    cal = report.get('calibration')
    if cal:
        lines.append('mean IoU   {0:.4f}'.format(cal['mean_iou']))
        lines.append('mean sigma {0:.4f} (std {1:.4f})'
                     .format(cal['mean_sigma'], cal['std_sigma']))
        lines.append('MAE        {0:.4f}'.format(cal['mae']))
        if cal.get('pearson_r') is not None:
            lines.append('pearson r  {0:.4f} {1}'
                         .format(cal['pearson_r'], cal['pearson_marker']))
    for metric, delta in report.get('improvement', []):
        lines.append('delta {0:<10} {1}'.format(metric, format_delta(delta)))
    counts = report.get('counts')
    if counts:
        lines.append(', '.join('{0}={1}'.format(k, v)
                               for k, v in sorted(counts.items())))
    return '\n'.join(lines)
