"""Cross-view consolidation of back-projected detections.

Referenced Hungarian consolidation (RHC) matches every view one-to-one
against the reference prediction and scores each reference box by how often
and how tightly it recurs. SA, WA and DBSCAN are the baseline strategies it
is compared with.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.cluster import DBSCAN

from .errors import ConfigError
from .geometry import BoundingBox, iou_matrix

log = logging.getLogger(__name__)

RHC = 'RHC'
SA = 'SA'
WA = 'WA'
DBSCAN_STRATEGY = 'DBSCAN'
STRATEGIES = (RHC, SA, WA, DBSCAN_STRATEGY)

_TIE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class ConsensusConfig(object):
    """Matching threshold and reliability weights."""

    tau: float = 0.1
    omega1: float = 0.6
    omega2: float = 0.4
    m: int = 7

    def __post_init__(self):
        """Validate the weights and the threshold."""
        if not 0.0 < self.tau < 1.0:
            raise ConfigError('tau must be in (0, 1): {0}'.format(self.tau))
        if self.omega1 < 0 or self.omega2 < 0 or \
                abs(self.omega1 + self.omega2 - 1.0) > 1e-9:
            raise ConfigError('omega1 + omega2 must equal 1: {0} + {1}'
                              .format(self.omega1, self.omega2))
        if self.m < 1:
            raise ConfigError('View count must be at least 1: {0}'
                              .format(self.m))


@dataclass
class MatchResult(object):
    """One view's accepted matches against the anchors.

    ``pairs`` maps an anchor index to ``(box, iou)``; ``unmatched`` lists the
    anchors left without a partner in this view.
    """

    view_index: int
    pairs: dict = field(default_factory=dict)
    unmatched: list = field(default_factory=list)


@dataclass(frozen=True)
class ConsolidatedDetection(object):
    """A consolidated box with its reliability.

    ``sigma`` is ``None`` for strategies that do not score their output.
    """

    box: BoundingBox
    sigma: float = None
    n_matched: int = 0
    mean_match_iou: float = 0.0
    label: str = ''


def _emaxx(table):
    # Potentials-based Hungarian method; requires len(rows) <= len(cols).
    n, m = len(table), len(table[0])
    inf = float('inf')
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            row = table[i0 - 1]
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    return {p[j] - 1: j - 1 for j in range(1, m + 1) if p[j]}


def _optimal(table, rows, cols):
    if not rows or not cols:
        return {}
    if len(rows) <= len(cols):
        sub = [[table[r][c] for c in cols] for r in rows]
        found = _emaxx(sub)
        return {rows[i]: cols[j] for i, j in found.items()}
    sub = [[table[r][c] for r in rows] for c in cols]
    found = _emaxx(sub)
    return {rows[j]: cols[i] for i, j in found.items()}


def _total(table, assignment):
    return math.fsum(table[r][c] for r, c in assignment.items())


def hungarian(costs):
    """Solve the rectangular linear assignment problem.

    Among all minimum-cost assignments covering ``min(rows, cols)`` pairs the
    lexicographically smallest list of ``(row, col)`` pairs is returned.

    :param costs: 2D array-like of finite costs
    :return: list of ``(row, col)`` sorted by row
    """
    matrix = np.asarray(costs, dtype=float)
    if matrix.size == 0:
        return []
    if matrix.ndim != 2:
        raise ValueError('Cost matrix must be 2D: shape {0}'
                         .format(matrix.shape))
    if not np.all(np.isfinite(matrix)):
        raise ValueError('Cost matrix has non-finite entries')
    table = matrix.tolist()
    n_rows, n_cols = matrix.shape
    cols = list(range(n_cols))
    current = _optimal(table, list(range(n_rows)), cols)
    best = _total(table, current)
    needed = min(n_rows, n_cols)

    fixed = {}
    fixed_cost = 0.0
    used = set()
    for i in range(n_rows):
        if len(fixed) == needed:
            break
        rest_rows = list(range(i + 1, n_rows))
        available = [c for c in cols if c not in used]
        limit = current.get(i)
        for j in available:
            if limit is not None and j >= limit:
                break
            sub_cols = [c for c in available if c != j]
            if min(len(rest_rows), len(sub_cols)) != needed - len(fixed) - 1:
                continue
            sub = _optimal(table, rest_rows, sub_cols)
            total = fixed_cost + table[i][j] + _total(table, sub)
            if total <= best + _TIE_TOLERANCE:
                current = dict(fixed)
                current[i] = j
                current.update(sub)
                break
        if i in current:
            fixed[i] = current[i]
            used.add(current[i])
            fixed_cost += table[i][current[i]]
    return sorted(fixed.items())


def consensus_score(match_ious, cfg):
    """Reliability of an anchor from the IoUs of its accepted matches.

    :param match_ious: IoU of every accepted match, one per view at most
    :param cfg:        ConsensusConfig
    :return: sigma in ``[omega1 / (M + 1), 1]``
    """
    n = len(match_ious)
    mean_iou = math.fsum(match_ious) / n if n else 0.0
    sigma = cfg.omega1 * (1 + n) / (cfg.m + 1) + cfg.omega2 * mean_iou
    return min(1.0, sigma)


def _check_views(views, cfg):
    if len(views) != cfg.m:
        raise ConfigError('Expected {0} views, got {1}'
                          .format(cfg.m, len(views)))


def match_views(anchors, views, cfg):
    """Match each view one-to-one against the anchors.

    Pairs whose IoU is below ``cfg.tau`` are discarded.

    :param anchors: reference DetectionSet
    :param views:   back-projected DetectionSets, one per perturbed view
    :param cfg:     ConsensusConfig
    :return: list of MatchResult in view order
    """
    _check_views(views, cfg)
    anchor_boxes = anchors.boxes
    results = []
    for index, view in enumerate(views):
        result = MatchResult(view_index=view.view_index or index + 1)
        boxes = view.boxes
        if anchor_boxes and boxes:
            overlaps = iou_matrix(anchor_boxes, boxes)
            for row, col in hungarian(1.0 - overlaps):
                if overlaps[row, col] >= cfg.tau:
                    result.pairs[row] = (boxes[col],
                                         float(overlaps[row, col]))
        result.unmatched = [i for i in range(len(anchor_boxes))
                            if i not in result.pairs]
        results.append(result)
    return results


def _anchor_matches(matches, index):
    return [m.pairs[index] for m in matches if index in m.pairs]


def rhc(anchors, views, cfg):
    """Referenced Hungarian consolidation.

    The output boxes are exactly the anchors, each scored by its consensus.

    :param anchors: reference DetectionSet
    :param views:   back-projected DetectionSets, ``len(views) == cfg.m``
    :param cfg:     ConsensusConfig
    :return: list of ConsolidatedDetection in anchor order
    """
    matches = match_views(anchors, views, cfg)
    output = []
    for index, anchor in enumerate(anchors.detections):
        ious = [overlap for _, overlap in _anchor_matches(matches, index)]
        output.append(ConsolidatedDetection(
            box=anchor.box,
            sigma=consensus_score(ious, cfg),
            n_matched=len(ious),
            mean_match_iou=math.fsum(ious) / len(ious) if ious else 0.0,
            label=anchor.label))
    log.debug('RHC: anchors=%s, sigma=%s', len(output),
              [round(d.sigma, 4) for d in output])
    return output


def consolidate_wa(anchors, views, cfg):
    """IoU-weighted averaging around the anchors.

    Each anchor (weight 1) is averaged with its matched boxes weighted by
    their IoU; sigma is computed as in :func:`rhc`.
    """
    matches = match_views(anchors, views, cfg)
    output = []
    for index, anchor in enumerate(anchors.detections):
        found = _anchor_matches(matches, index)
        weights = [1.0] + [overlap for _, overlap in found]
        boxes = [anchor.box] + [box for box, _ in found]
        total = math.fsum(weights)
        coords = [math.fsum(w * c for w, c in
                            zip(weights, (b.as_list()[k] for b in boxes)))
                  / total for k in range(4)]
        ious = weights[1:]
        output.append(ConsolidatedDetection(
            box=BoundingBox(*coords),
            sigma=consensus_score(ious, cfg),
            n_matched=len(ious),
            mean_match_iou=math.fsum(ious) / len(ious) if ious else 0.0,
            label=anchor.label))
    return output


def _mean_box(boxes):
    n = float(len(boxes))
    return BoundingBox(*(math.fsum(b.as_list()[k] for b in boxes) / n
                         for k in range(4)))


def consolidate_sa(views, tau=0.1):
    """Simple averaging without a reference anchor.

    Boxes are grouped greedily by IoU >= ``tau`` against each group's running
    centroid, reference boxes first and the remaining boxes in coordinate
    order, and every group is replaced by its coordinate mean.

    :param views: DetectionSets with the reference first
    :param tau:   grouping threshold
    :return: list of BoundingBox
    """
    if not views:
        return []
    reference = list(views[0].boxes)
    rest = sorted((box for view in views[1:] for box in view.boxes),
                  key=lambda b: b.as_list())
    groups = []
    centroids = []
    for box in reference + rest:
        best, best_iou = None, 0.0
        if centroids:
            overlaps = iou_matrix([box], centroids)[0]
            index = int(np.argmax(overlaps))
            best, best_iou = index, float(overlaps[index])
        if best is not None and best_iou >= tau:
            groups[best].append(box)
            centroids[best] = _mean_box(groups[best])
        else:
            groups.append([box])
            centroids.append(box)
    return centroids


def consolidate_dbscan(views, eps=0.9, min_pts=2, m=None):
    """Density clustering of the pooled boxes with distance ``1 - IoU``.

    Each cluster yields its coordinate-wise median box and a confidence
    mixing cluster size and tightness; noise boxes are dropped.

    :param views:   DetectionSets including the reference
    :param eps:     neighbourhood radius in ``1 - IoU`` units
    :param min_pts: minimum cluster size
    :param m:       number of perturbed views; defaults to ``len(views) - 1``
    :return: list of ``(BoundingBox, confidence)`` by descending confidence
    """
    m = len(views) - 1 if m is None else m
    pooled = sorted((box for view in views for box in view.boxes),
                    key=lambda b: b.as_list())
    if not pooled:
        return []
    distances = np.clip(1.0 - iou_matrix(pooled, pooled), 0.0, 1.0)
    labels = DBSCAN(eps=eps, min_samples=min_pts,
                    metric='precomputed').fit(distances).labels_
    clusters = []
    for label in sorted(set(labels.tolist()) - {-1}):
        members = np.flatnonzero(labels == label)
        coords = np.array([pooled[i].as_list() for i in members])
        box = BoundingBox(*(float(c) for c in np.median(coords, axis=0)))
        if len(members) > 1:
            block = distances[np.ix_(members, members)]
            spread = block[~np.eye(len(members), dtype=bool)].mean()
        else:
            spread = 0.0
        density = min(1.0, len(members) / float(m + 1))
        confidence = 0.5 * density + 0.5 * (1.0 - float(spread))
        clusters.append((box, confidence))
    log.debug('DBSCAN: pooled=%s, clusters=%s, noise=%s', len(pooled),
              len(clusters), int(np.sum(labels == -1)))
    return sorted(clusters, key=lambda item: (-item[1], item[0].as_list()))


def consolidate(strategy, anchors, views, cfg, eps=0.9, min_pts=2):
    """Run one consolidation strategy and normalize its output.

    :param strategy: one of ``RHC``, ``SA``, ``WA`` or ``DBSCAN``
    :param anchors:  reference DetectionSet
    :param views:    back-projected DetectionSets of the perturbed views
    :param cfg:      ConsensusConfig
    :param eps:      DBSCAN radius
    :param min_pts:  DBSCAN minimum cluster size
    :return: list of ConsolidatedDetection
    """
    if strategy == RHC:
        return rhc(anchors, views, cfg)
    if strategy == WA:
        return consolidate_wa(anchors, views, cfg)
    _check_views(views, cfg)
    label = anchors.detections[0].label if anchors.detections else ''
    if strategy == SA:
        return [ConsolidatedDetection(box=box, label=label)
                for box in consolidate_sa([anchors] + list(views), cfg.tau)]
    if strategy == DBSCAN_STRATEGY:
        return [ConsolidatedDetection(box=box, sigma=confidence, label=label)
                for box, confidence in consolidate_dbscan(
                    [anchors] + list(views), eps, min_pts, cfg.m)]
    raise ConfigError('Unknown consolidation strategy: {0}'.format(strategy))
