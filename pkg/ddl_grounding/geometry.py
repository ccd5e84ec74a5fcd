"""Axis-aligned box arithmetic and spatial transforms of boxes.

Coordinates are pixels with the origin at the top-left corner, x growing
rightward and y growing downward. Values stay real-valued; rounding happens
only when results are serialized.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateResult, InvalidBox

IDENTITY = 'identity'
ROTATE = 'rotate'
SCALE = 'scale'
TRANSLATE = 'translate'
HFLIP = 'hflip'

TRANSFORM_KINDS = (IDENTITY, ROTATE, SCALE, TRANSLATE, HFLIP)


@dataclass(frozen=True)
class BoundingBox(object):
    """Axis-aligned rectangle ``[x1, y1, x2, y2]``."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        """Reject non-finite and zero-area boxes."""
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise InvalidBox('Box has non-finite coordinates: {0}'
                             .format(list(coords)))
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBox('Box must satisfy x1 < x2 and y1 < y2: {0}'
                             .format(list(coords)))

    @classmethod
    def from_sequence(cls, coords):
        """Build a box from any 4-item sequence of numbers.

        :param coords: ``[x1, y1, x2, y2]``
        :return: BoundingBox
        """
        if len(coords) != 4:
            raise InvalidBox('Expected 4 coordinates, got {0}'
                             .format(len(coords)))
        return cls(*(float(c) for c in coords))

    @property
    def width(self):
        """Box width in pixels."""
        return self.x2 - self.x1

    @property
    def height(self):
        """Box height in pixels."""
        return self.y2 - self.y1

    @property
    def area(self):
        """Box area in square pixels."""
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self):
        """Box center as an ``(x, y)`` tuple."""
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def as_list(self, ndigits=None):
        """Return ``[x1, y1, x2, y2]``, optionally rounded.

        :param ndigits: passed to ``round``; ``0`` yields integers
        """
        coords = [self.x1, self.y1, self.x2, self.y2]
        if ndigits is None:
            return coords
        if ndigits == 0:
            return [int(round(c)) for c in coords]
        return [round(c, ndigits) for c in coords]


@dataclass(frozen=True)
class ImageDims(object):
    """Raster dimensions in pixels."""

    width: int
    height: int

    def __post_init__(self):
        """Reject non-positive dimensions."""
        if self.width <= 0 or self.height <= 0:
            raise InvalidBox('Image dimensions must be positive: {0}x{1}'
                             .format(self.width, self.height))


def _scaled_side(side, factor):
    return max(1, int(math.floor(side * factor + 0.5)))


@dataclass(frozen=True)
class TransformSpec(object):
    """One invertible spatial perturbation.

    Rotation and scaling pivot on the image center. Positive angles rotate
    counter-clockwise as displayed.
    """

    kind: str = IDENTITY
    angle: float = 0.0
    factor: float = 1.0
    dx: float = 0.0
    dy: float = 0.0

    def __post_init__(self):
        """Validate the transform parameters."""
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError('Unknown transform kind: {0}'.format(self.kind))
        if self.kind == SCALE and not self.factor > 0:
            raise ValueError('Scale factor must be positive: {0}'
                             .format(self.factor))

    @classmethod
    def identity(cls):
        """Return the identity transform."""
        return cls(IDENTITY)

    @classmethod
    def rotate(cls, angle):
        """Return a rotation by ``angle`` degrees about the image center."""
        return cls(ROTATE, angle=float(angle))

    @classmethod
    def scale(cls, factor):
        """Return a scaling by ``factor`` about the image center."""
        return cls(SCALE, factor=float(factor))

    @classmethod
    def translate(cls, dx, dy):
        """Return a shift by ``(dx, dy)`` pixels."""
        return cls(TRANSLATE, dx=float(dx), dy=float(dy))

    @classmethod
    def hflip(cls):
        """Return a horizontal (left-right) flip."""
        return cls(HFLIP)

    def inverse(self):
        """Return the inverse transform specification."""
        if self.kind == ROTATE:
            return TransformSpec.rotate(-self.angle)
        if self.kind == SCALE:
            return TransformSpec.scale(1.0 / self.factor)
        if self.kind == TRANSLATE:
            return TransformSpec.translate(-self.dx, -self.dy)
        return self

    def output_dims(self, dims):
        """Return the dimensions of the transformed view.

        Only scaling changes the canvas; the new side is ``round(side * s)``.

        :param dims: ImageDims of the input view
        """
        if self.kind != SCALE:
            return dims
        return ImageDims(_scaled_side(dims.width, self.factor),
                         _scaled_side(dims.height, self.factor))

    def matrix(self, dims):
        """Return the 3x3 affine matrix mapping input to view coordinates.

        :param dims: ImageDims of the input view
        :return: numpy array of shape (3, 3)
        """
        cx, cy = dims.width / 2.0, dims.height / 2.0
        if self.kind == ROTATE:
            theta = math.radians(self.angle)
            c, s = math.cos(theta), math.sin(theta)
            return np.array([[c, s, cx - c * cx - s * cy],
                             [-s, c, cy + s * cx - c * cy],
                             [0.0, 0.0, 1.0]])
        if self.kind == SCALE:
            out = self.output_dims(dims)
            f = self.factor
            return np.array([[f, 0.0, out.width / 2.0 - f * cx],
                             [0.0, f, out.height / 2.0 - f * cy],
                             [0.0, 0.0, 1.0]])
        if self.kind == TRANSLATE:
            return np.array([[1.0, 0.0, self.dx],
                             [0.0, 1.0, self.dy],
                             [0.0, 0.0, 1.0]])
        if self.kind == HFLIP:
            return np.array([[-1.0, 0.0, float(dims.width)],
                             [0.0, 1.0, 0.0],
                             [0.0, 0.0, 1.0]])
        return np.eye(3)

    def to_dict(self):
        """Serialize to a JSON-friendly dict holding only relevant fields."""
        payload = {'kind': self.kind}
        if self.kind == ROTATE:
            payload['angle'] = self.angle
        elif self.kind == SCALE:
            payload['factor'] = self.factor
        elif self.kind == TRANSLATE:
            payload['dx'] = self.dx
            payload['dy'] = self.dy
        return payload

    @classmethod
    def from_dict(cls, payload):
        """Deserialize a dict produced by :meth:`to_dict`."""
        return cls(**payload)


def iou(a, b):
    """Intersection over union of two boxes.

    :param a: BoundingBox
    :param b: BoundingBox
    :return: ratio in [0, 1]
    """
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(rows, cols):
    """Pairwise IoU between two box lists.

    :param rows: list of BoundingBox
    :param cols: list of BoundingBox
    :return: numpy array of shape (len(rows), len(cols))
    """
    out = np.zeros((len(rows), len(cols)))
    for i, a in enumerate(rows):
        for j, b in enumerate(cols):
            out[i, j] = iou(a, b)
    return out


def clamp_coords(x1, y1, x2, y2, dims):
    """Clamp raw coordinates to the frame and build a box.

    :raises DegenerateResult: when the clamped box has zero area
    """
    cx1 = min(max(x1, 0.0), dims.width)
    cx2 = min(max(x2, 0.0), dims.width)
    cy1 = min(max(y1, 0.0), dims.height)
    cy2 = min(max(y2, 0.0), dims.height)
    if not (cx1 < cx2 and cy1 < cy2):
        raise DegenerateResult(
            'Box [{0}, {1}, {2}, {3}] collapses outside a {4}x{5} frame'
            .format(x1, y1, x2, y2, dims.width, dims.height))
    return BoundingBox(float(cx1), float(cy1), float(cx2), float(cy2))


def clamp(box, dims):
    """Clamp a box to the frame of ``dims``."""
    return clamp_coords(box.x1, box.y1, box.x2, box.y2, dims)


def _map_corners(box, matrix):
    corners = np.array([[box.x1, box.y1, 1.0],
                        [box.x2, box.y1, 1.0],
                        [box.x1, box.y2, 1.0],
                        [box.x2, box.y2, 1.0]])
    mapped = corners.dot(matrix.T)
    xs, ys = mapped[:, 0], mapped[:, 1]
    return xs.min(), ys.min(), xs.max(), ys.max()


def apply_transform(box, t, dims):
    """Map a box into the frame of a transformed view.

    The result is the axis-aligned bounding box of the four mapped corners,
    clamped to the transformed frame.

    :param box:  BoundingBox in input coordinates
    :param t:    TransformSpec
    :param dims: ImageDims of the input image
    :return: BoundingBox in view coordinates
    """
    x1, y1, x2, y2 = _map_corners(box, t.matrix(dims))
    return clamp_coords(x1, y1, x2, y2, t.output_dims(dims))


def _unrotate_extent(box, t, inverse):
    # The forward AABB of a w x h box has extents
    # (w|c| + h|s|, w|s| + h|c|); solve that system for (w, h).
    theta = math.radians(t.angle)
    c, s = abs(math.cos(theta)), abs(math.sin(theta))
    det = c * c - s * s
    if det <= 0:
        return None
    w = (c * box.width - s * box.height) / det
    h = (c * box.height - s * box.width) / det
    if w <= 0 or h <= 0:
        return None
    cx, cy = box.center
    ox, oy, _ = inverse.dot([cx, cy, 1.0])
    return ox - w / 2.0, oy - h / 2.0, ox + w / 2.0, oy + h / 2.0


def invert_transform(box, t, dims_original):
    """Map a box from a transformed view back to the original frame.

    For rotations this recovers the box whose forward re-boxing equals
    ``box``, so a round trip is exact away from the frame edges; when no such
    box exists the AABB of the inversely rotated corners is used. Boxing the
    inversely rotated corners directly would enlarge the box a second time,
    because the view box is already the AABB of rotated corners.

    :param box:           BoundingBox in view coordinates
    :param t:             TransformSpec that produced the view
    :param dims_original: ImageDims of the original image
    :return: BoundingBox in original coordinates
    """
    inverse = np.linalg.inv(t.matrix(dims_original))
    coords = None
    if t.kind == ROTATE:
        coords = _unrotate_extent(box, t, inverse)
    if coords is None:
        coords = _map_corners(box, inverse)
    return clamp_coords(*coords, dims=dims_original)
