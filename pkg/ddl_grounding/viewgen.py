"""Perturbation view roster and raster rendering of each view."""

import base64
import io
import logging
from dataclasses import dataclass

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import InvalidCount, UnsupportedImage
from .geometry import HFLIP, IDENTITY, ImageDims, TransformSpec

log = logging.getLogger(__name__)

DEFAULT_VIEWS = 7
ROTATION_DEGREES = 3.0
SCALE_FACTORS = (0.9, 1.1)
MAX_SHIFT_PX = 20

ROTATION_FIXED = 'fixed'
ROTATION_UNIFORM = 'uniform'

_FAMILIES = ('rotate', 'scale', 'translate', 'hflip')


@dataclass(frozen=True)
class ViewRoster(object):
    """Ordered perturbation specs for the M augmented views."""

    specs: tuple
    seed: int

    def __len__(self):
        """Return the number of views M."""
        return len(self.specs)

    def to_list(self):
        """Serialize the specs in roster order."""
        return [spec.to_dict() for spec in self.specs]


@dataclass
class RasterImage(object):
    """8-bit raster held as a numpy array (H x W or H x W x C)."""

    pixels: np.ndarray
    source: str = ''

    def __post_init__(self):
        """Reject empty buffers and non-8-bit data."""
        if self.pixels.ndim not in (2, 3) or 0 in self.pixels.shape[:2]:
            raise UnsupportedImage('Zero-sized or malformed raster: {0}'
                                   .format(self.source or self.pixels.shape))
        if self.pixels.dtype != np.uint8:
            raise UnsupportedImage('Only 8-bit rasters are supported, got {0}'
                                   .format(self.pixels.dtype))

    @property
    def dims(self):
        """ImageDims of the raster."""
        return ImageDims(int(self.pixels.shape[1]), int(self.pixels.shape[0]))

    @classmethod
    def open(cls, path):
        """Load a grayscale or RGB raster from disk.

        Other Pillow modes are converted to RGB.

        :param path: image file path
        :return: RasterImage
        """
        try:
            with Image.open(path) as img:
                if img.mode not in ('L', 'RGB'):
                    img = img.convert('RGB')
                pixels = np.array(img, dtype=np.uint8)
        except (UnidentifiedImageError, OSError, ValueError) as exc:
            raise UnsupportedImage('Cannot read image {0}: {1}'
                                   .format(path, exc))
        return cls(pixels, source=str(path))

    def to_pil(self):
        """Return a Pillow image sharing the pixel values."""
        return Image.fromarray(self.pixels)

    def to_data_url(self):
        """Encode the raster as a base64 PNG data URL."""
        buffer = io.BytesIO()
        self.to_pil().save(buffer, format='PNG')
        encoded = base64.b64encode(buffer.getvalue()).decode('ascii')
        return 'data:image/png;base64,{0}'.format(encoded)


def _check_seed(seed):
    if not 0 <= int(seed) < 2 ** 64:
        raise InvalidCount('Seed must be a 64-bit unsigned integer: {0}'
                           .format(seed))


def _draw_shift(rng):
    return TransformSpec.translate(
        int(rng.integers(-MAX_SHIFT_PX, MAX_SHIFT_PX + 1)),
        int(rng.integers(-MAX_SHIFT_PX, MAX_SHIFT_PX + 1)))


def make_roster(seed, m=DEFAULT_VIEWS, rotation=ROTATION_FIXED):
    """Build the deterministic view roster for one image.

    With ``m == 7`` the roster is the fixed family list: two rotations, two
    scalings, two seeded translations and one horizontal flip. Other sizes
    cycle through the four families in the same order.

    :param seed:     64-bit unsigned seed
    :param m:        number of perturbed views
    :param rotation: ``fixed`` for exactly +/-3 degrees or ``uniform`` to
                     draw angles from [-3, 3]
    :return: ViewRoster
    """
    if m < 1:
        raise InvalidCount('View count must be at least 1, got {0}'.format(m))
    if rotation not in (ROTATION_FIXED, ROTATION_UNIFORM):
        raise ValueError('Unknown rotation mode: {0}'.format(rotation))
    _check_seed(seed)
    rng = np.random.default_rng(int(seed))
    if m == DEFAULT_VIEWS:
        families = ('rotate', 'rotate', 'scale', 'scale',
                    'translate', 'translate', 'hflip')
    else:
        families = tuple(_FAMILIES[i % len(_FAMILIES)] for i in range(m))

    specs = []
    counts = {name: 0 for name in _FAMILIES}
    for family in families:
        index = counts[family]
        counts[family] += 1
        if family == 'rotate':
            if rotation == ROTATION_UNIFORM:
                angle = float(rng.uniform(-ROTATION_DEGREES, ROTATION_DEGREES))
            else:
                angle = ROTATION_DEGREES if index % 2 == 0 \
                    else -ROTATION_DEGREES
            specs.append(TransformSpec.rotate(angle))
        elif family == 'scale':
            specs.append(TransformSpec.scale(
                SCALE_FACTORS[index % len(SCALE_FACTORS)]))
        elif family == 'translate':
            specs.append(_draw_shift(rng))
        else:
            specs.append(TransformSpec.hflip())
    return ViewRoster(tuple(specs), int(seed))


def render_view(img, t):
    """Render a perturbed view of a raster.

    Rotation and scaling use bilinear resampling; uncovered pixels are black.

    :param img: RasterImage
    :param t:   TransformSpec
    :return: RasterImage of ``t.output_dims(img.dims)``
    """
    if t.kind == IDENTITY:
        return RasterImage(img.pixels.copy(), source=img.source)
    if t.kind == HFLIP:
        return RasterImage(np.ascontiguousarray(img.pixels[:, ::-1]),
                           source=img.source)
    out = t.output_dims(img.dims)
    # Pillow expects the map from output pixels back to input pixels.
    inverse = np.linalg.inv(t.matrix(img.dims))
    coeffs = tuple(float(v) for v in inverse[:2].ravel())
    fill = 0 if img.pixels.ndim == 2 else (0,) * img.pixels.shape[2]
    rendered = img.to_pil().transform(
        (out.width, out.height), Image.Transform.AFFINE, coeffs,
        resample=Image.Resampling.BILINEAR, fillcolor=fill)
    log.debug('Rendered view: transform=%s, size=%sx%s',
              t.to_dict(), out.width, out.height)
    return RasterImage(np.array(rendered, dtype=np.uint8), source=img.source)
