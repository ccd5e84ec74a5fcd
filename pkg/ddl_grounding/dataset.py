"""This module contains dataset manifest I/O and the synthetic corpus."""

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from .errors import InvalidBox, ManifestError
from .geometry import BoundingBox, ImageDims

log = logging.getLogger(__name__)

DEV = 'dev'
TEST = 'test'
SPLITS = (DEV, TEST)

SYNTHETIC_SIZE = 256
SYNTHETIC_MIN_SIDE = 40
SYNTHETIC_MAX_SIDE = 80
SYNTHETIC_MARGIN = 30


@dataclass
class ManifestEntry(object):
    """One annotated image."""

    image_id: str
    image_path: str
    ground_truth: list = field(default_factory=list)
    label: str = ''
    split: str = TEST
    width: int = None
    height: int = None

    @property
    def dims(self):
        """ImageDims when the manifest records them, else ``None``."""
        if self.width and self.height:
            return ImageDims(self.width, self.height)
        return None

    def to_dict(self, root=None):
        """Serialize, with ``image_path`` relative to ``root`` if given."""
        path = self.image_path
        if root is not None:
            path = os.path.relpath(path, root)
        payload = {
            'image_id': self.image_id,
            'image_path': path,
            'ground_truth': [b.as_list() for b in self.ground_truth],
            'label': self.label,
            'split': self.split,
        }
        if self.width and self.height:
            payload['width'] = self.width
            payload['height'] = self.height
        return payload


@dataclass
class DatasetManifest(object):
    """Ordered manifest entries."""

    entries: list = field(default_factory=list)
    path: str = ''

    def __len__(self):
        """Return the number of entries."""
        return len(self.entries)

    def __iter__(self):
        """Iterate entries in manifest order."""
        return iter(self.entries)

    def split(self, name):
        """Entries of one split, in manifest order."""
        return [e for e in self.entries if e.split == name]

    @property
    def dev(self):
        """Development entries used for prompt scoring."""
        return self.split(DEV)

    @property
    def test(self):
        """Held-out entries used for evaluation."""
        return self.split(TEST)

    def by_id(self):
        """Map image id to entry."""
        return {e.image_id: e for e in self.entries}


def _parse_entry(payload, root, check_paths):
    if not isinstance(payload, dict):
        raise ValueError('entry must be a JSON object')
    for key in ('image_id', 'image_path'):
        if not payload.get(key):
            raise ValueError('missing {0}'.format(key))
    split = payload.get('split', TEST)
    if split not in SPLITS:
        raise ValueError('unknown split {0!r}'.format(split))
    path = payload['image_path']
    if not os.path.isabs(path):
        path = os.path.normpath(os.path.join(root, path))
    if check_paths and not os.path.exists(path):
        raise ValueError('image not found: {0}'.format(path))
    width, height = payload.get('width'), payload.get('height')
    boxes = []
    for coords in payload.get('ground_truth', []):
        box = BoundingBox.from_sequence(coords)
        if width and height and (box.x1 < 0 or box.y1 < 0 or
                                 box.x2 > width or box.y2 > height):
            raise InvalidBox('box {0} outside {1}x{2} image'
                             .format(coords, width, height))
        boxes.append(box)
    return ManifestEntry(image_id=str(payload['image_id']), image_path=path,
                         ground_truth=boxes, label=payload.get('label', ''),
                         split=split, width=width, height=height)


def load_manifest(path, check_paths=True):
    """Parse a line-delimited JSON manifest.

    Image paths are resolved relative to the manifest's directory.

    :param path:        manifest file path
    :param check_paths: reject entries whose image file is missing
    :return: DatasetManifest
    :raises ManifestError: naming the offending line and cause
    """
    root = os.path.dirname(os.path.abspath(path))
    entries = []
    seen = set()
    with open(path, encoding='utf-8') as fh:
        for number, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                payload = json.loads(line)
            except ValueError as exc:
                raise ManifestError('invalid JSON: {0}'.format(exc),
                                    line=number, cause='json')
            try:
                entry = _parse_entry(payload, root, check_paths)
            except InvalidBox as exc:
                raise ManifestError('invalid ground truth box: {0}'
                                    .format(exc), line=number, cause='box')
            except (TypeError, ValueError) as exc:
                raise ManifestError(str(exc), line=number, cause='schema')
            if entry.image_id in seen:
                raise ManifestError('duplicate image id {0!r}'
                                    .format(entry.image_id),
                                    line=number, cause='duplicate')
            seen.add(entry.image_id)
            entries.append(entry)
    log.debug('Loaded manifest %s: entries=%s', path, len(entries))
    return DatasetManifest(entries, path=str(path))


def write_manifest(manifest, path):
    """Write a manifest with image paths relative to its directory."""
    root = os.path.dirname(os.path.abspath(path))
    with open(path, 'w', encoding='utf-8') as fh:
        for entry in manifest.entries:
            fh.write(json.dumps(entry.to_dict(root), sort_keys=True) + '\n')


def _synthetic_image(rng, box, size):
    background = rng.normal(60, 12, (size, size)).clip(0, 255)
    img = Image.fromarray(background.astype(np.uint8))
    intensity = int(rng.integers(170, 230))
    ImageDraw.Draw(img).ellipse(box.as_list(0), fill=intensity)
    return img


def make_synthetic_corpus(out_dir, n, seed, n_dev=0, size=SYNTHETIC_SIZE):
    """Write a corpus of grayscale images with one bright lesion each.

    Lesions are 40-80 px boxes kept at least 30 px from every edge.

    :param out_dir: target directory, created if needed
    :param n:       number of test images
    :param seed:    corpus seed
    :param n_dev:   number of additional development images
    :param size:    image side in pixels
    :return: DatasetManifest also written to ``out_dir/manifest.jsonl``
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    for index in range(n_dev + n):
        w, h = rng.integers(SYNTHETIC_MIN_SIDE, SYNTHETIC_MAX_SIDE + 1, 2)
        high = size - SYNTHETIC_MARGIN + 1
        x1 = int(rng.integers(SYNTHETIC_MARGIN, high - w))
        y1 = int(rng.integers(SYNTHETIC_MARGIN, high - h))
        box = BoundingBox(x1, y1, x1 + int(w), y1 + int(h))
        split = DEV if index < n_dev else TEST
        image_id = '{0}-{1:04d}'.format(split, index)
        path = os.path.join(out_dir, image_id + '.png')
        _synthetic_image(rng, box, size).save(path)
        entries.append(ManifestEntry(
            image_id=image_id, image_path=os.path.abspath(path),
            ground_truth=[box], label='lesion', split=split,
            width=size, height=size))
    manifest = DatasetManifest(
        entries, path=os.path.join(out_dir, 'manifest.jsonl'))
    write_manifest(manifest, manifest.path)
    log.info('Synthetic corpus: dev=%s, test=%s, dir=%s', n_dev, n, out_dir)
    return manifest
