"""This module contains common Pytest fixtures for unit tests."""

from unittest import mock

from pytest import fixture

from ddl_grounding.config import RunConfig
from ddl_grounding.dataset import DatasetManifest, ManifestEntry
from ddl_grounding.geometry import BoundingBox, ImageDims
from ddl_grounding.lvlm_client import Detection, DetectionSet, MockNoise


def _detection_set(boxes, view_index=0, label='lesion'):
    return DetectionSet([Detection(BoundingBox.from_sequence(b), label)
                         for b in boxes], view_index=view_index)


@fixture
def detections():
    """Build a DetectionSet from ``[x1, y1, x2, y2]`` lists."""
    return _detection_set


@fixture
def dims():
    """Dimensions of a 100x100 test image."""
    return ImageDims(100, 100)


@fixture
def truth():
    """Two ground truth boxes well inside a 100x100 frame."""
    return [BoundingBox(20, 20, 40, 45), BoundingBox(55, 50, 80, 70)]


@fixture
def quiet_noise():
    """Mock LVLM noise model without any noise."""
    return MockNoise()


@fixture
def manifest():
    """In-memory manifest with two dev and four test entries.

    The entries carry their dimensions, so the mock grounder never needs the
    image files.
    """
    boxes = [[40, 40, 90, 100], [120, 60, 180, 110], [60, 130, 110, 190],
             [150, 150, 210, 200], [80, 70, 130, 120], [100, 100, 160, 150]]
    entries = []
    for index, coords in enumerate(boxes):
        split = 'dev' if index < 2 else 'test'
        entries.append(ManifestEntry(
            image_id='{0}-{1:04d}'.format(split, index),
            image_path='/nonexistent/{0}.png'.format(index),
            ground_truth=[BoundingBox.from_sequence(coords)],
            label='lesion', split=split, width=256, height=256))
    return DatasetManifest(entries)


@fixture
def run_config(tmp_path):
    """Mock-mode RunConfig writing into a temporary directory."""
    return RunConfig(mock=True, seed=7, max_generations=2, workers=4,
                     output_dir=str(tmp_path / 'run'))


@fixture
def mocked_response():
    """Mock ``requests`` response of a chat completion."""
    def build(content='no target', status=200):
        response = mock.Mock()
        response.status_code = status
        response.json.return_value = {
            'choices': [{'message': {'content': content}}]}
        return response
    return build
