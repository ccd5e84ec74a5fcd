"""This modules includes unit tests for the geometry.py module."""

import numpy as np
import pytest
from delayed_assert import assert_expectations, expect

from ddl_grounding.errors import DegenerateResult, InvalidBox
from ddl_grounding.geometry import (
    BoundingBox,
    ImageDims,
    TransformSpec,
    apply_transform,
    invert_transform,
    iou,
    iou_matrix,
)


def _random_boxes(rng, n, low, high, min_side, max_side):
    for _ in range(n):
        x1, y1 = rng.uniform(low, high, 2)
        w, h = rng.uniform(min_side, max_side, 2)
        yield BoundingBox(x1, y1, x1 + w, y1 + h)


@pytest.mark.parametrize('a, b, expected', [
    ([0, 0, 10, 10], [0, 0, 10, 10], 1.0),
    ([0, 0, 10, 10], [20, 20, 30, 30], 0.0),
    ([0, 0, 10, 10], [5, 0, 15, 10], 1.0 / 3.0),
    ([0, 0, 10, 10], [10, 0, 20, 10], 0.0),
])
def test_iou(a, b, expected):
    """Test IoU of identical, disjoint, overlapping and touching boxes."""
    value = iou(BoundingBox.from_sequence(a), BoundingBox.from_sequence(b))
    assert value == pytest.approx(expected)


def test_iou_is_symmetric_and_bounded():
    """Test IoU symmetry and range on random boxes."""
    rng = np.random.default_rng(3)
    boxes = list(_random_boxes(rng, 40, 0, 50, 1, 40))
    overlaps = iou_matrix(boxes, boxes)
    expect(np.allclose(overlaps, overlaps.T))
    expect(np.all((overlaps >= 0) & (overlaps <= 1)))
    expect(np.allclose(np.diag(overlaps), 1.0))
    assert_expectations()


@pytest.mark.parametrize('coords', [
    [10, 10, 10, 20],
    [10, 20, 30, 5],
    [0, 0, float('nan'), 5],
    [0, 0, float('inf'), 5],
])
def test_invalid_box(coords):
    """Test that zero-area and non-finite boxes are rejected."""
    with pytest.raises(InvalidBox):
        BoundingBox.from_sequence(coords)


def test_invalid_dims():
    """Test that non-positive image dimensions are rejected."""
    with pytest.raises(InvalidBox):
        ImageDims(0, 10)


@pytest.mark.parametrize('t, dims, expected', [
    (TransformSpec.hflip(), ImageDims(100, 100), [70, 20, 90, 40]),
    (TransformSpec.translate(20, 0), ImageDims(200, 200), [30, 20, 50, 40]),
    (TransformSpec.identity(), ImageDims(100, 100), [10, 20, 30, 40]),
    (TransformSpec.scale(0.5), ImageDims(100, 100), [5, 10, 15, 20]),
])
def test_apply_transform(t, dims, expected):
    """Test forward mapping of a box into a transformed view."""
    box = BoundingBox(10, 20, 30, 40)
    assert apply_transform(box, t, dims).as_list() == \
        pytest.approx(expected)


def test_apply_transform_clamps_to_view():
    """Test that a box shifted across the frame edge is clamped."""
    box = BoundingBox(80, 20, 95, 40)
    mapped = apply_transform(box, TransformSpec.translate(10, 0),
                             ImageDims(100, 100))
    assert mapped.as_list() == pytest.approx([90, 20, 100, 40])


def test_apply_transform_degenerate():
    """Test that a box pushed out of the frame raises DegenerateResult."""
    box = BoundingBox(85, 20, 95, 40)
    with pytest.raises(DegenerateResult):
        apply_transform(box, TransformSpec.translate(20, 0),
                        ImageDims(100, 100))


def test_positive_rotation_is_counter_clockwise():
    """Test that a positive angle moves a point right of center upwards."""
    dims = ImageDims(100, 100)
    matrix = TransformSpec.rotate(3).matrix(dims)
    x, y, _ = matrix.dot([60.0, 50.0, 1.0])
    expect(y < 50.0)
    expect(x < 60.0)
    assert_expectations()


def test_scale_canvas_rounds_half_up():
    """Test the output canvas of scale views."""
    dims = ImageDims(105, 100)
    expect(TransformSpec.scale(0.9).output_dims(dims) == ImageDims(95, 90))
    expect(TransformSpec.scale(1.1).output_dims(ImageDims(100, 100)) ==
           ImageDims(110, 110))
    expect(TransformSpec.rotate(3).output_dims(dims) is dims)
    assert_expectations()


def test_transform_spec_inverse():
    """Test inverse specifications of every transform kind."""
    expect(TransformSpec.rotate(3).inverse() == TransformSpec.rotate(-3))
    expect(TransformSpec.scale(2).inverse() == TransformSpec.scale(0.5))
    expect(TransformSpec.translate(4, -2).inverse() ==
           TransformSpec.translate(-4, 2))
    expect(TransformSpec.hflip().inverse() == TransformSpec.hflip())
    assert_expectations()


def test_transform_spec_validation():
    """Test that unknown kinds and non-positive factors are rejected."""
    with pytest.raises(ValueError):
        TransformSpec('shear')
    with pytest.raises(ValueError):
        TransformSpec.scale(0)


def test_transform_spec_dict_round_trip():
    """Test that a spec survives serialization."""
    spec = TransformSpec.translate(-7, 12)
    assert TransformSpec.from_dict(spec.to_dict()) == spec


@pytest.mark.parametrize('t', [
    TransformSpec.hflip(),
    TransformSpec.translate(20, 15),
    TransformSpec.translate(-20, -3),
    TransformSpec.scale(0.9),
    TransformSpec.scale(1.1),
])
def test_round_trip_is_exact(t):
    """Test apply-then-invert on 10,000 random interior boxes."""
    dims = ImageDims(100, 100)
    rng = np.random.default_rng(11)
    worst = 0.0
    for box in _random_boxes(rng, 10000, 25, 50, 2, 25):
        back = invert_transform(apply_transform(box, t, dims), t, dims)
        worst = max(worst, float(np.max(np.abs(
            np.subtract(back.as_list(), box.as_list())))))
    assert worst <= 1e-9


def test_rotation_round_trip_example():
    """Test the rotation round trip of a centered box."""
    dims = ImageDims(100, 100)
    box = BoundingBox(40, 40, 60, 60)
    t = TransformSpec.rotate(3)
    back = invert_transform(apply_transform(box, t, dims), t, dims)
    assert iou(back, box) >= 0.95


@pytest.mark.parametrize('angle', [3.0, -3.0, 1.7])
def test_rotation_round_trip_random(angle):
    """Test rotation round trips on boxes at least 15 px from the edges."""
    dims = ImageDims(128, 96)
    t = TransformSpec.rotate(angle)
    rng = np.random.default_rng(5)
    for _ in range(500):
        x1 = rng.uniform(15, 80)
        y1 = rng.uniform(15, 50)
        w = rng.uniform(3, 113 - x1)
        h = rng.uniform(3, 81 - y1)
        box = BoundingBox(x1, y1, x1 + w, y1 + h)
        back = invert_transform(apply_transform(box, t, dims), t, dims)
        assert iou(back, box) >= 0.95


def test_invert_rotation_falls_back_to_corners():
    """Test inversion of a thin view box no forward re-boxing produces."""
    dims = ImageDims(200, 200)
    t = TransformSpec.rotate(3)
    box = BoundingBox(95, 70, 96, 130)
    back = invert_transform(box, t, dims)
    cx, cy = back.center
    expect(back.width > box.width)
    expect(abs(cx - 95.5) < 5 and abs(cy - 100) < 5)
    assert_expectations()
