"""This modules includes unit tests for the viewgen.py module."""

import base64

import numpy as np
import pytest
from delayed_assert import assert_expectations, expect
from PIL import Image

from ddl_grounding.errors import InvalidCount, UnsupportedImage
from ddl_grounding.geometry import (
    HFLIP,
    ROTATE,
    SCALE,
    TRANSLATE,
    ImageDims,
    TransformSpec,
)
from ddl_grounding.viewgen import (
    MAX_SHIFT_PX,
    ROTATION_UNIFORM,
    RasterImage,
    make_roster,
    render_view,
)


@pytest.fixture
def raster():
    """Random 8-bit grayscale raster of 100x100 pixels."""
    rng = np.random.default_rng(0)
    return RasterImage(rng.integers(0, 256, (100, 100), dtype=np.uint8))


def test_default_roster():
    """Test the family composition of the seven-view roster."""
    roster = make_roster(1, 7)
    kinds = [spec.kind for spec in roster.specs]
    angles = sorted(spec.angle for spec in roster.specs
                    if spec.kind == ROTATE)
    factors = sorted(spec.factor for spec in roster.specs
                     if spec.kind == SCALE)
    expect(len(roster) == 7)
    expect(kinds.count(HFLIP) == 1)
    expect(kinds.count(TRANSLATE) == 2)
    expect(angles == [-3.0, 3.0])
    expect(factors == [0.9, 1.1])
    assert_expectations()


def test_roster_is_deterministic():
    """Test that the same seed yields the same roster."""
    assert make_roster(1, 7) == make_roster(1, 7)


def test_roster_seeds_only_change_translations():
    """Test that another seed changes nothing but the translate offsets."""
    first, second = make_roster(1, 7), make_roster(2, 7)
    for a, b in zip(first.specs, second.specs):
        if a.kind == TRANSLATE:
            continue
        assert a == b
    shifts = [(s.dx, s.dy) for s in first.specs if s.kind == TRANSLATE]
    assert shifts != [(s.dx, s.dy) for s in second.specs
                      if s.kind == TRANSLATE]


def test_roster_translations_are_bounded_integers():
    """Test translation offsets over many seeds."""
    for seed in range(200):
        for spec in make_roster(seed).specs:
            if spec.kind != TRANSLATE:
                continue
            for offset in (spec.dx, spec.dy):
                assert offset == int(offset)
                assert -MAX_SHIFT_PX <= offset <= MAX_SHIFT_PX


def test_roster_of_other_sizes_cycles_families():
    """Test that non-default view counts cycle the four families."""
    kinds = [spec.kind for spec in make_roster(4, 9).specs]
    assert kinds == [ROTATE, SCALE, TRANSLATE, HFLIP,
                     ROTATE, SCALE, TRANSLATE, HFLIP, ROTATE]


def test_uniform_rotation_roster():
    """Test that uniform rotation angles stay within three degrees."""
    for seed in range(50):
        roster = make_roster(seed, 7, rotation=ROTATION_UNIFORM)
        for spec in roster.specs:
            if spec.kind == ROTATE:
                assert -3.0 <= spec.angle <= 3.0


@pytest.mark.parametrize('m, seed', [(0, 1), (7, -1), (7, 2 ** 64)])
def test_roster_rejects_bad_arguments(m, seed):
    """Test that invalid counts and seeds raise InvalidCount."""
    with pytest.raises(InvalidCount):
        make_roster(seed, m)


def test_roster_serialization():
    """Test the JSON form of a roster."""
    payload = make_roster(1).to_list()
    expect(len(payload) == 7)
    expect(payload[-1] == {'kind': HFLIP})
    expect(payload[0] == {'kind': ROTATE, 'angle': 3.0})
    assert_expectations()


def test_render_identity(raster):
    """Test that the identity view is pixel-identical."""
    view = render_view(raster, TransformSpec.identity())
    assert np.array_equal(view.pixels, raster.pixels)


def test_render_double_flip(raster):
    """Test that flipping twice restores the raster."""
    flip = TransformSpec.hflip()
    view = render_view(render_view(raster, flip), flip)
    assert np.array_equal(view.pixels, raster.pixels)


def test_render_flip_mirrors_columns(raster):
    """Test that a flip reverses the columns."""
    view = render_view(raster, TransformSpec.hflip())
    assert np.array_equal(view.pixels[:, 0], raster.pixels[:, -1])


@pytest.mark.parametrize('factor, side', [(0.9, 90), (1.1, 110)])
def test_render_scale_dimensions(raster, factor, side):
    """Test the canvas size of scale views."""
    view = render_view(raster, TransformSpec.scale(factor))
    assert view.dims == ImageDims(side, side)


def test_render_translate_shifts_pixels(raster):
    """Test that an integer translation shifts pixels and fills black."""
    view = render_view(raster, TransformSpec.translate(10, 5))
    expect(np.array_equal(view.pixels[10:90, 20:90],
                          raster.pixels[5:85, 10:80]))
    expect(not view.pixels[:4].any())
    assert_expectations()


def test_render_rotation_keeps_rgb_canvas():
    """Test that rotating an RGB raster keeps its shape."""
    img = RasterImage(np.full((60, 80, 3), 200, dtype=np.uint8))
    view = render_view(img, TransformSpec.rotate(-3))
    expect(view.pixels.shape == (60, 80, 3))
    expect(view.pixels[30, 40].tolist() == [200, 200, 200])
    assert_expectations()


def test_raster_rejects_bad_buffers():
    """Test zero-sized and non-8-bit rasters."""
    with pytest.raises(UnsupportedImage):
        RasterImage(np.zeros((0, 10), dtype=np.uint8))
    with pytest.raises(UnsupportedImage):
        RasterImage(np.zeros((10, 10), dtype=np.float32))


def test_raster_open(tmp_path, raster):
    """Test reading a PNG and converting palette images to RGB."""
    gray = tmp_path / 'gray.png'
    Image.fromarray(raster.pixels).save(str(gray))
    palette = tmp_path / 'palette.png'
    raster.to_pil().convert('P').save(str(palette))
    expect(np.array_equal(RasterImage.open(str(gray)).pixels, raster.pixels))
    expect(RasterImage.open(str(palette)).pixels.shape == (100, 100, 3))
    assert_expectations()


def test_raster_open_unreadable(tmp_path):
    """Test that a non-image file raises UnsupportedImage."""
    path = tmp_path / 'broken.png'
    path.write_text('not an image')
    with pytest.raises(UnsupportedImage):
        RasterImage.open(str(path))


def test_data_url(raster):
    """Test that the data URL holds a decodable PNG."""
    url = raster.to_data_url()
    prefix = 'data:image/png;base64,'
    assert url.startswith(prefix)
    assert base64.b64decode(url[len(prefix):])[:4] == b'\x89PNG'
