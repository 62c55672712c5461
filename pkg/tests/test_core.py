import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from segpatch.core import ClassPalette, Image, LabelMap, Patch, PatchSet, PixelSet, validate_pair
from segpatch.errors import LabelOutOfRange, ShapeMismatch, ValidationError


def test_validate_pair_consistent():
    img = Image(np.zeros((4, 4, 3)))
    lab = LabelMap(np.array([[0, 1, 2, 0]] * 4), num_classes=3)
    validate_pair(img, lab)


def test_validate_pair_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        validate_pair(Image(np.zeros((4, 4, 3))), LabelMap(np.zeros((5, 4), int), 3))


def test_validate_pair_label_out_of_range():
    lab = np.zeros((4, 4), int)
    lab[1, 1] = 7
    with pytest.raises(LabelOutOfRange):
        validate_pair(np.zeros((4, 4, 3)), lab, num_classes=3)
    with pytest.raises(LabelOutOfRange):
        LabelMap(lab, 3)


def test_ignore_value_is_exempt():
    lab = np.array([[0, 255], [1, 2]])
    m = LabelMap(lab, 3)
    assert m.valid_mask().tolist() == [[True, False], [True, True]]


@pytest.mark.parametrize("bad", [-0.01, 1.01, np.nan])
def test_image_and_patch_range(bad):
    a = np.full((2, 2, 3), 0.5)
    a[0, 0, 0] = bad
    with pytest.raises(ValidationError):
        Image(a)
    with pytest.raises(ValidationError):
        Patch(a)


def test_containers_are_immutable():
    img = Image(np.zeros((2, 2, 1)))
    with pytest.raises(ValueError):
        img.data[0, 0, 0] = 1.0


def test_patch_fits_is_strict():
    p = Patch(np.zeros((4, 8, 3)))
    assert p.fits(5, 9)
    assert not p.fits(4, 9)
    assert not p.fits(5, 8)


def test_patchset_ids():
    ps = PatchSet.from_arrays([np.zeros((2, 2, 3)), np.ones((3, 3, 3))])
    assert [p.id for p in ps] == [1, 2]
    with pytest.raises(ValidationError):
        PatchSet((Patch(np.zeros((2, 2, 3)), id=2),))
    with pytest.raises(ValidationError):
        PatchSet(())


def test_palette_defaults_and_validation():
    assert len(ClassPalette()) == 2
    with pytest.raises(ValidationError):
        ClassPalette(np.array([[1.2, 0, 0]]))
    with pytest.raises(ValidationError):
        ClassPalette(np.zeros((0, 3)))


masks = st.tuples(st.integers(1, 6), st.integers(1, 6)).flatmap(
    lambda s: st.tuples(arrays(bool, s), arrays(bool, s)))


@given(masks)
def test_pixelset_algebra(pair):
    a, b = PixelSet(pair[0]), PixelSet(pair[1])
    H, W = a.shape
    full = PixelSet.full(a.shape)
    assert len(full) == H * W
    # |N \ N~| + |N~| = H W
    assert len(full - a) + len(a) == H * W
    assert len(a | b) == len(a) + len(b) - len(a & b)
    assert (a - b).issubset(a)
    assert PixelSet.union_of([a, b]).mask.tolist() == (a | b).mask.tolist()
    assert len(a.complement()) == H * W - len(a)
    assert PixelSet.empty(a.shape).issubset(a)


def test_pixelset_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        PixelSet.full((2, 2)) | PixelSet.full((2, 3))
