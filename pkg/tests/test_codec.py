"""Space-to-depth codec and canvas layout round trips."""

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from glyphflow.codec import (
    CanvasError,
    LatentCanvas,
    concat_canvas,
    decode_latent,
    decode_latent_torch,
    encode_image,
    split_canvas,
    validate_image,
)


def _random_image(rng, h, w):
    return rng.integers(0, 256, (h, w, 3)).astype(np.float32) / np.float32(256)


@settings(max_examples=250, deadline=None)
@given(st.data())
def test_round_trip_bit_exact_randomized_shapes(data):
    p = data.draw(st.sampled_from([2, 4, 8]), label="p")
    h = data.draw(st.integers(1, 6), label="h_patches") * p
    w = data.draw(st.integers(1, 6), label="w_patches") * p
    seed = data.draw(st.integers(0, 2**31 - 1), label="seed")
    img = _random_image(np.random.default_rng(seed), h, w)
    z = encode_image(img, p)
    assert z.shape == (h // p, w // p, 3 * p * p)
    back = decode_latent(z, p)
    assert back.dtype == img.dtype
    assert np.array_equal(back, img)


def test_torch_decode_matches_numpy():
    img = _random_image(np.random.default_rng(3), 16, 24)
    z = encode_image(img, 4)
    a = decode_latent(z, 4)
    b = decode_latent_torch(torch.from_numpy(z), 4).numpy()
    assert np.array_equal(a, b)


def test_latent_values_live_on_symmetric_grid():
    # k/256 pixels map to 2k/256 - 1, both ends exactly representable
    img = np.zeros((4, 4, 3), dtype=np.float32)
    img[0, 0, 0] = np.float32(255) / np.float32(256)
    z = encode_image(img, 4)
    assert z.min() == np.float32(-1.0)
    assert z.max() == np.float32(2 * 255 / 256 - 1)


def test_encode_rejects_bad_shapes():
    rng = np.random.default_rng(0)
    with pytest.raises(CanvasError):
        encode_image(_random_image(rng, 10, 16), 4)
    with pytest.raises(CanvasError):
        encode_image(rng.random((8, 8)).astype(np.float32), 4)


def test_validate_image_rejects_out_of_range():
    img = np.full((4, 4, 3), 1.5, dtype=np.float32)
    with pytest.raises(CanvasError):
        validate_image(img, 4)


@settings(max_examples=100, deadline=None)
@given(
    n_refs=st.integers(0, 3),
    widths=st.lists(st.integers(1, 4), min_size=4, max_size=4),
    seed=st.integers(0, 2**31 - 1),
)
def test_concat_split_round_trip(n_refs, widths, seed):
    rng = np.random.default_rng(seed)
    h, c = 3, 12
    refs = [torch.from_numpy(rng.standard_normal((h, widths[i], c)).astype(np.float32))
            for i in range(n_refs)]
    target = torch.from_numpy(
        rng.standard_normal((h, widths[3], c)).astype(np.float32))
    canvas = concat_canvas(refs, target)
    assert canvas.width == sum(w.shape[1] for w in refs) + target.shape[1]
    back_refs, back_target = split_canvas(canvas)
    assert len(back_refs) == n_refs
    for a, b in zip(refs, back_refs):
        assert torch.equal(a, b)
    assert torch.equal(target, back_target)


def test_canvas_slices_partition_the_width():
    rng = np.random.default_rng(1)
    refs = [torch.from_numpy(rng.standard_normal((2, 2, 6)).astype(np.float32)),
            torch.from_numpy(rng.standard_normal((2, 3, 6)).astype(np.float32))]
    target = torch.from_numpy(rng.standard_normal((2, 4, 6)).astype(np.float32))
    canvas = concat_canvas(refs, target)
    assert canvas.reference_slice() == slice(0, 5)
    assert canvas.target_slice() == slice(5, 9)
    assert list(canvas.segment_bounds()) == [
        ("reference", 0, 2), ("reference", 2, 5), ("target", 5, 9)]


def test_canvas_rejects_mismatched_heights():
    a = torch.zeros(2, 2, 6)
    b = torch.zeros(3, 2, 6)
    with pytest.raises(CanvasError):
        concat_canvas([a], b)


def test_canvas_requires_some_segment():
    with pytest.raises(CanvasError):
        concat_canvas([], None)
