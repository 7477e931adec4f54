import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from malafide.pnm import ImageFormatError, decode_pnm, encode_pnm, load_image, quantize, save_image


def test_all_zero_image_has_zero_payload(tmp_path):
    path = tmp_path / "z.pgm"
    save_image(np.zeros((3, 5, 1)), path)
    data = path.read_bytes()
    assert data.startswith(b"P5\n5 3\n255\n")
    assert data[len(b"P5\n5 3\n255\n") :] == bytes(15)
    assert np.array_equal(load_image(path), np.zeros((3, 5, 1)))


def test_one_maps_to_255_and_back(tmp_path):
    path = tmp_path / "o.ppm"
    save_image(np.ones((2, 2, 3)), path)
    assert path.read_bytes()[-12:] == b"\xff" * 12
    assert np.array_equal(load_image(path), np.ones((2, 2, 3)))


def test_quantize_rounds_halves_up():
    assert quantize(np.array([0.5 / 255, 1.5 / 255, 0.49 / 255])).tolist() == [1, 2, 0]


def test_quantize_rejects_out_of_range():
    with pytest.raises(ValueError):
        quantize(np.array([1.01]))
    with pytest.raises(ValueError):
        quantize(np.array([-0.01]))


def test_random_round_trip_within_quantization_bound(tmp_path):
    img = np.random.default_rng(0).random((17, 11, 3))
    path = tmp_path / "r.ppm"
    save_image(img, path)
    back = load_image(path)
    assert np.max(np.abs(back - img)) <= 1 / 510 + 1e-15
    save_image(back, tmp_path / "r2.ppm")
    assert (tmp_path / "r2.ppm").read_bytes() == path.read_bytes()


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 3]), st.integers(0, 2**32 - 1))
def test_encode_decode_is_exact_on_quantized_images(h, w, c, seed):
    q = np.random.default_rng(seed).integers(0, 256, (h, w, c)) / 255.0
    assert np.array_equal(decode_pnm(encode_pnm(q)), q)


def test_two_dimensional_input_is_grayscale():
    assert encode_pnm(np.zeros((2, 2)))[:2] == b"P5"


def test_rejects_bad_channel_count():
    with pytest.raises(ValueError):
        encode_pnm(np.zeros((2, 2, 2)))


VALID = encode_pnm(np.random.default_rng(1).random((4, 6, 3)))
HEADER_LEN = len(b"P6\n6 4\n255\n")


@pytest.mark.parametrize(
    "data,offset",
    [
        (b"P3\n6 4\n255\n" + VALID[HEADER_LEN:], 0),
        (b"P6 6 4 65535\n" + bytes(72), None),
        (b"P6\n6 4\n255\n" + bytes(71), None),
        (b"P6\n6 4\n255\n" + bytes(73), None),
        (b"P6\n06 4\n255\n" + bytes(72), 3),
        (b"P6\n0 4\n255\n", None),
        (b"P6\n6  4\n255\n" + bytes(72), 5),
        (b"P6\n6 4\n255", 10),
        (b"P", 1),
        (b"P6\n#c\n6 4\n255\n" + bytes(72), 3),
    ],
)
def test_malformed_inputs_rejected_with_position(data, offset):
    with pytest.raises(ImageFormatError) as exc:
        decode_pnm(data)
    if offset is not None:
        assert exc.value.offset == offset
    assert "byte" in str(exc.value)


def test_header_mutation_fuzz_rejects_every_breaking_mutation():
    """Every single-byte header mutation either still decodes to a
    well-formed image or raises ImageFormatError; none slip through with a
    different payload size or crash with another exception."""
    rng = np.random.default_rng(2)
    rejected = 0
    tried = 0
    for _ in range(400):
        pos = int(rng.integers(HEADER_LEN))
        val = int(rng.integers(256))
        if VALID[pos] == val:
            continue
        tried += 1
        mutated = VALID[:pos] + bytes([val]) + VALID[pos + 1 :]
        try:
            img = decode_pnm(mutated)
        except ImageFormatError:
            rejected += 1
            continue
        # only a whitespace-for-whitespace swap can leave the format intact
        assert chr(VALID[pos]).isspace() and chr(val) in " \t\n\r\v\f"
        assert img.shape == (4, 6, 3)
    assert tried >= 100
    assert rejected >= 100
