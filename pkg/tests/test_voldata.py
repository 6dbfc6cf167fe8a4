import numpy as np
import pytest

from depthloc.voldata import (
    ORGAN_NAMES,
    BadMagicError,
    BinaryVolume,
    DepthImage,
    GridInvariantError,
    MaskStack,
    TruncatedPayloadError,
    UnknownDtypeError,
    VersionMismatchError,
    Volume,
    read_depth,
    read_dvol_payload,
    read_maskstack,
    read_volume,
    write_depth,
    write_dvol_payload,
    write_maskstack,
    write_volume,
)


def test_canonical_organ_order():
    assert len(ORGAN_NAMES) == 11
    assert ORGAN_NAMES[0] == "hips"
    assert ORGAN_NAMES[-1] == "urinary_bladder"
    assert len(set(ORGAN_NAMES)) == 11


def test_volume_coerces_and_validates():
    vol = Volume((2, 3, 4), (1, 2, 3), np.zeros((2, 3, 4), dtype=np.float64))
    assert vol.values.dtype == np.float32
    assert vol.dims == (2, 3, 4)
    assert vol.spacing == (1.0, 2.0, 3.0)
    with pytest.raises(GridInvariantError):
        Volume((2, 3, 4), (1, 2, 3), np.zeros((2, 3, 5), dtype=np.float32))
    with pytest.raises(GridInvariantError):
        Volume((2, 3, 4), (1, 0, 3), np.zeros((2, 3, 4), dtype=np.float32))
    with pytest.raises(GridInvariantError):
        Volume((2, 3), (1, 2, 3), np.zeros((2, 3), dtype=np.float32))


def test_binary_volume_rejects_non_binary():
    values = np.zeros((2, 2, 2), dtype=np.uint8)
    values[0, 0, 0] = 2
    with pytest.raises(GridInvariantError):
        BinaryVolume((2, 2, 2), (1, 1, 1), values)


def test_depth_image_rejects_out_of_range():
    with pytest.raises(GridInvariantError):
        DepthImage((2, 2), (1, 1), np.full((2, 2), 1.5, dtype=np.float32))
    with pytest.raises(GridInvariantError):
        DepthImage((2, 2), (1, 1), np.full((2, 2), -0.1, dtype=np.float32))


def test_mask_stack_invariants():
    ch = np.zeros((2, 3, 4), dtype=np.uint8)
    stack = MaskStack(("a", "b"), (3, 4), (1, 1), ch)
    assert stack.organ_names == ("a", "b")
    with pytest.raises(GridInvariantError):
        MaskStack(("a", "a"), (3, 4), (1, 1), ch)
    with pytest.raises(GridInvariantError):
        MaskStack((), (3, 4), (1, 1), np.zeros((0, 3, 4), dtype=np.uint8))
    with pytest.raises(GridInvariantError):
        MaskStack(("a", "b"), (3, 4), (1, 1), ch + 2)


def test_dvol_payload_is_x_fastest(tmp_path):
    # [DERIVED] values[x, y, z] = x + 2y + 4z makes the flat payload the
    # sequence 0..7 exactly when x varies fastest: flat = x + X*(y + Y*z).
    values = np.empty((2, 2, 2), dtype=np.float32)
    for x in range(2):
        for y in range(2):
            for z in range(2):
                values[x, y, z] = x + 2 * y + 4 * z
    path = tmp_path / "order.dvol"
    write_dvol_payload(path, values, (1, 1, 1))
    raw = path.read_bytes()
    payload = np.frombuffer(raw[len(raw) - 32 :], dtype="<f4")
    assert payload.tolist() == [0, 1, 2, 3, 4, 5, 6, 7]
    back, _ = read_dvol_payload(path)
    assert np.array_equal(back, values)
    assert back[1, 0, 0] == 1.0


def test_volume_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    vol = Volume((5, 4, 3), (4, 4, 2.5), rng.random((5, 4, 3), dtype=np.float32))
    path = tmp_path / "v.dvol"
    write_volume(path, vol)
    back = read_volume(path)
    assert isinstance(back, Volume)
    assert back.dims == vol.dims
    assert back.spacing == (4.0, 4.0, 2.5)
    assert np.array_equal(back.values, vol.values)


def test_binary_volume_round_trip(tmp_path):
    rng = np.random.default_rng(8)
    mask = BinaryVolume(
        (4, 6, 5), (1, 2, 3), (rng.random((4, 6, 5)) > 0.5).astype(np.uint8)
    )
    path = tmp_path / "m.dvol"
    write_volume(path, mask)
    back = read_volume(path)
    assert isinstance(back, BinaryVolume)
    assert np.array_equal(back.values, mask.values)


def test_label_code_payload_round_trip(tmp_path):
    # coded label grids use the raw payload API, values above 1 allowed
    codes = np.arange(24, dtype=np.uint8).reshape(2, 3, 4) % 12
    path = tmp_path / "labels.dvol"
    write_dvol_payload(path, codes, (4, 4, 4))
    back, spacing = read_dvol_payload(path)
    assert spacing == (4.0, 4.0, 4.0)
    assert np.array_equal(back, codes)


def test_maskstack_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    channels = (rng.random((11, 7, 9)) > 0.6).astype(np.uint8)
    stack = MaskStack(ORGAN_NAMES, (7, 9), (4, 4), channels)
    path = tmp_path / "s.dmsk"
    write_maskstack(path, stack)
    back = read_maskstack(path)
    assert back.organ_names == ORGAN_NAMES
    assert back.dims == (7, 9)
    assert np.array_equal(back.channels, channels)


def test_depth_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    depth = DepthImage((6, 8), (4, 4), rng.random((6, 8), dtype=np.float32))
    path = tmp_path / "d.ddep"
    write_depth(path, depth)
    back = read_depth(path)
    assert back.dims == depth.dims
    assert np.array_equal(back.values, depth.values)


def test_write_rejects_wrong_types(tmp_path):
    with pytest.raises(TypeError):
        write_volume(tmp_path / "x.dvol", np.zeros((2, 2, 2)))
    with pytest.raises(TypeError):
        write_depth(tmp_path / "x.ddep", np.zeros((2, 2)))
    with pytest.raises(TypeError):
        write_maskstack(tmp_path / "x.dmsk", np.zeros((1, 2, 2)))
    with pytest.raises(GridInvariantError):
        write_dvol_payload(tmp_path / "x.dvol", np.zeros((2, 2, 2), dtype=np.int32), (1, 1, 1))


def _valid_dvol(tmp_path):
    path = tmp_path / "ok.dvol"
    write_dvol_payload(path, np.zeros((2, 2, 2), dtype=np.float32), (1, 1, 1))
    return path


def test_read_rejects_bad_magic(tmp_path):
    path = _valid_dvol(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(BadMagicError):
        read_volume(path)


def test_read_rejects_bad_version(tmp_path):
    path = _valid_dvol(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[4] = 99
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionMismatchError):
        read_volume(path)


def test_read_rejects_unknown_dtype(tmp_path):
    path = _valid_dvol(tmp_path)
    raw = bytearray(path.read_bytes())
    raw[5] = 7
    path.write_bytes(bytes(raw))
    with pytest.raises(UnknownDtypeError):
        read_volume(path)


def test_read_rejects_truncation_and_trailing(tmp_path):
    path = _valid_dvol(tmp_path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-5])
    with pytest.raises(TruncatedPayloadError):
        read_volume(path)
    path.write_bytes(raw + b"\x00\x00")
    with pytest.raises(TruncatedPayloadError):
        read_volume(path)


def test_maskstack_read_rejects_truncation(tmp_path):
    stack = MaskStack(("a",), (2, 2), (1, 1), np.zeros((1, 2, 2), dtype=np.uint8))
    path = tmp_path / "t.dmsk"
    write_maskstack(path, stack)
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(TruncatedPayloadError):
        read_maskstack(path)


def test_depth_read_rejects_nonsense_values(tmp_path):
    # a [0,1]-violating payload fails the DepthImage invariant on read
    path = tmp_path / "bad.ddep"
    depth = DepthImage((2, 2), (1, 1), np.zeros((2, 2), dtype=np.float32))
    write_depth(path, depth)
    raw = bytearray(path.read_bytes())
    raw[-4:] = np.float32(2.0).tobytes()
    path.write_bytes(bytes(raw))
    with pytest.raises(GridInvariantError):
        read_depth(path)
