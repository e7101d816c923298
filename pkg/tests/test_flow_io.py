import math
from decimal import Decimal, getcontext

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cpflow import flow_io
from cpflow.flow_io import EncodedFlowImage, FlowField, NormalizedFlowField

finite = st.floats(-1e6, 1e6, allow_nan=False)


def _hp_normalize(f, M):
    getcontext().prec = 40
    mag = (Decimal(abs(f)) + 1).ln() / (Decimal(M) + 1).ln()
    return math.copysign(float(min(Decimal(1), mag)), f) if f else 0.0


def test_normalize_examples():
    nf = flow_io.normalize_flow(FlowField(np.array([[[0.0, 0.0], [56.0, -7.0], [100.0, -100.0]]])), 56.0)
    assert nf.data[0, 0].tolist() == [0.0, 0.0]
    assert nf.data[0, 1, 0] == 1.0
    assert nf.data[0, 1, 1] == pytest.approx(_hp_normalize(-7.0, 56.0), abs=1e-15)
    assert nf.data[0, 1, 1] == pytest.approx(-0.514327, abs=5e-6)
    assert nf.data[0, 2].tolist() == [1.0, -1.0]
    assert nf.M == 56.0


@given(st.lists(finite, min_size=1, max_size=20), st.floats(0.1, 1000))
def test_normalize_matches_high_precision(values, M):
    got = flow_io.normalize_values(np.array(values), M)
    want = [_hp_normalize(v, M) for v in values]
    np.testing.assert_allclose(got, want, rtol=1e-13, atol=1e-15)
    assert np.all(np.abs(got) <= 1.0)


@given(st.lists(finite, min_size=1, max_size=30))
def test_normalize_odd_and_monotone(values):
    v = np.sort(np.array(values))
    out = flow_io.normalize_values(v)
    assert np.array_equal(flow_io.normalize_values(-v), -out)
    assert np.all(np.diff(out) >= 0)


def test_normalize_rejects_bad_input():
    with pytest.raises(ValueError, match="M must be positive"):
        flow_io.normalize_values(np.zeros(2), 0.0)
    with pytest.raises(ValueError, match=r"pixel \(row=0, col=1\)"):
        FlowField(np.array([[[0.0, 0.0], [np.nan, 0.0]]]))


def test_encode_decode_examples():
    flow = FlowField(np.array([[[0.0, 3.25], [-1.0, 0.0]]]))
    enc = flow_io.encode_flow(flow)
    assert enc.codes.ravel().tolist() == [32768, 32976, 32704, 32768]
    assert enc.saturated == 0
    dec = flow_io.decode_flow(EncodedFlowImage(np.array([[[32768, 32976]]], dtype=np.uint16)))
    assert dec.data.ravel().tolist() == [0.0, 3.25]


def test_encode_saturates_and_counts():
    enc = flow_io.encode_flow(FlowField(np.array([[[600.0, -600.0], [511.98, -512.0]]])))
    assert enc.codes.ravel().tolist() == [65535, 0, 65535, 0]
    assert enc.saturated == 2


def test_round_trip_small_value():
    f = FlowField(np.full((1, 1, 2), 0.017))
    err = np.abs(flow_io.decode_flow(flow_io.encode_flow(f)).data - 0.017)
    assert err.max() <= 1 / 128


def test_round_trip_grid_bound():
    v = np.linspace(-500.0, 500.0, 20001)
    f = FlowField(np.stack([v, v[::-1]], axis=-1)[None])
    err = np.abs(flow_io.decode_flow(flow_io.encode_flow(f)).data - f.data)
    assert err.max() <= 1 / 128


def test_codes_identity():
    codes = np.arange(65536, dtype=np.uint16).reshape(256, 128, 2)
    back = flow_io.encode_flow(flow_io.decode_flow(EncodedFlowImage(codes)))
    assert np.array_equal(back.codes, codes)


def test_discretize_examples():
    got = flow_io.discretize_flow(NormalizedFlowField(np.array([[[-1.0, 1.0], [0.0, 0.0]]]), 56.0))
    assert got.classes.ravel().tolist() == [0, 15, 8, 8]


def test_discretize_boundaries():
    for k in range(1, 16):
        b = -1.0 + 2.0 * k / 16
        assert flow_io.discretize_values(np.array(b)) == k
        assert flow_io.discretize_values(np.array(b - 1e-9)) == k - 1
        assert flow_io.discretize_values(np.array(b + 1e-9)) == k


def test_discretize_rejects_out_of_range():
    with pytest.raises(ValueError):
        flow_io.discretize_values(np.array([1.5]))


def test_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = EncodedFlowImage(rng.integers(0, 65536, size=(3, 4, 2), dtype=np.uint16))
    path = tmp_path / "f.flo16"
    flow_io.write_flow_file(img, path)
    raw = path.read_bytes()
    assert raw[:4] == b"CPF1"
    assert int.from_bytes(raw[4:8], "little") == 4
    assert int.from_bytes(raw[8:12], "little") == 3
    assert len(raw) == 12 + 4 * 3 * 2 * 2
    # x component of pixel (0, 0) first, little-endian
    assert int.from_bytes(raw[12:14], "little") == img.codes[0, 0, 0]
    back = flow_io.read_flow_file(path)
    assert np.array_equal(back.codes, img.codes)


def test_file_errors(tmp_path):
    img = EncodedFlowImage(np.zeros((3, 4, 2), dtype=np.uint16))
    data = flow_io.flow_file_bytes(img)
    with pytest.raises(flow_io.BadMagicError, match="bad magic"):
        flow_io.parse_flow_bytes(b"XXXX" + data[4:])
    with pytest.raises(flow_io.TruncatedError, match="truncated"):
        flow_io.parse_flow_bytes(data[:-1])
    with pytest.raises(flow_io.TruncatedError):
        flow_io.parse_flow_bytes(data[:6])
    huge = b"CPF1" + (2**31).to_bytes(4, "little") + (2**31).to_bytes(4, "little")
    with pytest.raises(flow_io.DimensionOverflowError):
        flow_io.parse_flow_bytes(huge)
    with pytest.raises(flow_io.FlowFileError):
        flow_io.parse_flow_bytes(data + b"\0\0")
