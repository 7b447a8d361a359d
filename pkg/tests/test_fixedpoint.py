import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fxnn.fixedpoint import (
    BitCode,
    FixedPointFormat,
    bit_value_delta,
    code_bit_deltas,
    decode,
    encode,
    flip_bit,
    quantize,
    quantize_codes,
)

W6 = FixedPointFormat(6, 1)


class TestFormat:
    def test_range_signed(self):
        assert W6.frac_bits == 5
        assert W6.min_value == -1.0
        assert W6.max_value == 31 / 32
        assert W6.step == 1 / 32

    def test_range_unsigned(self):
        f = FixedPointFormat(8, 2, signed=False)
        assert f.min_value == 0.0
        assert f.max_value == 4.0 - 1 / 64

    @pytest.mark.parametrize("w,i", [(1, 1), (33, 1), (6, 0), (6, 7)])
    def test_invalid_widths(self, w, i):
        with pytest.raises(ValueError):
            FixedPointFormat(w, i)

    def test_json_round_trip(self):
        f = FixedPointFormat(6, 1, signed=True, rounding="rne", overflow="sat")
        assert f.to_json() == {"W": 6, "I": 1, "signed": True, "round": "rne", "overflow": "sat"}
        assert FixedPointFormat.from_json(f.to_json()) == f

    def test_json_unknown_key(self):
        with pytest.raises(ValueError, match="unknown format keys"):
            FixedPointFormat.from_json({"W": 6, "I": 1, "frac": 5})


class TestQuantize:
    def test_zero(self):
        assert quantize(0.0, W6) == 0.0

    def test_round_half_even_nearest(self):
        # 0.30 * 32 = 9.6 -> code 10 -> 0.3125
        assert quantize(0.30, W6) == 0.3125

    def test_saturation_positive(self):
        assert quantize(2.0, W6) == 31 / 32

    def test_saturation_negative(self):
        assert quantize(-7.3, W6) == -1.0

    def test_tie_rounds_to_even(self):
        # 0.046875 * 32 = 1.5 exactly -> even code 2
        assert quantize_codes(1.5 / 32, W6) == 2
        # 0.078125 * 32 = 2.5 -> even code 2 as well
        assert quantize_codes(2.5 / 32, W6) == 2

    def test_truncate_mode_floors(self):
        f = FixedPointFormat(6, 1, rounding="trunc")
        assert quantize(0.30, f) == 9 / 32
        assert quantize(-0.30, f) == -10 / 32

    def test_wrap_mode(self):
        f = FixedPointFormat(6, 1, overflow="wrap")
        # code 33 wraps to 33 - 64 = -31
        assert quantize(33 / 32, f) == -31 / 32

    def test_nonfinite_rejected(self):
        for bad in (np.nan, np.inf, -np.inf):
            with pytest.raises(ValueError, match="finite"):
                quantize(bad, W6)

    def test_vectorized(self):
        xs = np.array([0.0, 0.30, 2.0])
        assert np.array_equal(quantize(xs, W6), [0.0, 0.3125, 31 / 32])


class TestEncodeDecode:
    def test_encode_half(self):
        assert encode(0.5, W6).code == 16

    def test_decode_negative(self):
        assert decode(BitCode(-16, W6)) == -0.5

    def test_round_trip_all_codes(self):
        # decode -> encode is the identity over the whole code space
        for code in range(W6.min_code, W6.max_code + 1):
            assert encode(decode(BitCode(code, W6)), W6).code == code

    def test_code_range_enforced(self):
        with pytest.raises(ValueError):
            BitCode(32, W6)
        with pytest.raises(ValueError):
            BitCode(-33, W6)


class TestFlipBit:
    def test_sign_bit_flip(self):
        flipped = flip_bit(BitCode(16, W6), 5)
        assert flipped.code == -16
        assert flipped.value == -0.5

    def test_lsb_flip_of_zero(self):
        assert flip_bit(BitCode(0, W6), 0).value == 1 / 32

    def test_involution_exhaustive(self):
        for code in range(W6.min_code, W6.max_code + 1):
            for j in range(6):
                c = BitCode(code, W6)
                assert flip_bit(flip_bit(c, j), j) == c

    def test_bad_index(self):
        with pytest.raises(ValueError):
            flip_bit(BitCode(0, W6), 6)
        with pytest.raises(ValueError):
            flip_bit(BitCode(0, W6), -1)

    def test_unsigned_flip(self):
        f = FixedPointFormat(4, 2, signed=False)
        assert flip_bit(BitCode(0, f), 3).code == 8


class TestBitValueDelta:
    def test_lsb_delta(self):
        assert bit_value_delta(BitCode(0, W6), 0) == 1 / 32

    def test_sign_bit_delta(self):
        assert bit_value_delta(BitCode(0, W6), 5) == -1.0

    def test_exhaustive_w4_against_decode_difference(self):
        f = FixedPointFormat(4, 1)
        for code in range(f.min_code, f.max_code + 1):
            for j in range(4):
                c = BitCode(code, f)
                expect = decode(flip_bit(c, j)) - decode(c)
                assert bit_value_delta(c, j) == expect

    def test_vectorized_matches_scalar(self):
        f = FixedPointFormat(5, 2)
        codes = np.arange(f.min_code, f.max_code + 1)
        deltas = code_bit_deltas(codes, f)
        for n, code in enumerate(codes):
            for j in range(5):
                assert deltas[n, j] == bit_value_delta(BitCode(int(code), f), j)


finite = st.floats(allow_nan=False, allow_infinity=False, min_value=-1e6, max_value=1e6)


@st.composite
def fmts_strategy(draw):
    w = draw(st.integers(2, 16))
    i = draw(st.integers(1, min(4, w)))
    return FixedPointFormat(w, i, signed=draw(st.booleans()))


fmts = fmts_strategy()


class TestProperties:
    @given(x=finite, fmt=fmts)
    @settings(max_examples=300, deadline=None)
    def test_idempotent(self, x, fmt):
        q = quantize(x, fmt)
        assert quantize(q, fmt) == q

    @given(x=finite, fmt=fmts)
    @settings(max_examples=300, deadline=None)
    def test_half_lsb_bound_inside_range(self, x, fmt):
        if fmt.min_value <= x <= fmt.max_value:
            assert abs(quantize(x, fmt) - x) <= 2.0 ** (-fmt.frac_bits - 1)

    @given(x=finite, y=finite, fmt=fmts)
    @settings(max_examples=300, deadline=None)
    def test_monotone_saturating(self, x, y, fmt):
        lo, hi = min(x, y), max(x, y)
        assert quantize(lo, fmt) <= quantize(hi, fmt)

    @given(fmt=fmts, data=st.data())
    @settings(max_examples=200, deadline=None)
    def test_delta_antisymmetric(self, fmt, data):
        code = data.draw(st.integers(fmt.min_code, fmt.max_code))
        j = data.draw(st.integers(0, fmt.total_bits - 1))
        c = BitCode(code, fmt)
        assert bit_value_delta(c, j) == -bit_value_delta(flip_bit(c, j), j)
