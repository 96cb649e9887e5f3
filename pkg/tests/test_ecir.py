import numpy as np
import pytest
from hypothesis import given, strategies as st

from dltdoa.channel import CIR_LENGTH, CirFrame, LinkState, synthesize_cir
from dltdoa.ecir import ECIR_LENGTH, ecir_matrix, extract_ecir, normalize, window


def _frame(taps, fp):
    return CirFrame(2, np.asarray(taps, dtype=float), fp, 1e-3, LinkState.LOS)


def test_window_at_zero():
    taps = np.arange(CIR_LENGTH, dtype=float)
    assert np.array_equal(window(taps, 0), taps[:200])


def test_window_padding_near_end():
    taps = np.ones(CIR_LENGTH)
    w = window(taps, 900)
    assert np.count_nonzero(w) == 1016 - 900
    assert np.all(w[116:] == 0)


def test_constant_taps_give_ones():
    e = extract_ecir(_frame(np.full(CIR_LENGTH, 0.3), 400))
    assert np.array_equal(e.values, np.ones(ECIR_LENGTH))


def test_all_zero_window_stays_zero():
    assert np.array_equal(normalize(np.zeros(ECIR_LENGTH)), np.zeros(ECIR_LENGTH))


@given(st.integers(0, CIR_LENGTH - 1))
def test_length_and_prefix_exclusion(fp):
    taps = np.zeros(CIR_LENGTH)
    taps[:fp] = 1e6  # anything before the first path must never leak in
    taps[fp:] = np.linspace(0.1, 1.0, CIR_LENGTH - fp)
    e = extract_ecir(_frame(taps, fp))
    assert e.values.shape == (ECIR_LENGTH,)
    assert e.values.max() == pytest.approx(1.0)
    assert e.values.max() <= 1.0


@pytest.mark.parametrize("seed", range(10))
def test_normalisation_idempotent(seed):
    fr = synthesize_cir(LinkState.NLOS, 2.5, seed)
    once = extract_ecir(fr).values
    assert np.array_equal(normalize(once), once)


def test_matrix_stacks_rows():
    frames = [synthesize_cir(LinkState.LOS, 3.0, s) for s in range(4)]
    m = ecir_matrix(frames)
    assert m.shape == (4, ECIR_LENGTH)
    assert np.array_equal(m[2], extract_ecir(frames[2]).values)
    assert ecir_matrix([]).shape == (0, ECIR_LENGTH)
