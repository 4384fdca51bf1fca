import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import signal as sps

from ulsgan.errors import ParameterError, PipelineError
from ulsgan.signal_core import (
    ComplexSignal,
    FilterKind,
    PipelineConfig,
    RawSignal,
    convolve,
    design_fir,
    envelope_abs,
    mix_to_baseband,
    process_raw,
    resample,
)

FS = 330_000.0
N = 9_900
FC = 51_200.0
TRIM_S = 17 / 20_000.0


@pytest.fixture(scope="module")
def bandpass():
    return design_fir("bandpass", FC, 5_000.0, 255, FS)


@pytest.fixture(scope="module")
def lowpass():
    return design_fir("lowpass", 5_000.0, None, 127, FS)


def _t(n=N, fs=FS):
    return np.arange(n) / fs


# -- design_fir ---------------------------------------------------------------

def test_lowpass_dc_gain(lowpass):
    assert lowpass.coefficients.sum() == pytest.approx(1.0, abs=1e-3)


def test_lowpass_matches_firwin(lowpass):
    ref = sps.firwin(127, 5_000.0, window="hamming", fs=FS)
    np.testing.assert_allclose(lowpass.coefficients, ref, atol=1e-12)


def test_bandpass_rejects_dc(bandpass):
    gain_db = 20 * np.log10(abs(bandpass.response(0.0, FS)[0]))
    assert gain_db < -40


def test_bandpass_center_gain(bandpass):
    assert abs(bandpass.response(FC, FS)[0]) == pytest.approx(1.0, abs=1e-2)


@pytest.mark.parametrize("taps", [4, 128, 1, 2])
def test_bad_tap_count(taps):
    with pytest.raises(ParameterError):
        design_fir("lowpass", 5_000.0, None, taps, FS)


@pytest.mark.parametrize("kind,f,hw", [
    ("lowpass", 0.0, None), ("lowpass", 165_000.0, None),
    ("bandpass", 3_000.0, 5_000.0), ("bandpass", 162_000.0, 5_000.0),
])
def test_bad_band_edges(kind, f, hw):
    with pytest.raises(ParameterError):
        design_fir(kind, f, hw, 63, FS)


@given(taps=st.integers(1, 150).map(lambda k: 2 * k + 1),
       cutoff=st.floats(100.0, 100_000.0),
       kind=st.sampled_from(list(FilterKind)))
@settings(max_examples=50, deadline=None)
def test_filters_exactly_symmetric(taps, cutoff, kind):
    if kind is FilterKind.BANDPASS:
        f = design_fir(kind, 60_000.0, min(cutoff, 50_000.0), taps, FS)
    else:
        f = design_fir(kind, cutoff, None, taps, FS)
    h = f.coefficients
    assert np.array_equal(h, h[::-1])
    assert len(h) % 2 == 1


# -- convolve ---------------------------------------------------------------

def test_impulse_response_is_filter(lowpass):
    x = np.zeros(501)
    x[250] = 1.0
    y = convolve(RawSignal(x, FS), lowpass).samples
    np.testing.assert_array_equal(y[250 - 63:250 + 64], lowpass.coefficients)
    assert len(y) == len(x)


@given(a=st.floats(-10, 10), b=st.floats(-10, 10), seed=st.integers(0, 2**31))
@settings(max_examples=25, deadline=None)
def test_convolve_linear(lowpass, a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal(400), rng.standard_normal(400)
    lhs = convolve(RawSignal(a * x + b * y, FS), lowpass).samples
    rhs = a * convolve(RawSignal(x, FS), lowpass).samples + b * convolve(RawSignal(y, FS), lowpass).samples
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_carrier_tone_through_bandpass(bandpass):
    x = np.sin(2 * np.pi * FC * _t())
    y = convolve(RawSignal(x, FS), bandpass).samples
    core = slice(300, N - 300)
    ratio = np.sqrt(np.mean(y[core] ** 2)) / np.sqrt(np.mean(x[core] ** 2))
    assert ratio == pytest.approx(1.0, abs=0.01)


def test_dc_through_bandpass(bandpass):
    y = convolve(RawSignal(np.ones(N), FS), bandpass).samples
    assert np.max(np.abs(y[300:-300])) < 0.01


def test_convolve_empty(lowpass):
    with pytest.raises(ParameterError):
        convolve(RawSignal(np.array([]), FS), lowpass)


def test_convolve_keeps_complex(lowpass):
    x = ComplexSignal(np.exp(1j * np.linspace(0, 1, 300)), FS)
    y = convolve(x, lowpass)
    assert isinstance(y, ComplexSignal)


# -- mix_to_baseband ----------------------------------------------------------

def test_mix_carrier_gives_constant(lowpass):
    x = np.cos(2 * np.pi * FC * _t())
    base = convolve(mix_to_baseband(RawSignal(x, FS), FC), lowpass).samples
    core = np.abs(base[300:-300])
    np.testing.assert_allclose(core, 0.5, rtol=0.01)
    # phase constant as well
    assert np.ptp(np.angle(base[300:-300])) < 1e-3


def test_mix_offset_tone_rotates(lowpass):
    x = np.cos(2 * np.pi * (FC + 1_000.0) * _t())
    base = convolve(mix_to_baseband(RawSignal(x, FS), FC), lowpass).samples[300:-300]
    spec = np.fft.fft(base)
    freqs = np.fft.fftfreq(len(base), 1 / FS)
    peak = freqs[np.argmax(np.abs(spec))]
    assert abs(peak - 1_000.0) <= FS / len(base)
    gain = abs(lowpass.response(1_000.0, FS)[0])
    np.testing.assert_allclose(np.abs(base), 0.5 * gain, rtol=0.01)


def test_mix_zero():
    y = mix_to_baseband(RawSignal(np.zeros(100), FS), FC).samples
    assert np.all(y == 0)


def test_mix_definition():
    x = np.random.default_rng(1).standard_normal(50)
    y = mix_to_baseband(RawSignal(x, FS), FC).samples
    n = np.arange(50)
    np.testing.assert_allclose(y, x * np.exp(-2j * np.pi * FC * n / FS), rtol=1e-12)


def test_mix_above_nyquist():
    with pytest.raises(ParameterError):
        mix_to_baseband(RawSignal(np.zeros(10), FS), 165_000.0)


# -- resample ---------------------------------------------------------------

def test_resample_length():
    y = resample(ComplexSignal(np.zeros(N), FS), 20_000.0)
    assert len(y.samples) == 600
    assert y.sample_rate_hz == 20_000.0


def test_resample_constant():
    y = resample(ComplexSignal(np.full(N, 0.7 - 0.2j), FS), 20_000.0).samples
    np.testing.assert_allclose(y, 0.7 - 0.2j, atol=1e-5)


def test_resample_identity():
    x = np.random.default_rng(2).standard_normal(64) + 0j
    y = resample(ComplexSignal(x, FS), FS).samples
    np.testing.assert_array_equal(y, x)


def test_resample_preserves_tone():
    x = np.exp(2j * np.pi * 1_000.0 * _t())
    y = resample(ComplexSignal(x, FS), 20_000.0).samples
    np.testing.assert_allclose(np.abs(y[20:-20]), 1.0, rtol=0.01)


def test_resample_irrational_ratio():
    with pytest.raises(ParameterError):
        resample(ComplexSignal(np.zeros(100), FS), 20_000.0 * np.pi)


# -- envelope_abs -----------------------------------------------------------

def test_envelope_modulus():
    assert envelope_abs(ComplexSignal(np.array([3 + 4j]), 1.0)).samples[0] == 5.0


def test_envelope_negative_reals():
    y = envelope_abs(ComplexSignal(np.array([-1.5, -2.0, 0.0]), 1.0)).samples
    np.testing.assert_array_equal(y, [1.5, 2.0, 0.0])


def _gauss_burst(t, center, width):
    return np.exp(-0.5 * ((t - center) / width) ** 2)


def test_envelope_of_am_burst(lowpass):
    t = _t()
    e = _gauss_burst(t, 0.012, 0.0015)
    x = e * np.cos(2 * np.pi * FC * t + 0.4)
    base = convolve(mix_to_baseband(RawSignal(x, FS), FC), lowpass)
    env = envelope_abs(base).samples * 2
    err = np.sqrt(np.mean((env - e) ** 2)) / np.sqrt(np.mean(e**2))
    assert err < 0.02


# -- process_raw ------------------------------------------------------------

def test_process_conformant_length():
    rng = np.random.default_rng(3)
    out = process_raw(RawSignal(rng.standard_normal(N), FS))
    assert len(out.samples) == 583
    assert out.sample_rate_hz == 20_000.0
    assert np.all(out.samples >= 0)


def test_process_zero():
    out = process_raw(RawSignal(np.zeros(N), FS)).samples
    assert np.all(out == 0)


def test_process_burst_plateau():
    # flat-top burst with raised-cosine ramps; plateau equals the carrier amplitude
    t = _t()
    amp = 0.8
    t1, t2, ramp = 0.008, 0.020, 0.002
    e = np.clip(np.minimum((t - t1) / ramp, (t2 - t) / ramp), 0, 1)
    e = amp * 0.5 * (1 - np.cos(np.pi * e))
    x = e * np.cos(2 * np.pi * FC * t)
    out = process_raw(RawSignal(x, FS)).samples
    tn = np.arange(583) / 20_000.0 + TRIM_S
    plateau = (tn > t1 + ramp + 5e-4) & (tn < t2 - ramp - 5e-4)
    np.testing.assert_allclose(out[plateau], amp, rtol=0.03)


def test_process_scaling_linear():
    rng = np.random.default_rng(4)
    x = rng.standard_normal(N)
    a = process_raw(RawSignal(x, FS)).samples
    b = process_raw(RawSignal(3.7 * x, FS)).samples
    np.testing.assert_allclose(b, 3.7 * a, rtol=1e-6, atol=1e-12)


@given(df=st.floats(-1_500.0, 1_500.0), phase=st.floats(0, 6.28))
@settings(max_examples=15, deadline=None)
def test_in_band_tone_preserved(df, phase):
    x = 0.6 * np.cos(2 * np.pi * (FC + df) * _t() + phase)
    out = process_raw(RawSignal(x, FS)).samples
    np.testing.assert_allclose(out[20:-20], 0.6, rtol=0.03)


def _tapered(n=N, ramp=330):
    # raised-cosine fade-out so the record end does not truncate the tone abruptly
    w = np.ones(n)
    w[-ramp:] = 0.5 * (1 + np.cos(np.pi * np.arange(1, ramp + 1) / ramp))
    return w


@pytest.mark.parametrize("df", [-20_000.0, 20_000.0])
def test_out_of_band_tone_rejected(df):
    w = _tapered()
    inband = process_raw(RawSignal(w * np.cos(2 * np.pi * FC * _t()), FS)).samples
    out = process_raw(RawSignal(w * np.cos(2 * np.pi * (FC + df) * _t()), FS)).samples
    assert out.max() < 0.01 * inband[20:-40].min()


def test_process_pure():
    x = np.random.default_rng(5).standard_normal(N)
    a = process_raw(RawSignal(x, FS)).samples
    b = process_raw(RawSignal(x.copy(), FS)).samples
    assert a.tobytes() == b.tobytes()


def test_process_too_short():
    with pytest.raises(PipelineError):
        process_raw(RawSignal(np.zeros(5_000), FS))


def test_pipeline_config_rejects_unknown_keys():
    with pytest.raises(ParameterError):
        PipelineConfig.from_dict({"carrier": 1.0})
