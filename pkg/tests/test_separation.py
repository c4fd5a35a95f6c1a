import sys

import numpy as np
import pytest
import soundfile as sf
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from noisetrace import kernels
from noisetrace.audio import AudioClip
from noisetrace.errors import AdapterError, ConfigError, InputTooShortError
from noisetrace.separation import (ExternalSeparatorAdapter, Separator, SeparatorConfig, estimate_noise_floor,
                                   external_separate, istft, separate, spectral_gain, stft)


def test_config_invariants():
    with pytest.raises(ConfigError):
        SeparatorConfig(fft_size=256, hop=512)
    with pytest.raises(ConfigError):
        SeparatorConfig(noise_percentile=1.0)
    with pytest.raises(ConfigError):
        SeparatorConfig(gain_floor=1.0)


def test_stft_perfect_reconstruction(rng):
    x = rng.standard_normal(10001)
    np.testing.assert_allclose(istft(stft(x, 512, 128), 512, 128, x.size), x, atol=1e-12)


def test_all_zero_input():
    res = separate(AudioClip(np.zeros(4000)))
    assert np.all(res.speech.samples == 0) and np.all(res.noise.samples == 0)


def test_residual_identity(rng):
    x = AudioClip(rng.uniform(-1, 1, 8000))
    res = separate(x)
    assert len(res.speech) == len(res.noise) == len(x)
    assert np.max(np.abs(x.samples - (res.speech.samples + res.noise.samples))) <= 1e-6


def test_white_noise_mostly_suppressed():
    # brute-force measurement over seeds: energy(s)/energy(x) lands in 0.33-0.35 with the defaults
    ratios = []
    for seed in range(5):
        x = np.random.default_rng(seed).standard_normal(32000) * 0.1
        s = separate(AudioClip(x)).speech.samples
        ratios.append(np.sum(s**2) / np.sum(x**2))
    assert max(ratios) < 0.40
    assert min(ratios) > 0.25


def test_too_short():
    with pytest.raises(InputTooShortError):
        separate(AudioClip(np.ones(100)))


def test_deterministic(rng):
    x = AudioClip(rng.uniform(-1, 1, 6000))
    a, b = separate(x), separate(x)
    np.testing.assert_array_equal(a.speech.samples, b.speech.samples)
    np.testing.assert_array_equal(a.noise.samples, b.noise.samples)


def test_tone_stays_in_speech(rng):
    fs, n = 16000, 32000
    t = np.arange(n) / fs
    x = 0.3 * np.sin(2 * np.pi * 1000 * t) * (np.sin(2 * np.pi * 1.5 * t) > 0) + 0.003 * rng.standard_normal(n)
    res = separate(AudioClip(x))
    k = 1000 * n // fs
    assert abs(np.fft.rfft(res.speech.samples)[k]) > 10 * abs(np.fft.rfft(res.noise.samples)[k])


def test_noise_floor_examples():
    np.testing.assert_array_equal(estimate_noise_floor(np.full((7, 4), 2.5), 0.1), np.full(4, 2.5))
    one = np.array([[1.0, 4.0, 0.5]])
    for p in (0.05, 0.5, 0.95):
        np.testing.assert_array_equal(estimate_noise_floor(one, p), one[0])
    # linear interpolation between order statistics: 1 + 0.1 * (3 - 1)
    np.testing.assert_allclose(estimate_noise_floor(np.array([[1.0], [3.0]]), 0.10), [1.2])
    with pytest.raises(ValueError):
        estimate_noise_floor(np.zeros((0, 3)), 0.1)


def test_spectral_gain_examples():
    mag = np.array([[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(spectral_gain(mag, np.zeros(3), 1.5, 0.05), np.ones((1, 3)))
    np.testing.assert_allclose(spectral_gain(np.array([[2.0]]), np.array([2.0]), 1.5, 0.05), [[0.05]])
    np.testing.assert_allclose(spectral_gain(np.array([[6.0]]), np.array([2.0]), 1.5, 0.05), [[0.5]])
    np.testing.assert_array_equal(spectral_gain(np.array([[0.0]]), np.array([0.0]), 1.5, 0.05), [[0.05]])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 5), elements=st.floats(0, 10)), arrays(np.float64, 5, elements=st.floats(0, 10)),
       st.floats(0.1, 4.0), st.floats(0.0, 0.9))
def test_gain_bounded_and_backends_agree(mag, floor, beta, gfloor):
    g = spectral_gain(mag, floor, beta, gfloor)
    assert np.all(g >= gfloor) and np.all(g <= 1.0)
    ref = kernels._spectral_gain_numpy(mag, floor, beta, gfloor)
    np.testing.assert_allclose(kernels._spectral_gain_loop(mag, floor, beta, gfloor), ref, rtol=0, atol=1e-12)


def test_overlap_add_backends_agree(rng):
    frames = rng.standard_normal((20, 64))
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(64) / 64)
    a = kernels._overlap_add_loop(frames, w, 16, 19 * 16 + 64)
    b = kernels._overlap_add_numpy(frames, w, 16, 19 * 16 + 64)
    np.testing.assert_allclose(a, b, atol=1e-12)


# -- external adapter ------------------------------------------------------

def _write(path, x):
    sf.write(path, x, 16000, subtype="FLOAT")


def test_adapter_directory_identity_and_zero(tmp_path, rng):
    x = AudioClip(rng.uniform(-0.5, 0.5, 4000))
    (tmp_path / "same").mkdir()
    (tmp_path / "zero").mkdir()
    _write(tmp_path / "same" / "u1.wav", x.samples)
    _write(tmp_path / "zero" / "u1.wav", np.zeros(4000))
    res = external_separate(x, ExternalSeparatorAdapter("DMCS", speech_dir=tmp_path / "same"), "u1")
    assert res.separator_id == "DMCS"
    assert np.max(np.abs(res.noise.samples)) < 1e-7
    res = external_separate(x, ExternalSeparatorAdapter("SF", speech_dir=tmp_path / "zero"), "u1")
    np.testing.assert_array_equal(res.noise.samples, x.samples)


def test_adapter_length_correction(tmp_path, rng):
    x = AudioClip(rng.uniform(-0.5, 0.5, 4000))
    _write(tmp_path / "u1.wav", x.samples[:-1])
    ad = ExternalSeparatorAdapter("DMCS", speech_dir=tmp_path)
    res = external_separate(x, ad, "u1")
    assert len(res.speech) == 4000 and res.speech.samples[-1] == 0.0
    assert np.max(np.abs(x.samples - res.speech.samples - res.noise.samples)) <= 1e-6
    assert ad.corrections == [("u1", 1)]


def test_adapter_errors(tmp_path, rng):
    x = AudioClip(rng.uniform(-0.5, 0.5, 4000))
    ad = ExternalSeparatorAdapter("DMCS", speech_dir=tmp_path)
    with pytest.raises(AdapterError, match="u404"):
        external_separate(x, ad, "u404")
    _write(tmp_path / "short.wav", x.samples[:3900])
    with pytest.raises(AdapterError, match="beyond"):
        external_separate(x, ad, "short")
    with pytest.raises(ConfigError):
        ExternalSeparatorAdapter("bad")
    with pytest.raises(ConfigError):
        ExternalSeparatorAdapter("bad", command="sep {input}")


def test_adapter_command_template(rng):
    x = AudioClip(rng.uniform(-0.5, 0.5, 6000) * np.hanning(6000))
    cmd = f"{sys.executable} -m noisetrace.separation {{input}} {{output}}"
    res = Separator(adapter=ExternalSeparatorAdapter("builtin-cli", command=cmd))(x, "u1")
    assert np.max(np.abs(x.samples - res.speech.samples - res.noise.samples)) <= 1e-6
    np.testing.assert_allclose(res.speech.samples, separate(x).speech.samples, atol=1e-6)


def test_adapter_command_failure(rng):
    x = AudioClip(rng.uniform(-0.5, 0.5, 2000))
    ad = ExternalSeparatorAdapter("broken", command=f"{sys.executable} -c 'import sys; sys.exit(3)' {{input}} {{output}}")
    with pytest.raises(AdapterError, match="exited 3"):
        external_separate(x, ad, "u9")
