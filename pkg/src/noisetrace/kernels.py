"""Inner DSP loops used by the separator.

Each kernel has a loop implementation (compiled with numba when available)
and a vectorised numpy implementation. ``overlap_add`` and
``spectral_gain`` dispatch on :func:`noisetrace._accel.backend`.
"""
import numpy as np

from ._accel import HAVE_NUMBA, njit


@njit
def _overlap_add_loop(frames, window, hop, out_len):
    n_frames, n_fft = frames.shape
    out = np.zeros(out_len)
    norm = np.zeros(out_len)
    for t in range(n_frames):
        start = t * hop
        for k in range(n_fft):
            out[start + k] += frames[t, k] * window[k]
            norm[start + k] += window[k] * window[k]
    for i in range(out_len):
        if norm[i] > 1e-10:
            out[i] /= norm[i]
        else:
            out[i] = 0.0
    return out


def _overlap_add_numpy(frames, window, hop, out_len):
    n_frames, n_fft = frames.shape
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    out = np.zeros(out_len)
    norm = np.zeros(out_len)
    np.add.at(out, idx.ravel(), (frames * window[None, :]).ravel())
    np.add.at(norm, idx.ravel(), np.broadcast_to(window**2, frames.shape).ravel())
    good = norm > 1e-10
    out[good] /= norm[good]
    out[~good] = 0.0
    return out


def overlap_add(frames: np.ndarray, window: np.ndarray, hop: int, out_len: int) -> np.ndarray:
    """Weighted overlap-add with squared-window normalisation.

    ``frames`` are time-domain frames (already inverse-FFT'd). The result
    reconstructs the analysed signal exactly when frames are unmodified.
    """
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    window = np.ascontiguousarray(window, dtype=np.float64)
    if (frames.shape[0] - 1) * hop + frames.shape[1] > out_len:
        raise ValueError("out_len too short for the given frames")
    if HAVE_NUMBA:
        return _overlap_add_loop(frames, window, int(hop), int(out_len))
    return _overlap_add_numpy(frames, window, hop, out_len)


@njit
def _spectral_gain_loop(mag, floor, beta, gain_floor):
    n_frames, n_bins = mag.shape
    gain = np.empty((n_frames, n_bins))
    for t in range(n_frames):
        for k in range(n_bins):
            m = mag[t, k]
            if m <= 0.0:
                gain[t, k] = gain_floor
                continue
            g = 1.0 - beta * floor[k] / m
            if g < gain_floor:
                g = gain_floor
            elif g > 1.0:
                g = 1.0
            gain[t, k] = g
    return gain


def _spectral_gain_numpy(mag, floor, beta, gain_floor):
    with np.errstate(divide="ignore", invalid="ignore"):
        g = 1.0 - beta * floor[None, :] / mag
    g = np.where(mag > 0.0, g, gain_floor)
    return np.clip(g, gain_floor, 1.0)


def spectral_gain(mag: np.ndarray, floor: np.ndarray, beta: float, gain_floor: float) -> np.ndarray:
    """``clip(1 - beta * floor / |X|, gain_floor, 1)``; bins with ``|X| == 0`` get ``gain_floor``."""
    mag = np.ascontiguousarray(mag, dtype=np.float64)
    floor = np.ascontiguousarray(floor, dtype=np.float64)
    if mag.ndim != 2 or floor.shape != (mag.shape[1],):
        raise ValueError(f"shape mismatch: magnitudes {mag.shape}, floor {floor.shape}")
    if beta <= 0:
        raise ValueError("beta must be positive")
    if HAVE_NUMBA:
        return _spectral_gain_loop(mag, floor, float(beta), float(gain_floor))
    return _spectral_gain_numpy(mag, floor, beta, gain_floor)
