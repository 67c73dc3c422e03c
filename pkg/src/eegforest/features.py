"""Windowing, resampling and the FFT/Haar-DWT feature kernels.

Every window yields five energies per channel::

    [fft_hi, d1, d2, d3, d4]

``fft_hi`` is the one-sided, unnormalised spectral energy above 80 Hz and
``d1..d4`` are the energies of the Haar detail coefficients of the first four
decomposition levels.  Everything is computed in float64.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .errors import InvalidArgumentError

N_DWT_LEVELS = 4
FEATURES_PER_CHANNEL = 1 + N_DWT_LEVELS
FEATURE_SUFFIXES = ("fft_hi",) + tuple(f"d{i}" for i in range(1, N_DWT_LEVELS + 1))
DEFAULT_CUTOFF_HZ = 80.0


@dataclass(frozen=True, eq=False)
class Recording:
    channels: np.ndarray
    fs: int
    channel_names: tuple
    patient_id: str

    def __post_init__(self):
        channels = np.asarray(self.channels, dtype=np.float64)
        if channels.ndim == 1:
            channels = channels[np.newaxis, :]
        if channels.ndim != 2:
            raise InvalidArgumentError("channels must be a (n_channels, n_samples) array")
        if int(self.fs) != self.fs or self.fs <= 0:
            raise InvalidArgumentError(f"fs must be a positive integer, got {self.fs!r}")
        if channels.shape[1] < 1:
            raise InvalidArgumentError("recording must hold at least one sample")
        names = tuple(self.channel_names) or tuple(f"ch{i}" for i in range(channels.shape[0]))
        if len(names) != channels.shape[0]:
            raise InvalidArgumentError(
                f"{len(names)} channel names for {channels.shape[0]} channels")
        channels.setflags(write=False)
        object.__setattr__(self, "channels", channels)
        object.__setattr__(self, "fs", int(self.fs))
        object.__setattr__(self, "channel_names", names)
        object.__setattr__(self, "patient_id", str(self.patient_id))

    @property
    def n_channels(self):
        return self.channels.shape[0]

    @property
    def n_samples(self):
        return self.channels.shape[1]

    @property
    def duration_s(self):
        return self.n_samples / self.fs


@dataclass(frozen=True, eq=False)
class Window:
    samples: np.ndarray
    start_time: float
    fs: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[np.newaxis, :]
        if samples.shape[-1] != self.fs:
            raise InvalidArgumentError(
                f"a window holds exactly fs={self.fs} samples per channel, got {samples.shape[-1]}")
        object.__setattr__(self, "samples", samples)

    @property
    def stop_time(self):
        return self.start_time + self.samples.shape[-1] / self.fs


# -- resampling -------------------------------------------------------------

def decimate(signal, factor):
    """Keep every ``factor``-th sample, starting with the first one.

    No anti-aliasing filter is applied.
    """
    if isinstance(factor, bool) or int(factor) != factor or factor < 1:
        raise InvalidArgumentError(f"decimation factor must be a positive integer, got {factor!r}")
    return np.array(np.asarray(signal, dtype=np.float64)[..., :: int(factor)])


def linear_resample(signal, fs_in, fs_out):
    """Resample by linear interpolation; samples past the input's end are clamped."""
    x = np.asarray(signal, dtype=np.float64)
    if fs_in <= 0 or fs_out <= 0:
        raise InvalidArgumentError("sampling rates must be positive")
    if x.shape[-1] == 0:
        raise InvalidArgumentError("cannot resample an empty signal")
    if fs_in == fs_out:
        return x.copy()
    n_in = x.shape[-1]
    n_out = int(np.floor(n_in * fs_out / fs_in + 0.5))
    # positions in input-sample units
    pos = np.arange(n_out) * (fs_in / fs_out)
    grid = np.arange(n_in, dtype=np.float64)
    if x.ndim == 1:
        return np.interp(pos, grid, x)
    flat = x.reshape(-1, n_in)
    out = np.stack([np.interp(pos, grid, row) for row in flat])
    return out.reshape(*x.shape[:-1], n_out)


def split_windows(recording, window_len_s=1):
    """Cut a recording into consecutive non-overlapping windows.

    A trailing partial window is dropped.
    """
    width = int(round(window_len_s * recording.fs))
    if width != recording.fs * window_len_s:
        raise InvalidArgumentError("window length must span a whole number of samples")
    n = recording.n_samples // width
    return [
        Window(recording.channels[:, i * width:(i + 1) * width], i * window_len_s, recording.fs)
        for i in range(n)
    ]


def window_array(recording):
    """All one-second windows of a recording as an ``(n_windows, n_channels, fs)`` view."""
    fs = recording.fs
    n = recording.n_samples // fs
    block = recording.channels[:, : n * fs].reshape(recording.n_channels, n, fs)
    return block.transpose(1, 0, 2)


# -- FFT ----------------------------------------------------------------------

@lru_cache(maxsize=None)
def _smallest_factor(n):
    for p in (2, 3, 5, 7):
        if n % p == 0:
            return p
    p = 11
    while p * p <= n:
        if n % p == 0:
            return p
        p += 2
    return n


def _roots(n, exponents):
    # reduce mod n before scaling so large products keep full precision
    return np.exp(-2j * np.pi * (np.asarray(exponents) % n) / n)


@lru_cache(maxsize=None)
def _dft_matrix(p):
    k = np.arange(p)
    m = _roots(p, np.outer(k, k))
    m.setflags(write=False)
    return m


@lru_cache(maxsize=None)
def _twiddles(n, p):
    m = n // p
    t = _roots(n, np.outer(np.arange(p), np.arange(m)))
    t.setflags(write=False)
    return t


def _complex_fft(x):
    """Mixed-radix decimation-in-time FFT along the last axis.

    Splits off the smallest prime factor at every stage; a prime length is
    finished with a dense DFT.
    """
    n = x.shape[-1]
    if n == 1:
        return x.copy()
    p = _smallest_factor(n)
    if p == n:
        return x @ _dft_matrix(n).T
    m = n // p
    # sub[..., r, j] = x[..., j*p + r]
    sub = x.reshape(*x.shape[:-1], m, p).swapaxes(-1, -2)
    y = _complex_fft(np.ascontiguousarray(sub)) * _twiddles(n, p)
    # out[..., q, k] = sum_r W_p^{rq} y[..., r, k], flattened to index q*m + k
    return np.matmul(_dft_matrix(p), y).reshape(*x.shape[:-1], n)


@lru_cache(maxsize=None)
def _split_twiddles(n):
    half = n // 2
    w = _roots(n, np.arange(half + 1))
    w.setflags(write=False)
    return w


def rfft_spectrum(x):
    """One-sided DFT of real input along the last axis.

    Returns ``n // 2 + 1`` bins ``X[k] = sum_t x[t] exp(-2j*pi*k*t/n)``.  Even
    lengths pack the samples into a half-length complex sequence and untangle
    the result with the conjugate-symmetry identities; odd lengths run the
    complex transform directly.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if n < 2:
        raise InvalidArgumentError(f"rfft needs at least 2 samples, got {n}")
    if n % 2:
        return _complex_fft(x.astype(np.complex128))[..., : n // 2 + 1]
    half = n // 2
    z = x[..., 0::2] + 1j * x[..., 1::2]
    zf = _complex_fft(z)
    zf = np.concatenate([zf, zf[..., :1]], axis=-1)  # Z[half] == Z[0]
    zr = np.conj(zf[..., ::-1])  # Z*[half - k]
    even = 0.5 * (zf + zr)
    odd = -0.5j * (zf - zr)
    return even + _split_twiddles(n) * odd


def highband_energy(spectrum, fs, cutoff_hz=DEFAULT_CUTOFF_HZ, n=None):
    """Sum of ``|X[k]|**2`` over bins whose frequency ``k*fs/n`` exceeds the cutoff.

    ``n`` is the transform length; it defaults to ``2 * (len(spectrum) - 1)``,
    i.e. an even-length window.
    """
    spectrum = np.asarray(spectrum)
    n_bins = spectrum.shape[-1]
    if n is None:
        n = 2 * (n_bins - 1)
    if n // 2 + 1 != n_bins:
        raise InvalidArgumentError(f"{n_bins} bins do not match transform length {n}")
    if cutoff_hz >= fs / 2:
        raise InvalidArgumentError(f"cutoff {cutoff_hz} Hz is not below Nyquist ({fs / 2} Hz)")
    k = np.arange(n_bins)
    # k*fs/n > cutoff, compared in integers where possible
    mask = k * fs > cutoff_hz * n
    power = spectrum.real ** 2 + spectrum.imag ** 2
    return power[..., mask].sum(axis=-1)


# -- Haar DWT -------------------------------------------------------------------

_INV_SQRT2 = 1.0 / np.sqrt(2.0)


def haar_dwt(signal, levels, return_dropped=False):
    """Orthonormal Haar cascade.

    Returns ``(details, approximation)`` with ``details[0]`` the finest level.
    When a level's input has odd length its last sample is left out of that
    level's transform; with ``return_dropped=True`` a third item lists the
    squared values of those samples per level, so that::

        sum(x**2) == sum(d**2 for all d) + sum(a**2) + sum(dropped)
    """
    x = np.asarray(signal, dtype=np.float64)
    if isinstance(levels, bool) or int(levels) != levels or levels < 1:
        raise InvalidArgumentError(f"levels must be a positive integer, got {levels!r}")
    if x.shape[-1] < 2 ** levels:
        raise InvalidArgumentError(
            f"{levels} Haar levels need at least {2 ** levels} samples, got {x.shape[-1]}")
    details = []
    dropped = []
    approx = x
    for _ in range(int(levels)):
        n = approx.shape[-1]
        if n % 2:
            dropped.append(approx[..., -1] ** 2)
            approx = approx[..., :-1]
        else:
            dropped.append(np.zeros(approx.shape[:-1]))
        even = approx[..., 0::2]
        odd = approx[..., 1::2]
        details.append((even - odd) * _INV_SQRT2)
        approx = (even + odd) * _INV_SQRT2
    if return_dropped:
        return details, approx, dropped
    return details, approx


def dwt_detail_energies(details):
    if len(details) != N_DWT_LEVELS:
        raise InvalidArgumentError(f"expected {N_DWT_LEVELS} detail levels, got {len(details)}")
    return np.stack([np.sum(np.square(d), axis=-1) for d in details], axis=-1)


# -- feature vector ---------------------------------------------------------------

def window_features(samples, fs, cutoff_hz=DEFAULT_CUTOFF_HZ):
    """Feature vectors for a block of windows.

    ``samples`` has shape ``(..., n_channels, n)``; the result has shape
    ``(..., 5 * n_channels)`` laid out channel-major.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim < 2:
        raise InvalidArgumentError("expected (..., n_channels, n_samples) samples")
    n = x.shape[-1]
    hi = highband_energy(rfft_spectrum(x), fs, cutoff_hz, n=n)
    details, _ = haar_dwt(x, N_DWT_LEVELS)
    per_channel = np.concatenate([hi[..., np.newaxis], dwt_detail_energies(details)], axis=-1)
    return per_channel.reshape(*x.shape[:-2], x.shape[-2] * FEATURES_PER_CHANNEL)


def extract_features(window, cutoff_hz=DEFAULT_CUTOFF_HZ):
    return window_features(window.samples, window.fs, cutoff_hz)


def feature_names(channel_names: Sequence[str]):
    return [f"{ch}_{suffix}" for ch in channel_names for suffix in FEATURE_SUFFIXES]


class FeatureExtractor(TransformerMixin, BaseEstimator):
    """Stateless transformer from raw windows to FFT/DWT energy features.

    ``X`` is an array of shape ``(n_windows, n_channels, fs)``.
    """

    def __init__(self, fs=250, cutoff_hz=DEFAULT_CUTOFF_HZ):
        self.fs = fs
        self.cutoff_hz = cutoff_hz

    def fit(self, X, y=None):
        X = self._check(X)
        self.n_channels_ = X.shape[1]
        self.n_features_out_ = X.shape[1] * FEATURES_PER_CHANNEL
        return self

    def transform(self, X):
        check_is_fitted(self, "n_channels_")
        X = self._check(X)
        if X.shape[1] != self.n_channels_:
            raise InvalidArgumentError(
                f"fitted on {self.n_channels_} channels, got {X.shape[1]}")
        return window_features(X, self.fs, self.cutoff_hz)

    def get_feature_names_out(self, input_features=None):
        check_is_fitted(self, "n_channels_")
        names = input_features if input_features is not None else [
            f"ch{i}" for i in range(self.n_channels_)]
        return np.asarray(feature_names(names), dtype=object)

    def _check(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 3:
            raise InvalidArgumentError("expected X of shape (n_windows, n_channels, n_samples)")
        if X.shape[2] != self.fs:
            raise InvalidArgumentError(f"windows must hold fs={self.fs} samples, got {X.shape[2]}")
        if not np.all(np.isfinite(X)):
            raise InvalidArgumentError("input contains NaN or infinity")
        return X
