"""EEG and audio preprocessing: rational resampling, common-average
re-referencing, and gammatone-filterbank speech envelopes."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable

import numpy as np
from scipy import signal

MAX_RATIO_TERM = 2**16


# ---------------------------------------------------------------------------
# resampling


@dataclass(frozen=True)
class ResamplerSpec:
    """Rational resampler ``from_hz -> to_hz``.

    The anti-alias filter is a Kaiser-windowed sinc spanning
    ``2 * half_width`` zero crossings of the slower of the two rates, with its
    cutoff at ``cutoff`` times the lower Nyquist frequency.
    """

    from_hz: float
    to_hz: float
    half_width: int = 10
    cutoff: float = 0.9
    kaiser_beta: float = 8.0
    up: int = field(init=False)
    down: int = field(init=False)

    def __post_init__(self):
        if not (self.from_hz > 0 and self.to_hz > 0):
            raise ValueError("sample rates must be positive")
        if not 0 < self.cutoff <= 1:
            raise ValueError("cutoff must lie in (0, 1]")
        if self.half_width < 1:
            raise ValueError("half_width must be >= 1")
        ratio = self.to_hz / self.from_hz
        frac = Fraction(ratio).limit_denominator(MAX_RATIO_TERM)
        if (
            frac.numerator > MAX_RATIO_TERM
            or abs(float(frac) - ratio) > 1e-12 * ratio
        ):
            raise ValueError(
                f"{self.to_hz}/{self.from_hz} is not a rational ratio with terms <= {MAX_RATIO_TERM}"
            )
        object.__setattr__(self, "up", frac.numerator)
        object.__setattr__(self, "down", frac.denominator)

    @property
    def identity(self) -> bool:
        return self.up == self.down == 1

    def filter_taps(self) -> np.ndarray:
        """Prototype low-pass at the upsampled rate, normalised so every
        polyphase branch has unit DC gain."""
        if self.identity:
            return np.ones(1)
        r = max(self.up, self.down)
        half = self.half_width * r
        n = np.arange(-half, half + 1)
        fc = self.cutoff / r  # cycles per upsampled sample, times 2
        h = fc * np.sinc(fc * n) * np.kaiser(2 * half + 1, self.kaiser_beta)
        for k in range(self.up):
            h[k :: self.up] /= h[k :: self.up].sum()
        return h

    @property
    def input_span(self) -> int:
        """Number of input samples one output sample depends on."""
        return -(-len(self.filter_taps()) // self.up)

    def output_length(self, n: int) -> int:
        return int(math.floor(n * self.up / self.down + 0.5))


def resample(x: np.ndarray, spec: ResamplerSpec) -> np.ndarray:
    """Polyphase rational resampling along the last axis.

    Samples beyond the signal are treated as zeros, so roughly
    ``spec.input_span / 2`` input samples at each edge are transient.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    if spec.identity:
        return x.copy()
    h = spec.filter_taps()
    if n < spec.input_span:
        raise ValueError(f"input of {n} samples is shorter than the {spec.input_span}-sample filter")
    p, q = spec.up, spec.down
    center = (len(h) - 1) // 2
    m = np.arange(spec.output_length(n))
    pos = m * q + center  # position in the upsampled signal, filter-centred
    phase = pos % p
    base = pos // p
    taps_per_phase = -(-len(h) // p)
    k = np.arange(taps_per_phase)
    hp = np.zeros((p, taps_per_phase))
    for ph in range(p):
        branch = h[ph::p]
        hp[ph, : len(branch)] = branch
    idx = base[:, None] - k[None, :]
    valid = (idx >= 0) & (idx < n)
    idx = np.clip(idx, 0, n - 1)
    weights = hp[phase] * valid
    flat = x.reshape(-1, n)
    out = np.zeros((flat.shape[0], len(m)))
    for j in range(taps_per_phase):
        out += flat[:, idx[:, j]] * weights[:, j]
    return out.reshape(x.shape[:-1] + (len(m),))


# ---------------------------------------------------------------------------
# re-referencing and the standard EEG chain


def car_reference(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"common-average reference needs >= 2 channels, got shape {x.shape}")
    return x - x.mean(axis=0, keepdims=True)


def artifact_removal_hook(x: np.ndarray) -> np.ndarray:
    """Default artifact-removal stage: returns ``x`` unchanged.

    Multichannel Wiener filtering is not implemented; pass a replacement
    callable to :func:`preprocess_eeg` to plug one in.
    """
    return x


def preprocess_eeg(
    x: np.ndarray,
    fs_hz: float,
    target_hz: float = 64.0,
    intermediate_hz: float = 1024.0,
    hook: Callable[[np.ndarray], np.ndarray] = artifact_removal_hook,
) -> np.ndarray:
    """Resample to ``intermediate_hz``, artifact hook, CAR, resample to ``target_hz``."""
    x = np.asarray(x, dtype=np.float64)
    if fs_hz != intermediate_hz:
        x = resample(x, ResamplerSpec(fs_hz, intermediate_hz))
    x = hook(x)
    x = car_reference(x)
    return resample(x, ResamplerSpec(intermediate_hz, target_hz))


# ---------------------------------------------------------------------------
# gammatone envelope


def erb_rate(f_hz):
    """Glasberg & Moore ERB-rate (number of ERBs below ``f_hz``)."""
    return 21.4 * np.log10(1.0 + 0.00437 * np.asarray(f_hz, dtype=np.float64))


def inverse_erb_rate(e):
    return (10.0 ** (np.asarray(e, dtype=np.float64) / 21.4) - 1.0) / 0.00437


def erb_bandwidth(f_hz):
    return 24.7 * (0.00437 * np.asarray(f_hz, dtype=np.float64) + 1.0)


@dataclass(frozen=True)
class GammatoneBank:
    """4th-order all-pole gammatone filterbank on an ERB-spaced grid.

    Each band is a cascade of four identical two-pole resonators with
    unit gain at the centre frequency.
    """

    n_bands: int = 28
    f_low_hz: float = 50.0
    f_high_hz: float = 5000.0
    exponent: float = 0.6
    order: int = 4
    bandwidth_factor: float = 1.019

    def __post_init__(self):
        if self.n_bands < 1:
            raise ValueError("n_bands must be >= 1")
        if not 0 < self.f_low_hz < self.f_high_hz:
            raise ValueError("need 0 < f_low_hz < f_high_hz")
        if self.exponent <= 0:
            raise ValueError("exponent must be positive")

    def center_frequencies(self) -> np.ndarray:
        if self.n_bands == 1:
            return np.array([self.f_low_hz])
        e = np.linspace(erb_rate(self.f_low_hz), erb_rate(self.f_high_hz), self.n_bands)
        cf = inverse_erb_rate(e)
        cf[0], cf[-1] = self.f_low_hz, self.f_high_hz
        return cf

    def sos(self, fs_hz: float) -> list[np.ndarray]:
        """Per-band second-order sections at ``fs_hz``."""
        if self.f_high_hz >= fs_hz / 2:
            raise ValueError(f"band at {self.f_high_hz} Hz is above Nyquist for fs={fs_hz} Hz")
        out = []
        for fc in self.center_frequencies():
            r = math.exp(-2 * math.pi * self.bandwidth_factor * erb_bandwidth(fc) / fs_hz)
            theta = 2 * math.pi * fc / fs_hz
            a = np.array([1.0, -2 * r * math.cos(theta), r * r])
            z = np.exp(-1j * theta)
            gain = abs(a[0] + a[1] * z + a[2] * z * z)
            section = np.concatenate([[gain, 0.0, 0.0], a])
            out.append(np.tile(section, (self.order, 1)))
        return out

    def filter(self, audio: np.ndarray, fs_hz: float) -> np.ndarray:
        """Band outputs, shape [n_bands, N]."""
        audio = np.asarray(audio, dtype=np.float64)
        return np.stack([signal.sosfilt(s, audio) for s in self.sos(fs_hz)])


def gammatone_envelope(
    audio: np.ndarray,
    fs_hz: float,
    bank: GammatoneBank | None = None,
    out_hz: float = 64.0,
) -> np.ndarray:
    """Compressed subband envelope: mean over bands of ``|band| ** exponent``,
    resampled to ``out_hz``."""
    bank = bank or GammatoneBank()
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 1 or audio.size == 0:
        raise ValueError("audio must be a non-empty 1-D signal")
    if fs_hz <= 2 * bank.f_high_hz:
        raise ValueError(f"fs={fs_hz} Hz cannot carry the {bank.f_high_hz} Hz band")
    env = np.mean(np.abs(bank.filter(audio, fs_hz)) ** bank.exponent, axis=0)
    out = resample(env, ResamplerSpec(fs_hz, out_hz))
    # the anti-alias filter has small negative lobes
    return np.maximum(out, 0.0)
