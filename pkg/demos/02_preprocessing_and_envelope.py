"""
EEG preprocessing and the speech envelope
=========================================

EEG goes through resample -> artifact hook -> common average reference ->
resample. Speech becomes a 64 Hz envelope through a gammatone filterbank
with power-law compression.
"""

import numpy as np

from eeg2vec.dsp import GammatoneBank, ResamplerSpec, gammatone_envelope, preprocess_eeg, resample

# a 10 s, 8-channel recording at 256 Hz with a shared offset on every channel
fs = 256.0
rng = np.random.default_rng(0)
t = np.arange(int(10 * fs)) / fs
eeg = rng.normal(size=(8, t.size)) + 5.0 * np.sin(2 * np.pi * 3 * t)

out = preprocess_eeg(eeg, fs)
print("input", eeg.shape, "-> output", out.shape, "at 64 Hz")
print("largest column mean after CAR:", np.abs(out.mean(axis=0)).max())

# the resampler keeps DC exactly away from the zero-padded edges
spec = ResamplerSpec(1024, 64)
print("ratio", spec.up, "/", spec.down, "| taps", spec.filter_taps().size)
y = resample(np.full(2048, 1.5), spec)
print("DC through the resampler:", y[30:-30].min(), y[30:-30].max())

# envelope of an amplitude-modulated tone follows the modulator ** 0.6
bank = GammatoneBank()
print("first and last centre frequencies:", bank.center_frequencies()[[0, -1]].round(1))
fs_audio = 16000
ta = np.arange(2 * fs_audio) / fs_audio
modulator = 1 + 0.8 * np.sin(2 * np.pi * 4 * ta)
env = gammatone_envelope(modulator * np.sin(2 * np.pi * 1000 * ta), fs_audio)
ref = (1 + 0.8 * np.sin(2 * np.pi * 4 * np.arange(env.size) / 64)) ** 0.6
print("envelope samples:", env.size, "| correlation with |modulator|^0.6:", np.corrcoef(env[20:-20], ref[20:-20])[0, 1].round(4))

# doubling the loudness scales the envelope by 2 ** 0.6
print("scale ratio:", (gammatone_envelope(2 * modulator * np.sin(2 * np.pi * 1000 * ta), fs_audio)[40] / env[40]).round(6), "vs", round(2**0.6, 6))
