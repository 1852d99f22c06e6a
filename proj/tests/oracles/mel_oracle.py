"""Independent mel oracle: HTK mel scale, 80 triangular filters on 50-8000 Hz,
512-point FFT at 16 kHz. Prints the filter with the largest weight at the
FFT bin of a 1 kHz tone and the number of covered bins."""
import numpy as np

sr, n_fft, n_mels, fmin, fmax = 16000, 512, 80, 50.0, 8000.0
mel = lambda f: 2595.0 * np.log10(1.0 + f / 700.0)
hz = lambda m: 700.0 * (10.0 ** (m / 2595.0) - 1.0)
edges = hz(np.linspace(mel(fmin), mel(fmax), n_mels + 2))
freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
fb = np.zeros((n_mels, freqs.size))
for m in range(n_mels):
    lo, c, hi = edges[m], edges[m + 1], edges[m + 2]
    up = (freqs - lo) / (c - lo)
    down = (hi - freqs) / (hi - c)
    fb[m] = np.maximum(0.0, np.minimum(up, down))
k = int(round(1000.0 * n_fft / sr))
print("bin_of_1khz", k)
print("argmax_filter", int(np.argmax(fb[:, k])))
print("center_hz", edges[int(np.argmax(fb[:, k])) + 1])
inside = (freqs >= fmin) & (freqs < fmax)
print("uncovered_bins", int(np.sum(fb[:, inside].sum(axis=0) <= 0)))
