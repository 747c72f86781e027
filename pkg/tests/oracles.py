"""Independent reference implementations used as test oracles.

Everything here is written the slow, obvious way (explicit sums and loops,
no FFT, no BLAS, no scipy) so the package code is checked against a second
route, not against itself.
"""

import numpy as np


def tone_amplitude(samples, rate, freq):
    """Single-bin DFT amplitude of a tone, measured mid-signal.

    Projects the middle portion of the signal onto exp(-2i*pi*f*t) over an
    integer number of cycles, so edge transients and spectral leakage do not
    contaminate the reading.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n = samples.size
    if freq == 0.0:
        return abs(float(np.mean(samples[n // 4: n - n // 4])))
    quarter = n // 4
    cycles = max(1, int(np.floor(freq * (n - 2 * quarter) / rate)))
    win = int(round(cycles * rate / freq))
    start = (n - win) // 2
    t = np.arange(start, start + win) / rate
    coef = sum(samples[start + j] * np.exp(-2j * np.pi * freq * t[j])
               for j in range(win))
    return 2.0 * abs(coef) / win


def dft_analytic_oracle(x):
    """O(n^2) analytic signal straight from the DFT definition.

    Forward DFT by explicit sums, negative-frequency bins zeroed, positive
    bins doubled (DC and the even-length Nyquist bin kept at unit weight),
    inverse DFT by explicit sums.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    spectrum = np.array([sum(x[j] * np.exp(-2j * np.pi * k * j / n)
                             for j in range(n)) for k in range(n)])
    gate = np.zeros(n)
    gate[0] = 1.0
    if n % 2 == 0:
        gate[n // 2] = 1.0
        gate[1:n // 2] = 2.0
    else:
        gate[1:(n + 1) // 2] = 2.0
    spectrum *= gate
    z = np.array([sum(spectrum[k] * np.exp(2j * np.pi * k * j / n)
                      for k in range(n)) / n for j in range(n)])
    return z


def naive_matmul(a, b):
    """Triple-loop matrix product of two 2-D arrays."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=np.float64)
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def naive_conv1d(x, w, b=None, stride=1, dilation=1, padding=0):
    """Loop cross-correlation; x (C_in, L), w (C_out, C_in, K), b (C_out,)."""
    c_in, length = x.shape
    c_out, _, kernel = w.shape
    xp = np.zeros((c_in, length + 2 * padding))
    xp[:, padding:padding + length] = x
    l_out = (length + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1
    out = np.zeros((c_out, l_out))
    for o in range(c_out):
        for l in range(l_out):
            acc = 0.0
            for c in range(c_in):
                for k in range(kernel):
                    acc += w[o, c, k] * xp[c, l * stride + k * dilation]
            out[o, l] = acc + (b[o] if b is not None else 0.0)
    return out


def naive_depthwise_conv1d(x, w, b=None, stride=1, dilation=1, padding=0):
    """Loop per-channel convolution; x (C, L), w (C, K), b (C,)."""
    channels, length = x.shape
    _, kernel = w.shape
    xp = np.zeros((channels, length + 2 * padding))
    xp[:, padding:padding + length] = x
    l_out = (length + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1
    out = np.zeros((channels, l_out))
    for c in range(channels):
        for l in range(l_out):
            acc = 0.0
            for k in range(kernel):
                acc += w[c, k] * xp[c, l * stride + k * dilation]
            out[c, l] = acc + (b[c] if b is not None else 0.0)
    return out


def naive_conv_transpose1d(x, w, b=None, stride=1, padding=0):
    """Loop adjoint convolution; x (C_in, L), w (C_in, C_out, K)."""
    c_in, length = x.shape
    _, c_out, kernel = w.shape
    full = (length - 1) * stride + kernel
    y = np.zeros((c_out, full))
    for o in range(c_out):
        for c in range(c_in):
            for l in range(length):
                for k in range(kernel):
                    y[o, l * stride + k] += x[c, l] * w[c, o, k]
    y = y[:, padding:full - padding] if padding else y
    if b is not None:
        y = y + b[:, None]
    return y


def naive_group_norm(x, groups, gain, bias, eps=1e-5):
    """Per-group zero-mean/unit-variance over (channels-in-group x frames)."""
    channels, length = x.shape
    per = channels // groups
    out = np.zeros_like(x)
    for g in range(groups):
        block = x[g * per:(g + 1) * per]
        mu = block.mean()
        var = ((block - mu) ** 2).mean()
        out[g * per:(g + 1) * per] = (block - mu) / np.sqrt(var + eps)
    return gain[:, None] * out + bias[:, None]


def naive_softmax_rows(w):
    """Row softmax via explicit per-row sums."""
    out = np.zeros_like(w)
    flat = w.reshape(-1, w.shape[-1])
    oflat = out.reshape(-1, w.shape[-1])
    for r in range(flat.shape[0]):
        row = flat[r] - flat[r].max()
        e = np.exp(row)
        oflat[r] = e / e.sum()
    return out


def si_sdr_oracle(estimate, reference):
    """Scale-invariant SDR in dB straight from its projection definition."""
    estimate = np.asarray(estimate, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    alpha = float(np.dot(estimate, reference) / np.dot(reference, reference))
    target = alpha * reference
    residual = estimate - target
    return 10.0 * np.log10(np.dot(target, target) / np.dot(residual, residual))
