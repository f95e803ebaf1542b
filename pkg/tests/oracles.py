"""Slow, literal reference implementations used to cross-check the fast paths."""
import math

import numpy as np


def dyadic(rng, shape, scale=16, span=64):
    """Random multiples of 1/scale in [-span/scale, span/scale); sums of products stay exact in float64."""
    return rng.integers(-span, span, size=shape).astype(np.float64) / scale


def naive_conv2d(x, w, b, stride, pad):
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = pad
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for c in range(cin):
                    for u in range(kh):
                        for v in range(kw):
                            y, z = i * sh + u - ph, j * sw + v - pw
                            if 0 <= y < h and 0 <= z < wd:
                                acc += x[c, y, z] * w[o, c, u, v]
                out[o, i, j] = acc + (b[o] if b is not None else 0.0)
    return out


def naive_window_means(x, window=301):
    d, n = x.shape
    w = min(window, n)
    out = np.empty_like(x)
    for t in range(n):
        start = min(max(t - window // 2, 0), n - w)
        for k in range(d):
            s = 0.0
            for u in range(start, start + w):
                s += x[k, u]
            out[k, t] = x[k, t] - s / w
    return out


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def naive_gru(x, layers):
    """x: (D, L).  layers: list of (w_in, w_rec, bias) with gate order reset, update, candidate."""
    seq = [list(x[:, t]) for t in range(x.shape[1])]
    for w_in, w_rec, bias in layers:
        hdim = w_rec.shape[0]
        h = [0.0] * hdim
        outs = []
        for xt in seq:
            def proj(col):
                return sum(xt[i] * w_in[i, col] for i in range(len(xt))) + bias[col]

            r = [_sig(proj(j) + sum(h[i] * w_rec[i, j] for i in range(hdim))) for j in range(hdim)]
            z = [_sig(proj(hdim + j) + sum(h[i] * w_rec[i, hdim + j] for i in range(hdim))) for j in range(hdim)]
            rh = [r[i] * h[i] for i in range(hdim)]
            c = [math.tanh(proj(2 * hdim + j) + sum(rh[i] * w_rec[i, 2 * hdim + j] for i in range(hdim)))
                 for j in range(hdim)]
            h = [z[j] * h[j] + (1 - z[j]) * c[j] for j in range(hdim)]
            outs.append(h)
        seq = outs
    return np.array(seq[-1])


def naive_lstm(x, layers):
    """Gate order input, forget, cell, output."""
    seq = [list(x[:, t]) for t in range(x.shape[1])]
    for w_in, w_rec, bias in layers:
        hdim = w_rec.shape[0]
        h, c = [0.0] * hdim, [0.0] * hdim
        outs = []
        for xt in seq:
            pre = [sum(xt[i] * w_in[i, j] for i in range(len(xt))) + bias[j]
                   + sum(h[i] * w_rec[i, j] for i in range(hdim)) for j in range(4 * hdim)]
            ig = [_sig(pre[j]) for j in range(hdim)]
            fg = [_sig(pre[hdim + j]) for j in range(hdim)]
            gg = [math.tanh(pre[2 * hdim + j]) for j in range(hdim)]
            og = [_sig(pre[3 * hdim + j]) for j in range(hdim)]
            c = [fg[j] * c[j] + ig[j] * gg[j] for j in range(hdim)]
            h = [og[j] * math.tanh(c[j]) for j in range(hdim)]
            outs.append(h)
        seq = outs
    return np.array(seq[-1])


def naive_lde(x, mu, s, norm="frames"):
    """x: (D, L), mu: (C, D), s: (C,) positive scales.  Returns flattened (C*D,)."""
    d, n = x.shape
    c_count = mu.shape[0]
    e = np.zeros((c_count, d))
    wsum = np.zeros(c_count)
    for t in range(n):
        dist = []
        for c in range(c_count):
            acc = 0.0
            for k in range(d):
                acc += (x[k, t] - mu[c, k]) ** 2
            dist.append(-s[c] * acc)
        top = max(dist)
        ex = [math.exp(v - top) for v in dist]
        tot = sum(ex)
        for c in range(c_count):
            w = ex[c] / tot
            wsum[c] += w
            for k in range(d):
                e[c, k] += w * (x[k, t] - mu[c, k])
    if norm == "frames":
        e /= n
    else:
        e /= wsum[:, None]
    return e.reshape(-1)


def brute_eer(tar, non):
    """Sweep every candidate threshold with explicit loops; interpolate the crossing."""
    tar, non = list(map(float, tar)), list(map(float, non))
    thresholds = [-math.inf] + sorted(set(tar + non)) + [math.inf]
    points = []
    for th in thresholds:
        miss = sum(1 for v in tar if v < th) / len(tar)
        fa = sum(1 for v in non if v >= th) / len(non)
        points.append((miss, fa))
    for i, (m, f) in enumerate(points):
        if m == f:
            return 100.0 * m
        if m > f:
            m0, f0 = points[i - 1]
            # segment from (m0, f0) to (m, f); solve m0 + t(m - m0) == f0 + t(f - f0)
            t = (f0 - m0) / ((m - m0) - (f - f0))
            return 100.0 * (m0 + t * (m - m0))
    raise AssertionError("no crossing")


def nested_cavg(labels, scores, threshold=math.log(0.5), c_miss=1.0, c_fa=1.0, p_target=0.5):
    """Literal transcription of the closed-set Cavg sum, in percent."""
    k = scores.shape[1]
    total = 0.0
    for t in range(k):
        n_t = sum(1 for y in labels if y == t)
        misses = sum(1 for i, y in enumerate(labels) if y == t and not scores[i, t] >= threshold)
        p_miss = misses / n_t
        fa_term = 0.0
        for n in range(k):
            if n == t:
                continue
            n_n = sum(1 for y in labels if y == n)
            fas = sum(1 for i, y in enumerate(labels) if y == n and scores[i, t] >= threshold)
            fa_term += c_fa * (1 - p_target) * (fas / n_n) / (k - 1)
        total += c_miss * p_target * p_miss + fa_term
    return 100.0 * total / k


def random_trial_set(rng, k=None, n=None):
    """Random closed-set trial set with every language present and some tied scores."""
    k = k or int(rng.integers(2, 6))
    n = n or int(rng.integers(max(k, 5), 41))
    labels = np.concatenate([np.arange(k), rng.integers(0, k, n - k)])
    rng.shuffle(labels)
    logits = rng.normal(size=(n, k)) * rng.uniform(0.5, 3)
    logits[np.arange(n), labels] += rng.uniform(0, 2)
    logits = np.round(logits, 1)  # ties
    lp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    return labels, lp
