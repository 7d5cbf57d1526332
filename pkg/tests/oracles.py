"""Independent reference implementations used only by the tests.

Everything here is written with plain Python loops and the math module so it
shares no code path with the package.
"""

import math
from collections import Counter


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


def lattice_step(x, preds, weights, W, U, b, wcs, bfg, S_h, S_f):
    """Scalar-loop LatticeLSTM node update.

    ``x`` is a list of input values, ``preds`` a list of (h, c) lists,
    ``W`` (4H x in), ``U`` (4H x H), ``b`` (4H) nested lists with gate order
    i, f, o, u.  ``S_h``/``S_f`` are per-unit lists.
    """
    H = len(U[0])
    K = len(preds)
    logw = [math.log(max(w, 1e-10)) for w in weights]

    def norm_weights(S, j):
        z = [S[j] * lw for lw in logw]
        m = max(z)
        e = [math.exp(v - m) for v in z]
        tot = sum(e)
        return [v / tot for v in e]

    htil = [0.0] * H
    for j in range(H):
        wts = norm_weights(S_h, j) if wcs else [1.0] * K
        htil[j] = sum(wts[k] * preds[k][0][j] for k in range(K))

    def pre(row, hvec):
        return (sum(W[row][q] * x[q] for q in range(len(x)))
                + sum(U[row][q] * hvec[q] for q in range(H)) + b[row])

    h_out, c_out = [], []
    for j in range(H):
        i = sigmoid(pre(j, htil))
        o = sigmoid(pre(2 * H + j, htil))
        u = math.tanh(pre(3 * H + j, htil))
        c = i * u
        bias = norm_weights(S_f, j) if bfg else None
        for k in range(K):
            a_f = pre(H + j, preds[k][0])
            if bias is not None:
                a_f += math.log(bias[k])
            c += sigmoid(a_f) * preds[k][1][j]
        c_out.append(c)
        h_out.append(o * math.tanh(c))
    return h_out, c_out


def levenshtein(a, b):
    d = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(len(a) + 1):
        d[i][0] = i
    for j in range(len(b) + 1):
        d[0][j] = j
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            d[i][j] = min(d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1]))
    return d[-1][-1]


def bleu(hyps, refsets, max_n=4):
    """Textbook corpus BLEU: clipped counts, closest reference length."""
    num = [0] * max_n
    den = [0] * max_n
    c = r = 0
    for hyp, refs in zip(hyps, refsets):
        c += len(hyp)
        best = None
        for ref in refs:
            key = (abs(len(ref) - len(hyp)), len(ref))
            if best is None or key < best:
                best = key
        r += best[1]
        for n in range(1, max_n + 1):
            grams = Counter(tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1))
            clip = Counter()
            for ref in refs:
                rg = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
                for g in rg:
                    clip[g] = max(clip[g], rg[g])
            num[n - 1] += sum(min(k, clip[g]) for g, k in grams.items())
            den[n - 1] += max(0, len(hyp) - n + 1)
    if min(num) == 0:
        return 0.0
    logp = sum(math.log(num[k] / den[k]) for k in range(max_n)) / max_n
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return 100.0 * bp * math.exp(logp)
