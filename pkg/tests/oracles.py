"""Independent reference implementations shared by the unit and acceptance tests."""
import math

import numpy as np

from hfmf import tensor as T
from hfmf.gradcheck import gradcheck_report
from hfmf.tensor import Tensor


def loop_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def loop_conv(x, w, stride=1, pad=0):
    C, H, W = x.shape
    Co, Ci, kh, kw = w.shape
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((Co, Ho, Wo))
    for o in range(Co):
        for i in range(Ho):
            for j in range(Wo):
                s = 0.0
                for c in range(Ci):
                    for u in range(kh):
                        for v in range(kw):
                            s += xp[c, i * stride + u, j * stride + v] * w[o, c, u, v]
                out[o, i, j] = s
    return out


def step_by_step_hds(q, kv):
    n, d = q.shape
    m = kv.shape[0]
    out = np.zeros((n, d))
    for i in range(n):
        scores = [sum(q[i, t] * kv[j, t] for t in range(d)) / math.sqrt(d) for j in range(m)]
        top = max(scores)
        w = [math.exp(s - top) for s in scores]
        tot = sum(w)
        for j in range(m):
            out[i] += (w[j] / tot) * kv[j]
    return out


def brute_force_ece(probs, labels, n_bins):
    """Equal-width bins over confidence = max(p, 1-p); sequential accumulation."""
    n = len(probs)
    total = 0.0
    for b in range(n_bins):
        members = []
        for p, y in zip(probs, labels):
            conf = max(p, 1.0 - p)
            idx = min(int(math.floor(conf * n_bins)), n_bins - 1)
            if idx == b:
                members.append((conf, int(p >= 0.5) == y))
        if not members:
            continue
        acc = sum(1.0 for _, ok in members if ok) / len(members)
        conf = sum(c for c, _ in members) / len(members)
        total += (len(members) / n) * abs(acc - conf)
    return total


def confusion_oracle(preds, labels):
    tp = fp = tn = fn = 0
    for p, y in zip(preds, labels):
        if p == 1 and y == 1:
            tp += 1
        elif p == 1:
            fp += 1
        elif y == 0:
            tn += 1
        else:
            fn += 1
    acc = (tp + tn) / len(preds)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return acc, prec, rec, f1


def composite_gradcheck(forward, image, params, seed, entries=3, attempts=5):
    """FD-check ``sum(w * forward(image))`` w.r.t. the image and sampled parameter entries.

    Parameters are jittered first so the check runs at a generic point: freshly
    zeroed biases put whole channels exactly on ReLU kinks.  A single unit that
    still lands within eps of its kink makes every upstream entry unusable, so
    the jitter is redrawn (up to ``attempts`` times) until every tensor meets
    its quota.  Returns the report and the number of entries that should have
    been compared.
    """
    params = list(params)
    rng = np.random.default_rng(seed)
    base = [p.data for p in params]
    w = rng.normal(size=2)
    x = Tensor(image, requires_grad=True)
    tensors = [x] + params
    expected = sum(min(entries, t.size) for t in tensors)
    for _ in range(attempts):
        for p, b in zip(params, base):
            p.data = b + rng.normal(0.0, 0.01, size=p.shape)
        rep = gradcheck_report(lambda: T.tsum(forward(x) * w), tensors, max_entries=entries, rng=rng)
        if rep.checked == expected:
            break
    return rep, expected
