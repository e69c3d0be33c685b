"""Graph-free reference implementations and brute-force oracles for the tests.

Two flavours:
  * ``*_loops`` - pure Python loops, independent of numpy's kernels; compared
    at a tight tolerance.
  * ``*_numpy`` - plain numpy with the same operation order as the
    autodiff ops, no graph; compared bit-for-bit.
"""

import math

import numpy as np
from scipy.special import erf


def matmul_loops(A, B):
    A, B = np.asarray(A, float), np.asarray(B, float)
    m, k = A.shape
    k2, n = B.shape
    assert k == k2
    C = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += A[i, t] * B[t, j]
            C[i, j] = s
    return C


def conv_loops(x, w):
    """Zero-padded same-length depthwise cross-correlation, O(L*k*d)."""
    L, d = x.shape
    k = w.shape[0]
    r = (k - 1) // 2
    out = np.zeros((L, d))
    for t in range(L):
        for c in range(d):
            s = 0.0
            for j in range(k):
                src = t + j - r
                if 0 <= src < L:
                    s = s + x[src, c] * w[j, c]
                else:
                    s = s + 0.0 * w[j, c]
            out[t, c] = s
    return out


def stats_loops(x):
    L = x.shape[0]
    acc = np.zeros(x.shape[1])
    for t in range(L):
        acc = acc + x[t]
    mean = acc / L
    acc2 = np.zeros(x.shape[1])
    for t in range(L):
        dev = x[t] - mean
        acc2 = acc2 + dev * dev
    return np.concatenate([mean, np.sqrt(acc2 / L)])


def softmax_numpy(s):
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def mhsa_numpy(x, wq, wk, wv, wo):
    heads = []
    for q_w, k_w, v_w in zip(wq, wk, wv):
        q, k, v = x @ q_w, x @ k_w, x @ v_w
        p = softmax_numpy((q @ k.T) * (1.0 / math.sqrt(q_w.shape[1])))
        heads.append(p @ v)
    return np.concatenate(heads, axis=-1) @ wo


def mhsa_loops(x, wq, wk, wv, wo):
    heads = []
    for q_w, k_w, v_w in zip(wq, wk, wv):
        q, k, v = matmul_loops(x, q_w), matmul_loops(x, k_w), matmul_loops(x, v_w)
        dk = q_w.shape[1]
        n = x.shape[0]
        out = np.zeros((n, v.shape[1]))
        for i in range(n):
            logits = [sum(q[i, t] * k[j, t] for t in range(dk)) / math.sqrt(dk) for j in range(n)]
            top = max(logits)
            e = [math.exp(z - top) for z in logits]
            tot = sum(e)
            for j in range(n):
                out[i] += (e[j] / tot) * v[j]
        heads.append(out)
    return matmul_loops(np.concatenate(heads, axis=1), wo)


def gelu_numpy(x):
    return x * (0.5 * (1.0 + erf(x * (1.0 / math.sqrt(2.0)))))


def gelu_scalar(x):
    return x * 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))


def ffn_numpy(x, w1, b1, w2, b2, act):
    h = x @ w1 + b1
    h = np.where(h > 0, h, 0.0) if act == "relu" else gelu_numpy(h)
    return h @ w2 + b2


def ffn_loops(x, w1, b1, w2, b2, act):
    h = matmul_loops(x, w1) + b1
    f = (lambda v: max(v, 0.0)) if act == "relu" else gelu_scalar
    h = np.vectorize(f)(h)
    return matmul_loops(h, w2) + b2


# ---------------------------------------------------------------------------
# metrics oracle


def brute_force_points(target_scores, nontarget_scores):
    """(P_miss, P_fa) at every midpoint between distinct scores plus +-inf."""
    tgt = list(map(float, target_scores))
    non = list(map(float, nontarget_scores))
    distinct = sorted(set(tgt + non))
    thresholds = [-math.inf] + [(a + b) / 2 for a, b in zip(distinct, distinct[1:])] + [math.inf]
    points = []
    for thr in thresholds:
        p_miss = sum(1 for s in tgt if s < thr) / len(tgt)
        p_fa = sum(1 for s in non if s >= thr) / len(non)
        points.append((p_miss, p_fa))
    return points


def brute_force_points_vectorized(target_scores, nontarget_scores):
    """Same sweep as ``brute_force_points``, counted with a dense comparison matrix."""
    tgt = np.asarray(target_scores, float)
    non = np.asarray(nontarget_scores, float)
    distinct = np.unique(np.r_[tgt, non])
    thresholds = np.r_[-np.inf, (distinct[:-1] + distinct[1:]) / 2, np.inf]
    p_miss = (tgt[None, :] < thresholds[:, None]).sum(axis=1) / tgt.size
    p_fa = (non[None, :] >= thresholds[:, None]).sum(axis=1) / non.size
    return list(zip(p_miss.tolist(), p_fa.tolist()))


def brute_force_eer(target_scores, nontarget_scores, sweep=brute_force_points):
    pts = sweep(target_scores, nontarget_scores)
    for (m0, f0), (m1, f1) in zip(pts, pts[1:]):
        if m0 == f0:
            return m0
        if m0 < f0 and m1 >= f1:
            if m1 == f1:
                return m1
            t = (f0 - m0) / ((m1 - m0) - (f1 - f0))
            return m0 + t * (m1 - m0)
    raise AssertionError("DET curve never crosses the diagonal")


def brute_force_min_dcf(target_scores, nontarget_scores, p_target=0.01, c_miss=1.0, c_fa=1.0, sweep=brute_force_points):
    pts = sweep(target_scores, nontarget_scores)
    best = min(c_miss * p_target * m + c_fa * (1 - p_target) * f for m, f in pts)
    return best / min(c_miss * p_target, c_fa * (1 - p_target))


# ---------------------------------------------------------------------------
# optimizer oracle


def adam_reference(theta, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """Plain Adam (no weight decay) over a gradient sequence."""
    theta = np.array(theta, float)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, 1):
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        theta = theta - lr * (m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + eps)
    return theta
