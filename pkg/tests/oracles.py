"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (explicit loops, textbook formulas) and
shares no code with the library under test.
"""

import numpy as np


def naive_matmul(a, b):
    """Triple-loop matrix product."""
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            for l in range(k):
                out[i, j] += a[i, l] * b[l, j]
    return out


def sliding_window_conv2d(x, w, bias):
    """Explicit sliding-window 3x3 cross-correlation, stride 1, zero pad 1."""
    b, cin, h, wd = x.shape
    cout = w.shape[0]
    xp = np.zeros((b, cin, h + 2, wd + 2))
    xp[:, :, 1:-1, 1:-1] = x
    out = np.zeros((b, cout, h, wd))
    for bi in range(b):
        for co in range(cout):
            for i in range(h):
                for j in range(wd):
                    acc = 0.0
                    for ci in range(cin):
                        for ki in range(3):
                            for kj in range(3):
                                acc += xp[bi, ci, i + ki, j + kj] * w[co, ci, ki, kj]
                    out[bi, co, i, j] = acc + bias[co]
    return out


def finite_diff_grad(f, arr, h=1e-5):
    """Central-difference gradient of scalar f() w.r.t. an array mutated in place."""
    grad = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_err(a, b, floor=1e-6):
    """Max elementwise relative error with an absolute floor on the denominator."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def class_means(embeddings, labels, n_classes):
    """Brute-force per-class mean."""
    out = np.zeros((n_classes, embeddings.shape[1]))
    for i in range(n_classes):
        members = [e for e, y in zip(embeddings, labels) if y == i]
        assert members, f"class {i} empty"
        out[i] = np.mean(members, axis=0)
    return out


def distance_table(unlabeled, prototypes, weights=None):
    """Brute-force weighted squared distances, row per sample, column per class."""
    m, d = unlabeled.shape
    n = prototypes.shape[0]
    if weights is None:
        weights = np.ones((n, d))
    out = np.zeros((m, n))
    for u in range(m):
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += weights[i, j] * (unlabeled[u, j] - prototypes[i, j]) ** 2
            out[u, i] = s
    return out


def softmax_neg(distances):
    """Row-wise softmax of negated distances, computed at high precision."""
    d = np.asarray(distances, dtype=np.float64)
    z = -d - (-d).max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def soft_kmeans_step(support_embs, support_labels, unlabeled_embs, n_classes):
    """One soft k-means refinement with the plain Euclidean metric.

    Initial centers are class means of the support set; every unlabeled sample
    contributes with its softmax(-squared distance) responsibility.
    """
    centers = class_means(support_embs, support_labels, n_classes)
    d = distance_table(unlabeled_embs, centers)
    p = softmax_neg(d)
    new = np.zeros_like(centers)
    for i in range(n_classes):
        num = np.zeros(centers.shape[1])
        den = 0.0
        for e, y in zip(support_embs, support_labels):
            if y == i:
                num += e
                den += 1.0
        for u in range(unlabeled_embs.shape[0]):
            num += p[u, i] * unlabeled_embs[u]
            den += p[u, i]
        new[i] = num / den
    return new


def cross_entropy_from_distances(distances, labels):
    """Sum over queries of -log softmax(-d)[label], via stable log-softmax."""
    d = np.asarray(distances, dtype=np.float64)
    z = -d
    m = z.max(axis=1, keepdims=True)
    logp = z - m - np.log(np.exp(z - m).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].sum())


def adam_single_step(param, grad, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """First Adam update from zero moments, with bias correction."""
    m = (1 - beta1) * grad
    v = (1 - beta2) * grad ** 2
    mhat = m / (1 - beta1)
    vhat = v / (1 - beta2)
    return param - lr * mhat / (np.sqrt(vhat) + eps)
