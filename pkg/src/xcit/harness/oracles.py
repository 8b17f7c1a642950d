"""Scalar-loop reference implementations.

Written with explicit Python loops over individual scalars and ``math``
functions only, so they share no code path with the vectorized ops they
check. Intended for tiny shapes.
"""

from __future__ import annotations

import math

import numpy as np


def _gelu(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def _softmax(row: list[float]) -> list[float]:
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def _affine(X, W, b):
    """Rows of X times W plus b, one multiply at a time."""
    n, k = len(X), len(W)
    m = len(W[0])
    out = []
    for i in range(n):
        row = []
        for j in range(m):
            acc = b[j] if b is not None else 0.0
            for t in range(k):
                acc += X[i][t] * W[t][j]
            row.append(acc)
        out.append(row)
    return out


def _layer_norm(row, gain, bias, eps=1e-6):
    d = len(row)
    mu = sum(row) / d
    var = sum((v - mu) ** 2 for v in row) / d
    s = math.sqrt(var + eps)
    return [(row[c] - mu) / s * gain[c] + bias[c] for c in range(d)]


def _lst(a) -> list:
    return np.asarray(a, dtype=np.float64).tolist()


def xca_oracle(X, qkv_w, qkv_b, temp, proj_w, proj_b, h: int):
    """Returns (output N x d, maps h x dh x dh) for one sample."""
    X, Wqkv, bqkv = _lst(X), _lst(qkv_w), _lst(qkv_b)
    temp, Wp, bp = _lst(temp), _lst(proj_w), _lst(proj_b)
    N, d = len(X), len(X[0])
    dh = d // h
    qkv = _affine(X, Wqkv, bqkv)
    mixed = [[0.0] * d for _ in range(N)]
    maps = []
    for head in range(h):
        cols = {}
        for which in range(3):
            base = which * d + head * dh
            cols[which] = [[qkv[n][base + c] for n in range(N)] for c in range(dh)]
        for which in (0, 1):
            for c in range(dh):
                col = cols[which][c]
                nrm = math.sqrt(sum(v * v for v in col))
                nrm = nrm if nrm >= 1e-12 else 1e-12
                cols[which][c] = [v / nrm for v in col]
        q, k, v = cols[0], cols[1], cols[2]
        A = []
        for i in range(dh):
            logits = [temp[head] * sum(k[i][n] * q[j][n] for n in range(N)) for j in range(dh)]
            A.append(_softmax(logits))
        maps.append(A)
        for n in range(N):
            for i in range(dh):
                mixed[n][head * dh + i] = sum(A[i][j] * v[j][n] for j in range(dh))
    return np.array(_affine(mixed, Wp, bp)), np.array(maps)


def xca_crosscov_oracle(X, qkv_w, qkv_b, h: int):
    """Normalized K^T Q blocks before temperature, h x dh x dh."""
    X, Wqkv, bqkv = _lst(X), _lst(qkv_w), _lst(qkv_b)
    N, d = len(X), len(X[0])
    dh = d // h
    qkv = _affine(X, Wqkv, bqkv)
    out = []
    for head in range(h):
        def col(which, c):
            v = [qkv[n][which * d + head * dh + c] for n in range(N)]
            nrm = max(math.sqrt(sum(t * t for t in v)), 1e-12)
            return [t / nrm for t in v]
        q = [col(0, c) for c in range(dh)]
        k = [col(1, c) for c in range(dh)]
        out.append([[sum(k[i][n] * q[j][n] for n in range(N)) for j in range(dh)] for i in range(dh)])
    return np.array(out)


def token_attention_oracle(X, qkv_w, qkv_b, proj_w, proj_b, h: int):
    X, Wqkv, bqkv, Wp, bp = _lst(X), _lst(qkv_w), _lst(qkv_b), _lst(proj_w), _lst(proj_b)
    N, d = len(X), len(X[0])
    dh = d // h
    scale = 1.0 / math.sqrt(dh)
    qkv = _affine(X, Wqkv, bqkv)
    mixed = [[0.0] * d for _ in range(N)]
    for head in range(h):
        def vec(which, n):
            return [qkv[n][which * d + head * dh + c] for c in range(dh)]
        for i in range(N):
            qi = vec(0, i)
            a = _softmax([scale * sum(qi[c] * vec(1, j)[c] for c in range(dh)) for j in range(N)])
            for c in range(dh):
                mixed[i][head * dh + c] = sum(a[j] * vec(2, j)[c] for j in range(N))
    return np.array(_affine(mixed, Wp, bp))


def class_attention_oracle(cls, patches, qkv_w, qkv_b, proj_w, proj_b, h: int):
    """Returns (updated cls 1 x d, weights h x (N+1))."""
    cls, P = _lst(cls), _lst(patches)
    Wqkv, bqkv, Wp, bp = _lst(qkv_w), _lst(qkv_b), _lst(proj_w), _lst(proj_b)
    d = len(cls[0])
    dh = d // h
    scale = 1.0 / math.sqrt(dh)
    U = cls + P
    qkv = _affine(U, Wqkv, bqkv)
    out = [0.0] * d
    weights = []
    for head in range(h):
        q = [qkv[0][head * dh + c] for c in range(dh)]
        logits = []
        for m in range(len(U)):
            k = [qkv[m][d + head * dh + c] for c in range(dh)]
            logits.append(scale * sum(q[c] * k[c] for c in range(dh)))
        a = _softmax(logits)
        weights.append(a)
        for c in range(dh):
            out[head * dh + c] = sum(a[m] * qkv[m][2 * d + head * dh + c] for m in range(len(U)))
    return np.array(_affine([out], Wp, bp)), np.array(weights)


def depthwise_conv3x3_oracle(x, w, b):
    x, w, b = np.asarray(x, float), np.asarray(w, float), np.asarray(b, float)
    B, C, H, W = x.shape
    out = np.zeros_like(x)
    for n in range(B):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    acc = b[c]
                    for di in range(3):
                        for dj in range(3):
                            ii, jj = i + di - 1, j + dj - 1
                            if 0 <= ii < H and 0 <= jj < W:
                                acc += w[c, di, dj] * x[n, c, ii, jj]
                    out[n, c, i, j] = acc
    return out


def conv2d_oracle(x, w, b, stride=2, padding=1):
    x, w, b = np.asarray(x, float), np.asarray(w, float), np.asarray(b, float)
    B, Cin, H, W = x.shape
    Cout, _, k, _ = w.shape
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((B, Cout, Ho, Wo))
    for n in range(B):
        for o in range(Cout):
            for i in range(Ho):
                for j in range(Wo):
                    acc = b[o]
                    for c in range(Cin):
                        for di in range(k):
                            for dj in range(k):
                                ii, jj = i * stride + di - padding, j * stride + dj - padding
                                if 0 <= ii < H and 0 <= jj < W:
                                    acc += w[o, c, di, dj] * x[n, c, ii, jj]
                    out[n, o, i, j] = acc
    return out


def lpi_oracle(x, grid, conv1_w, conv1_b, bn_gain, bn_bias, bn_mean, bn_var, conv2_w, conv2_b,
               eps=1e-6):
    """Eval-mode LPI on one N x d sample."""
    x = np.asarray(x, float)
    Hp, Wp = grid
    N, d = x.shape
    img = np.zeros((1, d, Hp, Wp))
    for n in range(N):
        for c in range(d):
            img[0, c, n // Wp, n % Wp] = x[n, c]
    y = depthwise_conv3x3_oracle(img, conv1_w, conv1_b)
    for c in range(d):
        s = math.sqrt(bn_var[c] + eps)
        for i in range(Hp):
            for j in range(Wp):
                y[0, c, i, j] = _gelu((y[0, c, i, j] - bn_mean[c]) / s * bn_gain[c] + bn_bias[c])
    y = depthwise_conv3x3_oracle(y, conv2_w, conv2_b)
    out = np.zeros_like(x)
    for n in range(N):
        for c in range(d):
            out[n, c] = y[0, c, n // Wp, n % Wp]
    return out


def ffn_oracle(x, w1, b1, w2, b2):
    hidden = [[_gelu(v) for v in row] for row in _affine(_lst(x), _lst(w1), _lst(b1))]
    return np.array(_affine(hidden, _lst(w2), _lst(b2)))


def layer_norm_oracle(x, gain, bias, eps=1e-6):
    g, bb = _lst(gain), _lst(bias)
    return np.array([_layer_norm(row, g, bb, eps) for row in _lst(x)])


def linear_patch_embed_oracle(img, weight, bias, patch: int):
    img = np.asarray(img, float)
    B, C, H, W = img.shape
    Hp, Wp = H // patch, W // patch
    rows = []
    for n in range(B):
        toks = []
        for i in range(Hp):
            for j in range(Wp):
                flat = [img[n, c, i * patch + a, j * patch + e]
                        for c in range(C) for a in range(patch) for e in range(patch)]
                toks.append(flat)
        rows.append(_affine(toks, _lst(weight), _lst(bias)))
    return np.array(rows)


class MacCounter:
    """Counts the multiply-accumulates an XCA forward performs.

    Walks the same loop nest as :func:`xca_oracle`, but each inner product is
    evaluated with ``np.dot`` on real data and charged its length, which
    keeps full-size shapes affordable.
    """

    def __init__(self):
        self.macs = 0

    def dot(self, a, b) -> float:
        self.macs += len(a)
        return float(np.dot(a, b))

    def xca(self, X, qkv_w, proj_w, h: int) -> int:
        X, Wqkv, Wp = (np.asarray(a, float) for a in (X, qkv_w, proj_w))
        N, d = X.shape
        dh = d // h
        qkv = np.empty((N, 3 * d))
        for n in range(N):
            for j in range(3 * d):
                qkv[n, j] = self.dot(X[n], Wqkv[:, j])
        mixed = np.empty((N, d))
        for head in range(h):
            sl = lambda w: qkv[:, w * d + head * dh: w * d + (head + 1) * dh]
            q = sl(0) / np.maximum(np.linalg.norm(sl(0), axis=0), 1e-12)
            k = sl(1) / np.maximum(np.linalg.norm(sl(1), axis=0), 1e-12)
            v = sl(2)
            A = np.empty((dh, dh))
            for i in range(dh):
                for j in range(dh):
                    A[i, j] = self.dot(k[:, i], q[:, j])
            A = np.exp(A - A.max(axis=1, keepdims=True))
            A /= A.sum(axis=1, keepdims=True)
            for n in range(N):
                for i in range(dh):
                    mixed[n, head * dh + i] = self.dot(A[i], v[n])
        for n in range(N):
            for j in range(d):
                self.dot(mixed[n], Wp[:, j])
        return self.macs
