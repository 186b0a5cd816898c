"""Independent numpy reference implementations used as test oracles."""
import math

import numpy as np


def ard_kernel(A, B, sigma2, omega):
    A, B = np.atleast_2d(A), np.atleast_2d(B)
    K = np.empty((len(A), len(B)))
    for i in range(len(A)):
        for j in range(len(B)):
            K[i, j] = sigma2 * math.exp(-0.5 * float(np.sum(omega * (A[i] - B[j]) ** 2)))
    return K


def gp_dense(X, y, Xq, sigma2, omega, noise):
    """Posterior mean, covariance and log marginal likelihood by explicit inversion."""
    K = ard_kernel(X, X, sigma2, omega) + noise * np.eye(len(X))
    Kinv = np.linalg.inv(K)
    Kq = ard_kernel(Xq, X, sigma2, omega)
    mean = Kq @ Kinv @ y
    cov = ard_kernel(Xq, Xq, sigma2, omega) - Kq @ Kinv @ Kq.T
    sign, logdet = np.linalg.slogdet(K)
    lml = -0.5 * y @ Kinv @ y - 0.5 * logdet - 0.5 * len(X) * math.log(2 * math.pi)
    return mean, cov, lml


def ssim_loops(x, y, size=11, sigma=1.5, k1=0.01, k2=0.03, L=1.0):
    """Mean SSIM straight from the definition, one window at a time."""
    ax = np.arange(size) - (size - 1) / 2
    g = np.exp(-ax ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    H, W = x.shape
    vals = []
    for r in range(H - size + 1):
        for c in range(W - size + 1):
            px, py = x[r:r + size, c:c + size], y[r:r + size, c:c + size]
            mx, my = (w * px).sum(), (w * py).sum()
            vx = (w * (px - mx) ** 2).sum()
            vy = (w * (py - my) ** 2).sum()
            cxy = (w * (px - mx) * (py - my)).sum()
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))
