"""Dual-path numeric kernels.

Each kernel has a vectorized numpy implementation and an explicit-loop numba
implementation.  The public names (gmm_eval, pairwise_sqdist) bind to whichever
path _accel selected; the private _np_* / _nb_* variants remain importable so
tests can assert equivalence and the benchmark can time both.

Array contracts (all float64, C-contiguous):
  X      (n, d)    evaluation points
  means  (K, d)    component means
  qmats  (K, d, d) eigenvector matrices Q with Sigma = Q diag(lams) Q^T
  lams   (K, d)    eigenvalues, all > 0
  logw   (K,)      log mixture weights (may include class priors)
  sig2   float     squared noise level, >= 0
"""

import math

import numpy as np

from ._accel import USE_NUMBA, njit

LOG_2PI = math.log(2.0 * math.pi)


def _np_gmm_eval(X, means, qmats, lams, logw, sig2):
    """Fused mixture evaluation at noise level sigma = sqrt(sig2).

    Returns (logp, resp, score, denoise) where logp is the log density of the
    mixture convolved with N(0, sig2 I), resp the per-component posterior
    responsibilities, score the gradient of logp in x, and denoise the
    posterior mean E[x0 | x] under the same convolution.
    """
    n, d = X.shape
    diff = X[:, None, :] - means[None, :, :]
    w = np.einsum("nkb,kba->nka", diff, qmats)
    den = lams[None, :, :] + sig2
    quad = np.einsum("nka,nka->nk", w / den, w)
    logdet = np.log(lams + sig2).sum(axis=1)
    logcomp = logw[None, :] - 0.5 * (d * LOG_2PI + logdet)[None, :] - 0.5 * quad

    m = logcomp.max(axis=1)
    safe = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(logcomp - safe[:, None])
    s = e.sum(axis=1)
    with np.errstate(divide="ignore"):
        logp = safe + np.log(s)
    resp = e / np.maximum(s, 1e-300)[:, None]

    # score_k = -Q (w / den); posterior mean_k = mu + Q (w * lam / den)
    sd = w / den
    score = -np.einsum("nk,kab,nkb->na", resp, qmats, sd)
    pm = means[None, :, :] + np.einsum("kab,nkb->nka", qmats, sd * lams[None, :, :])
    denoise = np.einsum("nk,nka->na", resp, pm)
    return logp, resp, score, denoise


@njit(cache=True)
def _nb_gmm_eval(X, means, qmats, lams, logw, sig2):
    n, d = X.shape
    K = means.shape[0]
    logp = np.empty(n)
    resp = np.zeros((n, K))
    score = np.zeros((n, d))
    denoise = np.zeros((n, d))
    w = np.empty((K, d))
    logcomp = np.empty(K)
    for i in range(n):
        mmax = -np.inf
        for k in range(K):
            quad = 0.0
            logdet = 0.0
            for a in range(d):
                acc = 0.0
                for b in range(d):
                    acc += (X[i, b] - means[k, b]) * qmats[k, b, a]
                w[k, a] = acc
                den = lams[k, a] + sig2
                quad += acc * acc / den
                logdet += math.log(den)
            lc = logw[k] - 0.5 * (d * LOG_2PI + logdet + quad)
            logcomp[k] = lc
            if lc > mmax:
                mmax = lc
        if mmax == -np.inf:
            logp[i] = -np.inf
            continue
        s = 0.0
        for k in range(K):
            s += math.exp(logcomp[k] - mmax)
        lp = mmax + math.log(s)
        logp[i] = lp
        for k in range(K):
            r = math.exp(logcomp[k] - lp)
            resp[i, k] = r
            for a in range(d):
                acc_s = 0.0
                acc_m = 0.0
                for b in range(d):
                    den = lams[k, b] + sig2
                    acc_s += qmats[k, a, b] * (w[k, b] / den)
                    acc_m += qmats[k, a, b] * (w[k, b] * lams[k, b] / den)
                score[i, a] -= r * acc_s
                denoise[i, a] += r * (means[k, a] + acc_m)
    return logp, resp, score, denoise


def _np_pairwise_sqdist(a, b):
    """Squared euclidean distances, shape (len(a), len(b))."""
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


@njit(cache=True)
def _nb_pairwise_sqdist(a, b):
    n, d = a.shape
    m = b.shape[0]
    out = np.empty((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for k in range(d):
                t = a[i, k] - b[j, k]
                acc += t * t
            out[i, j] = acc
    return out


if USE_NUMBA:
    gmm_eval = _nb_gmm_eval
    pairwise_sqdist = _nb_pairwise_sqdist
else:
    gmm_eval = _np_gmm_eval
    pairwise_sqdist = _np_pairwise_sqdist
