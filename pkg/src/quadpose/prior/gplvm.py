"""Single GPLVM node: RBF kernel, back-constrained latents, L-BFGS training.

Each column of the standardized data block is modelled as an independent
draw from a zero-mean GP over the latent coordinates. Latents are tied to
the data by a kernel-regression back constraint ``X = K_bc(Y, Y) A``, so
only ``A`` and the kernel hyperparameters are optimized.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg, optimize
from scipy.spatial.distance import cdist, pdist

log = logging.getLogger(__name__)

JITTER = 1e-6         # relative to signal variance
LOG_BOUNDS = [(-5.0, 5.0), (-5.0, 5.0), (-7.0, 2.0)]   # log sf, log ell, log sn


class GplvmError(ValueError):
    pass


def rbf(xa, xb, sf2: float, ell: float) -> np.ndarray:
    return sf2 * np.exp(-0.5 * cdist(xa, xb, "sqeuclidean") / ell ** 2)


@dataclass(frozen=True, eq=False)
class GplvmNode:
    X: np.ndarray          # (f, q) latent coordinates
    Y: np.ndarray          # (f, b) standardized data
    mean: np.ndarray       # (b,) column statistics
    std: np.ndarray
    sf2: float             # signal variance
    ell: float             # RBF lengthscale
    sn2: float             # noise variance
    A: np.ndarray          # (f, q) back-constraint weights
    bc_ell: float          # back-constraint lengthscale (data space)
    loglik: float = float("nan")

    @property
    def q(self) -> int:
        return self.X.shape[1]

    @property
    def n_frames(self) -> int:
        return self.X.shape[0]

    def kernel(self) -> np.ndarray:
        f = self.n_frames
        return rbf(self.X, self.X, self.sf2, self.ell) + (self.sn2 + JITTER * self.sf2) * np.eye(f)

    @property
    def alpha(self) -> np.ndarray:
        a = self.__dict__.get("_alpha")
        if a is None:
            a = linalg.cho_solve(linalg.cho_factor(self.kernel()), self.Y)
            object.__setattr__(self, "_alpha", a)
        return a

    def predict_standardized(self, x) -> np.ndarray:
        """Posterior mean in standardized units for latent points (..., q)."""
        x = np.asarray(x, float)
        flat = x.reshape(-1, self.q)
        out = rbf(flat, self.X, self.sf2, self.ell) @ self.alpha
        return out.reshape(x.shape[:-1] + (self.Y.shape[1],))

    def predict(self, x) -> np.ndarray:
        """Posterior mean of the data block at latent point(s) ``x``."""
        return self.predict_standardized(x) * self.std + self.mean

    def back_project(self, y) -> np.ndarray:
        """Latent position the back constraint assigns to data rows ``y``."""
        y = (np.atleast_2d(y) - self.mean) / self.std
        return rbf(y, self.Y, 1.0, self.bc_ell) @ self.A

    def arrays(self, prefix: str) -> dict:
        return {f"{prefix}.{k}": getattr(self, k) for k in ("X", "Y", "mean", "std", "A")}

    def meta(self) -> dict:
        return {"sf2": self.sf2, "ell": self.ell, "sn2": self.sn2, "bc_ell": self.bc_ell,
                "loglik": self.loglik, "q": self.q}

    @classmethod
    def from_parts(cls, meta: dict, arrays: dict, prefix: str) -> "GplvmNode":
        g = lambda k: arrays[f"{prefix}.{k}"]
        return cls(g("X"), g("Y"), g("mean"), g("std"), meta["sf2"], meta["ell"], meta["sn2"],
                   g("A"), meta["bc_ell"], meta.get("loglik", float("nan")))


def standardize(data):
    data = np.asarray(data, float)
    mean = data.mean(axis=0)
    std = data.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return (data - mean) / std, mean, std


def pca_init(Y, q: int) -> np.ndarray:
    u, s, _ = np.linalg.svd(Y - Y.mean(axis=0), full_matrices=False)
    x = np.zeros((len(Y), q))
    k = min(q, len(s))
    x[:, :k] = u[:, :k] * s[:k]
    sd = x[:, 0].std()
    return x / sd if sd > 0 else x


def _neg_loglik(theta, Y, Kbc, q):
    """Negative log-likelihood (+ unit Gaussian latent prior) and its gradient."""
    f, d = Y.shape
    A = theta[:f * q].reshape(f, q)
    lsf, lell, lsn = theta[f * q:]
    sf2, ell, sn2 = np.exp(2 * lsf), np.exp(lell), np.exp(2 * lsn)
    X = Kbc @ A
    sq = cdist(X, X, "sqeuclidean")
    Kf = sf2 * np.exp(-0.5 * sq / ell ** 2)
    K = Kf + (sn2 + JITTER * sf2) * np.eye(f)
    try:
        c = linalg.cho_factor(K)
    except linalg.LinAlgError:
        return 1e20, np.zeros_like(theta)
    Kinv_Y = linalg.cho_solve(c, Y)
    Kinv = linalg.cho_solve(c, np.eye(f))
    logdet = 2 * np.log(np.diag(c[0])).sum()
    nll = 0.5 * d * logdet + 0.5 * np.sum(Y * Kinv_Y) + 0.5 * f * d * np.log(2 * np.pi)
    nll += 0.5 * np.sum(X * X)
    # dL/dK with L the log-likelihood
    G = 0.5 * (Kinv_Y @ Kinv_Y.T - d * Kinv)
    W = G * Kf
    dX = -2.0 / ell ** 2 * (W.sum(axis=1)[:, None] * X - W @ X)
    dX = -dX + X                              # to negative log-posterior
    dA = Kbc.T @ dX
    tr = np.trace(G)
    d_lsf = -(2 * np.sum(W) + 2 * JITTER * sf2 * tr)
    d_lell = -np.sum(W * sq) / ell ** 2
    d_lsn = -2 * sn2 * tr
    return nll, np.concatenate([dA.ravel(), [d_lsf, d_lell, d_lsn]])


def train_node(data, q: int, maxiter: int = 500, ftol: float = 1e-6) -> GplvmNode:
    """Fit a back-constrained GPLVM to a (f, b) data block."""
    data = np.asarray(data, float)
    f = len(data)
    if f < 2:
        raise GplvmError("need at least two frames")
    Y, mean, std = standardize(data)
    if np.allclose(Y, 0.0):
        raise GplvmError("data block is rank deficient: all frames identical")
    d = pdist(Y)
    bc_ell = float(np.median(d[d > 0])) if np.any(d > 0) else 1.0
    Kbc = rbf(Y, Y, 1.0, bc_ell)
    X0 = pca_init(Y, q)
    A0 = np.linalg.lstsq(Kbc + 1e-8 * np.eye(f), X0, rcond=None)[0]
    theta0 = np.concatenate([A0.ravel(), [0.0, 0.0, 0.5 * np.log(0.1)]])
    bounds = [(None, None)] * (f * q) + LOG_BOUNDS
    res = optimize.minimize(_neg_loglik, theta0, args=(Y, Kbc, q), jac=True, method="L-BFGS-B",
                            bounds=bounds, options={"maxiter": maxiter, "ftol": ftol})
    theta = res.x
    A = theta[:f * q].reshape(f, q)
    lsf, lell, lsn = theta[f * q:]
    log.debug("event=train_node frames=%d dims=%d q=%d iters=%d nll=%.4f status=%r",
              f, Y.shape[1], q, res.nit, res.fun, res.message)
    return GplvmNode(Kbc @ A, Y, mean, std, float(np.exp(2 * lsf)), float(np.exp(lell)),
                     float(np.exp(2 * lsn)), A, bc_ell, float(-res.fun))
