"""Per-block-bag Gaussian mixture densities over autoencoder latents.

Each of the 16 block positions gets its own mixture: K-means++ seeds the
components, EM with full (ridge-regularized) covariances fits them, and
scoring returns the weighted log-likelihood computed through log-sum-exp so
high-dimensional latents never underflow.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ShapeError

RIDGE_FACTOR = 1e-4  # times trace(cov)/d, added to every covariance estimate
RIDGE_FLOOR = 1e-12

REDUCTIONS = ("none", "spatial-mean-pool")


@dataclass
class GmmModel:
    """Mixture parameters for one bag: weights (M,), means (M, d), full
    covariances (M, d, d)."""

    bag_index: int
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    reduction: str = "spatial-mean-pool"
    ll_trace: list[float] = field(default_factory=list, repr=False)
    _factors: list | None = field(default=None, repr=False, compare=False)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def cholesky_factors(self) -> list[np.ndarray]:
        if self._factors is None:
            self._factors = [
                _chol_or_raise(self.covs[m], self.bag_index, m)
                for m in range(self.n_components)
            ]
        return self._factors


def reduce_latent(latent_step: np.ndarray, reduction: str) -> np.ndarray:
    """Turn one latent map (h, w, c) into a feature vector: flatten for
    'none', average over the spatial grid for 'spatial-mean-pool'."""
    latent_step = np.asarray(latent_step)
    if latent_step.ndim != 3:
        raise ShapeError(f"latent step must be (h, w, c), got {latent_step.shape}")
    if reduction == "none":
        return latent_step.astype(np.float64).ravel()
    if reduction == "spatial-mean-pool":
        return np.mean(latent_step, axis=(0, 1), dtype=np.float64)
    raise ValueError(f"unknown reduction {reduction!r}")


def reduce_latent_seq(latent: np.ndarray, reduction: str) -> np.ndarray:
    """Reduce every step of a latent sequence (T, h, w, c) to (T, d)."""
    return np.stack([reduce_latent(step, reduction) for step in np.asarray(latent)])


def _ridge(cov: np.ndarray) -> np.ndarray:
    d = cov.shape[0]
    eps = RIDGE_FACTOR * (np.trace(cov) / d) + RIDGE_FLOOR
    return cov + eps * np.eye(d)


def _chol_or_raise(cov: np.ndarray, bag_index: int, component: int) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    for boost in (0.0, RIDGE_FACTOR, 100 * RIDGE_FACTOR):
        try:
            return np.linalg.cholesky(cov + boost * max(np.trace(cov) / cov.shape[0], RIDGE_FLOOR) * np.eye(cov.shape[0]))
        except np.linalg.LinAlgError:
            continue
    raise NumericalError(
        f"covariance of component {component} (bag {bag_index}) is not invertible after ridge"
    )


def logsumexp(x: np.ndarray, axis=None):
    x = np.asarray(x, dtype=np.float64)
    xmax = np.max(x, axis=axis, keepdims=True)
    xmax = np.where(np.isfinite(xmax), xmax, 0.0)
    out = np.log(np.sum(np.exp(x - xmax), axis=axis, keepdims=True)) + xmax
    return float(out.reshape(())) if axis is None else np.squeeze(out, axis=axis)


def _log_gauss(samples: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """Log density of N(mean, L L^T) at each row of samples."""
    d = mean.shape[0]
    diff = samples - mean
    # numpy has no dedicated triangular solve; the general one is fine here.
    y = np.linalg.solve(chol, diff.T)
    maha = np.sum(y * y, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return -0.5 * (d * np.log(2.0 * np.pi) + logdet + maha)


def _component_log_densities(samples: np.ndarray, model: GmmModel) -> np.ndarray:
    """(N, M) matrix of log W_m + log N_m(x)."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[1] != model.dim:
        raise ShapeError(f"samples have dim {samples.shape[1]}, model expects {model.dim}")
    factors = model.cholesky_factors()
    cols = [
        np.log(model.weights[m]) + _log_gauss(samples, model.means[m], factors[m])
        for m in range(model.n_components)
    ]
    return np.stack(cols, axis=1)


def gmm_density(x: np.ndarray, model: GmmModel) -> float:
    """Mixture density: sum over components of W_m * N_m(x)."""
    log_terms = _component_log_densities(np.asarray(x)[None, :], model)[0]
    return float(np.sum(np.exp(log_terms)))


def weighted_log_likelihood(x: np.ndarray, model: GmmModel) -> float:
    """log of the mixture density, evaluated through log-sum-exp."""
    log_terms = _component_log_densities(np.asarray(x)[None, :], model)[0]
    return float(logsumexp(log_terms))


def weighted_log_likelihood_batch(samples: np.ndarray, model: GmmModel) -> np.ndarray:
    log_terms = _component_log_densities(samples, model)
    return logsumexp(log_terms, axis=1)


# ---------------------------------------------------------------------------
# K-means initialization
# ---------------------------------------------------------------------------


def kmeans_init(samples: np.ndarray, n_components: int, seed) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """K-means++ seeding plus Lloyd iterations; returns (weights, means, covs).

    Weights are cluster fractions, means the centroids, covariances the
    ridge-regularized within-cluster scatter. Runs until assignments stop
    changing or 100 iterations.
    """
    samples = np.asarray(samples, dtype=np.float64)
    n, d = samples.shape
    if n < n_components:
        raise ValueError(f"need at least {n_components} samples, got {n}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((n_components, d))
    centroids[0] = samples[rng.integers(n)]
    closest_sq = np.sum((samples - centroids[0]) ** 2, axis=1)
    for m in range(1, n_components):
        total = closest_sq.sum()
        if total <= 0:
            centroids[m] = samples[rng.integers(n)]
        else:
            centroids[m] = samples[rng.choice(n, p=closest_sq / total)]
        closest_sq = np.minimum(closest_sq, np.sum((samples - centroids[m]) ** 2, axis=1))

    labels = np.full(n, -1)
    for _ in range(100):
        d2 = np.sum((samples[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_labels = np.argmin(d2, axis=1)
        for m in range(n_components):
            mask = new_labels == m
            if mask.any():
                centroids[m] = samples[mask].mean(axis=0)
            else:
                # Re-seed an empty cluster from the farthest point.
                far = np.argmax(d2[np.arange(n), new_labels])
                centroids[m] = samples[far]
                new_labels[far] = m
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels

    weights = np.array([(labels == m).mean() for m in range(n_components)])
    means = centroids
    covs = np.empty((n_components, d, d))
    global_cov = np.cov(samples, rowvar=False, bias=True).reshape(d, d)
    for m in range(n_components):
        pts = samples[labels == m]
        if len(pts) > 1:
            covs[m] = _ridge(np.cov(pts, rowvar=False, bias=True).reshape(d, d))
        else:
            covs[m] = _ridge(global_cov)
    return weights, means, covs


# ---------------------------------------------------------------------------
# Expectation-Maximization
# ---------------------------------------------------------------------------


def em_fit(
    samples: np.ndarray,
    init: tuple[np.ndarray, np.ndarray, np.ndarray],
    tol: float = 1e-4,
    max_iter: int = 200,
    bag_index: int = 0,
    reduction: str = "spatial-mean-pool",
) -> GmmModel:
    """Fit a full-covariance mixture by EM from the given init.

    Covariances get a trace-scaled ridge at every M-step; iteration stops
    when the average log-likelihood improves by less than `tol`. The
    per-iteration average log-likelihood trace is kept on the model.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    samples = np.asarray(samples, dtype=np.float64)
    n, d = samples.shape
    weights, means, covs = (np.array(a, dtype=np.float64, copy=True) for a in init)
    model = GmmModel(bag_index, weights, means, covs, reduction)
    trace: list[float] = []
    prev_ll = -np.inf
    for _ in range(max_iter):
        log_terms = _component_log_densities(samples, model)  # (N, M)
        log_norm = logsumexp(log_terms, axis=1)  # (N,)
        avg_ll = float(np.mean(log_norm))
        trace.append(avg_ll)
        resp = np.exp(log_terms - log_norm[:, None])  # (N, M)
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-12)
        weights = nk / n
        means = (resp.T @ samples) / nk[:, None]
        covs = np.empty_like(model.covs)
        for m in range(model.n_components):
            diff = samples - means[m]
            covs[m] = _ridge((diff * resp[:, m : m + 1]).T @ diff / nk[m])
        model = GmmModel(bag_index, weights, means, covs, reduction)
        if avg_ll - prev_ll < tol and np.isfinite(prev_ll):
            break
        prev_ll = avg_ll
    model.ll_trace = trace
    return model
