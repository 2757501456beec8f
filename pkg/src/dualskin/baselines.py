"""Classical skin detectors: RGB colour rules and a two-class GMM colour model."""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator, ClassifierMixin

from .exceptions import ValidationError
from .validation import check_image, check_is_fitted, check_mask, check_random_state

VAR_FLOOR = 1e-4


def _to_uint8(image):
    return np.round(check_image(image) * 255.0).astype(np.int32)


def rgb_rule(image):
    """Uniform-daylight OR flash-lighting RGB skin rule on 8-bit values."""
    px = _to_uint8(image)
    r, g, b = px[..., 0], px[..., 1], px[..., 2]
    spread = px.max(axis=-1) - px.min(axis=-1)
    daylight = (
        (r > 95) & (g > 40) & (b > 20) & (spread > 15)
        & (np.abs(r - g) > 15) & (r > g) & (r > b)
    )
    flash = (r > 220) & (g > 210) & (b > 170) & (np.abs(r - g) <= 15) & (b < r) & (b < g)
    return daylight | flash


def hsv_rule(image, hue_range=(0.0, 50.0), sat_range=(0.23, 0.68)):
    """Hue (degrees) and saturation window; an optional extra clause."""
    img = check_image(image)
    mx, mn = img.max(axis=-1), img.min(axis=-1)
    delta = mx - mn
    sat = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    safe = np.where(delta > 0, delta, 1.0)
    hue = np.select(
        [delta == 0, mx == r, mx == g],
        [0.0, ((g - b) / safe) % 6.0, (b - r) / safe + 2.0],
        (r - g) / safe + 4.0,
    ) * 60.0
    return (hue >= hue_range[0]) & (hue <= hue_range[1]) & (sat >= sat_range[0]) & (sat <= sat_range[1])


def threshold_classify(image, use_hsv=False):
    """Binary skin mask from the colour rules (HSV clause ANDed in when enabled)."""
    mask = rgb_rule(image)
    if use_hsv:
        mask &= hsv_rule(image)
    return mask.astype(np.uint8)


def _log_gauss(X, means, variances):
    # diagonal Gaussian log density, one column per component
    diff = X[:, None, :] - means[None, :, :]
    return -0.5 * (
        np.sum(diff * diff / variances[None], axis=2)
        + np.sum(np.log(variances), axis=1)[None]
        + X.shape[1] * np.log(2.0 * np.pi)
    )


def _kmeanspp_seed(X, k, rng):
    centers = [X[rng.integers(len(X))]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.choice(len(X), p=d2 / total) if total > 0 else rng.integers(len(X))
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    return np.array(centers)


class GaussianMixtureEM(BaseEstimator):
    """Diagonal-covariance Gaussian mixture fitted by EM.

    Seeded with k-means++ centres and one hard assignment. Variances are
    floored at ``var_floor``. ``log_likelihood_trace_`` holds the mean
    per-sample log-likelihood at the start of every EM iteration plus the
    final value; EM guarantees it never decreases.

    Parameters
    ----------
    n_components : int
    max_iter : int
    tol : float
        Stop when the relative improvement of the mean log-likelihood drops below this.
    var_floor : float
    random_state : int or Generator
    """

    def __init__(self, n_components=4, max_iter=100, tol=1e-6, var_floor=VAR_FLOOR, random_state=0):
        self.n_components = n_components
        self.max_iter = max_iter
        self.tol = tol
        self.var_floor = var_floor
        self.random_state = random_state

    def _init(self, X, rng):
        k = self.n_components
        centers = _kmeanspp_seed(X, k, rng)
        labels = np.argmin(((X[:, None, :] - centers[None]) ** 2).sum(axis=2), axis=1)
        weights = np.zeros(k)
        means = centers.copy()
        variances = np.full((k, X.shape[1]), self.var_floor)
        for j in range(k):
            members = X[labels == j]
            weights[j] = len(members) / len(X)
            if len(members):
                means[j] = members.mean(axis=0)
                variances[j] = np.maximum(members.var(axis=0), self.var_floor)
        return weights, means, variances

    def _e_step(self, X):
        with np.errstate(divide="ignore"):
            log_w = np.log(self.weights_)
        joint = _log_gauss(X, self.means_, self.variances_) + log_w[None]
        log_norm = logsumexp(joint, axis=1)
        return np.exp(joint - log_norm[:, None]), float(log_norm.mean())

    def _m_step(self, X, resp):
        nk = resp.sum(axis=0)
        self.weights_ = nk / nk.sum()
        for j in np.flatnonzero(nk > 0):
            mean = resp[:, j] @ X / nk[j]
            diff = X - mean
            self.means_[j] = mean
            self.variances_[j] = np.maximum(resp[:, j] @ (diff * diff) / nk[j], self.var_floor)

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ValidationError("GMM input must be an (n_samples, n_features) array")
        if len(X) < self.n_components:
            raise ValidationError(
                f"need at least {self.n_components} samples for {self.n_components} components, got {len(X)}"
            )
        rng = check_random_state(self.random_state)
        self.weights_, self.means_, self.variances_ = self._init(X, rng)
        trace = []
        self.converged_ = False
        for it in range(self.max_iter):
            resp, ll = self._e_step(X)
            trace.append(ll)
            if it > 0 and abs(ll - trace[-2]) <= self.tol * abs(trace[-2]):
                self.converged_ = True
                break
            self._m_step(X, resp)
        else:
            trace.append(self._e_step(X)[1])
        self.log_likelihood_trace_ = trace
        self.n_iter_ = len(trace) - 1
        return self

    def score_samples(self, X):
        check_is_fitted(self, "means_")
        X = np.asarray(X, dtype=np.float64)
        with np.errstate(divide="ignore"):
            log_w = np.log(self.weights_)
        return logsumexp(_log_gauss(X, self.means_, self.variances_) + log_w[None], axis=1)

    def score(self, X, y=None):
        return float(self.score_samples(X).mean())

    def predict_proba(self, X):
        check_is_fitted(self, "means_")
        X = np.asarray(X, dtype=np.float64)
        with np.errstate(divide="ignore"):
            joint = _log_gauss(X, self.means_, self.variances_) + np.log(self.weights_)[None]
        return np.exp(joint - logsumexp(joint, axis=1, keepdims=True))


def gmm_fit(pixels, K=4, rng=0, **kwargs) -> GaussianMixtureEM:
    return GaussianMixtureEM(n_components=K, random_state=rng, **kwargs).fit(pixels)


def gmm_skin_probability(image, initial_mask, K=4, random_state=0):
    """Per-pixel skin posterior from skin / non-skin GMMs fitted on one image.

    Both class models are fitted with the same ``random_state``, so inverting
    the initial mask gives exactly ``1 - p``.
    """
    img = check_image(image)
    mask = check_mask(initial_mask, img.shape[:2], "initial mask").astype(bool)
    X = img.reshape(-1, 3)
    m = mask.reshape(-1)
    n_pos, n_neg = int(m.sum()), int((~m).sum())
    if n_pos < K or n_neg < K:
        raise ValidationError(
            f"degenerate initial mask ({n_pos} skin / {n_neg} non-skin pixels, need >= {K} each); "
            "try threshold_classify as the initializer"
        )
    prior = n_pos / m.size
    skin = gmm_fit(X[m], K, random_state)
    other = gmm_fit(X[~m], K, random_state)
    a = skin.score_samples(X) + np.log(prior)
    b = other.score_samples(X) + np.log1p(-prior)
    post = np.exp(a - np.logaddexp(a, b))
    return post.reshape(img.shape[:2])


class ThresholdSkinClassifier(ClassifierMixin, BaseEstimator):
    """Rule-based skin classifier; ``fit`` is a no-op kept for API symmetry."""

    def __init__(self, use_hsv=False):
        self.use_hsv = use_hsv

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def predict(self, X):
        return np.stack([threshold_classify(im, self.use_hsv) for im in _as_batch(X)])

    def predict_proba(self, X):
        return self.predict(X).astype(np.float64)


class GMMSkinClassifier(ClassifierMixin, BaseEstimator):
    """Per-image GMM skin model initialised from the colour rules (or given masks)."""

    def __init__(self, n_components=4, use_hsv=False, threshold=0.5, random_state=0):
        self.n_components = n_components
        self.use_hsv = use_hsv
        self.threshold = threshold
        self.random_state = random_state

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def predict_proba(self, X, initial_masks=None):
        images = _as_batch(X)
        if initial_masks is None:
            initial_masks = [threshold_classify(im, self.use_hsv) for im in images]
        return np.stack([
            gmm_skin_probability(im, m, self.n_components, self.random_state)
            for im, m in zip(images, initial_masks)
        ])

    def predict(self, X, initial_masks=None):
        return (self.predict_proba(X, initial_masks) > self.threshold).astype(np.uint8)


def _as_batch(X):
    X = np.asarray(X)
    return X[None] if X.ndim == 3 else X
