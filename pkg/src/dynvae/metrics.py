"""Statistics for comparing synthesized sequences with reference sequences.

The Fréchet distance here is computed on raw pixels or on a PCA projection
fitted to the reference, not on classifier features, so the numbers are
reported as "Fréchet-pixel" and are not comparable to published FID scores.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .dynamics import stationarity_residual
from .errors import UsageError
from .tensor import as_tensor, eigenvalues, svd_thin

SCHEMA = "dynvae.eval/1"
MAX_RAW_DIM = 256
PCA_COMPONENTS = 32


def frechet_gaussian(ref_features, gen_features, ridge=1e-6):
    """Fréchet distance between Gaussian fits of two feature sets.

    ``|mu1 - mu2|^2 + tr(S1 + S2 - 2 (S1 S2)^{1/2})`` with ``ridge * I``
    added to both sample covariances. The trace of the square root is taken
    from the eigenvalues of the symmetric ``S1^{1/2} S2 S1^{1/2}``.
    """
    a = as_tensor(ref_features, ndim=2, name="ref_features")
    b = as_tensor(gen_features, ndim=2, name="gen_features")
    k = a.shape[1]
    if b.shape[1] != k:
        raise UsageError("feature dimensions differ")
    if a.shape[0] <= k or b.shape[0] <= k:
        raise UsageError(f"need more samples than feature dimensions ({k}); got {a.shape[0]} and {b.shape[0]}")
    mu1, mu2 = a.mean(axis=0), b.mean(axis=0)
    eye = ridge * np.eye(k)
    s1 = np.atleast_2d(np.cov(a, rowvar=False)) + eye
    s2 = np.atleast_2d(np.cov(b, rowvar=False)) + eye
    w, q = np.linalg.eigh(s1)
    root1 = (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T
    mid = root1 @ s2 @ root1
    lam = np.linalg.eigvalsh(0.5 * (mid + mid.T))
    tr_sqrt = float(np.sum(np.sqrt(np.clip(lam, 0.0, None))))
    dist = float(np.sum((mu1 - mu2) ** 2) + np.trace(s1) + np.trace(s2) - 2.0 * tr_sqrt)
    return max(dist, 0.0)


def temporal_autocorr(frames, lags):
    """Mean over pixels of the lag-``l`` Pearson autocorrelation, for each ``l`` in ``1..lags``.

    Pixels whose time series is constant are skipped; if every pixel is
    constant a warning is emitted and zeros are returned.
    """
    x = as_tensor(frames, ndim=2, name="frames")
    lags = int(lags)
    if x.shape[0] <= lags:
        raise UsageError(f"need more than {lags} frames")
    keep = np.ptp(x, axis=0) > 0
    if not np.any(keep):
        warnings.warn("all pixels are constant in time; autocorrelation set to zero", RuntimeWarning, stacklevel=2)
        return np.zeros(lags)
    x = x[:, keep]
    out = np.zeros(lags)
    for lag in range(1, lags + 1):
        a, b = x[:-lag], x[lag:]
        a = a - a.mean(axis=0)
        b = b - b.mean(axis=0)
        denom = np.sqrt(np.sum(a * a, axis=0) * np.sum(b * b, axis=0))
        ok = denom > 0
        out[lag - 1] = float(np.mean(np.sum(a[:, ok] * b[:, ok], axis=0) / denom[ok])) if np.any(ok) else 0.0
    return out


def spectrum_distance(a_learned, a_true):
    """Sum of |eigenvalue differences| under the optimal one-to-one matching."""
    x = eigenvalues(a_learned)
    y = eigenvalues(a_true)
    if x.shape != y.shape:
        raise UsageError("matrices must have the same size")
    cost = np.abs(x[:, None] - y[None, :])
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


@dataclass
class PixelFeatures:
    """Feature map fitted on reference frames: identity or a PCA projection."""

    kind: str  # "pixel" or "pca"
    mean: np.ndarray | None = None
    basis: np.ndarray | None = None  # d x k

    @classmethod
    def fit(cls, ref_frames, sample_counts=(), max_raw_dim=MAX_RAW_DIM, n_components=PCA_COMPONENTS, kind="auto"):
        """Raw pixels when ``d <= max_raw_dim`` and every sample count exceeds ``d``; PCA otherwise."""
        ref = as_tensor(ref_frames, ndim=2, name="ref_frames")
        d = ref.shape[1]
        counts = [ref.shape[0], *sample_counts]
        if kind == "auto":
            kind = "pixel" if d <= max_raw_dim and min(counts) > d else "pca"
        if kind == "pixel":
            return cls("pixel")
        if kind != "pca":
            raise UsageError(f"unknown feature kind {kind!r}")
        k = min(n_components, d, ref.shape[0] - 1, min(counts) - 1)
        if k < 1:
            raise UsageError("too few reference frames for a PCA projection")
        mean = ref.mean(axis=0)
        _, _, v = svd_thin(ref - mean)
        return cls("pca", mean, v[:, :k])

    @property
    def label(self):
        return "pixel" if self.kind == "pixel" else f"pca{self.basis.shape[1]}"

    def __call__(self, frames):
        frames = as_tensor(frames, ndim=2, name="frames")
        if self.kind == "pixel":
            return frames
        return (frames - self.mean) @ self.basis


@dataclass
class EvalReport:
    frechet_pixel: float
    features: str
    mean_abs_err: float
    std_abs_err: float
    autocorr_ref: list = field(default_factory=list)
    autocorr_gen: list = field(default_factory=list)
    autocorr_err: list = field(default_factory=list)
    stationarity_residual: float | None = None
    spectrum_distance: float | None = None

    def to_dict(self):
        return {"schema": SCHEMA, **asdict(self)}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(ref, gen, lags=5, dyn=None, a_true=None, features="auto"):
    """Compare a generated sequence with a reference sequence.

    ``ref``/``gen`` are :class:`SequenceData` or ``(N, d)`` arrays. ``dyn``
    (an ``(A, B)`` pair) adds the stationarity residual, ``a_true`` the
    spectrum distance to the learned ``A``.
    """
    ref_x = as_tensor(getattr(ref, "frames", ref), ndim=2, name="ref")
    gen_x = as_tensor(getattr(gen, "frames", gen), ndim=2, name="gen")
    if ref_x.shape[1] != gen_x.shape[1]:
        raise UsageError(f"frame dimensions differ: {ref_x.shape[1]} vs {gen_x.shape[1]}")
    fmap = PixelFeatures.fit(ref_x, (gen_x.shape[0],), kind=features)
    frechet = frechet_gaussian(fmap(ref_x), fmap(gen_x))
    ac_ref = temporal_autocorr(ref_x, lags)
    ac_gen = temporal_autocorr(gen_x, lags)
    report = EvalReport(
        frechet_pixel=frechet,
        features=fmap.label,
        mean_abs_err=float(np.mean(np.abs(ref_x.mean(axis=0) - gen_x.mean(axis=0)))),
        std_abs_err=float(np.mean(np.abs(ref_x.std(axis=0) - gen_x.std(axis=0)))),
        autocorr_ref=ac_ref.tolist(),
        autocorr_gen=ac_gen.tolist(),
        autocorr_err=np.abs(ac_ref - ac_gen).tolist(),
    )
    if dyn is not None:
        report.stationarity_residual = stationarity_residual(*dyn)
        if a_true is not None:
            report.spectrum_distance = spectrum_distance(dyn[0], a_true)
    return report
