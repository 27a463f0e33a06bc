"""Linear dynamic texture baseline.

Model::

    h_{t+1} = A h_t + v_t,   v_t ~ N(0, B_v B_v^T)
    y_t     = y_bar + C h_t

Identification is the closed-form SVD procedure common in the dynamic
texture literature: the top ``n`` left singular vectors of the centred frame
matrix give ``C``, the scaled right singular vectors give the state
trajectory, and ``A`` is its one-step least-squares regression.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, InsufficientDataError, NumericError, ShapeError, UsageError
from .tensor import as_tensor, psd_sqrt_factor, svd_thin


@dataclass
class LdsModel:
    A: np.ndarray
    C: np.ndarray
    y_bar: np.ndarray
    B_v: np.ndarray
    frame_shape: tuple = None  # (H, W, C) when known

    def __post_init__(self):
        self.A = as_tensor(self.A, ndim=2, name="A")
        self.C = as_tensor(self.C, ndim=2, name="C")
        self.y_bar = as_tensor(self.y_bar, ndim=1, name="y_bar")
        self.B_v = as_tensor(self.B_v, ndim=2, name="B_v")
        n = self.A.shape[0]
        if self.A.shape != (n, n) or self.B_v.shape != (n, n):
            raise ShapeError("A and B_v must be n x n")
        if self.C.shape != (self.y_bar.shape[0], n):
            raise ShapeError("C must be d x n with d = len(y_bar)")

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def d(self):
        return self.C.shape[0]

    def to_dict(self):
        return {
            "kind": "lds",
            "A": self.A.tolist(),
            "C": self.C.tolist(),
            "y_bar": self.y_bar.tolist(),
            "B_v": self.B_v.tolist(),
            "frame_shape": list(self.frame_shape) if self.frame_shape else None,
        }

    @classmethod
    def from_dict(cls, doc):
        if doc.get("kind") != "lds":
            raise FormatError("not an LDS model document")
        shape = doc.get("frame_shape")
        return cls(doc["A"], doc["C"], doc["y_bar"], doc["B_v"], tuple(shape) if shape else None)


def save_lds(model, path):
    Path(path).write_text(json.dumps(model.to_dict(), sort_keys=True))


def load_lds(path):
    try:
        doc = json.loads(Path(path).read_text())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: not a JSON LDS model: {exc}") from exc
    return LdsModel.from_dict(doc)


def fit_lds(frames, n, frame_shape=None):
    """Identify an LDS from one ``(N, d)`` sequence or a list of them.

    With several sequences the frames share one mean and one basis; state
    transitions are only regressed within a sequence, never across the
    boundary between two.

    Rank-deficient data (e.g. a constant sequence) is accepted with a
    warning: the basis is completed to ``n`` orthonormal columns and the
    transition is the minimum-norm least-squares solution.
    """
    seqs = [frames] if not isinstance(frames, (list, tuple)) else list(frames)
    seqs = [as_tensor(s, ndim=2, name="frames", finite=True) for s in seqs]
    d = seqs[0].shape[1]
    if any(s.shape[1] != d for s in seqs):
        raise ShapeError("all sequences must share the frame dimension")
    if n < 1:
        raise UsageError("latent dimension must be positive")
    if d < n:
        raise InsufficientDataError(f"frame dimension {d} is smaller than latent dimension {n}")
    if any(s.shape[0] < n + 1 for s in seqs):
        raise InsufficientDataError(f"each sequence needs at least n + 1 = {n + 1} frames")

    stacked = np.concatenate(seqs, axis=0)
    y_bar = stacked.mean(axis=0)
    centred = (stacked - y_bar).T  # d x N
    U, S, V = svd_thin(centred)
    if S[0] == 0 or S[n - 1] <= 1e-10 * S[0]:
        warnings.warn("centred frames have rank below the latent dimension", RuntimeWarning, stacklevel=2)
    C = U[:, :n]
    states = S[:n, None] * V[:, :n].T  # n x N

    prev, nxt = [], []
    start = 0
    for s in seqs:
        block = states[:, start : start + s.shape[0]]
        prev.append(block[:, :-1])
        nxt.append(block[:, 1:])
        start += s.shape[0]
    prev = np.concatenate(prev, axis=1)
    nxt = np.concatenate(nxt, axis=1)
    sol, *_ = np.linalg.lstsq(prev.T, nxt.T, rcond=None)
    A = sol.T
    resid = nxt - A @ prev
    Q = resid @ resid.T / max(resid.shape[1] - 1, 1)
    B_v = psd_sqrt_factor(Q)
    if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B_v))):
        raise NumericError("LDS identification produced non-finite parameters")
    return LdsModel(A, C, y_bar, B_v, tuple(frame_shape) if frame_shape else None)


def lds_states(model, frames):
    """Least-squares states ``C^+ (y - y_bar)`` of each frame."""
    frames = as_tensor(frames, ndim=2, name="frames")
    sol, *_ = np.linalg.lstsq(model.C, (frames - model.y_bar).T, rcond=None)
    return sol.T


def reconstruct(model, frames):
    """Project frames onto the model's observation subspace."""
    return model.y_bar + lds_states(model, frames) @ model.C.T


def synthesize_lds(model, h0, steps, rng):
    """Frames ``y_bar + C h_t`` for ``t = 0 .. steps-1`` with ``h_0 = h0``.

    Innovations are drawn from ``rng`` in one ``(steps - 1, n)`` block.
    """
    h0 = as_tensor(h0, ndim=1, name="h0")
    if h0.shape[0] != model.n:
        raise ShapeError(f"h0 must have length {model.n}")
    steps = max(int(steps), 0)
    states = np.zeros((steps, model.n))
    if steps:
        states[0] = h0
    if steps > 1:
        drive = rng.gaussian((steps - 1, model.n)) @ model.B_v.T
        at = model.A.T
        for t in range(1, steps):
            states[t] = states[t - 1] @ at + drive[t - 1]
    return model.y_bar + states @ model.C.T
