"""Mean temporal distance (M-measure) of phoneme posteriorgrams."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientFramesError, ShapeError
from .posteriorgram import Posteriorgram

DEFAULT_FLOOR = 1e-7
DELTA_TS = tuple(round(0.05 * i, 2) for i in range(1, 17))


def _clamp(p: np.ndarray, floor: float) -> np.ndarray:
    q = np.maximum(np.asarray(p, dtype=np.float64), floor)
    return q / q.sum(axis=-1, keepdims=True)


def sym_kl(p, q, floor: float = DEFAULT_FLOOR) -> float:
    """Symmetric Kullback-Leibler divergence in nats.

    Both vectors are clamped to ``floor`` and renormalized first, so the
    result is finite even for one-hot inputs.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ShapeError(f"probability vectors differ in shape: {p.shape} vs {q.shape}")
    if not floor > 0:
        raise ValueError("floor must be positive")
    p, q = _clamp(p, floor), _clamp(q, floor)
    return float(np.sum((p - q) * (np.log(p) - np.log(q))))


def _pairwise_sym_kl(logp: np.ndarray, p: np.ndarray, lag: int) -> np.ndarray:
    # (p - q) . (log p - log q) == KL(p||q) + KL(q||p)
    return np.einsum("tk,tk->t", p[lag:] - p[:-lag], logp[lag:] - logp[:-lag])


def _frames(delta_t: float, frame_shift: float) -> int:
    lag = int(round(delta_t / frame_shift))
    if lag < 1:
        raise ValueError(f"delta_t={delta_t} s is below one frame ({frame_shift} s)")
    return lag


def mtd(post: Posteriorgram, delta_t: float, floor: float = DEFAULT_FLOOR) -> float:
    """Average symmetric KL between frames ``delta_t`` seconds apart."""
    lag = _frames(delta_t, post.frame_shift)
    if post.n_frames <= lag:
        raise InsufficientFramesError(
            f"{post.n_frames} frames cannot support a lag of {lag} frames ({delta_t} s)"
        )
    p = _clamp(post.probs, floor)
    return float(np.mean(_pairwise_sym_kl(np.log(p), p, lag)))


@dataclass(frozen=True)
class MtdProfile:
    delta_ts: tuple
    values: np.ndarray
    scalar: float


def mtd_profile(post: Posteriorgram, floor: float = DEFAULT_FLOOR, delta_ts=DELTA_TS) -> MtdProfile:
    """M(dt) for dt = 50..800 ms and their arithmetic mean."""
    lags = [_frames(dt, post.frame_shift) for dt in delta_ts]
    if post.n_frames <= max(lags):
        usable = [dt for dt, lag in zip(delta_ts, lags) if lag < post.n_frames]
        longest = f"{max(usable) * 1000:.0f} ms" if usable else "none"
        raise InsufficientFramesError(
            f"utterance has {post.n_frames} frames; needs {max(lags) + 1} for "
            f"{max(delta_ts) * 1000:.0f} ms (longest supported delta_t: {longest})"
        )
    p = _clamp(post.probs, floor)
    logp = np.log(p)
    values = np.array([np.mean(_pairwise_sym_kl(logp, p, lag)) for lag in lags])
    return MtdProfile(tuple(delta_ts), values, float(values.mean()))


def m_scalar(post: Posteriorgram, floor: float = DEFAULT_FLOOR) -> float:
    return mtd_profile(post, floor).scalar
