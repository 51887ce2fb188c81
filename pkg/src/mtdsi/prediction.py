"""From M values to word error rates, psychometric functions and SRTs."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares
from scipy.special import expit

from .errors import RankError, ShapeError, UnidentifiableFitError

WER_CAP = 100.0


@dataclass(frozen=True)
class WerMap:
    """WER(M) = min(A * exp(-k * M), cap), with ``k`` a positive decay rate."""

    A: float = 289.93
    k: float = 0.213
    cap: float = WER_CAP

    def __post_init__(self):
        if not (self.A > 0 and self.k > 0):
            raise ValueError(f"WER map needs A > 0 and k > 0, got A={self.A}, k={self.k}")

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "WerMap":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(float(d["A"]), float(d["k"]), float(d.get("cap", WER_CAP)))


def wer_from_m(m, wer_map: WerMap = WerMap()):
    """Estimated WER in percent; accepts scalars or arrays."""
    m = np.asarray(m, dtype=float)
    if np.any(m < 0):
        raise ValueError("M must be non-negative")
    wer = np.minimum(wer_map.A * np.exp(-wer_map.k * m), wer_map.cap)
    return float(wer) if wer.ndim == 0 else wer


def calibrate_wer_map(pairs) -> WerMap:
    """Least-squares fit of log(WER) = log(A) - k*M over pairs with WER > 0."""
    arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
    arr = arr[arr[:, 1] > 0]
    m, wer = arr[:, 0], arr[:, 1]
    if np.unique(m).size < 2:
        raise RankError("calibration needs at least two distinct M values")
    if m.size < 3:
        raise ValueError("calibration needs at least 3 (M, WER) pairs with WER > 0")
    design = np.column_stack([np.ones_like(m), -m])
    (log_a, k), *_ = np.linalg.lstsq(design, np.log(wer), rcond=None)
    return WerMap(float(np.exp(log_a)), float(k))


def accuracy_from_wer(wer, cap: float = WER_CAP):
    """Word accuracy fraction; WERs above ``cap`` are capped first."""
    return 1.0 - np.minimum(np.asarray(wer, dtype=float), cap) / 100.0


# -- psychometric function -------------------------------------------------------

def psychometric(x, l50: float, slope: float):
    """Logistic intelligibility function, 0.5 at ``l50`` with slope ``slope`` there."""
    return expit(4.0 * slope * (np.asarray(x, dtype=float) - l50))


@dataclass(frozen=True)
class PsychometricFit:
    L50: float
    s: float
    residual: float
    method: str = "lsq"

    def __call__(self, x):
        return psychometric(x, self.L50, self.s)


L50_RANGE = (-35.0, 25.0)
SLOPE_RANGE = (0.01, 1.0)
_SATURATION = 1e-3


def _nll(params, x, y, n):
    l50, s = params
    f = np.clip(psychometric(x, l50, s), 1e-12, 1 - 1e-12)
    return -np.sum(n * (y * np.log(f) + (1 - y) * np.log(1 - f)))


def fit_psychometric(snr, accuracy=None, *, method: str = "lsq", n_trials=None) -> PsychometricFit:
    """Fit the logistic psychometric function to (SNR, accuracy) points.

    A coarse grid over L50 in [-35, 25] dB and s in [0.01, 1] /dB picks the
    start; a bounded trust-region refinement (``lsq``: squared residuals,
    ``mle``: binomial likelihood with ``n_trials`` per point) finishes.
    ``snr`` may also be a sequence of ``(snr, accuracy)`` pairs.
    """
    if accuracy is None:
        pts = np.asarray(snr, dtype=float).reshape(-1, 2)
        x, y = pts[:, 0], pts[:, 1]
    else:
        x, y = np.asarray(snr, dtype=float), np.asarray(accuracy, dtype=float)
    if x.shape != y.shape:
        raise ShapeError("snr and accuracy differ in length")
    if x.size < 5:
        raise UnidentifiableFitError(f"need at least 5 points, got {x.size}")
    if np.all(y < _SATURATION) or np.all(y > 1 - _SATURATION):
        raise UnidentifiableFitError("all points are saturated; L50 is unidentifiable")
    if not (np.any(y < 0.5) and np.any(y > 0.5)):
        raise UnidentifiableFitError("points do not straddle 50% accuracy")
    if method not in ("lsq", "mle"):
        raise ValueError(f"unknown fit method {method!r}")
    # sort so the result does not depend on point order
    order = np.lexsort((y, x))
    x, y = x[order], y[order]
    n = np.ones_like(x) if n_trials is None else np.broadcast_to(np.asarray(n_trials, float), x.shape)[order]

    if method == "lsq":
        def resid(params):
            return psychometric(x, *params) - y
    else:
        def resid(params):
            # signed deviance residuals: sum of squares == 2 * NLL up to a constant
            f = np.clip(psychometric(x, *params), 1e-12, 1 - 1e-12)
            yc = np.clip(y, 1e-12, 1 - 1e-12)
            dev = 2 * n * (y * np.log(yc / f) + (1 - y) * np.log((1 - yc) / (1 - f)))
            return np.sign(y - f) * np.sqrt(np.maximum(dev, 0.0))

    l50_grid = np.linspace(*L50_RANGE, 241)
    s_grid = np.geomspace(*SLOPE_RANGE, 60)
    ll, ss = np.meshgrid(l50_grid, s_grid, indexing="ij")
    pred = expit(4.0 * ss[..., None] * (x - ll[..., None]))
    if method == "lsq":
        cost = np.sum((pred - y) ** 2, axis=-1)
    else:
        pred = np.clip(pred, 1e-12, 1 - 1e-12)
        cost = -np.sum(n * (y * np.log(pred) + (1 - y) * np.log(1 - pred)), axis=-1)
    i, j = np.unravel_index(np.argmin(cost), cost.shape)

    sol = least_squares(resid, x0=[l50_grid[i], s_grid[j]],
                        bounds=([-np.inf, 1e-6], [np.inf, np.inf]),
                        xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=2000)
    l50, s = (float(v) for v in sol.x)
    residual = float(np.sum(resid(sol.x) ** 2)) if method == "lsq" else float(_nll(sol.x, x, y, n))
    return PsychometricFit(l50, s, residual, method)


def srt(fit: PsychometricFit, p: float = 0.5) -> float:
    """SNR at which the fitted function reaches fraction ``p``."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"target fraction must lie in (0, 1), got {p}")
    return float(fit.L50 + np.log(p / (1.0 - p)) / (4.0 * fit.s))


@dataclass(frozen=True)
class SrtPrediction:
    masker: str
    srt50: float
    srt80: float
    fit: PsychometricFit
    n_points: int


def predict_srt(masker: str, snr, accuracy, **kwargs) -> SrtPrediction:
    fit = fit_psychometric(snr, accuracy, **kwargs)
    return SrtPrediction(masker, srt(fit, 0.5), srt(fit, 0.8), fit, int(np.size(snr)))


def rmse_srt(predicted, observed) -> float:
    """Root mean squared difference between predicted and observed SRTs (dB)."""
    pred = np.asarray(predicted, dtype=float)
    obs = np.asarray(observed, dtype=float)
    if pred.shape != obs.shape or pred.size < 1:
        raise ShapeError(f"SRT vectors must have equal non-zero length ({pred.shape} vs {obs.shape})")
    return float(np.sqrt(np.mean((pred - obs) ** 2)))
