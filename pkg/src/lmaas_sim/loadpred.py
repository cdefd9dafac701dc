"""Response-length predictors.

Three interchangeable predictors fill ``Request.predicted_response_tokens``:

``oracle``
    the true length.
``noisy``
    the true length plus a signed error from a zero-inflated Laplace
    distribution (probability ``zero_mass`` of no error, otherwise
    ``Laplace(0, scale)``), rounded and clamped to ``[1, max_tokens]``.
    :func:`calibrate_noise` fits the two parameters to a target MAE/Acc-k
    profile.
``heuristic``
    rolling median of recently completed response lengths; needs no ground truth.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence

import numpy as np
from scipy import optimize

from .metrics import length_accuracy

logger = logging.getLogger(__name__)

DEFAULT_MAX_TOKENS = 4096


@dataclass(frozen=True)
class LengthPrediction:
    predicted_tokens: int
    source: str


@dataclass(frozen=True)
class ErrorProfile:
    mae: float
    acc25: float
    acc50: float
    acc100: float

    def validate(self) -> None:
        if self.mae < 0:
            raise ValueError("MAE must be non-negative")
        if not 0 <= self.acc25 <= self.acc50 <= self.acc100 <= 1:
            raise ValueError(
                f"need 0 <= Acc-25 <= Acc-50 <= Acc-100 <= 1, got "
                f"{self.acc25}, {self.acc50}, {self.acc100}"
            )

    def as_dict(self) -> Dict[str, float]:
        return {"mae": self.mae, "acc25": self.acc25, "acc50": self.acc50, "acc100": self.acc100}


# Measured accuracy of the prompt-tuned length predictor on ShareGPT.
REFERENCE_PROFILE = ErrorProfile(mae=78.25, acc25=0.5677, acc50=0.6879, acc100=0.7795)


@dataclass(frozen=True)
class NoiseParams:
    zero_mass: float
    scale: float
    achieved: Dict[str, float] = field(default_factory=dict, compare=False)


def sample_errors(rng: np.random.Generator, params: NoiseParams, n: int) -> np.ndarray:
    exact = rng.random(n) < params.zero_mass
    if params.scale <= 0:
        return np.zeros(n)
    e = rng.laplace(0.0, params.scale, n)
    e[exact] = 0.0
    return e


def apply_errors(truth: np.ndarray, errors: np.ndarray, max_tokens: int = DEFAULT_MAX_TOKENS) -> np.ndarray:
    return np.clip(np.rint(truth + errors), 1, max_tokens).astype(np.int64)


def _reference_lengths(n: int, seed: int) -> np.ndarray:
    from .trace import LogNormalLengths

    _, d = LogNormalLengths()(np.random.default_rng(seed), n)
    return d


def calibrate_noise(
    profile: ErrorProfile = REFERENCE_PROFILE,
    lengths: Optional[Sequence[int]] = None,
    samples: int = 100_000,
    seed: int = 0,
    max_tokens: int = DEFAULT_MAX_TOKENS,
) -> NoiseParams:
    """Fit zero-inflated Laplace parameters to an accuracy profile.

    Metrics are measured by Monte Carlo after clamping against ``lengths``
    (true response lengths; a ShareGPT-shaped log-normal sample by default),
    with common random numbers so the objective is smooth in the parameters.
    The achieved metrics are stored on the result.
    """
    profile.validate()
    if profile.mae == 0:
        return NoiseParams(1.0, 0.0, {"mae": 0.0, "acc25": 1.0, "acc50": 1.0, "acc100": 1.0})

    truth = np.asarray(lengths if lengths is not None else _reference_lengths(samples, seed), dtype=float)
    rng = np.random.default_rng(seed + 1)
    idx = rng.integers(0, len(truth), samples)
    truth = truth[idx]
    u = rng.random(samples)
    lap = rng.laplace(0.0, 1.0, samples)

    def measure(zero_mass, scale):
        e = np.where(u < zero_mass, 0.0, lap * scale)
        pred = np.clip(np.rint(truth + e), 1, max_tokens)
        d = np.abs(pred - truth)
        return d.mean(), (d <= 25).mean(), (d <= 50).mean(), (d <= 100).mean()

    target = np.array([profile.mae, profile.acc25, profile.acc50, profile.acc100])
    weights = np.array([1.0 / max(profile.mae, 1.0), 1.0, 2.0, 1.0])

    def loss(x):
        zm = 1.0 / (1.0 + math.exp(-x[0]))
        sc = math.exp(x[1])
        return float(np.sum((weights * (np.array(measure(zm, sc)) - target)) ** 2))

    # Closed-form starting point from the untruncated distribution.
    zm0 = min(max(profile.acc25 - 0.05, 0.05), 0.95)
    sc0 = max(profile.mae / (1 - zm0), 1.0)
    best = None
    for zm_init in (zm0, min(zm0 + 0.1, 0.95)):
        x0 = [math.log(zm_init / (1 - zm_init)), math.log(max(profile.mae / (1 - zm_init), 1.0))]
        res = optimize.minimize(loss, x0, method="Nelder-Mead", options={"xatol": 1e-4, "fatol": 1e-10, "maxiter": 400})
        if best is None or res.fun < best.fun:
            best = res
    zm = 1.0 / (1.0 + math.exp(-best.x[0]))
    sc = math.exp(best.x[1])
    mae, a25, a50, a100 = measure(zm, sc)
    achieved = {"mae": float(mae), "acc25": float(a25), "acc50": float(a50), "acc100": float(a100)}
    logger.info("calibrated noise zero_mass=%.4f scale=%.2f achieved=%s", zm, sc, achieved)
    return NoiseParams(zm, sc, achieved)


class OraclePredictor:
    source = "oracle"

    def predict(self, request) -> LengthPrediction:
        return LengthPrediction(int(request.true_response_tokens), self.source)


class NoisyPredictor:
    """Ground truth perturbed by i.i.d. errors, one draw per request."""

    source = "noisy"

    def __init__(self, params: Optional[NoiseParams] = None, seed: int = 0,
                 max_tokens: int = DEFAULT_MAX_TOKENS):
        self.params = params if params is not None else calibrate_noise()
        self.rng = np.random.default_rng(seed)
        self.max_tokens = max_tokens

    def predict(self, request) -> LengthPrediction:
        p = self.params
        if self.rng.random() < p.zero_mass or p.scale <= 0:
            e = 0.0
        else:
            e = self.rng.laplace(0.0, p.scale)
        d = int(min(max(round(request.true_response_tokens + e), 1), self.max_tokens))
        return LengthPrediction(d, self.source)


class HeuristicPredictor:
    """Median of the last ``window`` completed response lengths (``default`` before any)."""

    source = "heuristic"

    def __init__(self, window: int = 100, default: int = 87, max_tokens: int = DEFAULT_MAX_TOKENS):
        self.history = deque(maxlen=window)
        self.default = default
        self.max_tokens = max_tokens

    def observe(self, request) -> None:
        self.history.append(int(request.generated_tokens or request.true_response_tokens))

    def predict(self, request) -> LengthPrediction:
        if not self.history:
            d = self.default
        else:
            d = int(round(float(np.median(self.history))))
        return LengthPrediction(int(min(max(d, 1), self.max_tokens)), self.source)


def make_predictor(name: str, seed: int = 0, profile: Optional[ErrorProfile] = None,
                   max_tokens: int = DEFAULT_MAX_TOKENS, params: Optional[NoiseParams] = None):
    name = name.lower()
    if name == "oracle":
        return OraclePredictor()
    if name == "noisy":
        if params is None:
            params = calibrate_noise(profile or REFERENCE_PROFILE, max_tokens=max_tokens)
        return NoisyPredictor(params, seed, max_tokens)
    if name == "heuristic":
        return HeuristicPredictor(max_tokens=max_tokens)
    raise ValueError(f"unknown predictor {name!r}; choose oracle, noisy or heuristic")


def empirical_accuracy(predicted: Sequence[int], actual: Sequence[int]) -> Dict[str, float]:
    return length_accuracy(predicted, actual)
