"""Learning-rate and batch-size schedules plus modality loss rescaling."""

from __future__ import annotations

import math

from ..errors import EMANotWarm


def wsd_lr(step: int, warmup_steps: int, peak: float) -> float:
    """Linear warmup from 0 to peak, then constant (warmup-stable-decay
    without the decay phase; see cosine_anneal for the decay plug-in)."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if warmup_steps <= 0:
        return peak
    return peak * min(1.0, step / warmup_steps)


def cosine_anneal(step: int, total_steps: int, peak: float,
                  floor: float = 0.0) -> float:
    """Cosine decay from peak to floor over total_steps, clamped after."""
    if total_steps <= 0 or step >= total_steps:
        return floor
    frac = step / total_steps
    return floor + 0.5 * (peak - floor) * (1.0 + math.cos(math.pi * frac))


def batch_ramp(step: int, start_size: int, end_size: int, ramp_steps: int) -> int:
    """Linear ramp from start to end batch size, rounded to the nearest int."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    if ramp_steps <= 0 or step >= ramp_steps:
        return end_size
    return int(round(start_size + (end_size - start_size) * (step / ramp_steps)))


class ModalityLossRescaler:
    """Divides each modality's loss by its own running average.

    Keeps the per-modality loss magnitudes comparable so no modality
    dominates a shared optimizer step. ``multiplier`` returns the factor
    for the current step computed from the EMA *prior* to this
    observation, then folds the raw value into the EMA; the first
    observation warm-starts the EMA, making the first scaled loss
    exactly 1.
    """

    def __init__(self, decay: float = 0.99):
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"decay must lie in [0, 1), got {decay}")
        self.decay = decay
        self._ema: dict[str, float] = {}

    def multiplier(self, name: str, value: float) -> float:
        if not math.isfinite(value):
            raise ValueError(f"loss for {name!r} is not finite: {value}")
        prior = self._ema.get(name)
        if prior is None:
            prior = value
        if prior <= 0.0:
            raise EMANotWarm(
                f"running average for {name!r} is {prior}; cannot rescale")
        self._ema[name] = self.decay * prior + (1.0 - self.decay) * value
        return 1.0 / prior

    def ema(self, name: str) -> float:
        if name not in self._ema:
            raise EMANotWarm(f"no observations yet for {name!r}")
        return self._ema[name]

    def state(self) -> dict[str, float]:
        return dict(self._ema)
