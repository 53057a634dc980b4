"""Decibel energy arithmetic and equivalent-level windows.

A-weighted levels combine in the energy domain: a level L dBA carries energy
10^(L/10) (re 20 uPa, scale irrelevant here), simultaneous sources add their
energies, and the equivalent continuous level over a window is the log of the
windowed mean energy. Silence is represented as -inf dBA, whose energy is
exactly 0.0, so no special cases leak into the arithmetic.
"""

from __future__ import annotations

import math
from collections import deque
from typing import Iterable, Iterator

SILENT: float = -math.inf


class AcousticsError(Exception):
    """Base class for energy-arithmetic failures."""


class NonPositiveEnergyError(AcousticsError):
    """Energy difference came out <= 0; the result has no dB representation."""


class EmptyWindowError(AcousticsError):
    """An equivalent level was requested from a window with no samples."""


def is_silent(level: float) -> bool:
    return level == SILENT


def energy(level: float) -> float:
    """Acoustic energy of a level in dBA. energy(SILENT) == 0.0."""
    if is_silent(level):
        return 0.0
    return 10.0 ** (level / 10.0)


def level_from_energy(e: float) -> float:
    """Inverse of :func:`energy`. Zero energy maps back to SILENT."""
    if e < 0.0:
        raise NonPositiveEnergyError(f"negative energy {e!r} has no level")
    if e == 0.0:
        return SILENT
    return 10.0 * math.log10(e)


def energy_sum(levels: Iterable[float]) -> float:
    """Combined level of simultaneous sources, 10*log10(sum 10^(Li/10)).

    An empty iterable or all-silent input combines to SILENT.
    """
    return level_from_energy(math.fsum(energy(l) for l in levels))


def db_subtract(level: float, removed: float) -> float:
    """Level remaining after removing `removed` from `level`, energy-wise.

    Raises NonPositiveEnergyError unless energy(level) > energy(removed);
    equal energies have no finite (or silent) remainder under this
    convention, matching the threshold-renewal use where a zero remainder
    means the budget is exhausted.
    """
    e = energy(level) - energy(removed)
    if e <= 0.0:
        raise NonPositiveEnergyError(
            f"energy({level!r}) - energy({removed!r}) = {e!r} <= 0"
        )
    return level_from_energy(e)


def leq(levels: Iterable[float]) -> float:
    """Equivalent continuous level: 10*log10(mean energy) of the samples.

    The mean is taken over the samples actually present, which makes the
    partial-window rule (windows shorter than their nominal length average
    over what exists) and the full-window case one and the same formula. An
    all-silent window is SILENT.
    """
    energies = [energy(l) for l in levels]
    if not energies:
        raise EmptyWindowError("leq of an empty window")
    return level_from_energy(math.fsum(energies) / len(energies))


class LevelWindow:
    """Sliding window of the last `window_length` + 1 instantaneous levels.

    `window_length` is the ordinance's averaging span in whole timesteps
    (dt >= 1); the window spans samples t - dt .. t inclusive. Samples are
    (time, level) pairs appended in strictly increasing time order.
    """

    __slots__ = ("window_length", "_samples")

    def __init__(self, window_length: int, samples: Iterable[tuple[int, float]] = ()):
        if window_length < 1:
            raise ValueError(f"window_length must be >= 1, got {window_length}")
        self.window_length = int(window_length)
        self._samples: deque[tuple[int, float]] = deque(maxlen=self.window_length + 1)
        for t, level in samples:
            self.append(t, level)

    def append(self, t: int, level: float) -> None:
        if self._samples and t <= self._samples[-1][0]:
            raise ValueError(
                f"time {t} not after last sample time {self._samples[-1][0]}"
            )
        self._samples.append((int(t), float(level)))

    def __len__(self) -> int:
        return len(self._samples)

    def __iter__(self) -> Iterator[tuple[int, float]]:
        return iter(self._samples)

    @property
    def levels(self) -> list[float]:
        return [level for _, level in self._samples]

    @property
    def times(self) -> list[int]:
        return [t for t, _ in self._samples]

    def leq(self) -> float:
        if not self._samples:
            raise EmptyWindowError("leq of an empty window")
        return leq(self.levels)
