"""Sensor triples, mask modes, unit scaling, and the online training buffer.

A sample is (joint angles rad, muscle tensions N, muscle lengths mm). Network
code works on flat rows [theta | tension | length] rescaled so all channels are
order one: tensions / 200, lengths / 100, angles unchanged.
"""

from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .validation import as_float_array, as_vector

TENSION_UNIT_N = 200.0
LENGTH_UNIT_MM = 100.0


class MaskMode(Enum):
    """Which two sensor channels the encoder sees; the third is zero-filled."""

    ANGLE_TENSION = (1.0, 1.0, 0.0)
    TENSION_LENGTH = (0.0, 1.0, 1.0)
    ANGLE_LENGTH = (1.0, 0.0, 1.0)

    @property
    def bits(self) -> np.ndarray:
        return np.array(self.value)

    @property
    def masked_channel(self) -> int:
        return int(np.argmin(self.value))


ALL_MODES = (MaskMode.ANGLE_TENSION, MaskMode.TENSION_LENGTH, MaskMode.ANGLE_LENGTH)


@dataclass(frozen=True)
class SensorTriple:
    theta: np.ndarray    # rad
    tension: np.ndarray  # N
    length: np.ndarray   # mm (relative to the zero posture at zero tension)

    @classmethod
    def create(cls, theta, tension, length) -> "SensorTriple":
        theta = as_float_array(theta, "theta").reshape(-1)
        tension = as_float_array(tension, "tension").reshape(-1)
        length = as_float_array(length, "length").reshape(-1)
        if tension.shape != length.shape:
            raise ValueError("tension and length must have the same muscle count")
        return cls(theta, tension, length)

    def as_row(self) -> np.ndarray:
        return np.concatenate([self.theta, self.tension, self.length])

    @classmethod
    def from_row(cls, row, n_joints: int, n_muscles: int) -> "SensorTriple":
        row = as_vector(row, n_joints + 2 * n_muscles, "row")
        return cls(row[:n_joints].copy(),
                   row[n_joints:n_joints + n_muscles].copy(),
                   row[n_joints + n_muscles:].copy())


def scale_to_network(rows, n_joints: int, n_muscles: int) -> np.ndarray:
    """Physical rows -> network units. Accepts a single row or a matrix."""
    rows = as_float_array(rows, "rows")
    out = rows.astype(np.float64, copy=True)
    f0, l0 = n_joints, n_joints + n_muscles
    out[..., f0:l0] /= TENSION_UNIT_N
    out[..., l0:l0 + n_muscles] /= LENGTH_UNIT_MM
    return out


def scale_from_network(rows, n_joints: int, n_muscles: int) -> np.ndarray:
    rows = as_float_array(rows, "rows")
    out = rows.astype(np.float64, copy=True)
    f0, l0 = n_joints, n_joints + n_muscles
    out[..., f0:l0] *= TENSION_UNIT_N
    out[..., l0:l0 + n_muscles] *= LENGTH_UNIT_MM
    return out


class TrainingBuffer:
    """FIFO ring buffer of sensor rows with CSV round-trip."""

    def __init__(self, n_joints: int, n_muscles: int, capacity: int = 1000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.n_joints = n_joints
        self.n_muscles = n_muscles
        self.capacity = capacity
        self._rows = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._rows)

    @property
    def width(self) -> int:
        return self.n_joints + 2 * self.n_muscles

    def add(self, row) -> None:
        self._rows.append(as_vector(row, self.width, "row").copy())

    def add_triple(self, triple: SensorTriple) -> None:
        self.add(triple.as_row())

    def rows(self) -> np.ndarray:
        if not self._rows:
            return np.empty((0, self.width))
        return np.stack(self._rows)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Up to n distinct rows, uniformly without replacement."""
        if not self._rows:
            raise ValueError("buffer is empty")
        k = min(n, len(self._rows))
        idx = rng.choice(len(self._rows), size=k, replace=False)
        all_rows = self.rows()
        return all_rows[np.sort(idx)]

    def clear(self) -> None:
        self._rows.clear()

    def dump_csv(self, path) -> None:
        header = ([f"theta{i + 1}" for i in range(self.n_joints)]
                  + [f"f{i + 1}" for i in range(self.n_muscles)]
                  + [f"l{i + 1}" for i in range(self.n_muscles)])
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in self._rows:
                writer.writerow([repr(float(v)) for v in row])

    @classmethod
    def load_csv(cls, path, n_joints: int, n_muscles: int,
                 capacity: int = 1000) -> "TrainingBuffer":
        buf = cls(n_joints, n_muscles, capacity)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            next(reader)  # header
            for row in reader:
                buf.add([float(v) for v in row])
        return buf
