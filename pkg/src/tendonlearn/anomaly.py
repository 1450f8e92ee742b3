"""Reconstruction-residual anomaly detection and rupture verification.

A healthy body stays close to the learned sensor relation, so the per-muscle
(tension, length) reconstruction residuals form a tight 2-D cloud. The
detector keeps a sliding window of recent sensor rows, refits a pooled
Gaussian to the residuals under the current model, and flags muscles whose
instantaneous residual sits too many Mahalanobis units out. A flagged muscle
is then verified by a short pull test on the plant, which separates true
breaks, usable-but-offset wires, and false alarms.
"""

from collections import deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator

from .autoencoder import MaskedSensorAutoencoder
from .control import OriginWeights, reestimate_length_origin
from .sensors import (LENGTH_UNIT_MM, MaskMode, TENSION_UNIT_N,
                      TrainingBuffer, scale_to_network)
from .validation import as_matrix, as_vector


def residual_pairs(model: MaskedSensorAutoencoder, rows) -> np.ndarray:
    """Per-muscle (tension, length) residuals, network units.

    rows holds physical sensor rows; predictions come from the tension+length
    mask mode, so the angle column never influences the residuals. Returns an
    (n_rows * n_muscles, 2) array, muscles varying fastest.
    """
    d, m = model.n_joints, model.n_muscles
    rows = as_matrix(rows, d + 2 * m, "sensor rows")
    truth = scale_to_network(rows, d, m)
    pred = model.predict_net(rows, MaskMode.TENSION_LENGTH)
    diff = truth - pred
    return np.stack([diff[:, d:d + m], diff[:, d + m:]], axis=-1).reshape(-1, 2)


@dataclass
class AnomalyReport:
    distances: np.ndarray     # Mahalanobis distance per muscle
    flagged: tuple            # muscle indices with distance > threshold


class ResidualAnomalyDetector(BaseEstimator):
    """Sliding-window Gaussian over pooled reconstruction residuals.

    observe() feeds raw sensor rows into a FIFO window; rebuild() refits the
    residual statistics under a given model; score() measures how far one
    reading sits from the fitted cloud, per muscle.
    """

    def __init__(self, window_size: int = 50, threshold: float = 30.0,
                 ridge: float = 1e-6):
        self.window_size = window_size
        self.threshold = threshold
        self.ridge = ridge
        self._window = deque(maxlen=window_size)

    # --- window management ---

    @property
    def ready(self) -> bool:
        return len(self._window) >= self.window_size

    def __len__(self) -> int:
        return len(self._window)

    def observe(self, row) -> None:
        row = np.asarray(row, dtype=float).ravel()
        self._window.append(row.copy())

    def window_rows(self) -> np.ndarray:
        return np.array(self._window, dtype=float)

    def clear(self) -> None:
        self._window.clear()
        for attr in ("mu_", "sigma_"):
            if hasattr(self, attr):
                delattr(self, attr)

    # --- statistics ---

    def fit(self, X, y=None):
        """Fit mean and regularized covariance to residual pairs (n, 2)."""
        E = as_matrix(X, 2, "residual pairs")
        if len(E) < 2:
            raise ValueError("need at least two residual pairs")
        self.mu_ = E.mean(axis=0)
        sigma = np.cov(E, rowvar=False)
        # ridge keeps the solve well-posed even for a degenerate window
        sigma += (self.ridge * np.trace(sigma) / 2.0 + 1e-12) * np.eye(2)
        self.sigma_ = sigma
        return self

    def rebuild(self, model: MaskedSensorAutoencoder):
        """Refit the residual statistics over the current window."""
        if not self.ready:
            raise ValueError("window not full yet")
        return self.fit(residual_pairs(model, self.window_rows()))

    def mahalanobis(self, E) -> np.ndarray:
        """Distance of each residual pair from the fitted cloud."""
        E = as_matrix(E, 2, "residual pairs")
        diff = E - self.mu_
        solved = np.linalg.solve(self.sigma_, diff.T).T
        return np.sqrt(np.einsum("ij,ij->i", diff, solved))

    def score(self, model: MaskedSensorAutoencoder, row) -> AnomalyReport:
        """Score one physical sensor row; flag super-threshold muscles.

        A single corrupted channel entering the encoder shifts every
        muscle's reconstruction, so one pass cannot tell the driver from
        the passengers. When the first pass finds an outlier, the worst
        muscle's tension and length are replaced by the model's own
        reconstruction and the others are re-scored on the cleaned row.
        """
        nj, m = model.n_joints, model.n_muscles
        row = np.asarray(row, dtype=float).ravel()
        dist = self.mahalanobis(residual_pairs(model, row))
        worst = int(np.argmax(dist))
        if dist[worst] > self.threshold and m > 1:
            # iterate: the first reconstruction is itself computed from the
            # corrupted row, so a single substitution leaves part of the
            # shift behind; a few passes settle the imputed channels onto
            # the healthy relation
            cleaned = row.copy()
            for _ in range(3):
                pred = model.predict_net(cleaned, MaskMode.TENSION_LENGTH)[0]
                cleaned[nj + worst] = pred[nj + worst] * TENSION_UNIT_N
                cleaned[nj + m + worst] = pred[nj + m + worst] * LENGTH_UNIT_MM
            d2 = self.mahalanobis(residual_pairs(model, cleaned))
            dist = dist.copy()
            keep = np.arange(m) != worst
            dist[keep] = d2[keep]
        flagged = tuple(int(j) for j in np.flatnonzero(dist > self.threshold))
        return AnomalyReport(distances=dist, flagged=flagged)


class VerificationOutcome(Enum):
    RUPTURED = "ruptured"            # no force transmission
    OFFSET_USABLE = "offset-usable"  # transmits force, length origin shifted
    FALSE_ALARM = "false-alarm"      # muscle behaves normally


@dataclass(frozen=True)
class VerifyConfig:
    pull_mm: float = 10.0          # wind-in increment commanded per pull
    tension_rise_n: float = 10.0   # minimum rise proving force transmission
    slack_mm: float = 30.0         # reading-vs-predicted gap for (b)
    max_wind_mm: float = 100.0     # total wind-in budget before giving up
    settle_timeout_s: float = 5.0


@dataclass
class VerificationResult:
    muscle: int
    outcome: VerificationOutcome
    tension_rise: float               # peak rise over the pulls, N
    standing_gap: float               # |reading - predicted length|, mm
    corrected_origin: Optional[float] = None  # mm, offset-usable only


def verify_muscle(plant, model: MaskedSensorAutoencoder, muscle: int,
                  cfg: VerifyConfig = VerifyConfig(),
                  origin_weights: OriginWeights = OriginWeights()
                  ) -> VerificationResult:
    """Pull test deciding whether a flagged muscle is broken, offset, or fine.

    The muscle is wound in by pull_mm at a time, from the tighter of its
    command and reading, until its tension rises or the wind budget runs
    out; a muscle that cannot raise its tension has lost its force path. A
    transmitting muscle is offset when its reading stands far from the
    length the model predicts for the current posture and tensions: the
    command-vs-reading gap cannot separate an origin shift from ordinary
    servo engagement, but a healthy reading always stays near the learned
    relation. The original command is restored before returning.
    """
    before = plant.measured()
    command = plant.l_ref.copy()
    predicted = model.predict_length(before.theta, before.tension)
    standing_gap = float(abs(before.length[muscle] - predicted[muscle]))
    f_start = float(plant.tension[muscle])

    base = min(command[muscle], float(before.length[muscle]))
    rise = 0.0
    wound = 0.0
    pulled = command.copy()
    while wound < cfg.max_wind_mm - 1e-9:
        wound += cfg.pull_mm
        pulled[muscle] = base - wound
        plant.set_targets(pulled)
        quiet = 0.0
        elapsed = 0.0
        step = 0.01
        while elapsed < cfg.settle_timeout_s:
            plant.run(step)
            elapsed += step
            rise = max(rise, float(plant.tension[muscle]) - f_start)
            quiet = (quiet + step
                     if np.all(np.abs(plant.theta_dot) < 0.01) else 0.0)
            if quiet >= 0.2 and elapsed >= 0.5:  # let the servo act
                break
        if rise > cfg.tension_rise_n:
            break
    plant.set_targets(command)

    if rise <= cfg.tension_rise_n:
        outcome, corrected = VerificationOutcome.RUPTURED, None
    elif standing_gap > cfg.slack_mm:
        corrected = reestimate_length_origin(
            model, before.theta, before.tension, before.length, muscle,
            weights=origin_weights)
        outcome = VerificationOutcome.OFFSET_USABLE
    else:
        outcome, corrected = VerificationOutcome.FALSE_ALARM, None
    return VerificationResult(muscle=muscle, outcome=outcome,
                              tension_rise=rise, standing_gap=standing_gap,
                              corrected_origin=corrected)


@dataclass
class LearningSystem:
    """Mutable state shared by learning, detection, and verification."""

    model: MaskedSensorAutoencoder
    buffer: TrainingBuffer
    detector: ResidualAnomalyDetector
    rupture: np.ndarray                      # {0,1} per muscle, 1 = intact
    snapshot: Optional[MaskedSensorAutoencoder] = None
    paused: bool = False

    @classmethod
    def create(cls, model: MaskedSensorAutoencoder,
               buffer_capacity: int = 1000,
               window_size: int = 50, threshold: float = 30.0):
        return cls(model=model,
                   buffer=TrainingBuffer(model.n_joints, model.n_muscles,
                                         capacity=buffer_capacity),
                   detector=ResidualAnomalyDetector(window_size=window_size,
                                                    threshold=threshold),
                   rupture=np.ones(model.n_muscles))

    def pause(self) -> None:
        self.paused = True

    def resume(self) -> None:
        self.paused = False


def apply_outcome(system: LearningSystem, plant,
                  result: VerificationResult) -> None:
    """Commit a verification outcome to the learning system and plant.

    A confirmed break marks the muscle unusable and snapshots the current
    model for restoration after repair; an offset muscle gets its length
    origin rebased to the re-estimated reading. Both invalidate accumulated
    data, so buffer and detector window are cleared. A false alarm changes
    nothing. Learning and detection resume in every case.
    """
    i = result.muscle
    if result.outcome is VerificationOutcome.RUPTURED:
        system.snapshot = system.model.copy()
        system.rupture = system.rupture.copy()
        system.rupture[i] = 0.0
        system.buffer.clear()
        system.detector.clear()
    elif result.outcome is VerificationOutcome.OFFSET_USABLE:
        reading = float(plant.measured().length[i])
        plant.rebase_length_origin(i, result.corrected_origin - reading)
        system.snapshot = system.model.copy()
        system.buffer.clear()
        system.detector.clear()
    system.resume()


def restore_after_replacement(system: LearningSystem, muscle: int) -> None:
    """Put the pre-rupture model back once the muscle is repaired."""
    if system.snapshot is not None:
        system.model = system.snapshot
        system.snapshot = None
    system.rupture = system.rupture.copy()
    system.rupture[muscle] = 1.0
    system.buffer.clear()
    system.detector.clear()
