"""Masked autoencoder over (joint angle, tension, length) sensor rows.

The encoder sees a sensor row with one channel zero-filled plus three mask
bits saying which channels are present; the decoder reconstructs the full row.
Training with randomly chosen masks makes the latent usable three ways:
complete lengths from (angle, tension), complete angles from (tension, length),
complete tensions from (angle, length). Latent-space gradient descent on a
user loss over the decoded row is the shared solver for control, estimation,
and length-origin re-estimation.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .nn import Adam, FeedForwardNet, LayerSpec, _deserialize_net, _serialize_net
from .sensors import (ALL_MODES, MaskMode, TrainingBuffer, scale_from_network,
                      scale_to_network)
from .validation import as_float_array, as_matrix, as_vector

_MODE_BITS = np.array([m.value for m in ALL_MODES])  # rows follow ALL_MODES order
_MODE_INDEX = {m: i for i, m in enumerate(ALL_MODES)}

_MAGIC = b"TLAE"
_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TrainingWeights:
    angle: float = 1.0
    tension: float = 10.0
    length: float = 100.0


@dataclass(frozen=True)
class DescentConfig:
    """Normalized-gradient line search in latent space."""

    gamma_max: float = 0.2
    n_batch: int = 21   # line-search candidates, gamma = 0 included
    n_epoch: int = 30


@dataclass
class OnlineBatch:
    inputs: np.ndarray     # (n, D + 2M + 3), network units + mask bits
    targets: np.ndarray    # (n, D + 2M), network units
    loss_mask: np.ndarray  # (n, D + 2M), zeros drop a column from the loss


def descend_latent(decoder: FeedForwardNet, z0, loss_fn,
                   cfg: DescentConfig = DescentConfig()):
    """Minimize loss_fn over the decoder input.

    loss_fn maps decoded rows (network units) to (value, grad_wrt_row) and
    must broadcast over a leading batch axis: handed an (n, dim) stack of
    candidate rows it returns n values (the gradients are only consumed for
    single rows). Each epoch takes one normalized-gradient direction and
    line-searches gamma over n_batch values equally spaced on [0, gamma_max];
    keeping gamma = 0 as a candidate means the selected loss never increases.
    The channel-norm losses keep unit-size gradients arbitrarily close to
    their minimum, so the final accuracy is set by the grid step
    gamma_max / (n_batch - 1), not by the gradient shrinking. Returns
    (z, per-epoch selected losses).
    """
    z = as_vector(z0, decoder.in_dim, "z0").copy()
    gammas = np.linspace(0.0, cfg.gamma_max, cfg.n_batch)
    history = []
    for _ in range(cfg.n_epoch):
        out, tape = decoder.forward(z)
        value, grad_out = loss_fn(out)
        _, grad_z = decoder.backward(tape, grad_out)
        gnorm = np.linalg.norm(grad_z)
        if gnorm == 0.0:  # stationary: keep current latent
            history.append(float(value))
            continue
        candidates = z[None, :] - gammas[:, None] * (grad_z / gnorm)[None, :]
        outs, _ = decoder.forward(candidates)
        losses = np.asarray(loss_fn(outs)[0], dtype=float)
        best = int(np.argmin(losses))
        z = candidates[best]
        history.append(float(losses[best]))
    return z, np.array(history)


class MaskedSensorAutoencoder(BaseEstimator):
    """Sensor-completion autoencoder with masked initial and online training.

    Layer widths are (D+2M+3, wide, narrow, D+M, narrow, wide, D+2M) with tanh
    everywhere except the final layer; the bottleneck (dimension D+M) is the
    latent space. fit() runs masked initial training on physical-unit rows
    [theta | tension | length]; update_online() consumes OnlineBatch objects.
    """

    def __init__(self, n_joints: int, n_muscles: int, hidden_wide: int = 200,
                 hidden_narrow: int = 30, n_batch: int = 100, n_epoch: int = 100,
                 w_angle: float = 1.0, w_tension: float = 10.0,
                 w_length: float = 100.0, learning_rate: float = 1e-2,
                 holdout: float = 0.1, random_state: int = 0):
        self.n_joints = n_joints
        self.n_muscles = n_muscles
        self.hidden_wide = hidden_wide
        self.hidden_narrow = hidden_narrow
        self.n_batch = n_batch
        self.n_epoch = n_epoch
        self.w_angle = w_angle
        self.w_tension = w_tension
        self.w_length = w_length
        self.learning_rate = learning_rate
        self.holdout = holdout
        self.random_state = random_state

    # --- dimensions ---

    @property
    def width(self) -> int:
        return self.n_joints + 2 * self.n_muscles

    @property
    def latent_dim(self) -> int:
        return self.n_joints + self.n_muscles

    def _blocks(self):
        d, m = self.n_joints, self.n_muscles
        return slice(0, d), slice(d, d + m), slice(d + m, d + 2 * m)

    # --- construction ---

    def init_networks(self, seed_encoder: int, seed_decoder: int) -> None:
        wide, narrow = self.hidden_wide, self.hidden_narrow
        self.encoder_ = FeedForwardNet([
            LayerSpec(self.width + 3, wide, "tanh"),
            LayerSpec(wide, narrow, "tanh"),
            LayerSpec(narrow, self.latent_dim, "tanh"),
        ], seed=seed_encoder)
        self.decoder_ = FeedForwardNet([
            LayerSpec(self.latent_dim, narrow, "tanh"),
            LayerSpec(narrow, wide, "tanh"),
            LayerSpec(wide, self.width, "identity"),
        ], seed=seed_decoder)

    def _require_fitted(self):
        if not hasattr(self, "encoder_"):
            raise NotFittedError("model has no networks; call fit() or load()")

    # --- masked input assembly (network units in, network units out) ---

    def _assemble(self, rows_net: np.ndarray, mode_idx) -> np.ndarray:
        rows_net = np.atleast_2d(rows_net)
        mode_idx = np.broadcast_to(np.asarray(mode_idx, dtype=int),
                                   (rows_net.shape[0],))
        bits = _MODE_BITS[mode_idx]
        d, m = self.n_joints, self.n_muscles
        keep = np.repeat(bits, [d, m, m], axis=1)
        return np.hstack([rows_net * keep, bits])

    # --- loss ---

    def _weights(self) -> TrainingWeights:
        return TrainingWeights(self.w_angle, self.w_tension, self.w_length)

    def _loss_and_grads(self, inputs, targets, loss_mask=None):
        """Mean over rows of sum_c w_c * ||mask ⊙ (target_c - pred_c)||_2."""
        z, tape_e = self.encoder_.forward(inputs)
        out, tape_d = self.decoder_.forward(z)
        diff = out - targets
        if loss_mask is not None:
            diff = diff * loss_mask
        w = self._weights()
        n = inputs.shape[0]
        loss = 0.0
        grad_out = np.zeros_like(out)
        for sl, w_c in zip(self._blocks(), (w.angle, w.tension, w.length)):
            block = diff[:, sl]
            norms = np.linalg.norm(block, axis=1)
            loss += w_c * norms.mean()
            safe = np.where(norms > 0.0, norms, 1.0)
            grad_out[:, sl] = (w_c / n) * block / safe[:, None]
        if loss_mask is not None:
            grad_out *= loss_mask
        dec_grads, grad_z = self.decoder_.backward(tape_d, grad_out)
        enc_grads, _ = self.encoder_.backward(tape_e, grad_z)
        return loss, enc_grads.as_list() + dec_grads.as_list()

    def _mode_averaged_loss(self, rows_net: np.ndarray) -> float:
        total = 0.0
        for i in range(len(ALL_MODES)):
            inputs = self._assemble(rows_net, i)
            z, _ = self.encoder_.forward(inputs)
            out, _ = self.decoder_.forward(z)
            diff = out - rows_net
            w = self._weights()
            for sl, w_c in zip(self._blocks(), (w.angle, w.tension, w.length)):
                total += w_c * np.linalg.norm(diff[:, sl], axis=1).mean()
        return total / len(ALL_MODES)

    # --- initial training ---

    def fit(self, X, y=None):
        X = as_matrix(X, self.width, "sensor matrix")
        if X.shape[0] < 2:
            raise ValueError("need at least 2 samples")
        rows_net = scale_to_network(X, self.n_joints, self.n_muscles)
        seeds = np.random.SeedSequence(self.random_state).generate_state(4)
        self.init_networks(int(seeds[0]), int(seeds[1]))
        rng_shuffle = np.random.default_rng(int(seeds[2]))
        rng_epoch = np.random.default_rng(int(seeds[3]))

        perm = rng_shuffle.permutation(rows_net.shape[0])
        shuffled = rows_net[perm]
        n_hold = max(1, int(round(self.holdout * shuffled.shape[0])))
        train, hold = shuffled[:-n_hold], shuffled[-n_hold:]
        if train.shape[0] == 0:
            raise ValueError("holdout fraction leaves no training rows")

        params = self.encoder_.params() + self.decoder_.params()
        opt = Adam(params, lr=self.learning_rate)
        history = []
        best_loss = np.inf
        best_nets = None
        for epoch in range(self.n_epoch):
            # cosine decay to 1% of the peak rate: the channel norms keep
            # unit-size gradients near the optimum, so a constant rate
            # leaves the parameters jittering at an error floor
            opt.lr = self.learning_rate * (
                0.01 + 0.495 * (1.0 + np.cos(np.pi * epoch / self.n_epoch)))
            mode_idx = rng_epoch.integers(0, len(ALL_MODES), size=train.shape[0])
            inputs = self._assemble(train, mode_idx)
            order = rng_epoch.permutation(train.shape[0])
            for chunk in np.array_split(order, min(self.n_batch, train.shape[0])):
                if chunk.size == 0:
                    continue
                _, grads = self._loss_and_grads(inputs[chunk], train[chunk])
                opt.step(grads)
            hold_loss = self._mode_averaged_loss(hold)
            history.append(hold_loss)
            if hold_loss < best_loss:
                best_loss = hold_loss
                best_nets = (self.encoder_.copy(), self.decoder_.copy())
        self.encoder_, self.decoder_ = best_nets
        self.history_ = np.array(history)
        self.heldout_loss_ = best_loss
        self.n_features_in_ = self.width
        return self

    def channel_errors(self, X) -> dict:
        """Mean per-component absolute error by channel, mode-averaged.

        Network units throughout, so the three values are comparable and
        joint- or muscle-count independent.
        """
        self._require_fitted()
        X = as_matrix(X, self.width, "sensor matrix")
        rows_net = scale_to_network(X, self.n_joints, self.n_muscles)
        sums = np.zeros(3)
        for i in range(len(ALL_MODES)):
            inputs = self._assemble(rows_net, i)
            z, _ = self.encoder_.forward(inputs)
            out, _ = self.decoder_.forward(z)
            diff = np.abs(out - rows_net)
            for k, sl in enumerate(self._blocks()):
                sums[k] += diff[:, sl].mean()
        sums /= len(ALL_MODES)
        return {"angle": float(sums[0]), "tension": float(sums[1]),
                "length": float(sums[2])}

    # --- encode / decode ---

    def encode(self, theta=None, tension=None, length=None,
               mode: MaskMode = MaskMode.ANGLE_TENSION) -> np.ndarray:
        """Latent for the given sensors; the mode's masked channel may be None."""
        self._require_fitted()
        d, m = self.n_joints, self.n_muscles
        parts = []
        batched = False
        for value, dim in ((theta, d), (tension, m), (length, m)):
            if value is None:
                arr = None
            else:
                arr = as_float_array(value, "sensor")
                if arr.ndim == 2:
                    batched = True
            parts.append((arr, dim))
        n = 1
        for arr, _ in parts:
            if arr is not None and arr.ndim == 2:
                n = arr.shape[0]
        cols = []
        for arr, dim in parts:
            if arr is None:
                arr = np.zeros((n, dim))
            else:
                arr = np.atleast_2d(arr)
                if arr.shape[0] == 1 and n > 1:
                    arr = np.broadcast_to(arr, (n, dim))
            cols.append(arr)
        rows = np.hstack(cols)
        rows_net = scale_to_network(rows, d, m)
        inputs = self._assemble(rows_net, _MODE_INDEX[mode])
        z, _ = self.encoder_.forward(inputs)
        return z if batched else z[0]

    def decode_net(self, z) -> np.ndarray:
        """Decoder output in network units (single row or batch)."""
        self._require_fitted()
        out, _ = self.decoder_.forward(z)
        return out

    def decode(self, z):
        """Decoder output as physical (theta rad, tension N, length mm)."""
        out = scale_from_network(self.decode_net(z), self.n_joints, self.n_muscles)
        sl_t, sl_f, sl_l = self._blocks()
        return out[..., sl_t], out[..., sl_f], out[..., sl_l]

    def predict_net(self, X, mode: MaskMode) -> np.ndarray:
        """Reconstruction (network units) of physical rows under one mask mode."""
        self._require_fitted()
        X = as_matrix(X, self.width, "sensor matrix")
        rows_net = scale_to_network(X, self.n_joints, self.n_muscles)
        inputs = self._assemble(rows_net, _MODE_INDEX[mode])
        z, _ = self.encoder_.forward(inputs)
        out, _ = self.decoder_.forward(z)
        return out

    def predict_length(self, theta, tension) -> np.ndarray:
        """Muscle lengths (mm) completed from angles and tensions."""
        z = self.encode(theta=theta, tension=tension, mode=MaskMode.ANGLE_TENSION)
        _, _, length = self.decode(z)
        return length

    def descend(self, z0, loss_fn, cfg: DescentConfig = DescentConfig()):
        self._require_fitted()
        return descend_latent(self.decoder_, z0, loss_fn, cfg)

    # --- online training ---

    def update_online(self, batch: OnlineBatch, n_batch: int = 10,
                      n_epoch: int = 10, rng=None, learning_rate: float = 1e-3):
        """Adam refinement on a prepared batch; optimizer state is fresh.

        The rate is constant and much lower than the initial-training peak:
        a few dozen rows must nudge the model, not rewrite it.
        """
        self._require_fitted()
        rng = np.random.default_rng(rng)
        n = batch.inputs.shape[0]
        if n == 0:
            raise ValueError("empty online batch")
        opt = Adam(self.encoder_.params() + self.decoder_.params(),
                   lr=learning_rate)
        for _ in range(n_epoch):
            order = rng.permutation(n)
            for chunk in np.array_split(order, min(n_batch, n)):
                if chunk.size == 0:
                    continue
                _, grads = self._loss_and_grads(
                    batch.inputs[chunk], batch.targets[chunk],
                    batch.loss_mask[chunk])
                opt.step(grads)
        return self

    # --- persistence / identity ---

    def copy(self) -> "MaskedSensorAutoencoder":
        clone = MaskedSensorAutoencoder(**self.get_params())
        if hasattr(self, "encoder_"):
            clone.encoder_ = self.encoder_.copy()
            clone.decoder_ = self.decoder_.copy()
        return clone

    def param_digest(self) -> str:
        self._require_fitted()
        h = hashlib.sha256()
        for arr in self.encoder_.params() + self.decoder_.params():
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        self._require_fitted()
        header = {
            "version": _FORMAT_VERSION,
            "params": self.get_params(),
        }
        head = json.dumps(header, sort_keys=True).encode()
        blob = (_MAGIC + len(head).to_bytes(4, "little") + head
                + _serialize_net(self.encoder_) + _serialize_net(self.decoder_))
        with open(path, "wb") as fh:
            fh.write(blob)

    @classmethod
    def load(cls, path) -> "MaskedSensorAutoencoder":
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:4] != _MAGIC:
            raise ValueError("not a model checkpoint (bad magic header)")
        n = int.from_bytes(blob[4:8], "little")
        header = json.loads(blob[8:8 + n].decode())
        if header["version"] != _FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header['version']}")
        model = cls(**header["params"])
        encoder, rest = _deserialize_net(blob[8 + n:])
        decoder, rest = _deserialize_net(rest)
        if rest:
            raise ValueError("trailing bytes in checkpoint")
        model.encoder_ = encoder
        model.decoder_ = decoder
        return model


def build_online_batch(model: MaskedSensorAutoencoder, buffer: TrainingBuffer,
                       latest_row, rupture=None, n_data: int = 10,
                       rng=None) -> OnlineBatch:
    """Assemble the masked-mode-expanded batch for one online update.

    Rows are up to n_data buffer samples plus the latest sample plus the
    all-zero anchor. For ruptured muscles the tension is forced to zero, the
    length is replaced by the model's own completion from (theta, tension),
    and the length column is dropped from the loss.
    """
    rng = np.random.default_rng(rng)
    d, m = model.n_joints, model.n_muscles
    latest = as_vector(latest_row, model.width, "latest row")
    sampled = buffer.sample(n_data, rng)
    rows = np.vstack([sampled, latest[None, :], np.zeros((1, model.width))])

    ruptured = np.array([], dtype=int)
    if rupture is not None:
        rupture = as_vector(rupture, m, "rupture vector")
        ruptured = np.flatnonzero(rupture == 0.0)
    if ruptured.size:
        rows[:, d + ruptured] = 0.0
        pred_l = model.predict_length(rows[:, :d], rows[:, d:d + m])
        rows[:, d + m + ruptured] = pred_l[:, ruptured]

    rows_net = scale_to_network(rows, d, m)
    inputs = np.vstack([model._assemble(rows_net, i)
                        for i in range(len(ALL_MODES))])
    targets = np.tile(rows_net, (len(ALL_MODES), 1))
    loss_mask = np.ones_like(targets)
    if ruptured.size:
        loss_mask[:, d + m + ruptured] = 0.0
    return OnlineBatch(inputs, targets, loss_mask)
