"""Latent-space posture control and joint-angle estimation.

The controller never solves for tendon tensions directly. It starts from the
encoder's guess of the latent sensor state for the target posture, descends
the decoder input against a loss mixing posture error, tension economy, and
static torque balance, then converts the decoded lengths into stretch-
compensated length commands for the stiffness servo. The estimators run the
same machinery in reverse: they recover joint angles from tension/length
readings, with substitution and descent variants that stay usable when some
muscle sensors can no longer be trusted.
"""

from dataclasses import dataclass

import numpy as np

from .autoencoder import DescentConfig, MaskedSensorAutoencoder
from .sensors import LENGTH_UNIT_MM, TENSION_UNIT_N, MaskMode
from .validation import as_vector


@dataclass
class ControlWeights:
    """Loss weights and descent schedule for solve_control.

    The posture and tension terms are plain norms. Norm terms keep unit-size
    gradients arbitrarily close to their minimum, so two norm terms of
    similar gradient scale veto each other's refinement in the normalized-
    step line search; the torque term therefore follows a Huber profile
    (linear beyond huber_nm, quadratic inside) and the floor term a squared
    hinge. Far from balance the torque gradient is full size and pulls a
    badly unbalanced plan hard; inside huber_nm it decays smoothly and lets
    the posture term finish, and its curvature stays bounded so the smallest
    line-search step still pays off. The floor matters because the
    stiffness servo cannot pull below its bias: tensions planned under the
    floor are realized at the bias anyway, and the torque the plan relied on
    never appears. The margin keeps every healthy muscle actively servoed at
    the target, which makes the equilibrium stiff on both sides. Tension
    economy must stay well below everything else, and the rupture weight
    must dwarf it so a flagged muscle is actually let go.
    """

    tension: float = 0.1        # drive tensions toward zero, weakly
    posture: float = 1.0        # match the target joint angles
    torque: float = 1.0         # Huber: static balance at the target
    floor: float = 50.0         # squared hinge: plan above the servo floor
    rupture: float = 200.0      # squared: drive ruptured tension to zero
    margin_n: float = 5.0       # floor sits this far above the servo bias
    huber_nm: float = 0.5       # torque residual where the pull saturates
    gamma_max: float = 0.2
    n_batch: int = 41
    n_epoch: int = 40

    def descent_config(self) -> DescentConfig:
        return DescentConfig(self.gamma_max, self.n_batch, self.n_epoch)


@dataclass
class EstimationWeights:
    """Loss weights for descent-based angle estimation under rupture."""

    rupture_tension: float = 10.0   # decoded tension of ruptured muscles -> 0
    tension_match: float = 1.0      # healthy tensions track the readings
    length_match: float = 1.0      # healthy lengths track the readings


@dataclass
class OriginWeights:
    """Loss weights for re-estimating one muscle's length origin."""

    posture_match: float = 1.0
    tension_match: float = 1.0
    length_match: float = 1.0


@dataclass
class ControlSolution:
    """Servo command plus the decoded state the solver settled on."""

    l_ref: np.ndarray       # stiffness-servo length commands, mm
    f_pred: np.ndarray      # predicted tensions, N (clamped at 0)
    theta_pred: np.ndarray  # predicted joint angles, rad
    history: np.ndarray     # per-epoch selected descent losses


def _norm_dir(v):
    """Last-axis euclidean norm and unit direction, zero at the origin.

    Broadcasts over leading axes so the descent loss closures can score a
    whole stack of line-search candidates in one call.
    """
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    safe = np.where(n == 0.0, 1.0, n)
    return np.squeeze(n, -1), np.where(n == 0.0, 0.0, v / safe)


def _rupture_flags(rupture, n_muscles: int) -> np.ndarray:
    if rupture is None:
        return np.zeros(n_muscles, dtype=bool)
    r = as_vector(rupture, n_muscles, "rupture flags")
    if not np.all((r == 0.0) | (r == 1.0)):
        raise ValueError("rupture flags must be 0 or 1")
    return r == 0.0


def length_compensation(f_pred, f_bias: float = 20.0,
                        k_stiff: float = 2.0) -> np.ndarray:
    """Command offset that makes the stiffness servo hold f_pred.

    The servo pulls with f = f_bias + k_stiff * (l - l_ref), so holding a
    tension above bias needs the command shortened by (f - f_bias) / k_stiff.
    """
    f_pred = np.asarray(f_pred, dtype=float)
    return -(f_pred - f_bias) / k_stiff


def muscle_jacobian(model: MaskedSensorAutoencoder, theta, tension,
                    dtheta: float = 1e-3) -> np.ndarray:
    """Forward-difference d(length)/d(angle) through the learned model.

    Returns an (n_muscles, n_joints) matrix in mm/rad evaluated at (theta,
    tension) with tension held fixed.
    """
    d, m = model.n_joints, model.n_muscles
    theta = as_vector(theta, d, "theta")
    tension = as_vector(tension, m, "tension")
    thetas = np.vstack([theta, theta + dtheta * np.eye(d)])
    lengths = model.predict_length(thetas, np.tile(tension, (d + 1, 1)))
    return (lengths[1:] - lengths[0]).T / dtheta


def solve_control(model: MaskedSensorAutoencoder, theta_ref, f_cur, tau_ref,
                  rupture=None, weights: ControlWeights = ControlWeights(),
                  f_bias: float = 20.0, k_stiff: float = 2.0) -> ControlSolution:
    """Find length commands that realize theta_ref at low tension.

    tau_ref is the joint torque (N*m) the tensions must hold at the target,
    typically the gravity holding torque. The muscle Jacobian is evaluated
    once at (theta_ref, f_cur) and frozen for the descent. Ruptured muscles
    (rupture flag 0) get an extra penalty pushing their decoded tension to
    zero so the solution stops relying on them.
    """
    d, m = model.n_joints, model.n_muscles
    theta_ref = as_vector(theta_ref, d, "theta_ref")
    f_cur = as_vector(f_cur, m, "f_cur")
    tau_ref = as_vector(tau_ref, d, "tau_ref")
    ruptured = _rupture_flags(rupture, m)

    # torque-balance matrix in N*m per N of tension
    balance = muscle_jacobian(model, theta_ref, f_cur).T * 1e-3
    sl_t = slice(0, d)
    sl_f = slice(d, d + m)
    w = weights
    rupt = ruptured.astype(float)
    f_floor = np.where(ruptured, 0.0, f_bias + w.margin_n) / TENSION_UNIT_N

    def loss_fn(row):
        grad = np.zeros_like(row)
        th, fn = row[..., sl_t], row[..., sl_f]
        v, g = _norm_dir(fn)
        value = w.tension * v
        grad[..., sl_f] += w.tension * g
        v, g = _norm_dir(th - theta_ref)
        value += w.posture * v
        grad[..., sl_t] += w.posture * g
        resid = tau_ref + (fn * TENSION_UNIT_N) @ balance.T
        r, g = _norm_dir(resid)
        huber = np.where(r <= w.huber_nm, r * r / (2.0 * w.huber_nm),
                         r - w.huber_nm / 2.0)
        value += w.torque * huber
        scale = (np.minimum(r, w.huber_nm) / w.huber_nm)[..., None]
        grad[..., sl_f] += w.torque * TENSION_UNIT_N * ((scale * g) @ balance)
        below = np.minimum(fn - f_floor, 0.0)
        value += w.floor * np.sum(below * below, axis=-1)
        grad[..., sl_f] += 2.0 * w.floor * below
        if np.any(ruptured):
            # squared so its pull dies off near zero and the posture term
            # can still refine once the ruptured tension is parked
            fr = fn * rupt
            value += w.rupture * np.sum(fr * fr, axis=-1)
            grad[..., sl_f] += 2.0 * w.rupture * fr
        return value, grad

    z0 = model.encode(theta=theta_ref, tension=f_cur,
                      mode=MaskMode.ANGLE_TENSION)
    z, history = model.descend(z0, loss_fn, w.descent_config())
    theta_pred, f_pred, l_pred = model.decode(z)
    f_pred = np.maximum(f_pred, 0.0)  # servo cannot push
    l_ref = l_pred + length_compensation(f_pred, f_bias, k_stiff)
    return ControlSolution(l_ref, f_pred, theta_pred, history)


def estimate_direct(model: MaskedSensorAutoencoder, f_cur, l_cur) -> np.ndarray:
    """Joint angles decoded straight from tension and length readings."""
    z = model.encode(tension=f_cur, length=l_cur, mode=MaskMode.TENSION_LENGTH)
    theta, _, _ = model.decode(z)
    return theta


def estimate_with_previous(model: MaskedSensorAutoencoder, theta_prev,
                           f_cur, l_cur, rupture=None) -> np.ndarray:
    """Direct estimation with ruptured channels rebuilt from the last angle.

    Ruptured muscles report meaningless readings, so their tension is zeroed
    and their length replaced by the model's prediction at theta_prev before
    the direct decode. With no rupture this is exactly estimate_direct.
    """
    ruptured = _rupture_flags(rupture, model.n_muscles)
    if not np.any(ruptured):
        return estimate_direct(model, f_cur, l_cur)
    f_mod = as_vector(f_cur, model.n_muscles, "f_cur").copy()
    l_mod = as_vector(l_cur, model.n_muscles, "l_cur").copy()
    f_mod[ruptured] = 0.0
    l_pred = model.predict_length(theta_prev, f_mod)
    l_mod[ruptured] = l_pred[ruptured]
    return estimate_direct(model, f_mod, l_mod)


def estimate_by_descent(model: MaskedSensorAutoencoder, f_cur, l_cur,
                        rupture=None,
                        weights: EstimationWeights = EstimationWeights(),
                        cfg: DescentConfig = DescentConfig()) -> np.ndarray:
    """Joint angles from descent that trusts only healthy channels.

    Starting from the encoder's guess for the raw readings, the latent state
    is refined so decoded healthy channels match the readings while decoded
    ruptured-muscle tensions go to zero; the corrupted channels never enter
    the loss.
    """
    d, m = model.n_joints, model.n_muscles
    f_net = as_vector(f_cur, m, "f_cur") / TENSION_UNIT_N
    l_net = as_vector(l_cur, m, "l_cur") / LENGTH_UNIT_MM
    ruptured = _rupture_flags(rupture, m)
    healthy = (~ruptured).astype(float)
    sl_f = slice(d, d + m)
    sl_l = slice(d + m, d + 2 * m)
    w = weights

    rupt = ruptured.astype(float)

    def loss_fn(row):
        grad = np.zeros_like(row)
        fn, ln = row[..., sl_f], row[..., sl_l]
        v, g = _norm_dir(fn * rupt)
        value = w.rupture_tension * v
        grad[..., sl_f] += w.rupture_tension * g
        v, g = _norm_dir(healthy * (fn - f_net))
        value += w.tension_match * v
        grad[..., sl_f] += w.tension_match * healthy * g
        v, g = _norm_dir(healthy * (ln - l_net))
        value += w.length_match * v
        grad[..., sl_l] += w.length_match * healthy * g
        return value, grad

    z0 = model.encode(tension=f_cur, length=l_cur,
                      mode=MaskMode.TENSION_LENGTH)
    z, _ = model.descend(z0, loss_fn, cfg)
    theta, _, _ = model.decode(z)
    return theta


def reestimate_length_origin(model: MaskedSensorAutoencoder, theta_cur,
                             f_cur, l_cur, offset_muscle: int,
                             weights: OriginWeights = OriginWeights(),
                             cfg: DescentConfig = DescentConfig()) -> float:
    """Length reading one muscle should show in the current state.

    After an endpoint slip the muscle still transmits force but its length
    origin is shifted. The corrupted reading is excluded from the loss; the
    descent settles on a state matching the current posture, tensions, and
    the other muscles' lengths, and the decoded length of the offset muscle
    is returned (mm) for rebasing its origin.
    """
    d, m = model.n_joints, model.n_muscles
    if not 0 <= offset_muscle < m:
        raise ValueError(f"offset_muscle out of range: {offset_muscle}")
    theta_cur = as_vector(theta_cur, d, "theta_cur")
    f_net = as_vector(f_cur, m, "f_cur") / TENSION_UNIT_N
    l_net = as_vector(l_cur, m, "l_cur") / LENGTH_UNIT_MM
    keep = np.ones(m)
    keep[offset_muscle] = 0.0
    sl_t = slice(0, d)
    sl_f = slice(d, d + m)
    sl_l = slice(d + m, d + 2 * m)
    w = weights

    def loss_fn(row):
        grad = np.zeros_like(row)
        th, fn, ln = row[..., sl_t], row[..., sl_f], row[..., sl_l]
        v, g = _norm_dir(th - theta_cur)
        value = w.posture_match * v
        grad[..., sl_t] += w.posture_match * g
        v, g = _norm_dir(fn - f_net)
        value += w.tension_match * v
        grad[..., sl_f] += w.tension_match * g
        v, g = _norm_dir(keep * (ln - l_net))
        value += w.length_match * v
        grad[..., sl_l] += w.length_match * keep * g
        return value, grad

    z0 = model.encode(theta=theta_cur, tension=f_cur,
                      mode=MaskMode.ANGLE_TENSION)
    z, _ = model.descend(z0, loss_fn, cfg)
    _, _, length = model.decode(z)
    return float(length[offset_muscle])
