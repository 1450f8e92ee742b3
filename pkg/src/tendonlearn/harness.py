"""Scenario runners: evaluation, online-learning sessions, rupture drills.

Everything here drives a simulated plant through the 50 Hz command loop the
controller was designed for, while feeding the learning system (model,
training buffer, anomaly detector) exactly the way a deployment would:
samples accumulate only at stationary, sufficiently-new postures; the model
updates whenever enough new samples arrive; the detector scores every tick
once its window fills. Runners log everything and return plain dicts and
dataclasses that the CLI serializes.
"""

import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import plant as plant_mod
from .anomaly import (LearningSystem, VerificationOutcome, VerifyConfig,
                      apply_outcome, verify_muscle)
from .autoencoder import MaskedSensorAutoencoder, build_online_batch
from .control import (ControlWeights, estimate_by_descent, estimate_direct,
                      estimate_with_previous, solve_control)
from .plant import RuptureKind, TendonPlant, gravity_torque

TICK_HZ = 50
TICK_DT = 1.0 / TICK_HZ
RESOLVE_EVERY = 5   # control re-solve cadence in ticks (10 Hz)
CMD_BLEND = 0.2     # per-tick low-pass factor on streamed length commands

# data-accumulation gates: store a sample only when the plant is quiet and
# the state moved meaningfully since the last stored sample
QUIET_VEL = 0.01        # rad/s
QUIET_HOLD = 0.2        # s
MIN_DTHETA = 0.1        # rad
MIN_DTENSION = 10.0     # N

STAGE_CAP_ENV = "TENDONLEARN_STAGE_SECONDS"


class StageTimeout(RuntimeError):
    """A pipeline stage exceeded the wall-clock cap."""


def _stage_cap() -> float:
    raw = os.environ.get(STAGE_CAP_ENV, "")
    return float(raw) if raw else float("inf")


@dataclass(frozen=True)
class EvalProtocol:
    """Random-target reaching sequence used for all error measurements."""

    n_targets: int = 5
    move_s: float = 2.0
    rest_s: float = 0.5

    @property
    def window_s(self) -> float:
        return self.n_targets * (self.move_s + self.rest_s)


SIM_EVAL = EvalProtocol(n_targets=5, move_s=2.0, rest_s=0.5)
LONG_EVAL = EvalProtocol(n_targets=7, move_s=3.0, rest_s=0.5)

ESTIMATORS = ("direct", "with_previous", "by_descent", "oracle")


@dataclass
class MetricsSummary:
    rmse_est: float                 # mean ||theta_est - theta_cur|| over window
    rmse_control: float             # mean rest-phase ||theta_cur - theta_ref||
    per_target: list                # rest-phase control error per target
    estimator: str
    targets: list


@dataclass
class SessionResult:
    duration_s: float
    buckets: list            # [[bucket_start_s, mean rmse_est], ...]
    n_updates: int
    n_samples: int


class _EstimatorState:
    """Per-run estimator dispatch; 'with_previous' feeds back its output."""

    def __init__(self, system: LearningSystem, choice: str, use_rupture: bool,
                 descent_every: int = 5):
        if choice not in ESTIMATORS:
            raise ValueError(f"unknown estimator: {choice}")
        self.system = system
        self.choice = choice
        self.use_rupture = use_rupture
        self.descent_every = descent_every
        self.theta_prev = None
        self.held = None
        self.tick = 0

    def rupture_flags(self):
        if self.use_rupture:
            return self.system.rupture
        return np.ones(self.system.model.n_muscles)

    def estimate(self, plant: TendonPlant, measured) -> np.ndarray:
        model = self.system.model
        r = self.rupture_flags()
        if self.choice == "oracle":
            est = plant.theta.copy()
        elif self.choice == "direct":
            est = estimate_direct(model, measured.tension, measured.length)
        elif self.choice == "with_previous":
            if self.theta_prev is None:
                self.theta_prev = estimate_direct(model, measured.tension,
                                                  measured.length)
            est = estimate_with_previous(model, self.theta_prev,
                                         measured.tension, measured.length, r)
            self.theta_prev = est
        else:  # by_descent runs on a decimated tick to respect its budget
            if self.held is None or self.tick % self.descent_every == 0:
                self.held = estimate_by_descent(model, measured.tension,
                                                measured.length, r)
            est = self.held
        self.tick += 1
        return np.asarray(est, dtype=float)


class SessionRunner:
    """Shared 50 Hz loop for evaluation and learning sessions."""

    def __init__(self, plant: TendonPlant, system: LearningSystem, rng,
                 use_rupture_in_learning: bool = True,
                 use_rupture_in_control: bool = True,
                 n_thre: int = 10, learning_enabled: bool = True,
                 verify_on_flag: bool = True,
                 control_weights: ControlWeights = ControlWeights()):
        self.plant = plant
        self.system = system
        self.rng = np.random.default_rng(rng)
        self.use_rupture_in_learning = use_rupture_in_learning
        self.use_rupture_in_control = use_rupture_in_control
        self.n_thre = n_thre
        self.learning_enabled = learning_enabled
        self.verify_on_flag = verify_on_flag
        self.control_weights = control_weights
        self.trajectory = []       # per tick: time, th, thd, f, l, l_ref, health
        self.anomaly_log = []      # per scored tick: time, d_j..., flags
        self.events = []           # dict records: rupture, flag, update, verify
        self.quiet_s = 0.0
        self.last_stored = None
        self.new_samples = 0
        self.n_updates = 0
        self.flag_log = []         # (time, AnomalyReport) per flag episode
        self.verifications = []    # (time, VerificationResult) as resolved

    # --- target selection ---

    def random_target(self, rng=None) -> np.ndarray:
        lo, hi = zip(*self.plant.config.joint_limits)
        lo, hi = np.array(lo), np.array(hi)
        span = hi - lo
        rng = self.rng if rng is None else rng
        return rng.uniform(lo + 0.05 * span, hi - 0.05 * span)

    def solve_for(self, theta_ref) -> np.ndarray:
        cfg = self.plant.config
        r = (self.system.rupture if self.use_rupture_in_control
             else np.ones(cfg.n_muscles))
        tau = gravity_torque(cfg, theta_ref)
        sol = solve_control(self.system.model, theta_ref, self.plant.tension,
                            tau, rupture=r, weights=self.control_weights,
                            f_bias=cfg.f_bias, k_stiff=cfg.k_stiff)
        return sol.l_ref

    # --- the tick ---

    def _tick(self, command, learn: bool, estimator=None):
        self.plant.set_targets(command)
        self.plant.run(TICK_DT)
        m = self.plant.measured()
        row = m.as_row()
        est = estimator.estimate(self.plant, m) if estimator else None

        self.trajectory.append(
            [self.plant.time, *self.plant.theta, *self.plant.theta_dot,
             *m.tension, *m.length, *command,
             *(h.value for h in self.plant.health),
             *(est if est is not None else [])])

        if learn and not self.system.paused:
            self._observe_and_learn(row)
        return m, est

    def _observe_and_learn(self, row):
        # the learned relation is static, so both detection and accumulation
        # look only at quasi-static readings; rows taken mid-swing mix in
        # dynamic effects the model never represents
        quiet = bool(np.all(np.abs(self.plant.theta_dot) < QUIET_VEL))
        self.quiet_s = self.quiet_s + TICK_DT if quiet else 0.0
        if self.quiet_s < QUIET_HOLD:
            return

        det = self.system.detector
        # score against the window BEFORE admitting the row: statistics that
        # include the row itself cap its distance near sqrt(window size)
        if det.ready:
            det.rebuild(self.system.model)
            report = det.score(self.system.model, row)
            self.anomaly_log.append(
                [self.plant.time, *report.distances,
                 *(1 if j in report.flagged else 0
                   for j in range(self.plant.config.n_muscles))])
            if report.flagged:
                self.flag_log.append((self.plant.time, report))
                self.events.append({"time": self.plant.time, "event": "flag",
                                    "muscles": list(report.flagged)})
                if self.verify_on_flag:
                    # learning stops, the pull test decides, the outcome is
                    # committed, and the system resumes on its own; when the
                    # alarm names several muscles the most deviant goes first
                    worst = max(report.flagged,
                                key=lambda j: report.distances[j])
                    self.system.pause()
                    self._verify(worst)
                    return

        # one displacement gate feeds both the window and the buffer:
        # consecutive near-identical rows add nothing to learning and would
        # collapse the window spread to the sensor noise floor, making the
        # fixed flag threshold trip on every posture change
        if self.last_stored is not None:
            d, mcount = self.plant.config.n_joints, self.plant.config.n_muscles
            dth = np.max(np.abs(row[:d] - self.last_stored[:d]))
            df = np.max(np.abs(row[d:d + mcount] -
                               self.last_stored[d:d + mcount]))
            if dth < MIN_DTHETA and df < MIN_DTENSION:
                return
        det.observe(row)
        self.system.buffer.add(row)
        self.last_stored = row.copy()
        self.new_samples += 1
        if self.new_samples >= self.n_thre:
            self._update_model(row)

    def _update_model(self, latest_row):
        r = (self.system.rupture if self.use_rupture_in_learning
             else np.ones(self.plant.config.n_muscles))
        batch = build_online_batch(self.system.model, self.system.buffer,
                                   latest_row, rupture=r, rng=self.rng)
        self.system.model.update_online(batch, rng=self.rng)
        self.new_samples = 0
        self.n_updates += 1
        self.events.append({"time": self.plant.time, "event": "update",
                            "buffer": len(self.system.buffer)})

    def _verify(self, muscle: int):
        result = verify_muscle(self.plant, self.system.model, muscle)
        apply_outcome(self.system, self.plant, result)
        self.verifications.append((self.plant.time, result))
        self.events.append({
            "time": self.plant.time, "event": "verification",
            "muscle": result.muscle, "outcome": result.outcome.value,
            "tension_rise_n": round(result.tension_rise, 3),
            "standing_gap_mm": round(result.standing_gap, 3),
            "corrected_origin_mm": None if result.corrected_origin is None
            else round(result.corrected_origin, 3)})

    # --- composite motions ---

    def stream(self, l_target, duration, learn: bool, estimator=None,
               ramp: bool = True, collect=None):
        start = self.plant.l_ref.copy()
        n = max(1, int(round(duration * TICK_HZ)))
        for k in range(1, n + 1):
            a = k / n if ramp else 1.0
            cmd = start + a * (np.asarray(l_target) - start) if ramp \
                else np.asarray(l_target, dtype=float)
            m, est = self._tick(cmd, learn, estimator)
            if collect is not None:
                collect(self.plant, m, est)

    def move_to(self, theta_ref, duration, learn: bool, estimator=None,
                collect=None):
        """Drive toward a posture target, re-solving as tensions evolve.

        The solver is closed-loop in f_cur only: re-solving keeps the latent
        start point on the part of the sensor manifold the plant actually
        occupies, which stops the commands from assuming tensions the
        stiffness servo cannot produce. Commands are first-order smoothed;
        stepping them directly excites an underdamped swing whose overshoot
        contaminates the next solve's tensions.
        """
        n = max(1, int(round(duration * TICK_HZ)))
        cmd = self.plant.l_ref.copy()
        goal = None
        for k in range(n):
            if k % RESOLVE_EVERY == 0:
                goal = self.solve_for(theta_ref)
            cmd = cmd + CMD_BLEND * (goal - cmd)
            m, est = self._tick(cmd, learn, estimator)
            if collect is not None:
                collect(self.plant, m, est)

    def hold(self, duration, learn: bool, estimator=None, collect=None):
        self.stream(self.plant.l_ref.copy(), duration, learn, estimator,
                    ramp=False, collect=collect)

    def explore_command(self) -> np.ndarray:
        cfg = self.plant.config
        lo, hi = zip(*cfg.joint_limits)
        theta = self.rng.uniform(lo, hi)
        f = self.rng.uniform(0.0, cfg.f_max, size=cfg.n_muscles)
        return self.system.model.predict_length(theta, f)


def run_eval_multi(system: LearningSystem, plant: TendonPlant,
                   protocol: EvalProtocol = SIM_EVAL,
                   estimators=("direct",), rng=None,
                   use_rupture_in_control: bool = True,
                   use_rupture_in_estimation: bool = True,
                   runner: SessionRunner = None) -> dict:
    """Reach random targets; score several estimators on the same run.

    Estimators are pure observers (control uses only the target and the
    tensions), so evaluating them on one shared trajectory is both cheaper
    and a fairer comparison than separate runs. Learning, accumulation, and
    detection stay frozen: evaluation must not change the system. RMSE_est
    averages the per-tick estimator error over the whole window;
    RMSE_control averages the posture error over each rest phase.
    """
    if runner is None:
        runner = SessionRunner(plant, system, rng,
                               use_rupture_in_control=use_rupture_in_control,
                               learning_enabled=False)
    # a caller-held seed makes target draws independent of runner history,
    # so before/after evaluations reach the identical posture set
    target_rng = None if rng is None else np.random.default_rng(rng)
    states = {name: _EstimatorState(system, name, use_rupture_in_estimation)
              for name in estimators}
    est_err = {name: [] for name in estimators}
    targets, per_target = [], []

    for _ in range(protocol.n_targets):
        theta_ref = runner.random_target(target_rng)
        targets.append(theta_ref.tolist())
        rest_err = []

        def track(plant, m, est, _rest=False, _ref=theta_ref):
            for name, state in states.items():
                e = state.estimate(plant, m)
                est_err[name].append(float(np.linalg.norm(e - plant.theta)))
            if _rest:
                rest_err.append(float(np.linalg.norm(plant.theta - _ref)))

        runner.move_to(theta_ref, protocol.move_s, learn=False, collect=track)
        runner.hold(protocol.rest_s, learn=False,
                    collect=lambda p, m, e: track(p, m, e, _rest=True))
        per_target.append(float(np.mean(rest_err)))

    rmse_control = float(np.mean(per_target))
    return {name: MetricsSummary(rmse_est=float(np.mean(est_err[name])),
                                 rmse_control=rmse_control,
                                 per_target=per_target, estimator=name,
                                 targets=targets)
            for name in estimators}


def run_eval_sequence(system: LearningSystem, plant: TendonPlant,
                      protocol: EvalProtocol = SIM_EVAL,
                      estimator: str = "direct", rng=None,
                      use_rupture_in_control: bool = True,
                      use_rupture_in_estimation: bool = True,
                      runner: SessionRunner = None) -> MetricsSummary:
    """Single-estimator wrapper around run_eval_multi."""
    return run_eval_multi(system, plant, protocol, (estimator,), rng,
                          use_rupture_in_control, use_rupture_in_estimation,
                          runner)[estimator]


def run_online_session(system: LearningSystem, plant: TendonPlant,
                       duration_s: float, rng=None, n_thre: int = 10,
                       use_rupture_in_learning: bool = True,
                       use_rupture_in_control: bool = True,
                       bucket_s: float = 20.0,
                       runner: SessionRunner = None) -> SessionResult:
    """Alternate controlled reaches and exploratory pokes while learning.

    Cycle: 2 s controlled move, 0.5 s rest, 1 s exploratory command (decoded
    lengths for a random posture/tension pair, sent as-is), 0.5 s rest.
    Samples accumulate at quiet, displaced states; every n_thre new samples
    trigger one online update. The returned buckets hold the mean direct-
    estimator error per bucket_s of simulated time.
    """
    if runner is None:
        runner = SessionRunner(plant, system, rng,
                               use_rupture_in_learning=use_rupture_in_learning,
                               use_rupture_in_control=use_rupture_in_control,
                               n_thre=n_thre)
    state = _EstimatorState(system, "direct", use_rupture_in_learning)
    t0 = plant.time
    errs = []   # (session time, error)

    def track(plant, m, est):
        errs.append((plant.time - t0, float(np.linalg.norm(est - plant.theta))))

    while plant.time - t0 < duration_s - 1e-9:
        left = duration_s - (plant.time - t0)
        theta_ref = runner.random_target()
        runner.move_to(theta_ref, min(2.0, left),
                       learn=True, estimator=state, collect=track)
        for dur, cmd in ((0.5, None), (1.0, runner.explore_command()),
                         (0.5, None)):
            left = duration_s - (plant.time - t0)
            if left <= 1e-9:
                break
            if cmd is None:
                runner.hold(min(dur, left), learn=True, estimator=state,
                            collect=track)
            else:
                runner.stream(cmd, min(dur, left), learn=True,
                              estimator=state, ramp=False, collect=track)

    buckets = []
    for start in np.arange(0.0, duration_s, bucket_s):
        vals = [e for t, e in errs if start <= t < start + bucket_s]
        if vals:
            buckets.append([float(start), float(np.mean(vals))])
    return SessionResult(duration_s=duration_s, buckets=buckets,
                         n_updates=runner.n_updates,
                         n_samples=len(system.buffer))


# --- scenario configuration ---

@dataclass
class ScenarioConfig:
    """Everything a batch scenario needs, loadable from a JSON file."""

    seed: int = 0
    plant: dict = None                   # None -> default elbow profile
    model_path: str = None               # skip training, load this model
    train_samples: int = 30000
    train_epochs: int = 300
    pre_session_s: float = 120.0
    relearn_session_s: float = 120.0
    eval_targets: int = 5
    eval_move_s: float = 2.0
    eval_rest_s: float = 0.5
    estimator: str = "direct"
    rupture_muscle: int = 0
    rupture_kind: str = "wire-cut"
    rupture_offset_mm: float = 57.0
    n_thre: int = 10
    n_thre_after_rupture: int = 2
    detection_timeout_s: float = 10.0
    use_rupture_in_learning: bool = True
    use_rupture_in_control: bool = True
    use_rupture_in_estimation: bool = True

    def protocol(self) -> EvalProtocol:
        return EvalProtocol(self.eval_targets, self.eval_move_s,
                            self.eval_rest_s)

    def plant_config(self):
        if self.plant is None:
            return plant_mod.elbow_config()
        return plant_mod.config_from_dict(self.plant)

    def canonical(self) -> dict:
        out = {}
        for name in sorted(self.__dataclass_fields__):
            out[name] = getattr(self, name)
        return out

    def sha256(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ScenarioConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _metrics_dict(m: MetricsSummary) -> dict:
    return {"rmse_est": m.rmse_est, "rmse_control": m.rmse_control,
            "per_target": m.per_target, "estimator": m.estimator}


def _session_dict(s: SessionResult) -> dict:
    return {"duration_s": s.duration_s, "buckets": s.buckets,
            "n_updates": s.n_updates, "n_samples": s.n_samples}


def prepare_model(cfg: ScenarioConfig, rng=None) -> MaskedSensorAutoencoder:
    """Load the configured model or train one on geometric-model samples."""
    if cfg.model_path:
        return MaskedSensorAutoencoder.load(cfg.model_path)
    rng = np.random.default_rng(rng if rng is not None else cfg.seed)
    pcfg = cfg.plant_config()
    X = plant_mod.make_static_dataset(pcfg, cfg.train_samples, rng)
    model = MaskedSensorAutoencoder(
        n_joints=pcfg.n_joints, n_muscles=pcfg.n_muscles,
        n_epoch=cfg.train_epochs, random_state=cfg.seed)
    model.fit(X)
    return model


def settle_plant(plant: TendonPlant, timeout: float = 5.0) -> None:
    plant.run_until_settled(timeout=timeout)


def run_rupture_demo(system: LearningSystem, plant: TendonPlant,
                     muscle: int, kind: RuptureKind, offset_mm: float = 0.0,
                     rng=None, warmup_s: float = 2.0,
                     detection_timeout_s: float = 10.0,
                     verify: bool = True,
                     runner: SessionRunner = None) -> dict:
    """Inject one rupture, watch the detector catch it, verify it.

    The warmup reaches a couple of targets so the detector window holds
    healthy readings with realistic variance (a window of identical idle rows
    would make the fitted cloud degenerate). Then the rupture is injected and
    the loop runs until the next flag or timeout. A runner with
    verify_on_flag resolves the flag in-loop; otherwise verify=True runs the
    pull test explicitly once flagged.
    """
    if runner is None:
        runner = SessionRunner(plant, system, rng, verify_on_flag=verify)
    t_warm = plant.time
    while plant.time - t_warm < warmup_s - 1e-9:
        left = warmup_s - (plant.time - t_warm)
        runner.move_to(runner.random_target(), min(1.0, left), learn=True)
    n_flags = len(runner.flag_log)
    n_verified = len(runner.verifications)
    inject_time = plant.time
    plant.inject_rupture(muscle, kind, offset=offset_mm)
    runner.events.append({"time": inject_time, "event": "rupture",
                          "muscle": muscle, "kind": kind.value,
                          "offset_mm": offset_mm})

    while (len(runner.flag_log) == n_flags
           and plant.time - inject_time < detection_timeout_s):
        runner.hold(TICK_DT, learn=True)

    detected = len(runner.flag_log) > n_flags
    report = {"injected": {"muscle": muscle, "kind": kind.value,
                           "offset_mm": offset_mm, "time_s": inject_time},
              "detected": detected}
    m = plant.config.n_muscles
    if detected:
        flag_time, flag_report = runner.flag_log[n_flags]
        report["detection_latency_s"] = round(flag_time - inject_time, 6)
        report["flagged_muscles"] = list(flag_report.flagged)
        # every scored tick after injection: did any healthy muscle cross?
        rows = [row for row in runner.anomaly_log if row[0] > inject_time]
        others = [max((row[1 + j] for j in range(m) if j != muscle),
                      default=0.0) for row in rows]
        report["max_other_distance"] = float(max(others)) if others else 0.0
        report["cut_muscle_distance"] = float(max(
            (row[1 + muscle] for row in rows), default=0.0))
        if verify and len(runner.verifications) == n_verified:
            runner._verify(max(flag_report.flagged,
                               key=lambda j: flag_report.distances[j]))
    if detected and len(runner.verifications) > n_verified:
        _, result = runner.verifications[n_verified]
        report["verification"] = {
            "outcome": result.outcome.value,
            "tension_rise_n": result.tension_rise,
            "standing_gap_mm": result.standing_gap,
            "corrected_origin_mm": result.corrected_origin}
    return report


def _check_cap(t_start: float, stage: str) -> None:
    if time.monotonic() - t_start > _stage_cap():
        raise StageTimeout(stage)


def _pipeline_arm(cfg: ScenarioConfig, model: MaskedSensorAutoencoder,
                  seed: int, verification: bool) -> dict:
    """One full scenario: learn, rupture, (maybe) verify, relearn, eval."""
    arm = {}
    pcfg = cfg.plant_config()
    plant = TendonPlant(pcfg, sensor_rng=np.random.SeedSequence([seed, 5]))
    settle_plant(plant)
    system = LearningSystem.create(model.copy())
    runner = SessionRunner(plant, system, seed,
                           use_rupture_in_learning=cfg.use_rupture_in_learning,
                           use_rupture_in_control=cfg.use_rupture_in_control,
                           n_thre=cfg.n_thre, verify_on_flag=verification)
    # both evaluations (and both arms) reach these exact targets
    eval_seed = np.random.SeedSequence([cfg.seed, 23])

    t0 = time.monotonic()
    arm["pre_session"] = _session_dict(run_online_session(
        system, plant, cfg.pre_session_s, runner=runner))
    _check_cap(t0, "pre_session")

    t0 = time.monotonic()
    pre = run_eval_multi(system, plant, cfg.protocol(),
                         ("direct", "with_previous", "by_descent"),
                         rng=eval_seed, runner=runner,
                         use_rupture_in_estimation=cfg.use_rupture_in_estimation)
    arm["pre_eval"] = {k: _metrics_dict(v) for k, v in pre.items()}
    _check_cap(t0, "pre_eval")

    t0 = time.monotonic()
    kind = RuptureKind(cfg.rupture_kind)
    demo = run_rupture_demo(system, plant, cfg.rupture_muscle, kind,
                            offset_mm=cfg.rupture_offset_mm, runner=runner,
                            detection_timeout_s=cfg.detection_timeout_s,
                            warmup_s=0.0, verify=verification)
    arm["rupture_and_detection"] = demo
    _check_cap(t0, "detection")

    t0 = time.monotonic()
    runner.n_thre = cfg.n_thre_after_rupture
    arm["relearn_session"] = _session_dict(run_online_session(
        system, plant, cfg.relearn_session_s, runner=runner,
        n_thre=cfg.n_thre_after_rupture))
    _check_cap(t0, "relearn_session")

    t0 = time.monotonic()
    post = run_eval_multi(system, plant, cfg.protocol(),
                          ("direct", "with_previous", "by_descent"),
                          rng=eval_seed, runner=runner,
                          use_rupture_in_estimation=cfg.use_rupture_in_estimation)
    arm["post_eval"] = {k: _metrics_dict(v) for k, v in post.items()}
    _check_cap(t0, "post_eval")

    arm["rupture_flags"] = system.rupture.tolist()
    arm["_runner"] = runner   # stripped before serialization
    return arm


def run_full_pipeline(cfg: ScenarioConfig) -> dict:
    """End-to-end scenario plus a verification-disabled twin for contrast."""
    report = {"scenario": cfg.canonical(), "config_sha256": cfg.sha256()}
    t0 = time.monotonic()
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 17]))
    model = prepare_model(cfg, rng)
    holdout = plant_mod.make_static_dataset(cfg.plant_config(), 2000,
                                            np.random.default_rng(999))
    report["initial_training"] = {
        "n_samples": cfg.train_samples if not cfg.model_path else None,
        "n_epochs": cfg.train_epochs if not cfg.model_path else None,
        "channel_errors": model.channel_errors(holdout)}
    _check_cap(t0, "initial_training")

    report["with_verification"] = _pipeline_arm(cfg, model, cfg.seed, True)
    report["without_verification"] = _pipeline_arm(cfg, model, cfg.seed, False)

    with_rmse = report["with_verification"]["post_eval"]["direct"][
        "rmse_control"]
    without_rmse = report["without_verification"]["post_eval"]["direct"][
        "rmse_control"]
    pre_rmse = report["with_verification"]["pre_eval"]["direct"][
        "rmse_control"]
    report["comparison"] = {
        "pre_rupture_rmse_control": pre_rmse,
        "post_rmse_control_with_verification": with_rmse,
        "post_rmse_control_without_verification": without_rmse,
        "verification_improves_control": bool(with_rmse < without_rmse)}
    return report


# --- artifact emission ---

def _csv_write(path, header, rows) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.9g}" if isinstance(v, float) else v
                        for v in row])


def trajectory_header(n_joints: int, n_muscles: int,
                      with_estimate: bool = False) -> list:
    cols = (["time"]
            + [f"theta_{i}" for i in range(n_joints)]
            + [f"theta_dot_{i}" for i in range(n_joints)]
            + [f"f_{j}" for j in range(n_muscles)]
            + [f"l_{j}" for j in range(n_muscles)]
            + [f"l_ref_{j}" for j in range(n_muscles)]
            + [f"health_{j}" for j in range(n_muscles)])
    if with_estimate:
        cols += [f"theta_est_{i}" for i in range(n_joints)]
    return cols


def anomaly_header(n_muscles: int) -> list:
    return (["time"] + [f"d_{j}" for j in range(n_muscles)]
            + [f"flag_{j}" for j in range(n_muscles)])


def emit_runner_logs(runner: SessionRunner, out_dir) -> None:
    d = runner.plant.config.n_joints
    m = runner.plant.config.n_muscles
    os.makedirs(out_dir, exist_ok=True)
    if runner.trajectory:
        with_est = len(runner.trajectory[0]) > 1 + 2 * d + 4 * m
        _csv_write(os.path.join(out_dir, "trajectory.csv"),
                   trajectory_header(d, m, with_est), runner.trajectory)
    if runner.anomaly_log:
        _csv_write(os.path.join(out_dir, "anomaly.csv"),
                   anomaly_header(m), runner.anomaly_log)
    if runner.events:
        with open(os.path.join(out_dir, "events.jsonl"), "w") as fh:
            for ev in runner.events:
                fh.write(json.dumps(ev, sort_keys=True) + "\n")


def emit_report(report: dict, out_dir, name: str = "summary.json") -> str:
    """Write the summary (stable key order) and any captured runner logs."""
    os.makedirs(out_dir, exist_ok=True)
    clean = {}
    for key, value in report.items():
        if isinstance(value, dict):
            value = {k: v for k, v in value.items() if not k.startswith("_")}
        clean[key] = value
    for arm in ("with_verification", "without_verification"):
        entry = report.get(arm)
        if isinstance(entry, dict) and "_runner" in entry:
            emit_runner_logs(entry["_runner"], os.path.join(out_dir, arm))
    path = os.path.join(out_dir, name)
    with open(path, "w") as fh:
        json.dump(clean, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path
