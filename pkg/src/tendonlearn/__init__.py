"""Learning-based body models, control, and rupture tolerance for
tendon-driven robots."""

from .anomaly import (AnomalyReport, LearningSystem, ResidualAnomalyDetector,
                      VerificationOutcome, VerificationResult, VerifyConfig,
                      apply_outcome, residual_pairs,
                      restore_after_replacement, verify_muscle)
from .autoencoder import (DescentConfig, MaskedSensorAutoencoder,
                          TrainingWeights, build_online_batch, descend_latent)
from .control import (ControlSolution, ControlWeights, EstimationWeights,
                      OriginWeights, estimate_by_descent, estimate_direct,
                      estimate_with_previous, length_compensation,
                      muscle_jacobian, reestimate_length_origin,
                      solve_control)
from .harness import (EvalProtocol, MetricsSummary, ScenarioConfig,
                      SessionResult, SessionRunner, StageTimeout, emit_report,
                      prepare_model, run_eval_multi, run_eval_sequence,
                      run_full_pipeline, run_online_session, run_rupture_demo,
                      settle_plant)
from .plant import (PlantConfig, RuptureKind, TendonPlant, elbow_config,
                    make_static_dataset, sample_static)
from .sensors import MaskMode, SensorTriple, TrainingBuffer

__all__ = [
    "AnomalyReport", "ControlSolution", "ControlWeights", "DescentConfig",
    "EstimationWeights", "EvalProtocol", "LearningSystem", "MaskMode",
    "MaskedSensorAutoencoder", "MetricsSummary", "OriginWeights",
    "PlantConfig", "ResidualAnomalyDetector", "RuptureKind", "ScenarioConfig",
    "SensorTriple", "SessionResult", "SessionRunner", "StageTimeout",
    "TendonPlant", "TrainingBuffer", "TrainingWeights", "VerificationOutcome",
    "VerificationResult", "VerifyConfig", "apply_outcome",
    "build_online_batch", "descend_latent", "elbow_config", "emit_report",
    "estimate_by_descent", "estimate_direct", "estimate_with_previous",
    "length_compensation", "make_static_dataset", "muscle_jacobian",
    "prepare_model", "reestimate_length_origin", "residual_pairs",
    "restore_after_replacement", "run_eval_multi", "run_eval_sequence",
    "run_full_pipeline", "run_online_session", "run_rupture_demo",
    "sample_static", "settle_plant", "solve_control", "verify_muscle",
]
