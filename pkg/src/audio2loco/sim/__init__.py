from .env import (
    CAUSES,
    BatchedEnv,
    DomainParams,
    SimConfig,
    TrajectoryRecorder,
    check_termination,
    clip_state,
    delay_steps,
    frame_dim,
    keypoint_deviation,
    maybe_push,
    randomize_domain,
    reset_rsi,
    rsi_frame_index,
    termination_cause,
)
from .model import BodyModel, Joint, Link, biped_model, body_from_spec, chain_model, keypoints, kinematics, mechanical_energy

__all__ = [
    "CAUSES",
    "BatchedEnv",
    "BodyModel",
    "DomainParams",
    "Joint",
    "Link",
    "SimConfig",
    "TrajectoryRecorder",
    "biped_model",
    "body_from_spec",
    "chain_model",
    "check_termination",
    "clip_state",
    "delay_steps",
    "frame_dim",
    "keypoint_deviation",
    "keypoints",
    "kinematics",
    "maybe_push",
    "mechanical_energy",
    "randomize_domain",
    "reset_rsi",
    "rsi_frame_index",
    "termination_cause",
]
