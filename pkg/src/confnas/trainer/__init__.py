"""Search profiles, the bi-level loop and checkpoints."""
from .checkpoint import CheckpointError
from .loop import (StepStats, TrainerState, TrialAborted, TrialResult, bilevel_step, load_trial_result,
                   train_supernet, warmup_gate)
from .metrics import MetricsSink, format_record, parse_record
from .profile import Profile, ProfileError, parse_profile, parse_profile_text, preset, serialize_profile

__all__ = ["CheckpointError", "MetricsSink", "Profile", "ProfileError", "StepStats", "TrainerState",
           "TrialAborted", "TrialResult", "bilevel_step", "format_record", "load_trial_result", "parse_profile",
           "parse_profile_text", "parse_record", "preset", "serialize_profile", "train_supernet", "warmup_gate"]
