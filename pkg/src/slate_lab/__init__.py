"""Slate recommendation from logged feedback: a click model with separate
engagement and relevance terms, propensity baselines, inner-product slate
decisions and simulation harnesses."""

from .core import (Catalog, Context, DataError, DegenerateScoreError, Feedback, LogBatch, LogRecord,
                   ModelParams, NumericError, Slate, SlateLabError, SupportViolation, Variant,
                   log_add_exp, logsumexp, read_jsonl, sample_categorical, softmax_normalize, spawn_rng,
                   write_jsonl)
from .decision import ExactIndex, IVFIndex, build_slate, build_slates, position_order
from .environment import OracleConfig, OracleEnv, build_oracle, generate_logs, run_abtest, sample_user
from .model import click_probability, grad_log_likelihood, log_likelihood, score_item, score_slate
from .policy import (PolicyKind, PolicySpec, SoftmaxPolicyParams, estimate_iips, estimate_ips,
                     topk_correction)
from .session import (InteractionDataset, SessionBiases, SessionSplit, generate_session_logs,
                      run_session_abtest, session_feedback, split_sessions)
from .training import Adam, Objective, TrainConfig, train_policy, train_prr

__version__ = "0.1.0"

__all__ = [
    "Catalog",
    "Context",
    "DataError",
    "DegenerateScoreError",
    "Feedback",
    "LogBatch",
    "LogRecord",
    "ModelParams",
    "NumericError",
    "Slate",
    "SlateLabError",
    "SupportViolation",
    "Variant",
    "log_add_exp",
    "logsumexp",
    "read_jsonl",
    "sample_categorical",
    "softmax_normalize",
    "spawn_rng",
    "write_jsonl",
    "ExactIndex",
    "IVFIndex",
    "build_slate",
    "build_slates",
    "position_order",
    "OracleConfig",
    "OracleEnv",
    "build_oracle",
    "generate_logs",
    "run_abtest",
    "sample_user",
    "click_probability",
    "grad_log_likelihood",
    "log_likelihood",
    "score_item",
    "score_slate",
    "PolicyKind",
    "PolicySpec",
    "SoftmaxPolicyParams",
    "estimate_iips",
    "estimate_ips",
    "topk_correction",
    "InteractionDataset",
    "SessionBiases",
    "SessionSplit",
    "generate_session_logs",
    "run_session_abtest",
    "session_feedback",
    "split_sessions",
    "Adam",
    "Objective",
    "TrainConfig",
    "train_policy",
    "train_prr",
]
