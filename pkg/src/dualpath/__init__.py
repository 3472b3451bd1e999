"""Dual-path adaptive-correlation inverted transformer for stock panels."""

from .data import PanelDataset, SplitSpec, WindowSample, make_windows, synth_market
from .loss import LossConfig, mse, pearson_loss, total_loss
from .metrics import (
    BacktestReport,
    DailyScores,
    aggregate_metrics,
    build_portfolio_return,
    information_coefficient,
    run_backtest,
)
from .model import (
    AttentionMaps,
    ModelConfig,
    ModelParams,
    forward,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import GradCheckReport, Tensor, grad_check
from .train import TrainConfig, ablation_suite, evaluate, sweep, train_model

__all__ = [
    "AttentionMaps",
    "BacktestReport",
    "DailyScores",
    "GradCheckReport",
    "LossConfig",
    "ModelConfig",
    "ModelParams",
    "PanelDataset",
    "SplitSpec",
    "Tensor",
    "TrainConfig",
    "WindowSample",
    "ablation_suite",
    "aggregate_metrics",
    "build_portfolio_return",
    "evaluate",
    "forward",
    "grad_check",
    "information_coefficient",
    "load_checkpoint",
    "make_windows",
    "mse",
    "pearson_loss",
    "run_backtest",
    "save_checkpoint",
    "sweep",
    "synth_market",
    "total_loss",
    "train_model",
]
