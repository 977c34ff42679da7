"""Seeded pretrain-then-probe runs used by the ordering and robustness comparisons."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .data import LabeledDataset
from .evaluation import (attach_untrained_decoder, extract_features, knn_eval, masked_pred_error,
                         occlusion_eval)
from .model import ModelConfig, PCM3Model
from .trainer import PretrainResult, TrainConfig, pretrain


@dataclass
class ModeRun:
    mode: str
    seed: int
    knn: float
    occlusion: dict = field(default_factory=dict)  # strategy -> {"accuracy", "delta", "ratios"}
    maskpred: float | None = None  # None when the mode trains no decoder
    maskpred_proxy: float | None = None  # same metric with an untrained decoder attached
    epoch_means: np.ndarray | None = None
    seconds: float = 0.0
    result: PretrainResult | None = None


def untrained_knn(train: LabeledDataset, test: LabeledDataset, seed: int, cfg: TrainConfig | None = None) -> float:
    """1-NN accuracy of a freshly initialised encoder."""
    cfg = cfg or TrainConfig()
    model = PCM3Model(ModelConfig(frames=train.frames, joints=train.joints, hidden=cfg.hidden, embed=cfg.embed,
                                  prompt_dim=cfg.prompt_dim, decoder_hidden=cfg.decoder_hidden, seed=seed))
    return knn_eval(extract_features(model, train), extract_features(model, test)).accuracy


def run_mode(train: LabeledDataset, test: LabeledDataset, mode: str, seed: int, cfg: TrainConfig | None = None,
             trials: int = 3, keep_result: bool = False) -> ModeRun:
    cfg = replace(cfg or TrainConfig(), seed=seed)
    t0 = time.perf_counter()
    result = pretrain(train, cfg, mode)
    model = result.model
    bank = extract_features(model, train)
    knn = knn_eval(bank, extract_features(model, test)).accuracy
    occ = occlusion_eval(model, train, test, trials=trials, seed=seed, train_bank=bank)
    occlusion = {k: {"accuracy": v.accuracy, "delta": v.extra["delta"], "ratios": v.extra["ratios"]}
                 for k, v in occ.items()}
    if model.has_decoder:
        maskpred, proxy = masked_pred_error(model, test, trials=trials, seed=seed), None
    else:
        maskpred = None
        proxy = masked_pred_error(attach_untrained_decoder(model, seed), test, trials=trials, seed=seed)
    return ModeRun(mode, seed, knn, occlusion, maskpred, proxy, result.epoch_means(),
                   time.perf_counter() - t0, result if keep_result else None)


def run_grid(train, test, modes, seeds, cfg=None, progress=None) -> dict:
    """``{(mode, seed): ModeRun}`` over the full grid."""
    out = {}
    for seed in seeds:
        for mode in modes:
            out[mode, seed] = run_mode(train, test, mode, seed, cfg)
            if progress is not None:
                progress(out[mode, seed])
    return out
