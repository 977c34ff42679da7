"""Self-supervised pretraining loop and its ablation modes."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import IntraParams, apply_mask, intra_transform, make_mask, random_mix
from .data import LabeledDataset, default_partition
from .errors import ConfigError, NumericDomainError
from .losses import LossBreakdown, LossWeights, PAIR_NAMES, masked_mse, mixed_key, total_loss
from .model import ModelConfig, PCM3Model
from .rng import stream

MODES = ("contrastive_only", "masked_only", "multi_task", "pcm3", "pcm3_stopgrad")

METRIC_COLUMNS = ("epoch", "step", "info_intra", "info_inter", "info_mask", "info_predict",
                  "kl_total", "mask_mse", "total", "lr", "wall_ms", "warmup")


class TrainingDiverged(NumericDomainError):
    """Raised when a step produces a non-finite value; carries branch diagnostics."""

    def __init__(self, message, diagnostics):
        super().__init__(f"{message}; diagnostics: {json.dumps(diagnostics, sort_keys=True)}")
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    epochs: int = 45
    lr: float = 0.02
    lr_drop_epoch: int | None = None  # None -> round(7/9 * epochs)
    lr_drop_factor: float = 0.1
    batch_size: int = 32
    momentum: float = 0.9
    weight_decay: float = 1e-4
    alpha: float = 0.99
    queue_size: int = 512
    tau: float = 0.07
    tau_q: float = 0.1
    tau_k: float = 0.05
    lambda_m: float = 40.0
    lambda_kl: float = 1.0
    mask_ratio: float = 0.6
    clips: int = 4
    mask_strategy: str = "topology"
    prompts_enabled: bool = True
    squared_mse: bool = False
    hidden: int = 32
    embed: int = 32
    prompt_dim: int = 16
    decoder_hidden: int = 32
    seed: int = 0

    @property
    def drop_epoch(self) -> int:
        return round(self.epochs * 7 / 9) if self.lr_drop_epoch is None else self.lr_drop_epoch

    def validate(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        # The derived default may land on the final epoch for very short runs; then there is no drop.
        if self.lr_drop_epoch is not None and self.epochs > 0 and not 0 <= self.lr_drop_epoch < self.epochs:
            raise ConfigError("learning-rate drop epoch must precede the last epoch")
        if min(self.tau, self.tau_q, self.tau_k) <= 0:
            raise ConfigError("temperatures must be positive")
        if self.mask_strategy not in ("topology", "random"):
            raise ConfigError(f"unknown mask strategy {self.mask_strategy!r}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError("mask ratio must lie strictly between 0 and 1")

    def weights(self) -> LossWeights:
        return LossWeights(self.tau, self.tau_q, self.tau_k, self.lambda_m, self.lambda_kl, self.squared_mse)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class StepRecord:
    epoch: int
    step: int
    losses: LossBreakdown
    lr: float
    wall_ms: float
    warmup: bool = False

    def row(self) -> dict:
        r = self.losses.row()
        return {"epoch": self.epoch, "step": self.step, **{k: r[k] for k in METRIC_COLUMNS[2:9]},
                "lr": self.lr, "wall_ms": round(self.wall_ms, 3), "warmup": int(self.warmup)}


@dataclass
class PretrainResult:
    model: PCM3Model
    records: list = field(default_factory=list)

    def inference_model(self) -> PCM3Model:
        return self.model.export_inference()

    def epoch_means(self) -> np.ndarray:
        by_epoch = {}
        for r in self.records:
            by_epoch.setdefault(r.epoch, []).append(r.losses.total)
        return np.array([np.mean(by_epoch[e]) for e in sorted(by_epoch)])


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.lr * (cfg.lr_drop_factor if epoch >= cfg.drop_epoch else 1.0)


def check_mode(mode: str) -> str:
    if mode not in MODES:
        raise ConfigError(f"unknown training mode {mode!r}; choose from {', '.join(MODES)}")
    return mode


def build_model(cfg: TrainConfig, mode: str, frames: int, joints: int) -> PCM3Model:
    mcfg = ModelConfig(frames=frames, joints=joints, hidden=cfg.hidden, embed=cfg.embed,
                       prompt_dim=cfg.prompt_dim, decoder_hidden=cfg.decoder_hidden,
                       queue_size=cfg.queue_size, momentum=cfg.alpha,
                       has_decoder=mode != "contrastive_only", seed=cfg.seed)
    model = PCM3Model(mcfg)
    # Prompts belong to the full method; the baselines train a plain shared encoder.
    model.prompts_enabled = cfg.prompts_enabled and mode in ("pcm3", "pcm3_stopgrad")
    return model


def _branches(mode):
    uses_cl = mode != "masked_only"
    uses_mp = mode != "contrastive_only"
    return uses_cl, uses_mp, mode in ("pcm3", "pcm3_stopgrad")


def trainable_params(model: PCM3Model, mode: str) -> dict:
    """Parameters the optimizer updates in ``mode`` (key side never included)."""
    uses_cl, uses_mp, mp_positives = _branches(mode)
    params = {f"q/{k}": v for k, v in model.encoder_params("query").items()}
    if uses_cl:
        params.update({f"q/{k}": v for k, v in model.query.items() if k.startswith("proj.")})
    if uses_mp:
        params.update({f"d/{k}": v for k, v in model.decoder.items()})
    if model.prompts_enabled:
        wanted = []
        if uses_cl:
            wanted += ["intra", "inter", "cl"]
        if uses_mp:
            wanted += ["mask", "mp"]
        if mp_positives:
            wanted += ["predict"]
        params.update({f"p/prompt.{w}": model.prompts[f"prompt.{w}"] for w in wanted})
    return params


@dataclass
class Views:
    """Every augmented input built for one batch (arrays of shape (B, T, J, 3))."""
    x: np.ndarray
    intra: np.ndarray
    key: np.ndarray
    inter: np.ndarray
    lam: np.ndarray
    partner: np.ndarray
    visible: np.ndarray  # (B, T, J)
    mask_ratios: np.ndarray


def build_views(x, sample_ids, epoch, cfg: TrainConfig, intra: IntraParams | None = None) -> Views:
    """Construct views from per-sample streams keyed by (seed, epoch, sample id)."""
    intra = intra or IntraParams()
    B, Tn, J, _ = x.shape
    part = default_partition(J)
    s_intra = np.empty_like(x)
    s_key = np.empty_like(x)
    visible = np.empty((B, Tn, J))
    ratios = np.empty(B)
    gens = [stream(cfg.seed, "views", epoch, int(i)) for i in sample_ids]
    for b, g in enumerate(gens):
        s_intra[b] = intra_transform(x[b], intra, g)
        s_key[b] = intra_transform(x[b], intra, g)
        spec = make_mask(Tn, J, part, cfg.mask_ratio, cfg.clips, cfg.mask_strategy, g)
        visible[b] = spec.visible
        ratios[b] = spec.ratio
    partner = (np.arange(B) + 1) % B
    s_inter = np.empty_like(x)
    lam = np.empty(B)
    for b, g in enumerate(gens):
        mix = random_mix(s_key[b], s_key[partner[b]], g, part)
        s_inter[b], lam[b] = mix.mixed, mix.lam
    return Views(x, s_intra, s_key, s_inter, lam, partner, visible, ratios)


def forward_step(model: PCM3Model, views: Views, mode: str, cfg: TrainConfig):
    """Forward every branch ``mode`` needs; returns (LossBreakdown, key embeddings, extras)."""
    uses_cl, uses_mp, mp_positives = _branches(mode)
    B = len(views.x)
    use_p = model.prompts_enabled
    extras = {}

    inputs, domains = [], []
    if uses_cl:
        inputs += [views.intra, views.inter]
        domains += ["intra", "inter"]
    if uses_mp:
        inputs.append(apply_mask(views.x, _Spec(views.visible)))
        domains.append("mask")
    flat = T.concat([model.add_domain_prompt(v, d, use_p) for v, d in zip(inputs, domains)], axis=0)
    feats = model.encode_flat(flat, "query")
    extras["feat_norm"] = float(np.linalg.norm(feats.data) / math.sqrt(len(feats.data)))

    mse = None
    s_predict = None
    if uses_mp:
        feat_mask = feats[(len(inputs) - 1) * B:]
        s_predict = model.decode(model.project(feat_mask, "query", "mp", use_p))
        mse = masked_mse(views.x, s_predict, views.visible, squared=cfg.squared_mse)
        extras["predict_norm"] = float(np.abs(s_predict.data).mean())

    pairs = {}
    z_key = None
    if uses_cl:
        z_key = model.project(model.encode(views.key, "key", "intra", use_p), "key", "cl", use_p).data
        z_inter_key = mixed_key(z_key, z_key[views.partner], views.lam)
        cl_feats = feats if mp_positives else feats[:2 * B]
        z = model.project(cl_feats, "query", "cl", use_p)
        pairs["intra"] = (z[:B], z_key)
        pairs["inter"] = (z[B:2 * B], z_inter_key)
        if mp_positives:
            pairs["mask"] = (z[2 * B:3 * B], z_key)
            sp = s_predict if mode == "pcm3" else T.stop_gradient(s_predict)
            z_pred = model.project(model.encode(sp, "query", "predict", use_p), "query", "cl", use_p)
            pairs["predict"] = (z_pred, z_key)
    return pairs, mse, z_key, extras


class _Spec:
    def __init__(self, visible):
        self.visible = visible


def pretrain_step(model: PCM3Model, views: Views, mode: str, cfg: TrainConfig, optimizer: T.SGD,
                  epoch=0, step=0) -> StepRecord:
    """One optimisation step: forward, loss, backward, SGD, momentum update, enqueue."""
    t0 = time.perf_counter()
    uses_cl = mode != "masked_only"
    try:
        pairs, mse, z_key, extras = forward_step(model, views, mode, cfg)
        warmup = False
        enqueued = False
        if uses_cl:
            warmup = model.step < math.ceil(model.queue.capacity / len(views.x))
            if len(model.queue) == 0:
                model.queue.enqueue(z_key)
                enqueued = True
        losses = total_loss(pairs, cfg.weights(), model.queue, mse)
        if not math.isfinite(losses.total):
            raise NumericDomainError("non-finite total loss")
    except NumericDomainError as exc:
        raise TrainingDiverged(str(exc), _diagnostics(model, views)) from exc
    optimizer.zero_grad()
    T.backward(losses.loss)
    for p in optimizer.params.values():
        # A parameter can be disconnected when its branch weight is zero.
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    optimizer.step()
    if uses_cl:
        model.momentum_update()
        if not enqueued:
            model.queue.enqueue(z_key)
    model.step += 1
    losses.loss = None
    return StepRecord(epoch, step, losses, optimizer.lr, 1000 * (time.perf_counter() - t0), warmup)


def _diagnostics(model, views):
    return {
        "inputs": {name: float(np.linalg.norm(getattr(views, name))) for name in ("x", "intra", "key", "inter")},
        "params": {name: float(np.linalg.norm(p.data)) for name, p in model.query.items()},
        "decoder": {name: float(np.linalg.norm(p.data)) for name, p in model.decoder.items()},
    }


def pretrain(dataset: LabeledDataset, cfg: TrainConfig | None = None, mode: str = "pcm3",
             out_dir=None, progress=None) -> PretrainResult:
    """Pretrain a fresh model; optionally write checkpoint, metrics CSV and resolved config."""
    cfg = cfg or TrainConfig()
    cfg.validate()
    check_mode(mode)
    if len(dataset) == 0:
        raise ConfigError("cannot pretrain on an empty dataset")
    model = build_model(cfg, mode, dataset.frames, dataset.joints)
    optimizer = T.SGD(trainable_params(model, mode), lr=cfg.lr, momentum=cfg.momentum,
                      weight_decay=cfg.weight_decay)
    records = []
    n = len(dataset)
    step = 0
    for epoch in range(cfg.epochs):
        optimizer.lr = lr_at(epoch, cfg)
        order = stream(cfg.seed, "shuffle", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            ids = order[start:start + cfg.batch_size]
            views = build_views(dataset.sequences[ids], ids, epoch, cfg)
            records.append(pretrain_step(model, views, mode, cfg, optimizer, epoch, step))
            step += 1
        if progress is not None:
            progress(epoch, records[-1])
    result = PretrainResult(model, records)
    if out_dir is not None:
        write_outputs(result, cfg, mode, out_dir)
    return result


def write_outputs(result: PretrainResult, cfg: TrainConfig, mode: str, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"checkpoint": out / "model.pcm3", "metrics": out / "metrics.csv", "config": out / "train_config.json"}
    result.model.save(paths["checkpoint"], extra={"mode": mode, "train": asdict(cfg)})
    write_metrics(result.records, paths["metrics"])
    paths["config"].write_text(json.dumps({"mode": mode, **asdict(cfg)}, indent=2, sort_keys=True) + "\n")
    return paths


def write_metrics(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for r in records:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.row().items()})


def checkpoint_roundtrip(model: PCM3Model, path) -> PCM3Model:
    model.save(path)
    return PCM3Model.load(path)
