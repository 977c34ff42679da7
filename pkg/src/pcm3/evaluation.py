"""Downstream probes on frozen, prompt-free encoder features."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .augment import apply_mask, make_mask
from .data import LabeledDataset, default_partition
from .errors import CapabilityError, ContractError, ShapeError
from .losses import masked_mse
from .model import ModelConfig, PCM3Model, _gru_params, _linear_params
from .rng import stream


@dataclass
class FeatureBank:
    features: np.ndarray  # (N, d)
    labels: np.ndarray
    split: str = "train"

    def __post_init__(self):
        if len(self.features) != len(self.labels):
            raise ShapeError("features and labels differ in length")

    def __len__(self):
        return len(self.labels)


@dataclass
class ProbeResult:
    task: str
    accuracy: float
    per_class: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _per_class(pred, labels):
    return {int(c): float(np.mean(pred[labels == c] == c)) for c in np.unique(labels)}


def extract_features(model: PCM3Model, dataset: LabeledDataset) -> FeatureBank:
    if dataset.sequences.shape[1:3] != (model.cfg.frames, model.cfg.joints):
        raise ShapeError(f"dataset shape {dataset.sequences.shape[1:3]} does not match model "
                         f"({model.cfg.frames}, {model.cfg.joints})")
    inference = model if not model.prompts_enabled else model.export_inference()
    return FeatureBank(inference.features(dataset.sequences), dataset.labels.copy(), dataset.split)


def _unit_rows(x):
    n = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.where(n > 0, n, 1.0)


def knn_predict(train: FeatureBank, test_features: np.ndarray, k: int = 1) -> np.ndarray:
    if len(train) == 0 or len(test_features) == 0:
        raise ContractError("knn needs non-empty banks")
    sim = _unit_rows(test_features) @ _unit_rows(train.features).T
    if k == 1:
        # argmax returns the first (lowest train index) maximiser.
        return train.labels[np.argmax(sim, axis=1)]
    top = np.argsort(-sim, axis=1, kind="stable")[:, :k]
    votes = train.labels[top]
    return np.array([np.bincount(v).argmax() for v in votes])


def knn_eval(train: FeatureBank, test: FeatureBank, k: int = 1) -> ProbeResult:
    """Cosine-similarity nearest-neighbour label transfer."""
    pred = knn_predict(train, test.features, k)
    return ProbeResult("knn", float(np.mean(pred == test.labels)), _per_class(pred, test.labels), {"k": k})


def linear_probe(train: FeatureBank, test: FeatureBank, epochs: int = 200, lr: float = 0.5) -> ProbeResult:
    """Softmax regression trained by full-batch gradient descent from zero weights."""
    classes = int(max(train.labels.max(), test.labels.max())) + 1
    if len(np.unique(train.labels)) < 2:
        raise ContractError("linear probe needs at least two classes in the training bank")
    X = np.asarray(train.features, dtype=np.float64)
    Y = np.eye(classes)[train.labels]
    W = np.zeros((X.shape[1], classes))
    b = np.zeros(classes)
    n = len(X)
    for _ in range(epochs):
        logits = X @ W + b
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - Y) / n
        W -= lr * (X.T @ g)
        b -= lr * g.sum(axis=0)

    def predict(F):
        return np.argmax(F @ W + b, axis=1)

    pred = predict(test.features)
    train_acc = float(np.mean(predict(X) == train.labels))
    return ProbeResult("linear", float(np.mean(pred == test.labels)), _per_class(pred, test.labels),
                       {"epochs": epochs, "lr": lr}, {"train_accuracy": train_acc, "weights": W, "bias": b})


def _count(ratio, n, bounds):
    k = int(np.floor(ratio * n + 0.5))
    if bounds is not None:
        # Clamp so the realised fraction stays inside the sampling interval.
        k = int(np.clip(k, np.ceil(bounds[0] * n - 1e-9), np.floor(bounds[1] * n + 1e-9)))
    return k


def occlude(x: np.ndarray, strategy: str, ratio: float, rng, partition=None, bounds=None):
    """Zero whole body parts (spatial) or a contiguous frame block (temporal).

    Returns the occluded copy and the realised masked fraction.
    """
    Tn, J = x.shape[:2]
    out = x.copy()
    if strategy == "spatial":
        partition = partition or default_partition(J)
        k = _count(ratio, partition.num_parts, bounds)
        joints = [j for p in rng.choice(partition.num_parts, size=k, replace=False)
                  for j in partition.joint_sets()[p]]
        out[:, joints] = 0.0
        return out, len(joints) / J
    if strategy == "temporal":
        length = _count(ratio, Tn, bounds)
        start = int(rng.integers(0, Tn - length + 1))
        out[start:start + length] = 0.0
        return out, length / Tn
    raise ValueError(f"unknown occlusion strategy {strategy!r}")


def occlusion_eval(model: PCM3Model, train: LabeledDataset, test: LabeledDataset, trials: int = 3,
                   seed: int = 0, strategies=("spatial", "temporal"), ratio_range=(0.3, 0.7),
                   train_bank: FeatureBank | None = None, probe: str = "knn") -> dict:
    """Clean-fit probe accuracy on occluded test sequences.

    ``probe="knn"`` matches occluded test features against the clean train bank;
    ``probe="linear"`` fits the softmax probe on clean train features and scores
    it on occluded ones.
    """
    if probe not in ("knn", "linear"):
        raise ValueError(f"unknown occlusion probe {probe!r}")
    train_bank = train_bank or extract_features(model, train)
    clean_bank = extract_features(model, test)
    if probe == "knn":
        clean = knn_eval(train_bank, clean_bank).accuracy

        def classify(F):
            return knn_predict(train_bank, F)
    else:
        fit = linear_probe(train_bank, clean_bank)
        clean = fit.accuracy

        def classify(F):
            return np.argmax(F @ fit.extra["weights"] + fit.extra["bias"], axis=1)
    inference = model if not model.prompts_enabled else model.export_inference()
    results = {}
    lo, hi = ratio_range
    for strategy in strategies:
        accs, ratios = [], []
        for trial in range(trials):
            g = stream(seed, "occlusion", strategy, trial)
            occluded = np.empty_like(test.sequences)
            for i, s in enumerate(test.sequences):
                occluded[i], realised = occlude(s, strategy, g.uniform(lo, hi) if hi > lo else lo, g,
                                                 bounds=(lo, hi))
                ratios.append(realised)
            pred = classify(inference.features(occluded))
            accs.append(float(np.mean(pred == test.labels)))
        mean_acc = float(np.mean(accs))
        results[strategy] = ProbeResult(
            f"occlusion-{strategy}", mean_acc, {},
            {"trials": trials, "ratio_range": list(ratio_range), "probe": probe},
            {"clean": clean, "delta": clean - mean_acc, "trial_accuracies": accs, "ratios": ratios})
    return results


def attach_untrained_decoder(model: PCM3Model, seed: int = 0) -> PCM3Model:
    """Copy of ``model`` with a freshly initialised decoder (baseline for encoders trained without one)."""
    import copy

    out = copy.deepcopy(model)
    cfg = out.cfg
    g = stream(seed, "untrained-decoder")
    out.decoder = {}
    out.decoder.update(_gru_params(g, "dec.gru", cfg.feature_dim, cfg.decoder_hidden))
    out.decoder.update(_linear_params(g, "dec.out", cfg.decoder_hidden, cfg.input_dim))
    out.cfg = ModelConfig(**{**asdict(cfg), "has_decoder": True})
    return out


def masked_pred_error(model: PCM3Model, test: LabeledDataset, ratio: float = 0.6, trials: int = 3,
                      seed: int = 0, clips: int = 4, batch_size: int = 256) -> float:
    """Mean masked reconstruction error over fresh topology masks."""
    if not model.has_decoder:
        raise CapabilityError("masked-prediction evaluation needs a model with a decoder "
                              "(contrastive_only checkpoints have none)")
    inference = model if not model.prompts_enabled else model.export_inference()
    part = default_partition(test.joints)
    errs = []
    with T.no_grad():
        for trial in range(trials):
            g = stream(seed, "maskpred", trial)
            x = test.sequences
            vis = np.stack([make_mask(x.shape[1], x.shape[2], part, ratio, clips, "topology", g).visible
                            for _ in range(len(x))])
            total, count = 0.0, 0.0
            for i in range(0, len(x), batch_size):
                xb, vb = x[i:i + batch_size], vis[i:i + batch_size]
                feat = inference.encode(apply_mask(xb, _Vis(vb)), "query", "mask")
                pred = inference.decode(inference.project(feat, "query", "mp"))
                n = (1.0 - vb).sum()
                total += masked_mse(xb, pred, vb).item() * n
                count += n
            errs.append(total / count)
    return float(np.mean(errs))


class _Vis:
    def __init__(self, visible):
        self.visible = visible


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def append_report(path, entries) -> None:
    """Append report entries to a JSON list file (created when missing)."""
    path = Path(path)
    existing = json.loads(path.read_text()) if path.exists() else []
    existing.extend(entries)
    path.write_text(json.dumps(existing, indent=2, sort_keys=True) + "\n")
