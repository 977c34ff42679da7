"""Data views: intra-skeleton transforms, inter-skeleton mixes and masking.

All functions are pure given their ``rng`` argument (a ``numpy.random.Generator``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import BodyPartition, check_sequence
from .errors import ConfigError, ShapeError

MIX_KINDS = ("mixup", "cutmix", "resizemix")


@dataclass
class IntraParams:
    crop_min: float = 0.5
    crop_max: float = 1.0
    shear: float = 0.5
    jitter_prob: float = 0.15
    jitter_amp: float = 0.05


@dataclass
class MixResult:
    mixed: np.ndarray
    lam: float
    kind: str
    sources: tuple[int, int] = (0, 1)


@dataclass
class MaskSpec:
    visible: np.ndarray  # (T, J) of {0, 1}; 1 = visible
    ratio: float  # realised masked fraction
    clips: int
    strategy: str

    @property
    def masked_count(self) -> int:
        return int(self.visible.size - self.visible.sum())


def resize_time(s: np.ndarray, length: int) -> np.ndarray:
    """Linearly resample the frame axis of ``s`` to ``length`` frames (endpoints kept)."""
    src = s.shape[0]
    if length == src:
        return s.copy()
    pos = np.linspace(0.0, src - 1, length) if length > 1 else np.zeros(1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    w = (pos - lo).reshape(-1, *([1] * (s.ndim - 1)))
    return (1.0 - w) * s[lo] + w * s[hi]


def crop_resize(s, ratio: float, start: int = 0) -> np.ndarray:
    s = check_sequence(s)
    T = s.shape[0]
    length = max(2, int(round(ratio * T)))
    start = min(max(0, start), T - length)
    return resize_time(s[start:start + length], T)


def shear_matrix(factors) -> np.ndarray:
    """3x3 matrix with unit diagonal and the six given off-diagonal factors."""
    m = np.eye(3)
    m[~np.eye(3, dtype=bool)] = np.asarray(factors, dtype=np.float64)
    return m


def shear(s, factors) -> np.ndarray:
    return check_sequence(s) @ shear_matrix(factors).T


def jitter(s, rng, prob: float, amp: float) -> np.ndarray:
    s = check_sequence(s)
    if prob <= 0 or amp <= 0:
        return s.copy()
    chosen = rng.random(s.shape[1]) < prob
    noise = rng.uniform(-amp, amp, size=s.shape)
    return s + noise * chosen[None, :, None]


def intra_transform(s, params: IntraParams, rng) -> np.ndarray:
    """Temporal crop-resize, then a random shear, then joint jittering."""
    s = check_sequence(s)
    T = s.shape[0]
    ratio = rng.uniform(params.crop_min, params.crop_max)
    length = max(2, int(round(ratio * T)))
    start = int(rng.integers(0, T - length + 1))
    out = resize_time(s[start:start + length], T)
    out = out @ shear_matrix(rng.uniform(-params.shear, params.shear, size=6)).T
    return jitter(out, rng, params.jitter_prob, params.jitter_amp)


def _same_shape(s1, s2):
    s1, s2 = check_sequence(s1), check_sequence(s2)
    if s1.shape != s2.shape:
        raise ShapeError(f"mix inputs differ in shape: {s1.shape} vs {s2.shape}")
    return s1, s2


def mixup(s1, s2, lam: float) -> MixResult:
    s1, s2 = _same_shape(s1, s2)
    # w2 = 1 - w1 (not lam) makes mixup(s1, s2, lam) == mixup(s2, s1, 1 - lam) bit for bit.
    w1 = 1.0 - lam
    w2 = 1.0 - w1
    return MixResult(w1 * s1 + w2 * s2, float(lam), "mixup")


def _region(T, J, target, rng, partition=None):
    """Pick a frame interval and a joint set whose cell count approximates ``target`` * T * J."""
    if target <= 0:
        return 0, 0, np.zeros(0, dtype=np.int64)
    best = None
    for n_joints in range(1, J + 1):
        frames = int(round(target * T * J / n_joints))
        if 1 <= frames <= T:
            err = abs(frames * n_joints / (T * J) - target)
            if best is None or err < best[0] - 1e-12:
                best = (err, frames, n_joints)
    if best is None:  # target below one cell
        return 0, 0, np.zeros(0, dtype=np.int64)
    _, frames, n_joints = best
    start = int(rng.integers(0, T - frames + 1))
    if partition is not None and n_joints % 3 == 0 and partition.equal_sized():
        parts = rng.choice(partition.num_parts, size=n_joints // 3, replace=False)
        joints = np.sort(np.concatenate([partition.joint_sets()[p] for p in parts]).astype(np.int64))
    else:
        joints = np.sort(rng.choice(J, size=n_joints, replace=False))
    return start, frames, joints


def cutmix(s1, s2, rng, target_ratio: float, partition: BodyPartition | None = None) -> MixResult:
    """Paste a (frame interval x joint set) block of ``s2`` into ``s1``.

    The reported lambda is the exact replaced-cell fraction.
    """
    s1, s2 = _same_shape(s1, s2)
    T, J = s1.shape[:2]
    start, frames, joints = _region(T, J, target_ratio, rng, partition)
    out = s1.copy()
    if frames:
        out[start:start + frames, joints] = s2[start:start + frames, joints]
    return MixResult(out, frames * len(joints) / (T * J), "cutmix")


def resizemix(s1, s2, rng, target_ratio: float) -> MixResult:
    """Temporally downsample ``s2`` into a frame interval of ``s1`` (all joints)."""
    s1, s2 = _same_shape(s1, s2)
    T = s1.shape[0]
    length = int(round(np.clip(target_ratio, 0.0, 1.0) * T))
    out = s1.copy()
    if length:
        start = int(rng.integers(0, T - length + 1))
        out[start:start + length] = resize_time(s2, length) if length > 1 else s2.mean(axis=0, keepdims=True)
    return MixResult(out, length / T, "resizemix")


def random_mix(s1, s2, rng, partition=None) -> MixResult:
    """Pick one of the three mixes uniformly and sample its lambda."""
    kind = MIX_KINDS[int(rng.integers(0, 3))]
    if kind == "mixup":
        return mixup(s1, s2, rng.uniform(0.0, 1.0))
    target = rng.uniform(0.2, 0.8)
    if kind == "cutmix":
        return cutmix(s1, s2, rng, target, partition)
    return resizemix(s1, s2, rng, target)


def make_mask(T: int, J: int, partition: BodyPartition, ratio: float, clips: int = 4,
              strategy: str = "topology", rng=None) -> MaskSpec:
    """Visibility mask over (frame, joint).

    ``topology`` masks ``ratio * num_parts`` whole parts in every temporal clip
    (clips are equal-length, the last one absorbing any remainder).
    ``random`` draws Bernoulli(ratio) cells, then adds or removes cells until
    exactly ``round(ratio * T * J)`` are masked.
    """
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio {ratio} outside [0, 1]")
    visible = np.ones((T, J))
    if strategy == "topology":
        if partition.num_joints != J:
            raise ConfigError("partition does not match joint count")
        k = ratio * partition.num_parts
        if abs(k - round(k)) > 1e-9:
            raise ConfigError(f"topology masking needs ratio to be a multiple of 1/{partition.num_parts}")
        if round(k) and not partition.equal_sized():
            raise ConfigError("topology masking with a non-zero ratio needs equal-sized parts")
        k = int(round(k))
        clips = max(1, min(int(clips), T))
        bounds = [c * (T // clips) for c in range(clips)] + [T]
        sets = partition.joint_sets()
        for c in range(clips):
            if k == 0:
                break
            for p in rng.choice(partition.num_parts, size=k, replace=False):
                visible[bounds[c]:bounds[c + 1], list(sets[p])] = 0.0
    elif strategy == "random":
        target = int(round(ratio * T * J))
        masked = (rng.random((T, J)) < ratio).reshape(-1)
        diff = target - int(masked.sum())
        if diff > 0:
            masked[rng.choice(np.flatnonzero(~masked), size=diff, replace=False)] = True
        elif diff < 0:
            masked[rng.choice(np.flatnonzero(masked), size=-diff, replace=False)] = False
        visible = (~masked).reshape(T, J).astype(np.float64)
    else:
        raise ConfigError(f"unknown mask strategy {strategy!r}")
    realised = 1.0 - visible.mean()
    return MaskSpec(visible, float(realised), clips, strategy)


def apply_mask(s, spec: MaskSpec) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    vis = spec.visible
    if s.shape[:-1][-vis.ndim:] != vis.shape or s.shape[-1] != 3:
        raise ShapeError(f"mask {spec.visible.shape} does not match sequence {s.shape}")
    return s * vis[..., None]
