"""Skeleton sequences, body-part topology and the synthetic motion dataset.

A skeleton sequence is a float64 array of shape (T, J, 3).  Datasets stack
sequences into (N, T, J, 3) alongside integer labels.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError
from .rng import stream

PART_NAMES = ("trunk", "left-hand", "right-hand", "left-leg", "right-leg")

MAGIC = b"SKDS"
VERSION = 1


def check_sequence(s, num_joints=None) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if s.ndim != 3 or s.shape[2] != 3 or s.shape[0] < 2:
        raise ShapeError(f"expected a (T>=2, J, 3) skeleton sequence, got {s.shape}")
    if num_joints is not None and s.shape[1] != num_joints:
        raise ShapeError(f"expected {num_joints} joints, got {s.shape[1]}")
    if not np.all(np.isfinite(s)):
        raise ShapeError("skeleton sequence has non-finite coordinates")
    return s


@dataclass(frozen=True)
class BodyPartition:
    parts: tuple[tuple[str, tuple[int, ...]], ...]

    def __post_init__(self):
        seen = [j for _, joints in self.parts for j in joints]
        if len(seen) != len(set(seen)):
            raise ConfigError("body parts overlap")
        if sorted(seen) != list(range(len(seen))):
            raise ConfigError("body parts must cover joints 0..J-1 exactly")

    @property
    def num_joints(self) -> int:
        return sum(len(j) for _, j in self.parts)

    @property
    def num_parts(self) -> int:
        return len(self.parts)

    def joints(self, name: str) -> tuple[int, ...]:
        return dict(self.parts)[name]

    def joint_sets(self) -> list[tuple[int, ...]]:
        return [joints for _, joints in self.parts]

    def equal_sized(self) -> bool:
        return len({len(j) for _, j in self.parts}) == 1

    def part_of_joint(self) -> np.ndarray:
        out = np.empty(self.num_joints, dtype=np.int64)
        for p, (_, joints) in enumerate(self.parts):
            out[list(joints)] = p
        return out


def default_partition(num_joints: int = 15, table=None) -> BodyPartition:
    """Five named parts; J=15 maps to contiguous triples in ``PART_NAMES`` order."""
    if table is not None:
        return BodyPartition(tuple((name, tuple(table[name])) for name in PART_NAMES))
    if num_joints != 15:
        raise ConfigError(f"no built-in body partition for J={num_joints}; pass an explicit table")
    return BodyPartition(tuple((name, (3 * i, 3 * i + 1, 3 * i + 2)) for i, name in enumerate(PART_NAMES)))


def center_normalize(s, root: int = 0) -> np.ndarray:
    """Translate every frame so that joint ``root`` sits at the origin."""
    s = check_sequence(s)
    if not 0 <= root < s.shape[1]:
        raise ShapeError(f"root joint {root} out of range for J={s.shape[1]}")
    return s - s[:, root:root + 1, :]


@dataclass
class SynthConfig:
    classes: int = 8
    train_per_class: int = 100
    test_per_class: int = 25
    frames: int = 16
    joints: int = 15
    noise: float = 0.02
    seed: int = 0

    def validate(self):
        if self.classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.train_per_class < 1 or self.test_per_class < 1:
            raise ConfigError("per-class counts must be >= 1")
        if self.frames < 2:
            raise ConfigError("need at least 2 frames")
        if self.noise < 0:
            raise ConfigError("noise must be non-negative")
        default_partition(self.joints)


@dataclass
class LabeledDataset:
    sequences: np.ndarray  # (N, T, J, 3)
    labels: np.ndarray  # (N,)
    num_classes: int
    split: str = "train"
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.sequences = np.asarray(self.sequences, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.sequences.ndim != 4 or self.sequences.shape[-1] != 3:
            raise ShapeError(f"sequences must be (N, T, J, 3), got {self.sequences.shape}")
        if len(self.labels) != len(self.sequences):
            raise ShapeError("labels and sequences differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ShapeError("label outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        if not isinstance(other, LabeledDataset):
            return NotImplemented
        return (self.num_classes == other.num_classes and self.split == other.split
                and self.sequences.shape == other.sequences.shape
                and np.array_equal(self.sequences, other.sequences)
                and np.array_equal(self.labels, other.labels))

    @property
    def frames(self) -> int:
        return self.sequences.shape[1]

    @property
    def joints(self) -> int:
        return self.sequences.shape[2]


# Per-(joint, axis) amplitude scale shared by all classes (metres).
BASE_AMPLITUDE = (0.15, 0.90)


def class_tables(cfg: SynthConfig):
    """Per-class frequency (C, J) and per-axis amplitude (C, J, 3) tables.

    Each (class, joint) pair draws an integer frequency in {1, 2, 3} cycles per
    sequence and scales a shared per-joint amplitude by a factor in [0, 2) per axis.
    """
    shared = stream(cfg.seed, "shared-amplitude").uniform(*BASE_AMPLITUDE, size=(cfg.joints, 3))
    freqs = np.empty((cfg.classes, cfg.joints))
    amps = np.empty((cfg.classes, cfg.joints, 3))
    for c in range(cfg.classes):
        for j in range(cfg.joints):
            g = stream(cfg.seed, "class-table", c, j)
            freqs[c, j] = g.integers(1, 4)
            amps[c, j] = shared[j] * g.uniform(0.0, 2.0, size=3)
    return freqs, amps


def instance_phases(cfg: SynthConfig, split: str, c: int, i: int) -> np.ndarray:
    """The (J, 3) phase vector of one instance, from its own counter-based stream."""
    return stream(cfg.seed, "instance", split, c, i).uniform(0.0, 2 * np.pi, size=(cfg.joints, 3))


def _make_split(cfg: SynthConfig, split: str, per_class: int, tables) -> LabeledDataset:
    freqs, amps = tables
    t = np.arange(cfg.frames)[:, None, None] / cfg.frames
    seqs = np.empty((cfg.classes * per_class, cfg.frames, cfg.joints, 3))
    labels = np.repeat(np.arange(cfg.classes), per_class)
    for c in range(cfg.classes):
        for i in range(per_class):
            phase = instance_phases(cfg, split, c, i)
            s = amps[c] * np.sin(2 * np.pi * freqs[c][:, None] * t + phase)
            if cfg.noise > 0:
                s = s + stream(cfg.seed, "noise", split, c, i).normal(0.0, cfg.noise, size=s.shape)
            seqs[c * per_class + i] = s
    # Quantise to float32 so the on-disk format is lossless.
    seqs = seqs.astype(np.float32).astype(np.float64)
    return LabeledDataset(seqs, labels, cfg.classes, split=split, seed=cfg.seed)


def generate_synthetic(cfg: SynthConfig | None = None):
    """Build (train, test) splits of class-specific sinusoid motion.

    Joint j of class c moves as A[c, j] * sin(2 pi f[c, j] t / T + phi) around
    the origin.  Instances of a class differ only in phi, drawn per
    (joint, axis) from the instance's own stream, plus Gaussian noise.
    """
    cfg = cfg or SynthConfig()
    cfg.validate()
    tables = class_tables(cfg)
    train = _make_split(cfg, "train", cfg.train_per_class, tables)
    test = _make_split(cfg, "test", cfg.test_per_class, tables)
    return train, test


# -- binary format ---------------------------------------------------------------


def _manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save(ds: LabeledDataset, path) -> None:
    path = Path(path)
    n, t, j = ds.sequences.shape[:3]
    header = MAGIC + struct.pack("<5I", VERSION, n, t, j, ds.num_classes)
    body = ds.labels.astype("<u4").tobytes() + ds.sequences.astype("<f4").tobytes()
    path.write_bytes(header + body)
    manifest = {"classes": ds.num_classes, "split": ds.split, "seed": ds.seed}
    _manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load(path) -> LabeledDataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError("bad magic, not an SKDS dataset", offset=0)
    if len(raw) < 24:
        raise FormatError("truncated header", offset=len(raw))
    version, n, t, j, c = struct.unpack_from("<5I", raw, 4)
    if version != VERSION:
        raise FormatError(f"unsupported SKDS version {version}", offset=4)
    off = 24
    expected = off + 4 * n + 4 * n * t * j * 3
    if len(raw) < expected:
        raise FormatError(f"truncated file: expected {expected} bytes, got {len(raw)}", offset=len(raw))
    if len(raw) > expected:
        raise FormatError(f"trailing bytes after payload ({len(raw) - expected})", offset=expected)
    labels = np.frombuffer(raw, dtype="<u4", count=n, offset=off).astype(np.int64)
    if n and labels.max() >= c:
        bad = int(np.argmax(labels >= c))
        raise FormatError(f"label {labels[bad]} >= class count {c}", offset=off + 4 * bad)
    off += 4 * n
    coords = np.frombuffer(raw, dtype="<f4", count=n * t * j * 3, offset=off)
    coords = coords.astype(np.float64).reshape(n, t, j, 3)
    if not np.all(np.isfinite(coords)):
        bad = int(np.argmax(~np.isfinite(coords.reshape(-1))))
        raise FormatError("non-finite coordinate", offset=off + 4 * bad)
    split, seed = "train", 0
    mpath = _manifest_path(path)
    if mpath.exists():
        manifest = json.loads(mpath.read_text())
        split, seed = manifest.get("split", split), manifest.get("seed", seed)
    return LabeledDataset(coords, labels, c, split=split, seed=seed)
