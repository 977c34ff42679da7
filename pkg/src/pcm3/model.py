"""Encoders, projector heads, decoder, prompts and the negative queue.

Parameters live in flat ``{name: Tensor}`` dictionaries.  Query and key sides
share parameter names; the key side is updated only by :meth:`PCM3Model.momentum_update`.
"""

from __future__ import annotations

import copy
import io
import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, FormatError, ShapeError
from .rng import stream

DOMAINS = ("intra", "inter", "mask", "predict")
TASKS = ("cl", "mp")

CKPT_MAGIC = b"PCM3"
CKPT_VERSION = 1


@dataclass
class ModelConfig:
    frames: int = 16
    joints: int = 15
    hidden: int = 32  # per GRU direction; feature dim is 2 * hidden
    embed: int = 32
    prompt_dim: int = 16
    decoder_hidden: int = 32
    queue_size: int = 512
    momentum: float = 0.99
    has_decoder: bool = True
    seed: int = 0

    @property
    def feature_dim(self) -> int:
        return 2 * self.hidden

    @property
    def input_dim(self) -> int:
        return 3 * self.joints

    def validate(self):
        if self.prompt_dim >= self.feature_dim:
            raise ConfigError("task prompt dim r must be smaller than feature dim d")
        if not 0.0 <= self.momentum <= 1.0:
            raise ConfigError("momentum coefficient must lie in [0, 1]")
        if min(self.hidden, self.embed, self.decoder_hidden, self.queue_size, self.prompt_dim) < 1:
            raise ConfigError("model sizes must be positive")


class MemoryQueue:
    """Fixed-capacity FIFO ring buffer of unit embeddings."""

    def __init__(self, capacity: int, dim: int):
        self.capacity = int(capacity)
        self.dim = int(dim)
        self._buf = np.zeros((self.capacity, self.dim))
        self._cursor = 0
        self._count = 0

    def __len__(self):
        return self._count

    def enqueue(self, emb) -> None:
        emb = np.asarray(emb, dtype=np.float64).reshape(-1, self.dim)
        if len(emb) == 0:
            return
        norms = np.linalg.norm(emb, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ContractError(f"queue accepts unit vectors only (norms {norms.min():.6g}..{norms.max():.6g})")
        if len(emb) > self.capacity:
            emb = emb[-self.capacity:]
        idx = (self._cursor + np.arange(len(emb))) % self.capacity
        self._buf[idx] = emb
        self._cursor = int((self._cursor + len(emb)) % self.capacity)
        self._count = min(self.capacity, self._count + len(emb))

    def contents(self) -> np.ndarray:
        """Stored embeddings, oldest first."""
        if self._count < self.capacity:
            return self._buf[:self._count].copy()
        return np.roll(self._buf, -self._cursor, axis=0)

    def copy(self) -> "MemoryQueue":
        return copy.deepcopy(self)


def _uniform(g, bound, shape):
    return T.Tensor(g.uniform(-bound, bound, size=shape), requires_grad=True)


def _gru_params(g, prefix, d_in, h):
    b = 1.0 / np.sqrt(h)
    return {
        f"{prefix}.wx": _uniform(g, b, (d_in, 3 * h)),
        f"{prefix}.wh": _uniform(g, b, (h, 3 * h)),
        f"{prefix}.bx": _uniform(g, b, (3 * h,)),
        f"{prefix}.bh": _uniform(g, b, (3 * h,)),
    }


def _linear_params(g, prefix, d_in, d_out):
    b = 1.0 / np.sqrt(d_in)
    return {f"{prefix}.w": _uniform(g, b, (d_in, d_out)), f"{prefix}.b": _uniform(g, b, (d_out,))}


class PCM3Model:
    def __init__(self, cfg: ModelConfig | None = None):
        self.cfg = cfg = cfg or ModelConfig()
        cfg.validate()
        g = stream(cfg.seed, "model-init")
        d, h = cfg.feature_dim, cfg.hidden
        self.query = {}
        self.query.update(_gru_params(g, "enc.fwd", cfg.input_dim, h))
        self.query.update(_gru_params(g, "enc.bwd", cfg.input_dim, h))
        self.query.update(_linear_params(g, "proj.l1", d, d))
        self.query.update(_linear_params(g, "proj.l2", d, cfg.embed))
        self.key = {name: T.Tensor(p.data.copy()) for name, p in self.query.items()}
        self.decoder = {}
        if cfg.has_decoder:
            self.decoder.update(_gru_params(g, "dec.gru", d, cfg.decoder_hidden))
            self.decoder.update(_linear_params(g, "dec.out", cfg.decoder_hidden, cfg.input_dim))
        self.prompts = {f"prompt.{dom}": T.Tensor(np.zeros(cfg.input_dim), requires_grad=True) for dom in DOMAINS}
        for task in TASKS:
            self.prompts[f"prompt.{task}"] = T.Tensor(np.zeros(cfg.prompt_dim), requires_grad=True)
        self.channels = np.sort(g.choice(d, size=cfg.prompt_dim, replace=False)).astype(np.int64)
        self.queue = MemoryQueue(cfg.queue_size, cfg.embed)
        self.prompts_enabled = True
        self.step = 0
        self.extra = {}

    @property
    def has_decoder(self) -> bool:
        return bool(self.decoder)

    # -- parameter groups -------------------------------------------------------

    def encoder_params(self, side="query"):
        src = self.query if side == "query" else self.key
        return {k: v for k, v in src.items() if k.startswith("enc.")}

    def all_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for group, params in (("query", self.query), ("key", self.key), ("decoder", self.decoder),
                              ("prompts", self.prompts)):
            for name, p in params.items():
                out[f"{group}/{name}"] = p.data
        return out

    def checksum(self) -> int:
        crc = 0
        for name, arr in self.all_arrays().items():
            crc = zlib.crc32(name.encode() + arr.tobytes(), crc)
        return crc

    # -- forward pieces ---------------------------------------------------------

    def _check_input(self, x):
        x = T.as_tensor(x)
        if x.ndim == 3:
            x = T.reshape(x, (1, *x.shape))
        if x.ndim != 4 or x.shape[1:] != (self.cfg.frames, self.cfg.joints, 3):
            raise ShapeError(f"expected (B, {self.cfg.frames}, {self.cfg.joints}, 3) input, got {x.shape}")
        return x

    def _use_prompts(self, prompts_enabled):
        return self.prompts_enabled if prompts_enabled is None else prompts_enabled

    def add_domain_prompt(self, x, domain, prompts_enabled=None):
        """Add the domain prompt to every frame; returns a (B, T, J*3) tensor."""
        x = self._check_input(x)
        flat = T.reshape(x, (x.shape[0], self.cfg.frames, self.cfg.input_dim))
        if self._use_prompts(prompts_enabled):
            if domain not in DOMAINS:
                raise ConfigError(f"unknown domain {domain!r}")
            flat = flat + self.prompts[f"prompt.{domain}"]
        return flat

    def encode_flat(self, flat, side="query"):
        """Bi-GRU over a prompted (B, T, J*3) input; returns (B, d) features."""
        p = self.query if side == "query" else self.key
        fwd = T.gru(flat, p["enc.fwd.wx"], p["enc.fwd.wh"], p["enc.fwd.bx"], p["enc.fwd.bh"])
        rev = T.slice_(flat, (slice(None), slice(None, None, -1)))
        bwd = T.gru(rev, p["enc.bwd.wx"], p["enc.bwd.wh"], p["enc.bwd.bx"], p["enc.bwd.bh"])
        return T.concat([fwd[:, -1], bwd[:, -1]], axis=-1)

    def encode(self, x, side="query", domain="intra", prompts_enabled=None):
        if side == "key":
            with T.no_grad():
                return self.encode_flat(self.add_domain_prompt(x, domain, prompts_enabled), side="key")
        return self.encode_flat(self.add_domain_prompt(x, domain, prompts_enabled), side="query")

    def add_task_prompt(self, feat, task, prompts_enabled=None):
        if not self._use_prompts(prompts_enabled):
            return feat
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}")
        scatter = np.zeros((self.cfg.prompt_dim, self.cfg.feature_dim))
        scatter[np.arange(self.cfg.prompt_dim), self.channels] = 1.0
        return feat + T.matmul(self.prompts[f"prompt.{task}"], scatter)

    def head(self, feat, side="query"):
        p = self.query if side == "query" else self.key
        hid = T.relu(feat @ p["proj.l1.w"] + p["proj.l1.b"])
        return T.l2_normalize(hid @ p["proj.l2.w"] + p["proj.l2.b"])

    def project(self, feat, side="query", task="cl", prompts_enabled=None):
        """``cl``: unit embedding through the side's projector.  ``mp``: prompted decoder input."""
        feat = T.as_tensor(feat)
        if feat.shape[-1] != self.cfg.feature_dim:
            raise ShapeError(f"feature dim {feat.shape[-1]} != {self.cfg.feature_dim}")
        if side == "key":
            with T.no_grad():
                out = self.add_task_prompt(feat, task, prompts_enabled)
                return self.head(out, "key") if task == "cl" else out
        out = self.add_task_prompt(feat, task, prompts_enabled)
        return self.head(out, "query") if task == "cl" else out

    def decode(self, feat_mp):
        """Feature-conditioned recurrent decoder: (B, d) -> (B, T, J, 3)."""
        if not self.has_decoder:
            raise ContractError("model has no decoder")
        feat_mp = T.as_tensor(feat_mp)
        if feat_mp.ndim == 1:
            feat_mp = T.reshape(feat_mp, (1, -1))
        B, d = feat_mp.shape
        tiled = T.concat([T.reshape(feat_mp, (B, 1, d))] * self.cfg.frames, axis=1)
        p = self.decoder
        hs = T.gru(tiled, p["dec.gru.wx"], p["dec.gru.wh"], p["dec.gru.bx"], p["dec.gru.bh"])
        out = hs @ p["dec.out.w"] + p["dec.out.b"]
        return T.reshape(out, (B, self.cfg.frames, self.cfg.joints, 3))

    # -- key-side maintenance ---------------------------------------------------

    def momentum_update(self, alpha=None):
        a = self.cfg.momentum if alpha is None else alpha
        for name, pk in self.key.items():
            pk.data *= a
            pk.data += (1.0 - a) * self.query[name].data

    # -- export ------------------------------------------------------------------

    def export_inference(self) -> "PCM3Model":
        """Copy with the prompt path disabled, as used by downstream probes."""
        out = copy.deepcopy(self)
        out.prompts_enabled = False
        return out

    def features(self, x, batch_size=256) -> np.ndarray:
        """Query-encoder features of a stacked (N, T, J, 3) array, without tape."""
        x = np.asarray(x, dtype=np.float64)
        out = []
        with T.no_grad():
            for i in range(0, len(x), batch_size):
                out.append(self.encode(x[i:i + batch_size], "query", "intra").data)
        return np.concatenate(out) if out else np.zeros((0, self.cfg.feature_dim))

    # -- checkpoint ---------------------------------------------------------------

    def save(self, path, extra=None) -> None:
        Path(path).write_bytes(self.to_bytes(extra))

    def to_bytes(self, extra=None) -> bytes:
        buf = io.BytesIO()
        buf.write(CKPT_MAGIC)
        buf.write(struct.pack("<I", CKPT_VERSION))
        config = {"model": asdict(self.cfg), "prompts_enabled": self.prompts_enabled, "extra": extra or {}}
        blob = json.dumps(config, sort_keys=True).encode()
        buf.write(struct.pack("<I", len(blob)) + blob)
        arrays = self.all_arrays()
        buf.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            nb = name.encode()
            buf.write(struct.pack("<H", len(nb)) + nb)
            buf.write(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        buf.write(struct.pack("<I", len(self.channels)))
        buf.write(self.channels.astype("<u4").tobytes())
        q = self.queue
        buf.write(struct.pack("<4I", q.capacity, q.dim, q._count, q._cursor))
        buf.write(q._buf.astype("<f8").tobytes())
        state = json.dumps({"seed": self.cfg.seed, "step": self.step}, sort_keys=True).encode()
        buf.write(struct.pack("<I", len(state)) + state)
        payload = buf.getvalue()
        return payload + struct.pack("<I", zlib.crc32(payload))

    @classmethod
    def load(cls, path) -> "PCM3Model":
        return cls.from_bytes(Path(path).read_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes) -> "PCM3Model":
        if len(raw) < 8 or raw[:4] != CKPT_MAGIC:
            raise FormatError("bad magic, not a PCM3 checkpoint", offset=0)
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=4)
        if len(raw) < 12:
            raise FormatError("truncated checkpoint", offset=len(raw))
        (crc,) = struct.unpack_from("<I", raw, len(raw) - 4)
        if zlib.crc32(raw[:-4]) != crc:
            raise FormatError("checksum mismatch, checkpoint is corrupt", offset=len(raw) - 4)
        r = _Reader(raw[:-4], 8)
        config = json.loads(r.take(r.u32()).decode())
        model = cls(ModelConfig(**config["model"]))
        model.prompts_enabled = config["prompts_enabled"]
        groups = {"query": model.query, "key": model.key, "decoder": model.decoder, "prompts": model.prompts}
        for _ in range(r.u32()):
            name = r.take(struct.unpack("<H", r.take(2))[0]).decode()
            ndim = struct.unpack("<B", r.take(1))[0]
            shape = struct.unpack(f"<{ndim}I", r.take(4 * ndim))
            data = np.frombuffer(r.take(8 * int(np.prod(shape))), dtype="<f8").astype(np.float64).reshape(shape)
            group, pname = name.split("/", 1)
            target = groups[group].get(pname)
            if target is None or target.shape != data.shape:
                raise FormatError(f"unexpected parameter {name} {shape}", offset=r.pos)
            target.data = data.copy()
        n = r.u32()
        model.channels = np.frombuffer(r.take(4 * n), dtype="<u4").astype(np.int64)
        cap, dim, count, cursor = struct.unpack("<4I", r.take(16))
        q = MemoryQueue(cap, dim)
        q._buf = np.frombuffer(r.take(8 * cap * dim), dtype="<f8").astype(np.float64).reshape(cap, dim)
        q._count, q._cursor = count, cursor
        model.queue = q
        state = json.loads(r.take(r.u32()).decode())
        model.step = state["step"]
        model.extra = config.get("extra", {})
        if r.pos != len(r.raw):
            raise FormatError("trailing bytes in checkpoint", offset=r.pos)
        return model


class _Reader:
    def __init__(self, raw, pos):
        self.raw, self.pos = raw, pos

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise FormatError("truncated checkpoint", offset=self.pos)
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]
