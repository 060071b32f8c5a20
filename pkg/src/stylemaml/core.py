"""Shared domain types, parameter partitioning, seeding and checkpoint I/O."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
import torch


class ConfigError(ValueError):
    pass


class PartitionError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class PhaseError(RuntimeError):
    pass


class DataError(RuntimeError):
    pass


class ContaminationError(DataError):
    pass


# ---------------------------------------------------------------------------
# Records


@dataclass
class Utterance:
    """One training record: phoneme ids, mel frames and token-level targets."""

    tokens: np.ndarray  # int64 [L]
    mel: np.ndarray  # float32 [T, bins]
    durations: np.ndarray  # int64 [L]
    pitch: np.ndarray  # float32 [L]
    energy: np.ndarray  # float32 [L]
    speaker_id: int
    prosody_id: int
    uid: str = ""

    @property
    def n_frames(self) -> int:
        return int(self.mel.shape[0])

    @property
    def pseudo_speaker(self) -> tuple[int, int]:
        return (self.speaker_id, self.prosody_id)

    def validate(self, alphabet_size: int | None = None) -> None:
        n = len(self.tokens)
        if n == 0:
            raise DataError(f"{self.uid}: empty token sequence")
        if alphabet_size is not None and int(self.tokens.max()) >= alphabet_size:
            raise DataError(f"{self.uid}: token id out of range")
        if not (len(self.durations) == len(self.pitch) == len(self.energy) == n):
            raise DataError(f"{self.uid}: token-level arrays misaligned")
        if (self.durations < 1).any():
            raise DataError(f"{self.uid}: durations must be >= 1")
        if int(self.durations.sum()) != self.n_frames:
            raise DataError(
                f"{self.uid}: sum(durations)={int(self.durations.sum())} != frames={self.n_frames}"
            )
        if self.mel.ndim != 2 or self.n_frames < 1:
            raise DataError(f"{self.uid}: mel must be a non-empty [frames, bins] matrix")
        if not np.isfinite(self.mel).all():
            raise DataError(f"{self.uid}: non-finite mel values")


SPLITS = ("pretrain", "meta_train", "meta_val", "meta_test")


@dataclass
class Corpus:
    utterances: list[Utterance]
    split: str
    speaker_ids: set[int] = field(default_factory=set)
    prosody_ids: set[int] = field(default_factory=set)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split tag {self.split!r}")
        if not self.utterances:
            raise DataError(f"corpus {self.split!r} is empty")
        if not self.speaker_ids:
            self.speaker_ids = {u.speaker_id for u in self.utterances}
        if not self.prosody_ids:
            self.prosody_ids = {u.prosody_id for u in self.utterances}
        for u in self.utterances:
            if u.speaker_id not in self.speaker_ids or u.prosody_id not in self.prosody_ids:
                raise DataError(f"{u.uid}: ids outside the declared corpus sets")

    def __len__(self) -> int:
        return len(self.utterances)

    def by_pseudo_speaker(self) -> dict[tuple[int, int], list[Utterance]]:
        groups: dict[tuple[int, int], list[Utterance]] = {}
        for u in self.utterances:
            groups.setdefault(u.pseudo_speaker, []).append(u)
        return dict(sorted(groups.items()))

    def by_speaker(self) -> dict[int, list[Utterance]]:
        groups: dict[int, list[Utterance]] = {}
        for u in self.utterances:
            groups.setdefault(u.speaker_id, []).append(u)
        return dict(sorted(groups.items()))


@dataclass
class TaskEpisode:
    pseudo_speaker: tuple[int, int]
    support: list[Utterance]
    query: list[Utterance]

    def __post_init__(self):
        if len(self.support) != len(self.query):
            raise DataError("support and query sizes differ")
        ids = [id(u) for u in self.support] + [id(u) for u in self.query]
        if len(set(ids)) != len(ids):
            raise DataError("support and query overlap")
        for u in self.support + self.query:
            if u.pseudo_speaker != self.pseudo_speaker:
                raise DataError("episode mixes pseudo-speakers")


# ---------------------------------------------------------------------------
# Configs


@dataclass
class TrainConfig:
    n_shots: int = 5
    meta_batch_size: int = 10
    inner_lr: float = 1e-3
    meta_lr: float = 1e-4
    pretrain_lr: float = 1e-3
    adapt_lr: float = 1e-3
    adapt_lr_decay: float = 0.9998
    alpha_da: float = 0.01
    alpha_orth: float = 0.02
    grl_lambda: float = 1.0
    inner_steps: int = 3
    second_order: bool = True
    recon_on_raw: bool = True
    recon_reduction: str = "frame"
    pretrain_batch_size: int = 16
    lut_reset_std: float = 0.01
    meta_val_every: int = 25
    meta_val_episodes: int = 20
    seed: int = 0

    def validate(self) -> "TrainConfig":
        for name in ("inner_lr", "meta_lr", "pretrain_lr", "adapt_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"train.{name} must be > 0")
        if not 0 < self.adapt_lr_decay <= 1:
            raise ConfigError("train.adapt_lr_decay must be in (0, 1]")
        if self.inner_steps < 1:
            raise ConfigError("train.inner_steps must be >= 1")
        if self.n_shots < 1 or self.meta_batch_size < 1:
            raise ConfigError("train.n_shots and train.meta_batch_size must be >= 1")
        if self.grl_lambda < 0:
            raise ConfigError("train.grl_lambda must be >= 0")
        if self.recon_reduction not in ("element", "frame"):
            raise ConfigError("train.recon_reduction must be 'element' or 'frame'")
        return self


def config_from_dict(cls, data: Mapping[str, Any]):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            v = data[f.name]
            if isinstance(v, list):
                v = tuple(v)
            kwargs[f.name] = v
    return cls(**kwargs)


# ---------------------------------------------------------------------------
# Seeds


def child_seed(seed: int, *names: str | int) -> int:
    """Stable 32-bit seed derived from a root seed and a path of names."""
    key = [int(seed) & 0xFFFFFFFF]
    for n in names:
        key.append(zlib.crc32(str(n).encode()) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(key).generate_state(1)[0])


def child_rng(seed: int, *names: str | int) -> np.random.Generator:
    return np.random.default_rng(child_seed(seed, *names))


def set_deterministic(threads: int = 1) -> None:
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


# ---------------------------------------------------------------------------
# Parameter partition

SHARED, SPEAKER, PROSODY = "shared", "speaker", "prosody"

# (prefix, group); every trainable parameter must match exactly one prefix.
PARTITION_RULES: tuple[tuple[str, str], ...] = (
    ("text_encoder.", SHARED),
    ("variance_adaptor.", SHARED),
    ("mel_decoder.", SHARED),
    ("style_encoder.speaker_lut.", SPEAKER),
    ("style_encoder.speaker_adaptor.", SPEAKER),
    ("style_encoder.prosody_encoder.", PROSODY),
    ("style_encoder.prosody_adaptor.", PROSODY),
    ("speaker_classifier.", PROSODY),
)


@dataclass(frozen=True)
class ParamPartition:
    shared: tuple[str, ...]
    speaker: tuple[str, ...]
    prosody: tuple[str, ...]

    def group(self, name: str) -> tuple[str, ...]:
        return {SHARED: self.shared, SPEAKER: self.speaker, PROSODY: self.prosody}[name]

    def as_dict(self) -> dict[str, list[str]]:
        return {SHARED: list(self.shared), SPEAKER: list(self.speaker), PROSODY: list(self.prosody)}

    def check(self, names: Iterable[str]) -> None:
        names = set(names)
        s, k, p = set(self.shared), set(self.speaker), set(self.prosody)
        if s & k or s & p or k & p:
            raise PartitionError("partition groups overlap")
        if s | k | p != names:
            missing = sorted(names - (s | k | p))
            extra = sorted((s | k | p) - names)
            raise PartitionError(f"partition does not cover the model: missing={missing} extra={extra}")


def partition_parameters(named: Mapping[str, Any] | Iterable[tuple[str, Any]]) -> ParamPartition:
    items = named.items() if isinstance(named, Mapping) else named
    groups: dict[str, list[str]] = {SHARED: [], SPEAKER: [], PROSODY: []}
    for name, _ in items:
        hits = [g for prefix, g in PARTITION_RULES if name.startswith(prefix)]
        if len(hits) != 1:
            raise PartitionError(f"parameter {name!r} matched {len(hits)} partition rules")
        groups[hits[0]].append(name)
    return ParamPartition(tuple(groups[SHARED]), tuple(groups[SPEAKER]), tuple(groups[PROSODY]))


def param_digest(params: Mapping[str, torch.Tensor], names: Iterable[str]) -> str:
    h = hashlib.sha256()
    for n in sorted(names):
        t = params[n].detach().cpu().contiguous()
        h.update(n.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Checkpoints
#
# layout: MAGIC | u32 version | u64 header length | JSON header | float32 LE payloads

MAGIC = b"SMCK"
FORMAT_VERSION = 1
PHASES = ("theta_0", "theta_T", "theta_M", "adapted")


@dataclass
class Checkpoint:
    phase_tag: str
    params: dict[str, torch.Tensor]
    partition: ParamPartition
    model_config: dict[str, Any]
    train_config: dict[str, Any]
    step: int = 0
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.phase_tag not in PHASES:
            raise PhaseError(f"unknown phase tag {self.phase_tag!r}")
        self.partition.check(self.params)

    def require_phase(self, *allowed: str) -> None:
        if self.phase_tag not in allowed:
            raise PhaseError(f"checkpoint phase {self.phase_tag!r} not in {allowed}")


def phase_index(tag: str) -> int:
    return PHASES.index(tag)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    names = sorted(ckpt.params)
    arrays = [ckpt.params[n].detach().cpu().to(torch.float32).contiguous().numpy() for n in names]
    offsets, pos = [], 0
    for a in arrays:
        offsets.append(pos)
        pos += a.nbytes
    payload = b"".join(a.astype("<f4", copy=False).tobytes() for a in arrays)
    header = {
        "phase_tag": ckpt.phase_tag,
        "step": int(ckpt.step),
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "partition": ckpt.partition.as_dict(),
        "meta": ckpt.meta,
        "tensors": [
            {"name": n, "shape": list(a.shape), "offset": o} for n, a, o in zip(names, arrays, offsets)
        ],
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True, indent=1).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(payload)


def load_checkpoint(path: str | Path, expect_model_config: Mapping[str, Any] | None = None) -> Checkpoint:
    if not Path(path).is_file():
        raise CheckpointError(f"{path}: checkpoint not found")
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic or truncated)")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(raw) < 16 + hlen:
        raise CheckpointError(f"{path}: corrupt file (truncated header)")
    try:
        header = json.loads(raw[16 : 16 + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = raw[16 + hlen :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"{path}: corrupt file (payload {len(payload)} of {header['payload_bytes']} bytes)")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: corrupt file (payload checksum)")

    if expect_model_config is not None:
        diff = {
            k: (header["model_config"].get(k), v)
            for k, v in expect_model_config.items()
            if _norm(header["model_config"].get(k)) != _norm(v)
        }
        if diff:
            raise ShapeMismatchError(f"{path}: model config mismatch {diff}")

    params = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        a = np.frombuffer(payload, dtype="<f4", count=n, offset=t["offset"]).reshape(t["shape"])
        params[t["name"]] = torch.from_numpy(a.astype(np.float32))
    part = header["partition"]
    partition = ParamPartition(tuple(part[SHARED]), tuple(part[SPEAKER]), tuple(part[PROSODY]))
    try:
        partition.check(params)
    except PartitionError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return Checkpoint(
        phase_tag=header["phase_tag"],
        params=params,
        partition=partition,
        model_config=header["model_config"],
        train_config=header["train_config"],
        step=header["step"],
        meta=header["meta"],
    )


def _norm(v):
    return list(v) if isinstance(v, tuple) else v
