"""Synthetic multi-speaker, multi-prosody corpus with known generative factors.

Every mel frame is rendered as::

    mel[t] = envelope[t] * (template[token(t)] + speaker_offset + contour[t] * pitch_axis) + noise

so the speaker signature is additive and the prosody is multiplicative. Both
factors can therefore be recovered in closed form, which the evaluation code
relies on in place of a trained speaker-verification network.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import (
    ConfigError,
    Corpus,
    DataError,
    TaskEpisode,
    Utterance,
    child_rng,
    child_seed,
    config_from_dict,
)

NEUTRAL = 0


@dataclass
class GeneratorConfig:
    n_speakers: int = 34
    n_test_speakers: int = 4
    n_prosodies: int = 4
    alphabet_size: int = 32
    bins: int = 20
    utterances_per_pseudo: int = 20
    pretrain_utterances_per_pseudo: int = 20
    n_meta_val_pseudo: int = 20
    min_tokens: int = 4
    max_tokens: int = 10
    noise_std: float = 0.02
    cluster_separation: float = 1.0
    speaker_spread: float = 0.6
    speaker_rank: int = 2  # r > 0: within-cluster spread confined to r spectral directions; 0: isotropic
    seed: int = 0

    @property
    def n_train_speakers(self) -> int:
        return self.n_speakers - self.n_test_speakers

    def validate(self, n_shots: int = 5) -> "GeneratorConfig":
        if self.n_speakers < 5:
            raise ConfigError("generator.n_speakers must be >= 5")
        if not 1 <= self.n_test_speakers < self.n_speakers:
            raise ConfigError("generator.n_test_speakers must leave at least one training speaker")
        if self.n_prosodies < 1 or self.alphabet_size < 2 or self.bins < 2:
            raise ConfigError("generator needs >= 1 prosody, >= 2 symbols and >= 2 bins")
        if self.utterances_per_pseudo < 2 * n_shots:
            raise ConfigError(f"generator.utterances_per_pseudo must be >= 2N = {2 * n_shots}")
        if not 1 <= self.min_tokens <= self.max_tokens:
            raise ConfigError("generator token length bounds invalid")
        if not 0 <= self.speaker_rank <= self.bins:
            raise ConfigError("generator.speaker_rank must lie in 0..bins")
        if self.noise_std < 0:
            raise ConfigError("generator.noise_std must be >= 0")
        n_pseudo = self.n_train_speakers * self.n_prosodies
        if self.n_meta_val_pseudo < 1 or n_pseudo - self.n_meta_val_pseudo < 1:
            raise ConfigError(
                f"infeasible split: {n_pseudo} training pseudo-speakers cannot hold "
                f"{self.n_meta_val_pseudo} validation pseudo-speakers and a non-empty meta-train split"
            )
        return self

    @classmethod
    def from_dict(cls, data):
        return config_from_dict(cls, data)


@dataclass
class SpeakerProfile:
    speaker_id: int
    offset: np.ndarray
    rate: float
    pitch_base: float
    cluster: int


@dataclass
class ProsodyProfile:
    prosody_id: int
    depth: float
    period: float
    phase: float
    contour_amp: float
    contour_period: float
    contour_phase: float
    tempo: float
    energy_scale: float

    def envelope(self, n_frames: int) -> np.ndarray:
        t = np.arange(n_frames, dtype=np.float64)
        return 1.0 + self.depth * np.sin(2 * np.pi * t / self.period + self.phase)

    def pitch_contour(self, n_frames: int) -> np.ndarray:
        t = np.arange(n_frames, dtype=np.float64)
        return self.contour_amp * np.sin(2 * np.pi * t / self.contour_period + self.contour_phase)


class SyntheticWorld:
    """All generative factors of one corpus, drawn once from the config seed."""

    def __init__(self, cfg: GeneratorConfig):
        self.cfg = cfg
        rng = child_rng(cfg.seed, "world")
        b = cfg.bins
        self.templates = rng.normal(0.0, 1.0, size=(cfg.alphabet_size, b))
        self.base_durations = rng.uniform(1.5, 3.5, size=cfg.alphabet_size)
        axis = rng.normal(size=b)
        self.pitch_axis = axis / np.linalg.norm(axis)
        direction = rng.normal(size=b)
        direction /= np.linalg.norm(direction)
        self.cluster_centers = np.stack(
            [-cfg.cluster_separation * direction, cfg.cluster_separation * direction]
        )

        if cfg.speaker_rank:
            basis = child_rng(cfg.seed, "speaker-basis").normal(size=(b, cfg.speaker_rank))
            self.speaker_basis = np.linalg.qr(basis)[0].T  # [rank, bins], orthonormal rows
        else:
            self.speaker_basis = np.eye(b)

        self.speakers: dict[int, SpeakerProfile] = {}
        for s in range(cfg.n_speakers):
            srng = child_rng(cfg.seed, "speaker", s)
            cluster = s % 2
            z = srng.normal(0.0, cfg.speaker_spread, size=len(self.speaker_basis))
            offset = self.cluster_centers[cluster] + z @ self.speaker_basis
            self.speakers[s] = SpeakerProfile(
                speaker_id=s,
                offset=offset,
                rate=float(srng.uniform(0.8, 1.25)),
                pitch_base=float((0.5 if cluster else -0.5) + srng.normal(0.0, 0.1)),
                cluster=cluster,
            )

        self.prosodies: dict[int, ProsodyProfile] = {}
        for p in range(cfg.n_prosodies):
            prng = child_rng(cfg.seed, "prosody", p)
            if p == NEUTRAL:
                prof = ProsodyProfile(p, 0.1, 12.0, 0.0, 0.1, 20.0, 0.0, 1.0, 1.0)
            else:
                prof = ProsodyProfile(
                    prosody_id=p,
                    depth=float(prng.uniform(0.15, 0.45)),
                    period=float(prng.uniform(6.0, 16.0)),
                    phase=float(prng.uniform(0, 2 * np.pi)),
                    contour_amp=float(prng.uniform(0.1, 0.5)),
                    contour_period=float(prng.uniform(8.0, 24.0)),
                    contour_phase=float(prng.uniform(0, 2 * np.pi)),
                    tempo=float(prng.uniform(0.85, 1.2)),
                    energy_scale=float(prng.uniform(0.7, 1.3)),
                )
            self.prosodies[p] = prof

    @property
    def train_speakers(self) -> list[int]:
        return list(range(self.cfg.n_train_speakers))

    @property
    def test_speakers(self) -> list[int]:
        return list(range(self.cfg.n_train_speakers, self.cfg.n_speakers))

    def random_text(self, rng: np.random.Generator) -> np.ndarray:
        n = int(rng.integers(self.cfg.min_tokens, self.cfg.max_tokens + 1))
        return rng.integers(0, self.cfg.alphabet_size, size=n).astype(np.int64)

    def durations(self, tokens: np.ndarray, spk: SpeakerProfile, pro: ProsodyProfile) -> np.ndarray:
        d = np.rint(self.base_durations[tokens] * spk.rate * pro.tempo).astype(np.int64)
        return np.maximum(d, 1)

    def text_term(self, tokens: np.ndarray, durations: np.ndarray) -> np.ndarray:
        """Frame-tiled token templates, [frames, bins]."""
        return np.repeat(self.templates[tokens], durations, axis=0)

    def render(
        self,
        tokens: np.ndarray,
        spk: SpeakerProfile,
        pro: ProsodyProfile,
        noise_seed: int | None,
        noise_std: float | None = None,
        uid: str = "",
    ) -> Utterance:
        return render_utterance(self, tokens, spk, pro, noise_seed, noise_std, uid)

    def variance_ranges(self) -> tuple[tuple[float, float], tuple[float, float]]:
        pb = [s.pitch_base for s in self.speakers.values()]
        amp = max(p.contour_amp for p in self.prosodies.values())
        es = [p.energy_scale for p in self.prosodies.values()]
        return (min(pb) - amp, max(pb) + amp), (0.5 * min(es), 1.5 * max(es))


def render_utterance(
    world: SyntheticWorld,
    tokens,
    spk: SpeakerProfile,
    pro: ProsodyProfile,
    noise_seed: int | None,
    noise_std: float | None = None,
    uid: str = "",
) -> Utterance:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise DataError("cannot render an empty text")
    if tokens.min() < 0 or tokens.max() >= world.cfg.alphabet_size:
        raise DataError("token id out of range")
    noise_std = world.cfg.noise_std if noise_std is None else noise_std
    dur = world.durations(tokens, spk, pro)
    n_frames = int(dur.sum())
    env = pro.envelope(n_frames)
    contour = pro.pitch_contour(n_frames)
    clean = world.text_term(tokens, dur) + spk.offset[None, :] + contour[:, None] * world.pitch_axis[None, :]
    mel = env[:, None] * clean
    if noise_std > 0:
        mel = mel + np.random.default_rng(noise_seed).normal(0.0, noise_std, size=mel.shape)

    bounds = np.concatenate([[0], np.cumsum(dur)])
    pitch = np.array([spk.pitch_base + contour[a:b].mean() for a, b in zip(bounds[:-1], bounds[1:])])
    energy = np.array([pro.energy_scale * env[a:b].mean() for a, b in zip(bounds[:-1], bounds[1:])])
    return Utterance(
        tokens=tokens,
        mel=mel.astype(np.float32),
        durations=dur,
        pitch=pitch.astype(np.float32),
        energy=energy.astype(np.float32),
        speaker_id=spk.speaker_id,
        prosody_id=pro.prosody_id,
        uid=uid,
    )


def _render_split(world, pseudo, per_pseudo, tag):
    cfg = world.cfg
    out = []
    for s, p in pseudo:
        for k in range(per_pseudo):
            uid = f"{tag}-s{s:03d}-p{p:02d}-{k:03d}"
            rng = child_rng(cfg.seed, "text", uid)
            tokens = world.random_text(rng)
            out.append(world.render(tokens, world.speakers[s], world.prosodies[p], child_seed(cfg.seed, "noise", uid), uid=uid))
    return out


def make_corpus(cfg: GeneratorConfig, world: SyntheticWorld | None = None) -> dict[str, Corpus]:
    """Render the pretrain / meta_train / meta_val / meta_test splits.

    Meta splits partition the training pseudo-speakers; their utterances are
    rendered independently of the pretraining ones, so ``meta_val`` doubles as
    held-out data for pretraining diagnostics. Test speakers appear only in
    ``meta_test`` and only with the neutral prosody.
    """
    cfg.validate()
    world = world or SyntheticWorld(cfg)
    pseudo = [(s, p) for s in world.train_speakers for p in range(cfg.n_prosodies)]
    order = child_rng(cfg.seed, "pseudo-split").permutation(len(pseudo))
    val = sorted(pseudo[i] for i in order[: cfg.n_meta_val_pseudo])
    train = sorted(pseudo[i] for i in order[cfg.n_meta_val_pseudo :])
    train_spk = set(world.train_speakers)
    prosodies = set(range(cfg.n_prosodies))
    return {
        "pretrain": Corpus(_render_split(world, pseudo, cfg.pretrain_utterances_per_pseudo, "pre"), "pretrain", train_spk, prosodies),
        "meta_train": Corpus(_render_split(world, train, cfg.utterances_per_pseudo, "mtr"), "meta_train", train_spk, prosodies),
        "meta_val": Corpus(_render_split(world, val, cfg.utterances_per_pseudo, "mva"), "meta_val", train_spk, prosodies),
        "meta_test": Corpus(
            _render_split(world, [(s, NEUTRAL) for s in world.test_speakers], cfg.utterances_per_pseudo, "mte"),
            "meta_test",
            set(world.test_speakers),
            {NEUTRAL},
        ),
    }


class EpisodeSampler:
    """Uniform over eligible pseudo-speakers, then 2N utterances without replacement."""

    def __init__(self, corpus: Corpus, n_shots: int):
        self.n_shots = n_shots
        self.split = corpus.split
        self.groups = [(k, v) for k, v in corpus.by_pseudo_speaker().items() if len(v) >= 2 * n_shots]
        if not self.groups:
            raise DataError(f"no pseudo-speaker in {corpus.split!r} has >= {2 * n_shots} utterances")

    def sample(self, rng: np.random.Generator) -> TaskEpisode:
        key, utts = self.groups[int(rng.integers(len(self.groups)))]
        idx = rng.choice(len(utts), size=2 * self.n_shots, replace=False)
        picked = [utts[i] for i in idx]
        return TaskEpisode(key, picked[: self.n_shots], picked[self.n_shots :])


def sample_episode(corpus: Corpus, n_shots: int, rng: np.random.Generator) -> TaskEpisode:
    return EpisodeSampler(corpus, n_shots).sample(rng)


# ---------------------------------------------------------------------------
# Export / import


def export_corpus(corpora: dict[str, Corpus], cfg: GeneratorConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"generator": asdict(cfg), "seed": cfg.seed, "splits": {}}
    for split, corpus in corpora.items():
        d = out / split
        d.mkdir(exist_ok=True)
        uids = []
        for u in corpus.utterances:
            meta = {
                "uid": u.uid,
                "speaker_id": u.speaker_id,
                "prosody_id": u.prosody_id,
                "tokens": u.tokens.tolist(),
                "durations": u.durations.tolist(),
                "pitch": u.pitch.astype(float).tolist(),
                "energy": u.energy.astype(float).tolist(),
                "mel_shape": list(u.mel.shape),
            }
            (d / f"{u.uid}.json").write_text(json.dumps(meta, sort_keys=True))
            (d / f"{u.uid}.f32").write_bytes(u.mel.astype("<f4").tobytes())
            uids.append(u.uid)
        manifest["splits"][split] = {
            "uids": uids,
            "speaker_ids": sorted(corpus.speaker_ids),
            "prosody_ids": sorted(corpus.prosody_ids),
        }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))
    return out


def load_corpus(corpus_dir: str | Path) -> tuple[dict[str, Corpus], GeneratorConfig]:
    root = Path(corpus_dir)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DataError(f"{root}: missing manifest.json")
    manifest = json.loads(mpath.read_text())
    cfg = GeneratorConfig.from_dict(manifest["generator"])
    corpora = {}
    for split, info in manifest["splits"].items():
        utts = []
        for uid in info["uids"]:
            meta = json.loads((root / split / f"{uid}.json").read_text())
            mel = np.frombuffer((root / split / f"{uid}.f32").read_bytes(), dtype="<f4")
            utts.append(
                Utterance(
                    tokens=np.asarray(meta["tokens"], dtype=np.int64),
                    mel=mel.reshape(meta["mel_shape"]).astype(np.float32),
                    durations=np.asarray(meta["durations"], dtype=np.int64),
                    pitch=np.asarray(meta["pitch"], dtype=np.float32),
                    energy=np.asarray(meta["energy"], dtype=np.float32),
                    speaker_id=meta["speaker_id"],
                    prosody_id=meta["prosody_id"],
                    uid=uid,
                )
            )
        corpora[split] = Corpus(utts, split, set(info["speaker_ids"]), set(info["prosody_ids"]))
    return corpora, cfg
