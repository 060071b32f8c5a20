"""Objective evaluation: speaker similarity, MCD and adaptation-speed curves.

Speaker identity is scored with a closed-form embedding that inverts the
synthetic generator (undo the prosody envelope and pitch contour, subtract
the text templates, average over time); on noise-free renders it returns the
speaker offset exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
from scipy.fft import dct

from .core import Checkpoint, ContaminationError, Corpus, DataError, TrainConfig, Utterance, child_rng, child_seed
from .meta import (
    MetricsLog,
    State,
    check_uncontaminated,
    frozen_digest,
    model_from_checkpoint,
    sgd_adapt,
    start_state,
    unstack,
)
from .model import StyleTTS, collate
from .syndata import NEUTRAL, SyntheticWorld

MCD_SCALE = 10.0 / math.log(10.0)
COS_EPS = 1e-8


def cosine_similarity(a, b, eps: float = COS_EPS) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(a @ b / max(np.linalg.norm(a) * np.linalg.norm(b), eps))


def mel_cepstra(mel: np.ndarray) -> np.ndarray:
    return dct(np.asarray(mel, dtype=np.float64), type=2, norm="ortho", axis=-1)


def mcd(generated: np.ndarray, reference: np.ndarray) -> float:
    """Mean framewise mel-cepstral distortion in dB, skipping coefficient 0."""
    generated = np.asarray(generated, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if generated.shape != reference.shape:
        raise ValueError(f"frame/bin mismatch: {generated.shape} vs {reference.shape}")
    diff = mel_cepstra(generated)[:, 1:] - mel_cepstra(reference)[:, 1:]
    return float(np.mean(MCD_SCALE * np.sqrt(2.0 * (diff**2).sum(-1))))


def speaker_embedding(mel, world: SyntheticWorld, tokens, durations, prosody_id: int) -> np.ndarray:
    """Estimate the speaker offset of a mel aligned to (tokens, durations) under a known prosody."""
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[0] == 0:
        raise ValueError("speaker embedding needs a non-empty [frames, bins] mel")
    durations = np.asarray(durations)
    if int(durations.sum()) != mel.shape[0]:
        raise ValueError("durations do not cover the mel frames")
    pro = world.prosodies[prosody_id]
    n = mel.shape[0]
    corrected = mel / pro.envelope(n)[:, None] - pro.pitch_contour(n)[:, None] * world.pitch_axis[None, :]
    return corrected.mean(0) - world.text_term(np.asarray(tokens), durations).mean(0)


# ---------------------------------------------------------------------------
# Probes


@dataclass
class Probe:
    """One generation request: target-speaker text rendered under a reference speaker's prosody."""

    target: Utterance  # ground truth (target speaker, prosody p), provides teacher-forced alignment
    reference_mel: np.ndarray
    prosody_id: int
    condition: str  # "intra" or "cross" cluster source speaker


def make_probes(
    world: SyntheticWorld,
    speaker_id: int,
    n_texts: int = 4,
    seed: int = 0,
    exclude: Iterable[Utterance] = (),
) -> list[Probe]:
    """Probe texts x every prosody x {intra, cross}-cluster reference speakers."""
    rng = child_rng(seed, "probes", speaker_id)
    banned = {tuple(u.tokens.tolist()) for u in exclude}
    texts = []
    while len(texts) < n_texts:
        t = world.random_text(rng)
        if tuple(t.tolist()) not in banned:
            texts.append(t)
    target = world.speakers[speaker_id]
    by_cluster = {c: [s for s in world.train_speakers if world.speakers[s].cluster == c] for c in (0, 1)}
    probes = []
    for k, text in enumerate(texts):
        for p in sorted(world.prosodies):
            gt = world.render(text, target, world.prosodies[p], child_seed(seed, "probe-gt", speaker_id, k, p), uid=f"probe-{speaker_id}-{k}-{p}")
            for cond, cluster in (("intra", target.cluster), ("cross", 1 - target.cluster)):
                pool = by_cluster[cluster]
                src = world.speakers[pool[int(rng.integers(len(pool)))]]
                ref = world.render(world.random_text(rng), src, world.prosodies[p], child_seed(seed, "probe-ref", speaker_id, k, p, cond))
                probes.append(Probe(gt, ref.mel, p, cond))
    return probes


def score_generations(
    generated: Sequence[np.ndarray], probes: Sequence[Probe], world: SyntheticWorld, speaker_id: int
) -> dict[str, float]:
    """Similarity over all probes, MCD over neutral-prosody probes; also split by condition."""
    ref_emb = world.speakers[speaker_id].offset
    sims = {"intra": [], "cross": []}
    mcds = {"intra": [], "cross": []}
    for mel, pr in zip(generated, probes):
        emb = speaker_embedding(mel, world, pr.target.tokens, pr.target.durations, pr.prosody_id)
        sims[pr.condition].append(cosine_similarity(emb, ref_emb))
        if pr.prosody_id == NEUTRAL:
            mcds[pr.condition].append(mcd(mel, pr.target.mel))
    out = {
        "similarity": float(np.mean(sims["intra"] + sims["cross"])),
        "mcd": float(np.mean(mcds["intra"] + mcds["cross"])),
    }
    for c in ("intra", "cross"):
        out[f"similarity_{c}"] = float(np.mean(sims[c]))
        out[f"mcd_{c}"] = float(np.mean(mcds[c]))
    return out


@torch.no_grad()
def generate(model: StyleTTS, state: State | None, probe_sets: Sequence[Sequence[Probe]], chunk: int = 256) -> list[list[np.ndarray]]:
    """Teacher-forced generation; probe set ``e`` uses episode ``e`` of the stacked speaker state."""
    model.eval()
    dtype = next(model.parameters()).dtype
    flat = [(e, pr) for e, ps in enumerate(probe_sets) for pr in ps]
    mels: list[np.ndarray] = []
    for i in range(0, len(flat), chunk):
        part = flat[i : i + chunk]
        batch = collate([pr.target for _, pr in part], refs=[pr.reference_mel for _, pr in part], group=[e for e, _ in part], dtype=dtype)
        out = model(batch, speaker_state=state)
        final = out["final"].double().numpy()
        for j, (_, pr) in enumerate(part):
            mels.append(final[j, : pr.target.n_frames])
    res, pos = [], 0
    for ps in probe_sets:
        res.append(mels[pos : pos + len(ps)])
        pos += len(ps)
    return res


def evaluate_checkpoint(ckpt: Checkpoint, speaker_id: int, probes: Sequence[Probe], world: SyntheticWorld) -> dict[str, float]:
    model = model_from_checkpoint(ckpt)
    keys = [k for k in ckpt.partition.speaker]
    state = {k: ckpt.params[k].unsqueeze(0) for k in keys}
    mels = generate(model, state, [probes])[0]
    return score_generations(mels, probes, world, speaker_id)


# ---------------------------------------------------------------------------
# Adaptation experiment


@dataclass
class AdaptationCurve:
    mode: str
    speaker_id: int
    seed: int
    points: list[dict] = field(default_factory=list)  # step, similarity, mcd (+ per-condition)

    def validate(self) -> None:
        steps = [p["step"] for p in self.points]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ValueError("curve steps must be strictly increasing")
        for p in self.points:
            if not -1.0 - 1e-9 <= p["similarity"] <= 1.0 + 1e-9 or p["mcd"] < 0:
                raise ValueError(f"curve point out of range: {p}")

    def at(self, step: int) -> dict:
        for p in self.points:
            if p["step"] == step:
                return p
        raise KeyError(step)


def run_adaptation_experiment(
    theta_m: Checkpoint,
    theta_t: Checkpoint,
    test_corpus: Corpus,
    world: SyntheticWorld,
    cfg: TrainConfig,
    steps: int = 1000,
    seeds: Sequence[int] = (0, 1, 2),
    marks: Sequence[int] = (0, 10, 50, 100, 200, 500, 1000),
    n_probe_texts: int = 4,
    metrics: MetricsLog | None = None,
    log_every: int = 10,
) -> list[AdaptationCurve]:
    """Adapt every (test speaker, seed, mode) cell and score each snapshot."""
    theta_m.require_phase("theta_M")
    theta_t.require_phase("theta_T")
    if frozen_digest(theta_m.params) != frozen_digest(theta_t.params):
        raise ValueError("theta_M and theta_T do not share a pretraining lineage")
    if test_corpus.split != "meta_test":
        raise DataError("adaptation experiment expects the meta_test split")

    cells, states, samples, probe_sets = [], [], [], []
    for spk, utts in test_corpus.by_speaker().items():
        for seed in seeds:
            idx = child_rng(seed, "adapt-samples", spk).choice(len(utts), size=cfg.n_shots, replace=False)
            chosen = [utts[i] for i in sorted(idx)]
            probes = make_probes(world, spk, n_probe_texts, seed, exclude=chosen)
            for mode, ck in (("meta", theta_m), ("baseline", theta_t)):
                check_uncontaminated(ck, chosen)
                _, st = start_state(ck, mode, seed, cfg.lut_reset_std)
                cells.append((mode, spk, seed))
                states.append(st)
                samples.append(chosen)
                probe_sets.append(probes)

    model = model_from_checkpoint(theta_m)
    names = [f"{m}/s{s}/seed{k}" for m, s, k in cells]
    run = sgd_adapt(model, states, samples, steps, cfg, marks, metrics, names, log_every)
    curves = [AdaptationCurve(m, s, k) for m, s, k in cells]
    for step in sorted(run.snapshots):
        gens = generate(model, run.snapshots[step], probe_sets)
        for e, curve in enumerate(curves):
            score = score_generations(gens[e], probe_sets[e], world, curve.speaker_id)
            curve.points.append({"step": step, **score})
    for c in curves:
        c.validate()
    return curves


def save_curves(curves: Sequence[AdaptationCurve], path: str | Path) -> None:
    Path(path).write_text(json.dumps([asdict(c) for c in curves], indent=1, sort_keys=True))


def load_curves(path: str | Path) -> list[AdaptationCurve]:
    return [AdaptationCurve(**d) for d in json.loads(Path(path).read_text())]


def summarize(curves: Sequence[AdaptationCurve], probe_step: int = 100, final_step: int | None = None) -> dict:
    """Meta-vs-baseline comparisons used by the acceptance checks."""
    meta = {(c.speaker_id, c.seed): c for c in curves if c.mode == "meta"}
    base = {(c.speaker_id, c.seed): c for c in curves if c.mode == "baseline"}
    keys = sorted(meta.keys() & base.keys())
    if final_step is None:
        final_step = max(p["step"] for p in curves[0].points)
    gaps = [meta[k].at(probe_step)["similarity"] - base[k].at(probe_step)["similarity"] for k in keys]
    meta_final = [meta[k].at(final_step)["similarity"] for k in keys]
    base_final = [base[k].at(final_step)["similarity"] for k in keys]
    base_level = float(np.mean(base_final))
    steps = sorted(p["step"] for p in curves[0].points)
    mean_meta = {s: float(np.mean([meta[k].at(s)["similarity"] for k in keys])) for s in steps}
    mean_base = {s: float(np.mean([base[k].at(s)["similarity"] for k in keys])) for s in steps}
    reach = next((s for s in steps if mean_meta[s] >= base_level - 0.02), None)
    return {
        "cells": len(keys),
        "probe_step": probe_step,
        "final_step": final_step,
        "wins": int(sum(g > 0 for g in gaps)),
        "mean_gap": float(np.mean(gaps)),
        "baseline_final": base_level,
        "meta_final": float(np.mean(meta_final)),
        "final_abs_diff": float(np.mean(np.abs(np.subtract(meta_final, base_final)))),
        "meta_reach_step": reach,
        "mean_similarity": {"meta": mean_meta, "baseline": mean_base},
        "mean_mcd": {
            "meta": {s: float(np.mean([meta[k].at(s)["mcd"] for k in keys])) for s in steps},
            "baseline": {s: float(np.mean([base[k].at(s)["mcd"] for k in keys])) for s in steps},
        },
    }
