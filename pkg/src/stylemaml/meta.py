"""Three training phases: multi-speaker pretraining, MAML on the speaker
parameters, and few-shot adaptation to an unseen speaker.

Only the speaker partition moves after pretraining. Inner loops act on a
dict of speaker tensors carrying a leading episode axis, so a whole meta
batch (or a grid of adaptation runs) shares one batched forward pass; the
episodes stay independent because each group's loss depends only on its own
slice of the stacked tensors.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .core import (
    PROSODY,
    SHARED,
    SPEAKER,
    Checkpoint,
    ContaminationError,
    Corpus,
    DataError,
    PhaseError,
    TaskEpisode,
    TrainConfig,
    Utterance,
    child_rng,
    child_seed,
    param_digest,
    partition_parameters,
)
from .losses import LossBundle, total_loss
from .model import ADAPTOR_B_KEY, ADAPTOR_W_KEY, LUT_KEY, Batch, ModelConfig, StyleTTS, collate
from .syndata import EpisodeSampler

log = logging.getLogger(__name__)

State = dict[str, torch.Tensor]


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Model <-> checkpoint


def build_model(cfg: ModelConfig, seed: int, dtype: torch.dtype = torch.float32) -> StyleTTS:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(child_seed(seed, "init"))
        model = StyleTTS(cfg)
    return model.to(dtype)


def model_from_checkpoint(ckpt: Checkpoint, dtype: torch.dtype = torch.float32) -> StyleTTS:
    cfg = ModelConfig.from_dict(ckpt.model_config)
    model = StyleTTS(cfg).to(dtype)
    own = dict(model.named_parameters())
    if set(own) != set(ckpt.params):
        raise PhaseError("checkpoint parameter names do not match the model")
    with torch.no_grad():
        for k, p in own.items():
            if tuple(p.shape) != tuple(ckpt.params[k].shape):
                raise PhaseError(f"{k}: checkpoint shape {tuple(ckpt.params[k].shape)} != model {tuple(p.shape)}")
            p.copy_(ckpt.params[k])
    return model


def checkpoint_from_model(model: StyleTTS, phase: str, train_cfg: TrainConfig, step: int, meta: dict) -> Checkpoint:
    params = {k: p.detach().to(torch.float32).clone() for k, p in model.named_parameters()}
    return Checkpoint(
        phase_tag=phase,
        params=params,
        partition=partition_parameters(params),
        model_config=model.cfg.to_dict(),
        train_config=asdict(train_cfg),
        step=step,
        meta=dict(meta),
    )


def frozen_digest(params: Mapping[str, torch.Tensor]) -> str:
    part = partition_parameters(params)
    return param_digest(params, part.shared + part.prosody)


def freeze_for_speaker_training(model: StyleTTS) -> list[torch.nn.Parameter]:
    part = partition_parameters(model.named_parameters())
    speaker = []
    for name, p in model.named_parameters():
        p.requires_grad_(name in part.speaker)
        if name in part.speaker:
            speaker.append(p)
    model.eval()
    return speaker


# ---------------------------------------------------------------------------
# Metrics


class MetricsLog:
    """Line-delimited JSON metrics: {phase, step, loss components, lr, wall_time}."""

    def __init__(self, path: str | Path | None = None, clock: Callable[[], float] = time.perf_counter):
        self.path = Path(path) if path else None
        self.records: list[dict] = []
        self._t0 = clock()
        self._clock = clock
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, phase: str, step: int, losses: Mapping[str, float], lr: float, **extra) -> dict:
        rec = {"phase": phase, "step": int(step), **{k: float(v) for k, v in losses.items()}, "lr": float(lr)}
        rec.update(extra)
        rec["wall_time"] = round(self._clock() - self._t0, 3)
        self.records.append(rec)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec


def _check_finite(bundle: LossBundle, phase: str, step: int) -> None:
    if not torch.isfinite(bundle.total).all():
        raise TrainingError(f"non-finite loss in {phase} at step {step}: {bundle.scalars()}")


# ---------------------------------------------------------------------------
# Pretraining


def pretrain(
    corpus: Corpus,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    steps: int,
    heldout: Corpus | None = None,
    metrics: MetricsLog | None = None,
    log_every: int = 50,
) -> tuple[Checkpoint, Checkpoint]:
    """Adam on the full pretraining objective. Returns (theta_0, theta_T)."""
    speakers = sorted(corpus.speaker_ids)
    if speakers != list(range(len(speakers))):
        raise DataError("pretraining speakers must be numbered 0..K-1 (one LUT row each)")
    if model_cfg.lut_entries != len(speakers) or model_cfg.n_classes != len(speakers):
        raise DataError("model LUT / classifier size must equal the number of pretraining speakers")
    model = build_model(model_cfg, cfg.seed)
    meta = {"train_speakers": speakers}
    theta0 = checkpoint_from_model(model, "theta_0", cfg, 0, meta)

    rng = child_rng(cfg.seed, "pretrain-batches")
    opt = torch.optim.Adam(model.parameters(), lr=cfg.pretrain_lr)
    utts = corpus.utterances
    if metrics is not None and heldout is not None:
        metrics.write("pretrain", 0, {}, cfg.pretrain_lr, heldout_total=evaluate_loss(model, heldout.utterances[:64], cfg, "pretrain"))
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(child_seed(cfg.seed, "dropout"))
        for step in range(1, steps + 1):
            model.train()
            idx = rng.choice(len(utts), size=min(cfg.pretrain_batch_size, len(utts)), replace=False)
            batch = collate([utts[i] for i in idx])
            bundle = total_loss(model(batch), batch, model, "pretrain", cfg)
            _check_finite(bundle, "pretrain", step)
            opt.zero_grad()
            bundle.total.sum().backward()
            opt.step()
            if metrics is not None and (step % log_every == 0 or step == steps):
                extra = {}
                if heldout is not None:
                    extra["heldout_total"] = evaluate_loss(model, heldout.utterances[:64], cfg, "pretrain")
                metrics.write("pretrain", step, bundle.scalars(), cfg.pretrain_lr, **extra)
    model.eval()
    return theta0, checkpoint_from_model(model, "theta_T", cfg, steps, meta)


@torch.no_grad()
def evaluate_loss(model: StyleTTS, utts: Sequence[Utterance], cfg: TrainConfig, phase: str) -> float:
    was = model.training
    model.eval()
    batch = collate(list(utts))
    val = float(total_loss(model(batch), batch, model, phase, cfg).total.mean())
    model.train(was)
    return val


def reset_speaker_lut(ckpt: Checkpoint, seed: int, std: float = 0.01, tag: str = "meta-lut") -> Checkpoint:
    """Replace the speaker LUT by one shared entry drawn from N(0, std^2)."""
    ckpt.require_phase("theta_T")
    dim = ckpt.params[LUT_KEY].shape[1]
    gen = torch.Generator().manual_seed(child_seed(seed, tag))
    params = dict(ckpt.params)
    params[LUT_KEY] = (torch.randn(1, dim, generator=gen, dtype=torch.float64) * std).to(torch.float32)
    mcfg = dict(ckpt.model_config, lut_entries=1)
    return Checkpoint(
        phase_tag="theta_T",
        params=params,
        partition=ckpt.partition,
        model_config=mcfg,
        train_config=ckpt.train_config,
        step=ckpt.step,
        meta=dict(ckpt.meta, lut_reset=tag),
    )


# ---------------------------------------------------------------------------
# MAML machinery (model-agnostic: ``loss_fn(state) -> per-episode losses``)


def stack_state(state: Mapping[str, torch.Tensor], n_episodes: int) -> State:
    """Broadcast unbatched speaker tensors to a leading episode axis (a view, so gradients sum back)."""
    return {k: v.unsqueeze(0).expand(n_episodes, *v.shape) for k, v in state.items()}


def inner_adapt(
    loss_fn: Callable[[State], torch.Tensor],
    state: State,
    steps: int,
    lr: float,
    second_order: bool = True,
) -> tuple[list[State], list[torch.Tensor]]:
    """Plain gradient descent on ``state``; returns the trajectory and per-step support losses.

    With ``second_order`` the trajectory stays differentiable with respect to
    the initial state. Otherwise each step's gradient is treated as a constant.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    keys = list(state)
    traj = [state]
    losses = []
    for step in range(steps):
        cur = traj[-1]
        loss = loss_fn(cur)
        if not torch.isfinite(loss).all():
            raise TrainingError(f"non-finite support loss at inner step {step}")
        losses.append(loss.detach())
        grads = torch.autograd.grad(
            loss.sum(), [cur[k] for k in keys], create_graph=second_order, allow_unused=True
        )
        nxt = {}
        for k, g in zip(keys, grads):
            if g is None:
                nxt[k] = cur[k]
                continue
            if not second_order:
                g = g.detach()
            nxt[k] = cur[k] - lr * g
        traj.append(nxt)
    return traj, losses


def meta_objective(
    support_fn: Callable[[State], torch.Tensor],
    query_fn: Callable[[State], torch.Tensor],
    state: State,
    steps: int,
    lr: float,
    second_order: bool = True,
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Sum over episodes of the query loss at the inner-adapted parameters."""
    traj, support_losses = inner_adapt(support_fn, state, steps, lr, second_order)
    query = query_fn(traj[-1])
    return query.sum(), support_losses


class SpeakerObjective:
    """Loss of a frozen-trunk model as a function of externally supplied speaker tensors."""

    def __init__(self, model: StyleTTS, cfg: TrainConfig, phase: str):
        self.model = model
        self.cfg = cfg
        self.phase = phase
        self.last: LossBundle | None = None

    def bundle(self, state: State, batch: Batch) -> LossBundle:
        out = self.model(batch, speaker_state=state)
        return total_loss(out, batch, self.model, self.phase, self.cfg)

    def __call__(self, state: State, batch: Batch) -> torch.Tensor:
        self.last = self.bundle(state, batch)
        return self.last.total


def episode_batches(episodes: Sequence[TaskEpisode], dtype=torch.float32) -> tuple[Batch, Batch]:
    sup, qry, gs, gq = [], [], [], []
    for e, ep in enumerate(episodes):
        sup += ep.support
        qry += ep.query
        gs += [e] * len(ep.support)
        gq += [e] * len(ep.query)
    return collate(sup, group=gs, dtype=dtype), collate(qry, group=gq, dtype=dtype)


@dataclass
class EpisodeResult:
    pseudo_speaker: tuple[int, int]
    support_losses: list[float]
    query_loss: float


def meta_gradient(
    model: StyleTTS, episodes: Sequence[TaskEpisode], cfg: TrainConfig
) -> tuple[dict[str, torch.Tensor], list[EpisodeResult], LossBundle]:
    """Gradient of the summed query loss w.r.t. the model's own speaker parameters."""
    dtype = next(model.parameters()).dtype
    obj = SpeakerObjective(model, cfg, "meta")
    support, query = episode_batches(episodes, dtype)
    base = {k: p for k, p in model.named_parameters() if k in (LUT_KEY, ADAPTOR_W_KEY, ADAPTOR_B_KEY)}
    state = stack_state(base, len(episodes))
    total, sup_losses = meta_objective(
        lambda s: obj(s, support), lambda s: obj(s, query), state, cfg.inner_steps, cfg.inner_lr, cfg.second_order
    )
    qbundle = obj.last
    grads = torch.autograd.grad(total, list(base.values()))
    results = [
        EpisodeResult(ep.pseudo_speaker, [float(l[i].detach()) for l in sup_losses], float(qbundle.total[i].detach()))
        for i, ep in enumerate(episodes)
    ]
    return dict(zip(base, grads)), results, qbundle


def meta_step(
    model: StyleTTS, episodes: Sequence[TaskEpisode], cfg: TrainConfig, optimizer: torch.optim.Optimizer
) -> tuple[list[EpisodeResult], LossBundle]:
    """One outer update of the speaker parameters (Adam, learning rate ``cfg.meta_lr``)."""
    grads, results, qbundle = meta_gradient(model, episodes, cfg)
    if not all(torch.isfinite(g).all() for g in grads.values()):
        raise TrainingError("non-finite meta-gradient")
    named = dict(model.named_parameters())
    optimizer.zero_grad()
    for k, g in grads.items():
        named[k].grad = g
    optimizer.step()
    return results, qbundle


def query_loss_after_adaptation(model: StyleTTS, episodes: Sequence[TaskEpisode], cfg: TrainConfig) -> float:
    dtype = next(model.parameters()).dtype
    obj = SpeakerObjective(model, cfg, "meta")
    support, query = episode_batches(episodes, dtype)
    base = {k: p.detach().requires_grad_(True) for k, p in model.named_parameters() if k in (LUT_KEY, ADAPTOR_W_KEY, ADAPTOR_B_KEY)}
    traj, _ = inner_adapt(lambda s: obj(s, support), stack_state(base, len(episodes)), cfg.inner_steps, cfg.inner_lr, False)
    with torch.no_grad():
        return float(obj({k: v.detach() for k, v in traj[-1].items()}, query).mean())


def meta_train(
    ckpt: Checkpoint,
    meta_train_corpus: Corpus,
    meta_val_corpus: Corpus,
    cfg: TrainConfig,
    iterations: int,
    metrics: MetricsLog | None = None,
) -> tuple[Checkpoint, dict]:
    """MAML over pseudo-speaker episodes; returns the best-validation theta_M."""
    ckpt.require_phase("theta_T")
    if not ckpt.meta.get("lut_reset"):
        raise PhaseError("meta-training needs a theta_T whose speaker LUT was reset to one shared entry")
    if meta_train_corpus.split != "meta_train" or meta_val_corpus.split != "meta_val":
        raise DataError("meta_train expects the meta_train and meta_val splits")
    model = model_from_checkpoint(ckpt)
    frozen_before = frozen_digest(dict(model.named_parameters()))
    speaker_params = freeze_for_speaker_training(model)
    opt = torch.optim.Adam(speaker_params, lr=cfg.meta_lr)

    sampler = EpisodeSampler(meta_train_corpus, cfg.n_shots)
    rng = child_rng(cfg.seed, "meta-episodes")
    val_sampler = EpisodeSampler(meta_val_corpus, cfg.n_shots)
    vrng = child_rng(cfg.seed, "meta-val-episodes")
    val_eps = [val_sampler.sample(vrng) for _ in range(cfg.meta_val_episodes)]

    def snapshot():
        return {k: p.detach().clone() for k, p in model.named_parameters() if k in (LUT_KEY, ADAPTOR_W_KEY, ADAPTOR_B_KEY)}

    initial_val = query_loss_after_adaptation(model, val_eps, cfg)
    best = (initial_val, 0, snapshot())
    history = [(0, initial_val)]
    if metrics is not None:
        metrics.write("meta_val", 0, {"query_total": initial_val}, cfg.meta_lr)
    monotone = 0
    for it in range(1, iterations + 1):
        episodes = [sampler.sample(rng) for _ in range(cfg.meta_batch_size)]
        results, qb = meta_step(model, episodes, cfg, opt)
        monotone += sum(all(b <= a + 1e-12 for a, b in zip(r.support_losses, r.support_losses[1:])) for r in results)
        if metrics is not None:
            metrics.write(
                "meta",
                it,
                qb.scalars(),
                cfg.meta_lr,
                support_first=float(np.mean([r.support_losses[0] for r in results])),
                support_last=float(np.mean([r.support_losses[-1] for r in results])),
            )
        if it % cfg.meta_val_every == 0 or it == iterations:
            v = query_loss_after_adaptation(model, val_eps, cfg)
            history.append((it, v))
            if metrics is not None:
                metrics.write("meta_val", it, {"query_total": v}, cfg.meta_lr)
            if v < best[0]:
                best = (v, it, snapshot())

    with torch.no_grad():
        named = dict(model.named_parameters())
        for k, v in best[2].items():
            named[k].copy_(v)
    if frozen_digest(dict(model.named_parameters())) != frozen_before:
        raise TrainingError("shared or prosody parameters changed during meta-training")
    info = {
        "initial_val": initial_val,
        "best_val": best[0],
        "best_iteration": best[1],
        "val_history": history,
        "monotone_support_fraction": monotone / max(1, iterations * cfg.meta_batch_size),
    }
    out = checkpoint_from_model(model, "theta_M", cfg, best[1], dict(ckpt.meta, meta=info))
    return out, info


# ---------------------------------------------------------------------------
# Adaptation

DEFAULT_SNAPSHOTS = (10, 50, 100, 200, 500, 1000)


def adapt_lr(cfg: TrainConfig, step: int) -> float:
    """Learning rate applied at (0-based) update ``step``."""
    return cfg.adapt_lr * cfg.adapt_lr_decay**step


@dataclass
class AdaptRun:
    """Result of several adaptation runs that were stepped together."""

    traces: list[list[dict]]  # per run, per step loss dicts
    snapshots: dict[int, State]  # step -> stacked speaker state [E, ...]
    final: State


def start_state(ckpt: Checkpoint, mode: str, seed: int, std: float = 0.01) -> tuple[Checkpoint, State]:
    """Starting checkpoint for adaptation: theta_M as is, or theta_T with a fresh one-entry LUT."""
    if mode == "meta":
        ckpt.require_phase("theta_M")
    elif mode == "baseline":
        ckpt.require_phase("theta_T")
        ckpt = reset_speaker_lut(ckpt, seed, std, tag="baseline-lut")
    else:
        raise ValueError(f"unknown adaptation mode {mode!r}")
    state = {k: ckpt.params[k].clone() for k in (LUT_KEY, ADAPTOR_W_KEY, ADAPTOR_B_KEY)}
    return ckpt, state


def check_uncontaminated(ckpt: Checkpoint, utts: Iterable[Utterance]) -> None:
    seen = set(ckpt.meta.get("train_speakers", []))
    bad = sorted({u.speaker_id for u in utts} & seen)
    if bad:
        raise ContaminationError(f"speakers {bad} were part of the training corpora")


def sgd_adapt(
    model: StyleTTS,
    states: Sequence[State],
    samples: Sequence[Sequence[Utterance]],
    steps: int,
    cfg: TrainConfig,
    snapshots: Iterable[int] = (),
    metrics: MetricsLog | None = None,
    run_names: Sequence[str] | None = None,
    log_every: int = 1,
) -> AdaptRun:
    """Step several independent adaptation runs together (vanilla SGD, exponential decay)."""
    if len(states) != len(samples):
        raise ValueError("one sample set per starting state")
    freeze_for_speaker_training(model)
    dtype = next(model.parameters()).dtype
    utts, group = [], []
    for e, s in enumerate(samples):
        utts += list(s)
        group += [e] * len(s)
    batch = collate(utts, group=group, dtype=dtype)
    keys = (LUT_KEY, ADAPTOR_W_KEY, ADAPTOR_B_KEY)
    state = {k: torch.stack([s[k].to(dtype) for s in states]).requires_grad_(True) for k in keys}
    obj = SpeakerObjective(model, cfg, "adapt")
    marks = sorted(set(int(m) for m in snapshots if 0 <= int(m) <= steps))
    snaps: dict[int, State] = {}
    traces: list[list[dict]] = [[] for _ in states]
    names = list(run_names) if run_names else [str(i) for i in range(len(states))]
    if 0 in marks:
        snaps[0] = {k: v.detach().clone() for k, v in state.items()}
    for step in range(steps):
        lr = adapt_lr(cfg, step)
        bundle = obj.bundle(state, batch)
        if not torch.isfinite(bundle.total).all():
            raise TrainingError(f"non-finite adaptation loss at step {step}: {bundle.scalars()}")
        grads = torch.autograd.grad(bundle.total.sum(), [state[k] for k in keys])
        with torch.no_grad():
            state = {k: (state[k] - lr * g).requires_grad_(True) for k, g in zip(keys, grads)}
        for e in range(len(states)):
            rec = {f: float(getattr(bundle, f)[e].detach()) for f in ("recon", "variance", "l_da", "l_orth", "total")}
            traces[e].append(rec)
            if metrics is not None and (step % log_every == 0 or step + 1 in marks):
                metrics.write("adapt", step, rec, lr, run=names[e])
        if step + 1 in marks:
            snaps[step + 1] = {k: v.detach().clone() for k, v in state.items()}
    return AdaptRun(traces, snaps, {k: v.detach() for k, v in state.items()})


def unstack(state: State, e: int) -> State:
    return {k: v[e] for k, v in state.items()}


def with_speaker_state(ckpt: Checkpoint, state: State, phase: str, step: int, meta: dict | None = None) -> Checkpoint:
    params = dict(ckpt.params)
    for k, v in state.items():
        params[k] = v.detach().to(torch.float32).clone()
    mcfg = dict(ckpt.model_config, lut_entries=int(params[LUT_KEY].shape[0]))
    return Checkpoint(phase, params, ckpt.partition, mcfg, ckpt.train_config, step, dict(ckpt.meta, **(meta or {})))


def adapt(
    ckpt: Checkpoint,
    samples: Sequence[Utterance],
    steps: int,
    cfg: TrainConfig,
    mode: str = "meta",
    snapshots: Iterable[int] = DEFAULT_SNAPSHOTS,
    metrics: MetricsLog | None = None,
    seed: int | None = None,
) -> tuple[Checkpoint, list[dict], dict[int, Checkpoint]]:
    """Few-shot adaptation of the speaker parameters to one unseen speaker.

    Returns the adapted checkpoint, the per-step loss trace and the snapshot
    checkpoints keyed by step.
    """
    if not samples:
        raise DataError("adaptation needs at least one sample")
    if len({u.speaker_id for u in samples}) != 1:
        raise DataError("adaptation samples must come from one speaker")
    check_uncontaminated(ckpt, samples)
    start, state = start_state(ckpt, mode, cfg.seed if seed is None else seed, cfg.lut_reset_std)
    model = model_from_checkpoint(start)
    run = sgd_adapt(model, [state], [list(samples)], steps, cfg, snapshots, metrics, [f"{mode}"])
    info = {"adapt_mode": mode, "adapt_speaker": samples[0].speaker_id}
    snaps = {s: with_speaker_state(start, unstack(st, 0), "adapted", s, info) for s, st in run.snapshots.items()}
    final = with_speaker_state(start, unstack(run.final, 0), "adapted", steps, info)
    return final, run.traces[0], snaps
