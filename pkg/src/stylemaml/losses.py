"""Training objectives.

Every loss returns one value per group (episode) so that a batch holding many
independent inner loops can be differentiated in one pass; with a single
group this reduces to an ordinary scalar loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import TrainConfig

PHASES = ("pretrain", "meta", "adapt")
ORTH_EPS = 1e-8


def _group_sum(values: torch.Tensor, group: torch.Tensor, n_groups: int) -> torch.Tensor:
    out = torch.zeros(n_groups, dtype=values.dtype)
    return out.index_add(0, group, values)


def _group_mean(per_item: torch.Tensor, weight: torch.Tensor, group: torch.Tensor, n_groups: int) -> torch.Tensor:
    return _group_sum(per_item, group, n_groups) / _group_sum(weight, group, n_groups).clamp_min(1e-12)


def _ones_group(x: torch.Tensor, group, n_groups):
    if group is None:
        group = torch.zeros(x.shape[0], dtype=torch.long)
        n_groups = 1
    return group, n_groups


def recon_loss(raw, final, target, mask=None, group=None, n_groups=1, reduction="element", on_raw=True):
    """Mean absolute error of the postnet output (and of the raw decoder output) against the target."""
    if not raw.shape == final.shape == target.shape:
        raise ValueError(f"shape mismatch: raw {tuple(raw.shape)}, final {tuple(final.shape)}, target {tuple(target.shape)}")
    if raw.dim() == 2:
        raw, final, target = raw[None], final[None], target[None]
        mask = None if mask is None else mask[None]
    if mask is None:
        mask = torch.ones(target.shape[:2], dtype=torch.bool)
    group, n_groups = _ones_group(target, group, n_groups)
    m = mask[..., None].to(target.dtype)
    bins = target.shape[-1]
    frames = mask.to(target.dtype).sum(1)
    weight = frames * bins if reduction == "element" else frames
    total = ((final - target).abs() * m).sum((1, 2))
    out = _group_mean(total, weight, group, n_groups)
    if on_raw:
        out = out + _group_mean(((raw - target).abs() * m).sum((1, 2)), weight, group, n_groups)
    return out


def variance_losses(log_duration, pitch_pred, energy_pred, durations, pitch, energy, mask=None, group=None, n_groups=1):
    """MSE on log-durations, pitch and energy (unit weights), averaged over valid tokens.

    ``log_duration`` is the predictor output in the log-frame domain.
    """
    if not (log_duration.shape == pitch_pred.shape == energy_pred.shape == durations.shape == pitch.shape == energy.shape):
        raise ValueError("variance predictions and targets misaligned")
    if log_duration.dim() == 1:
        log_duration, pitch_pred, energy_pred = log_duration[None], pitch_pred[None], energy_pred[None]
        durations, pitch, energy = durations[None], pitch[None], energy[None]
        mask = None if mask is None else mask[None]
    if mask is None:
        mask = torch.ones(durations.shape, dtype=torch.bool)
    group, n_groups = _ones_group(durations, group, n_groups)
    m = mask.to(log_duration.dtype)
    log_target = torch.log(durations.to(log_duration.dtype).clamp_min(1.0))
    sq = (log_duration - log_target) ** 2 + (pitch_pred - pitch) ** 2 + (energy_pred - energy) ** 2
    return _group_mean((sq * m).sum(1), m.sum(1), group, n_groups)


class _GradReverse(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return -ctx.lam * grad, None


def grl(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lam`` on the way back."""
    if lam < 0:
        raise ValueError("GRL strength must be >= 0")
    return _GradReverse.apply(x, float(lam))


def domain_adv_loss(prosody_vec, speaker_ids, classifier, lam=1.0, group=None, n_groups=1):
    """Speaker cross-entropy of a classifier reading the gradient-reversed prosody vector."""
    n_classes = classifier.net[-1].out_features
    if (speaker_ids < 0).any() or (speaker_ids >= n_classes).any():
        raise ValueError(f"speaker ids outside the classifier's {n_classes} classes")
    group, n_groups = _ones_group(prosody_vec, group, n_groups)
    logits = classifier(grl(prosody_vec, lam))
    ce = F.cross_entropy(logits, speaker_ids, reduction="none")
    return _group_mean(ce, torch.ones_like(ce), group, n_groups)


def orth_loss(speaker_vec, prosody_vec, group=None, n_groups=1):
    """Squared cosine between speaker and prosody vectors, averaged per group."""
    if speaker_vec.shape != prosody_vec.shape:
        raise ValueError("speaker and prosody vectors differ in shape")
    if speaker_vec.dim() == 1:
        speaker_vec, prosody_vec = speaker_vec[None], prosody_vec[None]
    group, n_groups = _ones_group(speaker_vec, group, n_groups)
    dot = (speaker_vec * prosody_vec).sum(-1)
    cos2 = dot**2 / (((speaker_vec**2).sum(-1) + ORTH_EPS) * ((prosody_vec**2).sum(-1) + ORTH_EPS))
    return _group_mean(cos2, torch.ones_like(cos2), group, n_groups)


@dataclass
class LossBundle:
    recon: torch.Tensor
    variance: torch.Tensor
    l_da: torch.Tensor
    l_orth: torch.Tensor
    total: torch.Tensor

    def scalars(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach().mean()) for k in ("recon", "variance", "l_da", "l_orth", "total")}


def combine(recon, variance, l_da, l_orth, phase: str, alpha_da: float, alpha_orth: float) -> torch.Tensor:
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    total = recon + variance + alpha_orth * l_orth
    if phase == "pretrain":
        total = total + alpha_da * l_da
    return total


def total_loss(out: dict, batch, model, phase: str, cfg: TrainConfig) -> LossBundle:
    """Phase-gated objective: the adversarial term only contributes while pretraining."""
    if phase not in PHASES:
        raise ValueError(f"unknown phase {phase!r}")
    g, n = batch.group, batch.n_groups
    recon = recon_loss(
        out["raw"], out["final"], batch.mel, batch.mel_mask, g, n, cfg.recon_reduction, cfg.recon_on_raw
    )
    var = variance_losses(
        out["log_duration"], out["pitch"], out["energy"], batch.durations, batch.pitch, batch.energy, batch.token_mask, g, n
    )
    orth = orth_loss(out["speaker_vec"], out["prosody_vec"], g, n)
    n_classes = model.speaker_classifier.net[-1].out_features
    if phase == "pretrain":
        da = domain_adv_loss(out["prosody_vec"], batch.speaker_ids, model.speaker_classifier, cfg.grl_lambda, g, n)
    elif bool(((batch.speaker_ids >= 0) & (batch.speaker_ids < n_classes)).all()):
        with torch.no_grad():
            da = domain_adv_loss(out["prosody_vec"].detach(), batch.speaker_ids, model.speaker_classifier, 0.0, g, n)
    else:
        da = torch.zeros(n, dtype=recon.dtype)
    total = combine(recon, var, da, orth, phase, cfg.alpha_da, cfg.alpha_orth)
    return LossBundle(recon, var, da, orth, total)
