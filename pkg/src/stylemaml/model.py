"""Style-conditioned text-to-mel network.

Text encoder -> variance adaptor -> mel decoder, with every feed-forward
transformer block ending in a style-adaptive layer norm (SALN) whose scales
and shifts come from two paths of the style encoder: a speaker look-up table
followed by a speaker CLN adaptor, and a prosody mel encoder followed by a
prosody CLN adaptor.

All tensors are batch-first and padded; ``mask`` arguments are boolean
``[batch, length]`` with True on valid positions.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .core import ConfigError, Utterance, config_from_dict

LN_EPS = 1e-5

LUT_KEY = "style_encoder.speaker_lut.weight"
ADAPTOR_W_KEY = "style_encoder.speaker_adaptor.weight"
ADAPTOR_B_KEY = "style_encoder.speaker_adaptor.bias"


@dataclass
class ModelConfig:
    hidden: int = 256
    heads: int = 2
    kernel: int = 9
    filter_size: int = 1024
    blocks: int = 4
    style_dim: int = 128
    bins: int = 20
    alphabet_size: int = 32
    postnet_layers: int = 5
    postnet_channels: int = 256
    postnet_kernel: int = 5
    predictor_channels: int = 256
    predictor_kernel: int = 3
    prosody_kernel: int = 5
    classifier_hidden: int = 128
    n_classes: int = 30
    lut_entries: int = 30
    n_quant_bins: int = 32
    pitch_range: tuple = (-1.0, 1.0)
    energy_range: tuple = (0.3, 2.0)
    dropout: float = 0.1

    @property
    def n_saln(self) -> int:
        return 2 * self.blocks

    def validate(self) -> "ModelConfig":
        if self.hidden % self.heads:
            raise ConfigError("model.hidden must be divisible by model.heads")
        if self.style_dim % 2:
            raise ConfigError("model.style_dim must be even (two prosody attention heads)")
        if self.postnet_layers < 1 or self.blocks < 1:
            raise ConfigError("model needs >= 1 FFT block per side and >= 1 postnet layer")
        if self.lut_entries < 1:
            raise ConfigError("model.lut_entries must be >= 1")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pitch_range"] = list(self.pitch_range)
        d["energy_range"] = list(self.energy_range)
        return d

    @classmethod
    def from_dict(cls, data):
        return config_from_dict(cls, data)

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """CPU-sized variant; SALN count and style-vector size unchanged."""
        base = dict(
            hidden=64,
            kernel=3,
            filter_size=128,
            postnet_channels=32,
            predictor_channels=64,
        )
        base.update(overrides)
        return cls(**base)


# ---------------------------------------------------------------------------
# Batching


@dataclass
class Batch:
    tokens: torch.Tensor  # [B, L] long
    token_mask: torch.Tensor  # [B, L] bool
    durations: torch.Tensor  # [B, L] long
    pitch: torch.Tensor  # [B, L]
    energy: torch.Tensor  # [B, L]
    mel: torch.Tensor  # [B, T, bins]
    mel_mask: torch.Tensor  # [B, T] bool
    ref_mel: torch.Tensor  # [B, T', bins]
    ref_mask: torch.Tensor  # [B, T'] bool
    speaker_ids: torch.Tensor  # [B] long
    group: torch.Tensor  # [B] long, episode index
    n_groups: int = 1

    def to(self, dtype: torch.dtype) -> "Batch":
        return Batch(
            tokens=self.tokens,
            token_mask=self.token_mask,
            durations=self.durations,
            pitch=self.pitch.to(dtype),
            energy=self.energy.to(dtype),
            mel=self.mel.to(dtype),
            mel_mask=self.mel_mask,
            ref_mel=self.ref_mel.to(dtype),
            ref_mask=self.ref_mask,
            speaker_ids=self.speaker_ids,
            group=self.group,
            n_groups=self.n_groups,
        )


def _pad_stack(arrays: Sequence[np.ndarray], dtype) -> tuple[torch.Tensor, torch.Tensor]:
    n = max(len(a) for a in arrays)
    shape = (len(arrays), n) + tuple(arrays[0].shape[1:])
    out = np.zeros(shape, dtype=dtype)
    mask = np.zeros((len(arrays), n), dtype=bool)
    for i, a in enumerate(arrays):
        out[i, : len(a)] = a
        mask[i, : len(a)] = True
    return torch.from_numpy(out), torch.from_numpy(mask)


def collate(
    utts: Sequence[Utterance],
    refs: Sequence[np.ndarray] | None = None,
    group: Sequence[int] | None = None,
    dtype: torch.dtype = torch.float32,
) -> Batch:
    """Pad utterances into a batch. ``refs`` are prosody reference mels (default: self-reference)."""
    tokens, tmask = _pad_stack([u.tokens for u in utts], np.int64)
    durations, _ = _pad_stack([u.durations for u in utts], np.int64)
    pitch, _ = _pad_stack([u.pitch for u in utts], np.float64)
    energy, _ = _pad_stack([u.energy for u in utts], np.float64)
    mel, mmask = _pad_stack([u.mel for u in utts], np.float64)
    if refs is None:
        ref, rmask = mel, mmask
    else:
        ref, rmask = _pad_stack(list(refs), np.float64)
    g = torch.zeros(len(utts), dtype=torch.long) if group is None else torch.as_tensor(list(group), dtype=torch.long)
    return Batch(
        tokens=tokens,
        token_mask=tmask,
        durations=durations,
        pitch=pitch.to(dtype),
        energy=energy.to(dtype),
        mel=mel.to(dtype),
        mel_mask=mmask,
        ref_mel=ref.to(dtype),
        ref_mask=rmask,
        speaker_ids=torch.tensor([u.speaker_id for u in utts], dtype=torch.long),
        group=g,
        n_groups=int(g.max()) + 1 if len(g) else 1,
    )


# ---------------------------------------------------------------------------
# Building blocks


def layer_norm(h: torch.Tensor) -> torch.Tensor:
    return F.layer_norm(h, h.shape[-1:], eps=LN_EPS)


def sinusoid_encoding(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(angle)
    pe[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return pe.to(dtype)


@dataclass
class StyleParams:
    """Per-utterance SALN modulation, each tensor ``[batch, M, hidden]``."""

    speaker_gamma: torch.Tensor
    speaker_beta: torch.Tensor
    prosody_gamma: torch.Tensor
    prosody_beta: torch.Tensor

    @property
    def n_layers(self) -> int:
        return self.speaker_gamma.shape[1]


def saln_forward(h: torch.Tensor, i: int, sp: StyleParams) -> torch.Tensor:
    """Style-adaptive layer norm of ``h`` [B, T, H] with the i-th (1-based) layer's parameters."""
    if not 1 <= i <= sp.n_layers:
        raise IndexError(f"SALN layer index {i} outside 1..{sp.n_layers}")
    if h.shape[-1] != sp.speaker_gamma.shape[-1]:
        raise ValueError(f"hidden size {h.shape[-1]} != style size {sp.speaker_gamma.shape[-1]}")
    k = i - 1
    n = layer_norm(h)
    gs, bs = sp.speaker_gamma[:, k, None, :], sp.speaker_beta[:, k, None, :]
    gp, bp = sp.prosody_gamma[:, k, None, :], sp.prosody_beta[:, k, None, :]
    return (gs * n + bs) + (gp * n + bp)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        b, t, d = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // self.heads)
        scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
        ctx = torch.softmax(scores, dim=-1) @ v
        return self.out(ctx.transpose(1, 2).reshape(b, t, d))


def _conv(x: torch.Tensor, conv: nn.Conv1d) -> torch.Tensor:
    return conv(x.transpose(1, 2)).transpose(1, 2)


class FFTBlock(nn.Module):
    """Self-attention + conv feed-forward; the closing normalization is a SALN."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.hidden, cfg.heads)
        self.norm = nn.LayerNorm(cfg.hidden)
        self.ff_in = nn.Conv1d(cfg.hidden, cfg.filter_size, cfg.kernel, padding=cfg.kernel // 2)
        self.ff_out = nn.Conv1d(cfg.filter_size, cfg.hidden, 1)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, mask, layer: int, sp: StyleParams):
        m = mask[..., None].to(x.dtype)
        x = self.norm(x + self.dropout(self.attn(x, mask))) * m
        y = _conv(F.relu(_conv(x, self.ff_in)), self.ff_out)
        return saln_forward(x + self.dropout(y), layer, sp) * m


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h = cfg.hidden
        self.embedding = nn.Embedding(cfg.alphabet_size, h)
        self.prenet_conv1 = nn.Conv1d(h, h, 3, padding=1)
        self.prenet_conv2 = nn.Conv1d(h, h, 3, padding=1)
        self.prenet_linear = nn.Linear(h, h)
        self.blocks = nn.ModuleList(FFTBlock(cfg) for _ in range(cfg.blocks))
        self.dropout = nn.Dropout(cfg.dropout)


class VariancePredictor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c, k = cfg.predictor_channels, cfg.predictor_kernel
        self.conv1 = nn.Conv1d(cfg.hidden, c, k, padding=k // 2)
        self.norm1 = nn.LayerNorm(c)
        self.conv2 = nn.Conv1d(c, c, k, padding=k // 2)
        self.norm2 = nn.LayerNorm(c)
        self.linear = nn.Linear(c, 1)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, h, mask):
        m = mask[..., None].to(h.dtype)
        x = self.dropout(self.norm1(F.relu(_conv(h * m, self.conv1)))) * m
        x = self.dropout(self.norm2(F.relu(_conv(x, self.conv2)))) * m
        return self.linear(x).squeeze(-1) * mask.to(h.dtype)


class VarianceAdaptor(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.duration = VariancePredictor(cfg)
        self.pitch = VariancePredictor(cfg)
        self.energy = VariancePredictor(cfg)
        self.pitch_embedding = nn.Embedding(cfg.n_quant_bins, cfg.hidden)
        self.energy_embedding = nn.Embedding(cfg.n_quant_bins, cfg.hidden)
        lo, hi = cfg.pitch_range
        self.register_buffer("pitch_bounds", torch.linspace(lo, hi, cfg.n_quant_bins - 1), persistent=False)
        lo, hi = cfg.energy_range
        self.register_buffer("energy_bounds", torch.linspace(lo, hi, cfg.n_quant_bins - 1), persistent=False)


class MelDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.blocks = nn.ModuleList(FFTBlock(cfg) for _ in range(cfg.blocks))
        self.proj = nn.Linear(cfg.hidden, cfg.bins)
        chans = [cfg.bins] + [cfg.postnet_channels] * (cfg.postnet_layers - 1) + [cfg.bins]
        self.postnet = nn.ModuleList(
            nn.Conv1d(a, b, cfg.postnet_kernel, padding=cfg.postnet_kernel // 2) for a, b in zip(chans[:-1], chans[1:])
        )


class ProsodyEncoder(nn.Module):
    """Spectral MLP -> two gated temporal convs -> self-attention -> masked mean.

    No positional encoding: the pooled vector is invariant to frame order
    wherever the convolutions' receptive field does not see it.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, k = cfg.style_dim, cfg.prosody_kernel
        self.spectral1 = nn.Linear(cfg.bins, d)
        self.spectral2 = nn.Linear(d, d)
        self.temporal = nn.ModuleList(nn.Conv1d(d, 2 * d, k, padding=k // 2) for _ in range(2))
        self.attn = MultiHeadAttention(d, 2)

    def forward(self, mel, mask, pool: bool = True):
        m = mask[..., None].to(mel.dtype)
        x = F.mish(self.spectral2(F.mish(self.spectral1(mel)))) * m
        for conv in self.temporal:
            x = (x + F.glu(_conv(x, conv), dim=-1)) * m
        x = (x + self.attn(x, mask)) * m
        if not pool:
            return x
        return x.sum(1) / m.sum(1).clamp_min(1.0)


def _cln_adaptor(style_dim: int, cfg: ModelConfig) -> nn.Linear:
    lin = nn.Linear(style_dim, 2 * cfg.n_saln * cfg.hidden)
    with torch.no_grad():
        lin.weight.zero_()
        lin.bias.zero_()
        lin.bias[: cfg.n_saln * cfg.hidden] = 1.0
    return lin


class StyleEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.speaker_lut = nn.Embedding(cfg.lut_entries, cfg.style_dim)
        self.speaker_adaptor = _cln_adaptor(cfg.style_dim, cfg)
        self.prosody_encoder = ProsodyEncoder(cfg)
        self.prosody_adaptor = _cln_adaptor(cfg.style_dim, cfg)


class SpeakerClassifier(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(cfg.style_dim, cfg.classifier_hidden),
            nn.ReLU(),
            nn.Linear(cfg.classifier_hidden, cfg.n_classes),
        )

    def forward(self, x):
        return self.net(x)


# ---------------------------------------------------------------------------


class StyleTTS(nn.Module):
    """The full network; speaker parameters may be supplied externally per episode.

    ``speaker_state`` maps the three speaker-partition parameter names to
    tensors with a leading episode axis ``E``; utterance ``b`` then uses episode
    ``batch.group[b]``. This lets many inner loops share one batched forward.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.text_encoder = TextEncoder(cfg)
        self.variance_adaptor = VarianceAdaptor(cfg)
        self.mel_decoder = MelDecoder(cfg)
        self.style_encoder = StyleEncoder(cfg)
        self.speaker_classifier = SpeakerClassifier(cfg)

    # -- style ---------------------------------------------------------------

    def speaker_state(self) -> dict[str, torch.Tensor]:
        p = dict(self.named_parameters())
        return {k: p[k].unsqueeze(0) for k in (LUT_KEY, ADAPTOR_W_KEY, ADAPTOR_B_KEY)}

    def _split(self, gb: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        m, h = self.cfg.n_saln, self.cfg.hidden
        return gb[:, : m * h].reshape(-1, m, h), gb[:, m * h :].reshape(-1, m, h)

    def _lut_rows(self, speaker_ids: torch.Tensor, entries: int) -> torch.Tensor:
        if entries == 1:
            return torch.zeros_like(speaker_ids)
        if (speaker_ids < 0).any() or (speaker_ids >= entries).any():
            bad = speaker_ids[(speaker_ids < 0) | (speaker_ids >= entries)].tolist()
            raise LookupError(f"speaker ids {bad} not in the {entries}-entry speaker LUT")
        return speaker_ids

    def speaker_path(self, speaker_ids, group, speaker_state=None):
        """Speaker vectors [B, D] and flat speaker SALN parameters [B, 2MH]."""
        state = speaker_state or self.speaker_state()
        lut, w, b = state[LUT_KEY], state[ADAPTOR_W_KEY], state[ADAPTOR_B_KEY]
        rows = self._lut_rows(speaker_ids, lut.shape[1])
        if lut.shape[1] == 1:
            vec_e = lut[:, 0]
            gb_e = torch.einsum("eod,ed->eo", w, vec_e) + b
            return vec_e[group], gb_e[group]
        vec = lut[group, rows]
        if w.shape[0] == 1:
            return vec, vec @ w[0].T + b[0]
        return vec, torch.einsum("bod,bd->bo", w[group], vec) + b[group]

    def prosody_mel_encode(self, mel, mask=None):
        if mask is None:
            mask = torch.ones(mel.shape[:2], dtype=torch.bool)
        if mel.shape[1] < 1:
            raise ValueError("prosody reference needs at least one frame")
        return self.style_encoder.prosody_encoder(mel, mask)

    def style_encode(self, speaker_ids, ref_mel, ref_mask, group=None, speaker_state=None):
        if group is None:
            group = torch.zeros_like(speaker_ids)
        spk_vec, spk_gb = self.speaker_path(speaker_ids, group, speaker_state)
        pro_vec = self.prosody_mel_encode(ref_mel, ref_mask)
        pro_gb = self.style_encoder.prosody_adaptor(pro_vec)
        sg, sb = self._split(spk_gb)
        pg, pb = self._split(pro_gb)
        return (spk_vec, pro_vec), StyleParams(sg, sb, pg, pb)

    # -- trunk ---------------------------------------------------------------

    def text_encode(self, tokens, mask, sp: StyleParams):
        if (tokens < 0).any() or (tokens >= self.cfg.alphabet_size).any():
            raise ValueError("token id out of range")
        enc = self.text_encoder
        m = mask[..., None]
        x = enc.embedding(tokens)
        m = m.to(x.dtype)
        y = enc.dropout(F.relu(_conv(x * m, enc.prenet_conv1))) * m
        y = enc.dropout(F.relu(_conv(y, enc.prenet_conv2))) * m
        x = (x + enc.prenet_linear(y)) * m
        x = x + sinusoid_encoding(x.shape[1], x.shape[2], x.dtype)[None] * m
        for i, block in enumerate(enc.blocks):
            x = block(x, mask, i + 1, sp)
        return x

    def variance_adapt(self, h, mask, durations=None, pitch=None, energy=None):
        """Returns (expanded [B,T,H], frame mask, predictions dict)."""
        va = self.variance_adaptor
        log_d = va.duration(h, mask)
        p_pred = va.pitch(h, mask)
        e_pred = va.energy(h, mask)
        teacher = durations is not None
        if teacher:
            if pitch is None or energy is None:
                raise ValueError("teacher forcing needs durations, pitch and energy")
            if not (durations.shape == pitch.shape == energy.shape == mask.shape):
                raise ValueError("teacher-forcing targets misaligned with tokens")
            d, p, e = durations, pitch, energy
        else:
            d = torch.clamp(torch.round(torch.exp(log_d.detach())), min=1).long()
            p, e = p_pred.detach(), e_pred.detach()
        d = d * mask.long()
        p_idx = torch.bucketize(p.contiguous(), va.pitch_bounds.to(p.dtype))
        e_idx = torch.bucketize(e.contiguous(), va.energy_bounds.to(e.dtype))
        m = mask[..., None].to(h.dtype)
        h = h + (va.pitch_embedding(p_idx) + va.energy_embedding(e_idx)) * m
        expanded, frame_mask = length_regulate(h, d)
        return expanded, frame_mask, {"log_duration": log_d, "pitch": p_pred, "energy": e_pred, "durations": d}

    def mel_decode(self, x, mask, sp: StyleParams):
        dec = self.mel_decoder
        m = mask[..., None].to(x.dtype)
        x = x + sinusoid_encoding(x.shape[1], x.shape[2], x.dtype)[None] * m
        for i, block in enumerate(dec.blocks):
            x = block(x, mask, self.cfg.blocks + i + 1, sp)
        raw = dec.proj(x) * m
        y = raw
        for j, conv in enumerate(dec.postnet):
            y = _conv(y, conv)
            if j < len(dec.postnet) - 1:
                y = torch.tanh(y)
            y = y * m
        return raw, raw + y

    def forward(self, batch: Batch, mode: str = "teacher_forced", speaker_state=None) -> dict:
        if mode not in ("teacher_forced", "inference"):
            raise ValueError(f"unknown mode {mode!r}")
        (spk_vec, pro_vec), sp = self.style_encode(
            batch.speaker_ids, batch.ref_mel, batch.ref_mask, batch.group, speaker_state
        )
        h = self.text_encode(batch.tokens, batch.token_mask, sp)
        if mode == "teacher_forced":
            x, fmask, var = self.variance_adapt(h, batch.token_mask, batch.durations, batch.pitch, batch.energy)
        else:
            x, fmask, var = self.variance_adapt(h, batch.token_mask)
        raw, final = self.mel_decode(x, fmask, sp)
        return {
            "raw": raw,
            "final": final,
            "mel_mask": fmask,
            "speaker_vec": spk_vec,
            "prosody_vec": pro_vec,
            "style": sp,
            **var,
        }


def length_regulate(h: torch.Tensor, durations: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Repeat token t of each row ``durations[t]`` times; pads rows to the longest."""
    total = durations.sum(1)
    t_max = max(int(total.max()), 1)
    ends = torch.cumsum(durations, 1)  # [B, L]
    frames = torch.arange(t_max)[None, :].expand(h.shape[0], -1)
    idx = torch.searchsorted(ends, frames.contiguous(), right=True).clamp(max=h.shape[1] - 1)
    frame_mask = frames < total[:, None]
    out = h.gather(1, idx[..., None].expand(-1, -1, h.shape[2])) * frame_mask[..., None].to(h.dtype)
    return out, frame_mask


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
