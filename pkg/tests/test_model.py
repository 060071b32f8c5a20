import numpy as np
import pytest
import torch

from stylemaml.meta import build_model
from stylemaml.model import (
    ADAPTOR_B_KEY,
    LUT_KEY,
    ModelConfig,
    StyleParams,
    collate,
    layer_norm,
    length_regulate,
    saln_forward,
    sinusoid_encoding,
)

from conftest import randomize_style, tiny_model_config


def _style(b=2, m=3, h=5, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    return StyleParams(*(torch.randn(b, m, h, generator=g, dtype=dtype) for _ in range(4)))


def _batch(corpora, n=3, split="meta_train", dtype=torch.float64):
    return collate(corpora[split].utterances[:n], dtype=dtype)


# -- SALN -------------------------------------------------------------------


def test_saln_identity_style_gives_twice_layer_norm():
    h = torch.randn(2, 4, 5, dtype=torch.float64)
    ones, zeros = torch.ones(2, 3, 5, dtype=torch.float64), torch.zeros(2, 3, 5, dtype=torch.float64)
    out = saln_forward(h, 2, StyleParams(ones, zeros, ones, zeros))
    torch.testing.assert_close(out, 2 * layer_norm(h))


def test_saln_of_constant_input_is_sum_of_betas():
    h = torch.full((2, 4, 5), 3.7, dtype=torch.float64)
    sp = _style()
    out = saln_forward(h, 1, sp)
    expected = (sp.speaker_beta[:, 0] + sp.prosody_beta[:, 0])[:, None, :].expand_as(out)
    torch.testing.assert_close(out, expected, atol=1e-6, rtol=0)


def test_saln_matches_scalar_loop_reference():
    h = torch.randn(2, 3, 5, dtype=torch.float64)
    sp = _style(seed=4)
    out = saln_forward(h, 3, sp)
    for b in range(2):
        for t in range(3):
            row = h[b, t].tolist()
            mu = sum(row) / 5
            var = sum((v - mu) ** 2 for v in row) / 5
            for c in range(5):
                n = (row[c] - mu) / (var + 1e-5) ** 0.5
                ref = (sp.speaker_gamma[b, 2, c] * n + sp.speaker_beta[b, 2, c]) + (
                    sp.prosody_gamma[b, 2, c] * n + sp.prosody_beta[b, 2, c]
                )
                assert abs(out[b, t, c].item() - ref.item()) < 1e-10


def test_layer_norm_has_zero_mean_unit_variance():
    x = torch.randn(4, 7, 16, dtype=torch.float64) * 3 + 2
    n = layer_norm(x)
    torch.testing.assert_close(n.mean(-1), torch.zeros(4, 7, dtype=torch.float64), atol=1e-6, rtol=0)
    torch.testing.assert_close(n.var(-1, unbiased=False), torch.ones(4, 7, dtype=torch.float64), atol=1e-3, rtol=0)


def test_saln_decomposes_into_speaker_and_prosody_parts():
    h = torch.randn(2, 3, 5, dtype=torch.float64)
    sp = _style(seed=2)
    z = torch.zeros_like(sp.speaker_gamma)
    spk_only = saln_forward(h, 1, StyleParams(sp.speaker_gamma, sp.speaker_beta, z, z))
    pro_only = saln_forward(h, 1, StyleParams(z, z, sp.prosody_gamma, sp.prosody_beta))
    torch.testing.assert_close(saln_forward(h, 1, sp), spk_only + pro_only)


def test_saln_rejects_bad_index_and_width():
    sp = _style()
    with pytest.raises(IndexError):
        saln_forward(torch.randn(2, 3, 5, dtype=torch.float64), 4, sp)
    with pytest.raises(ValueError):
        saln_forward(torch.randn(2, 3, 6, dtype=torch.float64), 1, sp)


# -- style encoder ----------------------------------------------------------


def test_fresh_style_encoder_gives_unit_gamma_zero_beta(tiny_corpora):
    model = build_model(tiny_model_config(), seed=0, dtype=torch.float64)
    b = _batch(tiny_corpora)
    _, sp = model.style_encode(b.speaker_ids, b.ref_mel, b.ref_mask)
    for g in (sp.speaker_gamma, sp.prosody_gamma):
        torch.testing.assert_close(g, torch.ones_like(g))
    for be in (sp.speaker_beta, sp.prosody_beta):
        torch.testing.assert_close(be, torch.zeros_like(be))
    assert sp.speaker_gamma.shape == (3, model.cfg.n_saln, model.cfg.hidden)


def test_prosody_encoder_single_frame_and_permutation_invariance(tiny_model):
    tiny_model.eval()
    one = tiny_model.prosody_mel_encode(torch.randn(1, 1, 6, dtype=torch.float64))
    assert one.shape == (1, 4) and torch.isfinite(one).all()
    with pytest.raises(ValueError):
        tiny_model.prosody_mel_encode(torch.zeros(1, 0, 6, dtype=torch.float64))
    mel = torch.randn(2, 5, 6, dtype=torch.float64)
    mask = torch.ones(2, 5, dtype=torch.bool)
    a = tiny_model.prosody_mel_encode(mel, mask)
    b = tiny_model.prosody_mel_encode(mel[[1, 0]], mask)
    torch.testing.assert_close(a[[1, 0]], b)


def test_initial_activation_norms_are_sane(default_corpora):
    cfg = ModelConfig.desk()
    model = build_model(cfg, seed=0)
    model.eval()
    b = collate(default_corpora["meta_train"].utterances[:4])
    out = model(b)
    for key in ("raw", "final", "speaker_vec", "prosody_vec"):
        norm = out[key].norm().item()
        assert 1e-3 <= norm <= 1e3, (key, norm)
    assert model.style_encoder.speaker_lut.weight.shape == (cfg.lut_entries, 128)


# -- trunk --------------------------------------------------------------------


def test_text_encode_shape_and_padding(tiny_model, tiny_corpora):
    b = _batch(tiny_corpora)
    _, sp = tiny_model.style_encode(b.speaker_ids, b.ref_mel, b.ref_mask)
    h = tiny_model.text_encode(b.tokens, b.token_mask, sp)
    assert h.shape == (*b.tokens.shape, tiny_model.cfg.hidden)
    with pytest.raises(ValueError):
        tiny_model.text_encode(b.tokens + 100, b.token_mask, sp)


def test_positional_encoding_at_origin():
    pe = sinusoid_encoding(3, 8)
    torch.testing.assert_close(pe[0, 0::2], torch.zeros(4))
    torch.testing.assert_close(pe[0, 1::2], torch.ones(4))


def test_speaker_id_changes_text_encoding(tiny_model, tiny_corpora):
    tiny_model.eval()
    with torch.no_grad():
        tiny_model.style_encoder.speaker_lut.weight.normal_()
    b = _batch(tiny_corpora, 1)
    outs = []
    for s in (0, 1):
        ids = torch.tensor([s])
        _, sp = tiny_model.style_encode(ids, b.ref_mel, b.ref_mask)
        outs.append(tiny_model.text_encode(b.tokens, b.token_mask, sp))
    assert (outs[0] - outs[1]).abs().max() > 1e-6


def test_unknown_speaker_id_raises(tiny_model, tiny_corpora):
    b = _batch(tiny_corpora, 1)
    with pytest.raises(LookupError):
        tiny_model.style_encode(torch.tensor([7]), b.ref_mel, b.ref_mask)


def test_length_regulation_expands_by_duration():
    h = torch.tensor([[[1.0], [2.0]]])
    out, mask = length_regulate(h, torch.tensor([[2, 3]]))
    assert out[0, :, 0].tolist() == [1.0, 1.0, 2.0, 2.0, 2.0]
    assert mask.all()


def test_zero_postnet_gives_final_equal_raw(tiny_model, tiny_corpora):
    with torch.no_grad():
        for conv in tiny_model.mel_decoder.postnet:
            conv.weight.zero_()
            conv.bias.zero_()
    out = tiny_model(_batch(tiny_corpora))
    torch.testing.assert_close(out["final"], out["raw"])


def test_teacher_forced_frame_count_matches_durations(tiny_model, tiny_corpora):
    b = _batch(tiny_corpora, 4)
    out = tiny_model(b)
    np.testing.assert_array_equal(out["mel_mask"].sum(1).numpy(), b.durations.sum(1).numpy())
    assert out["raw"].shape[:2] == b.mel.shape[:2]
    with pytest.raises(ValueError):
        tiny_model.variance_adapt(torch.zeros(1, 3, 8, dtype=torch.float64), torch.ones(1, 3, dtype=torch.bool),
                                  torch.ones(1, 2, dtype=torch.long), torch.zeros(1, 2), torch.zeros(1, 2))


def test_inference_mode_runs_and_uses_predicted_durations(tiny_model, tiny_corpora):
    tiny_model.eval()
    out = tiny_model(_batch(tiny_corpora), mode="inference")
    assert (out["durations"][_batch(tiny_corpora).token_mask] >= 1).all()
    with pytest.raises(ValueError):
        tiny_model(_batch(tiny_corpora), mode="bogus")


def test_same_seed_builds_identical_model():
    a = build_model(tiny_model_config(), seed=11)
    b = build_model(tiny_model_config(), seed=11)
    c = build_model(tiny_model_config(), seed=12)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


def test_external_speaker_state_matches_module_parameters(tiny_model, tiny_corpora):
    tiny_model.eval()
    b = _batch(tiny_corpora)
    torch.testing.assert_close(tiny_model(b)["raw"], tiny_model(b, speaker_state=tiny_model.speaker_state())["raw"])


def test_trunk_jacobian_matches_finite_differences(tiny_corpora):
    model = randomize_style(build_model(tiny_model_config(), seed=3, dtype=torch.float64))
    model.eval()
    b = _batch(tiny_corpora, 2)
    bias = dict(model.named_parameters())[ADAPTOR_B_KEY]
    lut = dict(model.named_parameters())[LUT_KEY]

    def f():
        return model(b)["final"].sum()

    f().backward()
    eps = 1e-6
    for p in (bias, lut):
        flat = p.data.view(-1)
        for j in range(0, flat.numel(), max(1, flat.numel() // 6)):
            old = flat[j].item()
            flat[j] = old + eps
            up = f().item()
            flat[j] = old - eps
            down = f().item()
            flat[j] = old
            fd = (up - down) / (2 * eps)
            assert abs(fd - p.grad.view(-1)[j].item()) <= 1e-5 * max(1.0, abs(fd))
