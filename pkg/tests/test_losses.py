import math

import numpy as np
import pytest
import torch

from stylemaml.core import TrainConfig, partition_parameters
from stylemaml.losses import (
    combine,
    domain_adv_loss,
    grl,
    orth_loss,
    recon_loss,
    total_loss,
    variance_losses,
)
from stylemaml.meta import build_model
from stylemaml.model import SpeakerClassifier, collate

from conftest import randomize_style, tiny_model_config

D = torch.float64


def test_recon_zero_and_constant_offset():
    t = torch.randn(4, 3, dtype=D)
    assert recon_loss(t, t, t).item() == 0.0
    assert recon_loss(t, t + 1, t).item() == pytest.approx(1.0)
    assert recon_loss(t, t + 1, t, on_raw=False).item() == pytest.approx(1.0)
    with pytest.raises(ValueError):
        recon_loss(t, t[:2], t)


def test_recon_matches_scalar_oracle():
    g = torch.Generator().manual_seed(0)
    raw, final, tgt = (torch.randn(2, 3, generator=g, dtype=D) for _ in range(3))
    ref = 0.0
    for a in (raw, final):
        ref += sum(abs(a[i, j].item() - tgt[i, j].item()) for i in range(2) for j in range(3)) / 6
    assert recon_loss(raw, final, tgt).item() == pytest.approx(ref, abs=1e-12)


def test_recon_respects_mask_and_frame_reduction():
    tgt = torch.zeros(1, 3, 2, dtype=D)
    pred = torch.ones(1, 3, 2, dtype=D)
    pred[0, 2] = 100.0
    mask = torch.tensor([[True, True, False]])
    assert recon_loss(pred, pred, tgt, mask, on_raw=False).item() == pytest.approx(1.0)
    assert recon_loss(pred, pred, tgt, mask, reduction="frame", on_raw=False).item() == pytest.approx(2.0)


def test_variance_losses_closed_forms():
    d = torch.ones(5, dtype=torch.long)
    p, e = torch.zeros(5, dtype=D), torch.ones(5, dtype=D)
    assert variance_losses(torch.zeros(5, dtype=D), p, e, d, p, e).item() == 0.0
    val = variance_losses(torch.full((5,), math.log(2.0), dtype=D), p, e, d, p, e).item()
    assert val == pytest.approx(math.log(2) ** 2, abs=1e-12)
    assert val == pytest.approx(0.4805, abs=1e-4)
    with pytest.raises(ValueError):
        variance_losses(torch.zeros(4, dtype=D), p, e, d, p, e)


def test_variance_losses_match_scalar_oracle():
    rng = np.random.default_rng(4)
    ld, pp, ep, p, e = (torch.tensor(rng.normal(size=6)) for _ in range(5))
    d = torch.tensor(rng.integers(1, 6, size=6))
    ref = sum(
        (ld[i].item() - math.log(d[i].item())) ** 2 + (pp[i].item() - p[i].item()) ** 2 + (ep[i].item() - e[i].item()) ** 2
        for i in range(6)
    ) / 6
    assert variance_losses(ld, pp, ep, d, p, e).item() == pytest.approx(ref, abs=1e-6)


def test_grl_identity_forward_and_reversed_backward():
    x = torch.tensor(3.0, dtype=D, requires_grad=True)
    assert grl(x).item() == 3.0
    (gx,) = torch.autograd.grad(grl(x, 1.0) ** 2, x)
    assert gx.item() == pytest.approx(-6.0)
    (plain,) = torch.autograd.grad(x**2, x)
    assert plain.item() == pytest.approx(6.0)
    (zero,) = torch.autograd.grad(grl(x, 0.0) ** 2, x)
    assert zero.item() == 0.0
    with pytest.raises(ValueError):
        grl(x, -1.0)


def test_grl_reverses_finite_difference_gradient_of_random_head():
    g = torch.Generator().manual_seed(1)
    w = torch.randn(5, generator=g, dtype=D)
    x = torch.randn(5, generator=g, dtype=D, requires_grad=True)
    head = lambda z: torch.tanh(z @ w) + (z**2).sum()
    lam = 0.7
    (gx,) = torch.autograd.grad(head(grl(x, lam)), x)
    eps = 1e-6
    fd = torch.zeros(5, dtype=D)
    for i in range(5):
        e = torch.zeros(5, dtype=D)
        e[i] = eps
        fd[i] = (head(x.detach() + e) - head(x.detach() - e)) / (2 * eps)
    torch.testing.assert_close(gx, -lam * fd, atol=1e-8, rtol=1e-6)


def _classifier(k=4, dim=3):
    return SpeakerClassifier(tiny_model_config(style_dim=dim, n_classes=k, lut_entries=k)).to(D)


def test_domain_adv_loss_uniform_logits_is_log_k():
    clf = _classifier(k=4)
    with torch.no_grad():
        clf.net[-1].weight.zero_()
        clf.net[-1].bias.zero_()
    loss = domain_adv_loss(torch.randn(6, 3, dtype=D), torch.tensor([0, 1, 2, 3, 0, 1]), clf)
    assert loss.item() == pytest.approx(math.log(4))
    with pytest.raises(ValueError):
        domain_adv_loss(torch.randn(1, 3, dtype=D), torch.tensor([4]), clf)


def test_domain_adv_gradient_opposes_plain_gradient():
    clf = _classifier()
    for p in clf.parameters():
        p.requires_grad_(False)
    x = torch.randn(5, 3, dtype=D, requires_grad=True)
    ids = torch.tensor([0, 1, 2, 3, 1])
    (rev,) = torch.autograd.grad(domain_adv_loss(x, ids, clf, 1.0).sum(), x)
    (plain,) = torch.autograd.grad(torch.nn.functional.cross_entropy(clf(x), ids), x)
    cos = torch.nn.functional.cosine_similarity(rev.flatten(), plain.flatten(), dim=0)
    assert cos.item() == pytest.approx(-1.0, abs=1e-12)


def test_orth_loss_closed_forms():
    s = torch.tensor([1.0, 1.0, 0.0], dtype=D)
    assert orth_loss(s, torch.tensor([0.0, 0.0, 2.0], dtype=D)).item() == 0.0
    assert orth_loss(s, -3 * s).item() == pytest.approx(1.0, abs=1e-7)
    assert orth_loss(s, torch.tensor([1.0, 0.0, 0.0], dtype=D)).item() == pytest.approx(0.5, abs=1e-7)
    assert orth_loss(torch.zeros(3, dtype=D), s).item() == 0.0


def test_orth_loss_bounded_and_scale_invariant():
    g = torch.Generator().manual_seed(2)
    s, p = torch.randn(20, 6, generator=g, dtype=D), torch.randn(20, 6, generator=g, dtype=D)
    v = orth_loss(s, p).item()
    assert 0.0 <= v <= 1.0
    assert orth_loss(7.5 * s, 0.2 * p).item() == pytest.approx(v, abs=1e-6)


def test_combine_phase_gating():
    r, v, o = torch.tensor(1.0), torch.tensor(2.0), torch.tensor(3.0)
    assert combine(r, v, torch.tensor(5.0), o, "pretrain", 0.01, 0.02).item() == pytest.approx(3.11)
    for phase in ("meta", "adapt"):
        a = combine(r, v, torch.tensor(5.0), o, phase, 0.01, 0.02)
        b = combine(r, v, torch.tensor(500.0), o, phase, 0.01, 0.02)
        assert a.item() == b.item() == pytest.approx(3.06)
    z = torch.tensor(0.0)
    assert combine(z, z, z, z, "pretrain", 0.01, 0.02).item() == 0.0
    with pytest.raises(ValueError):
        combine(r, v, o, o, "finetune", 0.01, 0.02)


def test_default_loss_weights():
    cfg = TrainConfig()
    assert (cfg.alpha_da, cfg.alpha_orth) == (0.01, 0.02)


# -- full objective vs finite differences ----------------------------------------


def _setup(tiny_corpora):
    model = randomize_style(build_model(tiny_model_config(), seed=5, dtype=D), seed=2)
    model.eval()
    with torch.no_grad():
        model.style_encoder.speaker_lut.weight.normal_()
    utts = [u for u in tiny_corpora["pretrain"].utterances if u.speaker_id < 3][:3]
    return model, collate(utts, dtype=D)


def _sample_coords(model, names, per_param=2):
    params = dict(model.named_parameters())
    coords = []
    for n in names:
        numel = params[n].numel()
        for j in np.linspace(0, numel - 1, min(per_param, numel)).astype(int):
            coords.append((n, int(j)))
    return coords


@pytest.mark.parametrize("phase", ["pretrain", "meta", "adapt"])
def test_total_loss_gradients_match_finite_differences(tiny_corpora, phase):
    model, batch = _setup(tiny_corpora)
    cfg = TrainConfig(alpha_da=0.3, alpha_orth=0.2)
    params = dict(model.named_parameters())
    part = partition_parameters(params)
    reversed_names = {n for n in part.prosody if n.startswith("style_encoder.prosody_encoder.")}

    def pieces():
        b = total_loss(model(batch), batch, model, phase, cfg)
        return (b.total - (cfg.alpha_da * b.l_da if phase == "pretrain" else 0)).sum(), b.l_da.sum()

    main, da = pieces()
    model.zero_grad()
    total_loss(model(batch), batch, model, phase, cfg).total.sum().backward()

    got, want = [], []
    eps = 1e-6
    for name, j in _sample_coords(model, sorted(params)):
        flat = params[name].data.view(-1)
        old = flat[j].item()
        flat[j] = old + eps
        mu, du = (t.item() for t in pieces())
        flat[j] = old - eps
        md, dd = (t.item() for t in pieces())
        flat[j] = old
        fd_main, fd_da = (mu - md) / (2 * eps), (du - dd) / (2 * eps)
        if phase == "pretrain":
            sign = -1.0 if name in reversed_names else 1.0
            expected = fd_main + sign * cfg.alpha_da * fd_da
        else:
            expected = fd_main
        grad = params[name].grad
        got.append(0.0 if grad is None else grad.view(-1)[j].item())
        want.append(expected)
    got, want = np.array(got), np.array(want)
    assert np.linalg.norm(want) > 0
    assert np.linalg.norm(got - want) / np.linalg.norm(want) < 1e-4


def test_classifier_does_not_reach_speaker_or_prosody_gradients_outside_pretrain(tiny_corpora):
    model, batch = _setup(tiny_corpora)
    cfg = TrainConfig()
    part = partition_parameters(dict(model.named_parameters()))
    watch = [n for n in part.speaker + part.prosody if not n.startswith("speaker_classifier.")]

    def grads():
        model.zero_grad()
        total_loss(model(batch), batch, model, "meta", cfg).total.sum().backward()
        p = dict(model.named_parameters())
        return {n: p[n].grad.clone() for n in watch if p[n].grad is not None}

    before = grads()
    with torch.no_grad():
        for p in model.speaker_classifier.parameters():
            p.add_(torch.randn_like(p))
    after = grads()
    assert before.keys() == after.keys() and before
    for n in before:
        assert torch.equal(before[n], after[n]), n


def test_unknown_speaker_ids_log_zero_adversarial_term(tiny_corpora):
    model, batch = _setup(tiny_corpora)
    batch.speaker_ids = torch.full_like(batch.speaker_ids, 30)
    single = model.speaker_state()
    with torch.no_grad():
        state = {k: v[:, :1].clone() if k.endswith("lut.weight") else v.clone() for k, v in single.items()}
    b = total_loss(model(batch, speaker_state=state), batch, model, "adapt", TrainConfig())
    assert b.l_da.item() == 0.0
    with pytest.raises(ValueError):
        total_loss(model(batch, speaker_state=state), batch, model, "pretrain", TrainConfig())
