import dataclasses
import math

import numpy as np
import pytest

from stylemaml.evaluation import (
    AdaptationCurve,
    cosine_similarity,
    load_curves,
    make_probes,
    mcd,
    save_curves,
    score_generations,
    speaker_embedding,
    summarize,
)
from stylemaml.syndata import render_utterance

K = 10 / math.log(10)


def _dct_ortho(x):
    n = len(x)
    out = []
    for k in range(n):
        s = sum(x[i] * math.cos(math.pi * k * (2 * i + 1) / (2 * n)) for i in range(n))
        out.append(s * math.sqrt((1 if k == 0 else 2) / n))
    return out


def _mcd_oracle(a, b):
    total = 0.0
    for fa, fb in zip(a, b):
        ca, cb = _dct_ortho(list(fa)), _dct_ortho(list(fb))
        total += K * math.sqrt(2 * sum((ca[d] - cb[d]) ** 2 for d in range(1, len(ca))))
    return total / len(a)


def _cos_oracle(a, b):
    dot = sum(x * y for x, y in zip(a, b))
    return dot / (math.sqrt(sum(x * x for x in a)) * math.sqrt(sum(y * y for y in b)))


def test_cosine_closed_forms():
    assert cosine_similarity([1, 1], [1, 0]) == pytest.approx(math.sqrt(2) / 2)
    assert cosine_similarity([3, 4], [3, 4]) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 2]) == 0.0
    assert cosine_similarity([0, 0], [1, 2]) == 0.0


def test_mcd_closed_forms():
    a = np.random.default_rng(0).normal(size=(2, 8))
    assert mcd(a, a) == 0.0
    delta = 0.37
    # shift exactly one cepstral coefficient of one frame by delta
    from scipy.fft import idct

    c = np.zeros((2, 8))
    c[1, 3] = delta
    b = a + idct(c, type=2, norm="ortho", axis=-1)
    assert mcd(b, a) == pytest.approx(K * math.sqrt(2) * delta / 2, rel=1e-9)
    # coefficient 0 is ignored
    assert mcd(a + 5.0, a) == pytest.approx(0.0, abs=1e-9)
    with pytest.raises(ValueError):
        mcd(a, a[:1])


def test_metrics_match_brute_force_on_random_fixtures():
    rng = np.random.default_rng(7)
    for _ in range(100):
        t, b = rng.integers(1, 5), rng.integers(2, 9)
        x, y = rng.normal(size=(t, b)), rng.normal(size=(t, b))
        assert abs(mcd(x, y) - _mcd_oracle(x, y)) < 1e-6
        u, v = rng.normal(size=b), rng.normal(size=b)
        assert abs(cosine_similarity(u, v) - _cos_oracle(u, v)) < 1e-6


def test_metric_properties():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b = rng.normal(size=6), rng.normal(size=6)
        s = cosine_similarity(a, b)
        assert -1 <= s <= 1
        assert s == pytest.approx(cosine_similarity(b, a))
        assert s == pytest.approx(cosine_similarity(4 * a, 0.5 * b))
        x, y = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
        assert mcd(x, y) == pytest.approx(mcd(y, x))
        assert mcd(x + 2.5 * (y - x), x) == pytest.approx(2.5 * mcd(y, x))
        scales = [mcd(x + c * (y - x), x) for c in (0.0, 0.1, 0.5, 1.0, 3.0)]
        assert all(p <= q for p, q in zip(scales, scales[1:]))


def test_embedding_is_exact_on_noise_free_renders(tiny_world):
    spk = tiny_world.speakers[1]
    embs = []
    for text, p in (([1, 2, 3], 0), ([7, 7, 0, 4], 1), ([5], 1)):
        u = render_utterance(tiny_world, text, spk, tiny_world.prosodies[p], None, 0.0)
        e = speaker_embedding(u.mel, tiny_world, u.tokens, u.durations, p)
        np.testing.assert_allclose(e, spk.offset, atol=1e-5)
        embs.append(e)
    np.testing.assert_allclose(embs[0], embs[1], atol=1e-5)


def test_embedding_of_speakerless_render_is_zero(tiny_world):
    spk = dataclasses.replace(tiny_world.speakers[0], offset=np.zeros_like(tiny_world.speakers[0].offset))
    u = render_utterance(tiny_world, [2, 4], spk, tiny_world.prosodies[0], None, 0.0)
    np.testing.assert_allclose(speaker_embedding(u.mel, tiny_world, u.tokens, u.durations, 0), 0.0, atol=1e-5)
    with pytest.raises(ValueError):
        speaker_embedding(np.zeros((0, 6)), tiny_world, [], np.array([], dtype=int), 0)


def _noise_free(world, probes):
    return [dataclasses.replace(p, target=render_utterance(world, p.target.tokens, world.speakers[p.target.speaker_id],
                                                           world.prosodies[p.prosody_id], None, 0.0)) for p in probes]


def test_ground_truth_scores(tiny_world):
    spk = tiny_world.test_speakers[0]
    probes = _noise_free(tiny_world, make_probes(tiny_world, spk, n_texts=2, seed=0))
    assert {p.condition for p in probes} == {"intra", "cross"}
    assert {p.prosody_id for p in probes} == set(tiny_world.prosodies)
    score = score_generations([p.target.mel for p in probes], probes, tiny_world, spk)
    assert score["similarity"] == pytest.approx(1.0, abs=1e-6)
    assert score["mcd"] == 0.0

    other = tiny_world.test_speakers[1]
    # same speaking rate so frames line up with the probe alignment
    other_spk = dataclasses.replace(tiny_world.speakers[other], rate=tiny_world.speakers[spk].rate)
    renders = [render_utterance(tiny_world, p.target.tokens, other_spk, tiny_world.prosodies[p.prosody_id], None, 0.0).mel
               for p in probes]
    expected = cosine_similarity(tiny_world.speakers[spk].offset, tiny_world.speakers[other].offset)
    assert score_generations(renders, probes, tiny_world, spk)["similarity"] == pytest.approx(expected, abs=1e-5)


def test_probes_avoid_adaptation_texts(tiny_corpora, tiny_world):
    spk = tiny_world.test_speakers[0]
    chosen = tiny_corpora["meta_test"].by_speaker()[spk][:5]
    probes = make_probes(tiny_world, spk, n_texts=3, seed=1, exclude=chosen)
    banned = {tuple(u.tokens) for u in chosen}
    assert all(tuple(p.target.tokens) not in banned for p in probes)


def _curves():
    out = []
    for mode, lift in (("meta", 0.3), ("baseline", 0.0)):
        for spk in (30, 31):
            for seed in (0, 1):
                pts = [{"step": s, "similarity": min(0.2 + lift + s / 1000, 0.9), "mcd": 5 - s / 500,
                        "similarity_intra": 0.5, "similarity_cross": 0.5, "mcd_intra": 1.0, "mcd_cross": 1.0}
                       for s in (0, 100, 200, 1000)]
                out.append(AdaptationCurve(mode, spk, seed, pts))
    return out


def test_curve_schema_and_round_trip(tmp_path):
    curves = _curves()
    for c in curves:
        c.validate()
    save_curves(curves, tmp_path / "c.json")
    assert load_curves(tmp_path / "c.json") == curves
    bad = AdaptationCurve("meta", 30, 0, [{"step": 10, "similarity": 0.1, "mcd": 1}, {"step": 10, "similarity": 0.1, "mcd": 1}])
    with pytest.raises(ValueError):
        bad.validate()
    with pytest.raises(ValueError):
        AdaptationCurve("meta", 30, 0, [{"step": 1, "similarity": 1.5, "mcd": 1}]).validate()


def test_summary_statistics():
    s = summarize(_curves())
    assert s["cells"] == 4 and s["wins"] == 4
    assert s["mean_gap"] == pytest.approx(0.3)
    assert s["baseline_final"] == pytest.approx(0.9) and s["final_abs_diff"] == pytest.approx(0.0)
    assert s["meta_reach_step"] == 1000
