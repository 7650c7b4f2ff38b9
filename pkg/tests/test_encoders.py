import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idsynth.avatargen import PAD, VOCAB_SIZE, dataset_stream, random_style, render_avatar
from idsynth.encoders import (IDENTITY_DIM, VISION_DIM, IdentityEncoder, PriorNet, TextEncoder, VisionEncoder,
                              prior_mse, prior_pairs, train_identity_encoder, train_prior)
from idsynth.nn import l2_normalize


def test_vision_encoder_deterministic_and_discriminative():
    enc = VisionEncoder(np.random.default_rng(0))
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(3, 24, 24)), rng.uniform(size=(3, 24, 24))
    assert enc.encode(a).shape == (VISION_DIM,)
    assert enc.encode(a).tobytes() == enc.encode(a).tobytes()
    assert not np.allclose(enc.encode(a), enc.encode(b))
    with pytest.raises(ValueError):
        enc.encode(np.zeros((3, 12, 12)))


def test_identity_embedding_is_unit_norm(id_encoder):
    crops = np.random.default_rng(2).uniform(size=(100, 3, 12, 12))
    e = id_encoder.encode(crops)
    assert e.shape == (100, IDENTITY_DIM)
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-5)
    c = crops[0]
    assert float(id_encoder.encode(c) @ id_encoder.encode(c.copy())) == pytest.approx(1.0, abs=1e-6)
    with pytest.raises(ValueError):
        id_encoder.encode(np.zeros((3, 24, 24)))


def _embed_renders(enc, pool, n, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(pool), size=n)
    crops = np.stack([render_avatar(pool[k], random_style(rng)).face_crop for k in labels])
    return enc.encode(crops), labels


def test_identity_separation_margin(id_encoder, pools):
    # fresh renders (new styles) of the training identities
    train, _ = pools
    e, lab = _embed_renders(id_encoder, train, 400, 11)
    rng = np.random.default_rng(12)
    intra, inter = [], []
    while len(intra) < 500 or len(inter) < 500:
        i, j = rng.integers(0, len(e), size=2)
        if i == j:
            continue
        (intra if lab[i] == lab[j] else inter).append(float(e[i] @ e[j]))
    margin = np.mean(intra[:500]) - np.mean(inter[:500])
    assert margin >= 0.3, margin


def test_identity_triples(id_encoder, pools):
    train, _ = pools
    rng = np.random.default_rng(13)
    wins = 0
    for _ in range(200):
        a, b = rng.choice(len(train), size=2, replace=False)
        ca, ca2, cb = (render_avatar(train[k], random_style(rng)).face_crop for k in (a, a, b))
        ea, ea2, eb = id_encoder.encode(np.stack([ca, ca2, cb]))
        wins += float(ea @ ea2) > float(ea @ eb)
    assert wins >= 180


def test_identity_training_needs_two_classes():
    samples = [s for s in dataset_stream(0, 200, 16) if s.labels[0] == 3][:20]
    with pytest.raises(ValueError):
        train_identity_encoder(samples, 1, np.random.default_rng(0))


def test_inference_state_drops_head():
    enc = IdentityEncoder(np.random.default_rng(0), num_classes=5)
    assert not any(k.startswith("head.") for k in enc.inference_state())
    assert any(k.startswith("head.") for k in enc.state_dict())


token_lists = st.lists(st.integers(0, VOCAB_SIZE - 1), min_size=0, max_size=5)


@settings(max_examples=50, deadline=None)
@given(token_lists, st.randoms(use_true_random=False))
def test_text_encoder_is_permutation_invariant(tokens, rnd):
    enc = TextEncoder(np.random.default_rng(0))
    shuffled = list(tokens)
    rnd.shuffle(shuffled)
    np.testing.assert_array_equal(enc.encode(tokens), enc.encode(shuffled))


def test_text_encoder_padding_and_determinism():
    enc = TextEncoder(np.random.default_rng(0))
    pad_only = enc.encode([PAD] * 5)
    assert pad_only.shape == (VISION_DIM,) and np.isfinite(pad_only).all()
    np.testing.assert_array_equal(enc.encode([]), pad_only)
    toks = [3, 12, 20, 30, 34]
    assert enc.encode(toks).tobytes() == enc.encode(list(toks)).tobytes()
    with pytest.raises(ValueError):
        enc.encode([VOCAB_SIZE])


def test_prior_learns_text_to_vision_map():
    samples = list(dataset_stream(0, 1200, 16))
    vision = VisionEncoder(np.random.default_rng(1))
    text = TextEncoder(np.random.default_rng(2))
    te, ve = prior_pairs(samples, vision, text)
    tr, ho = slice(0, 1000), slice(1000, None)
    untrained = PriorNet(np.random.default_rng(3))
    base = prior_mse(untrained, te[ho], ve[ho])
    prior, losses = train_prior(te[tr], ve[tr], 15, np.random.default_rng(3))
    assert prior_mse(prior, te[ho], ve[ho]) < 0.5 * base
    assert prior.encode(te[0]).shape == (VISION_DIM,)
    np.testing.assert_array_equal(prior.encode(te[0]), prior.encode(te[0]))


def test_prior_needs_pairs():
    with pytest.raises(ValueError):
        train_prior(np.zeros((0, 64)), np.zeros((0, 64)), 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        prior_pairs([], VisionEncoder(np.random.default_rng(0)), TextEncoder(np.random.default_rng(0)))


def test_l2_normalize_handles_zero():
    np.testing.assert_array_equal(l2_normalize(np.zeros(4)), np.zeros(4))
