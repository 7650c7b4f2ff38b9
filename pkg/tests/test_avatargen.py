import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from idsynth import imageio
from idsynth.avatargen import (ACCESSORIES, CANONICAL_STYLE, CANVAS, CROP, MASK_FILL, N_BINS, VOCAB_SIZE,
                               IdentitySpec, StyleSpec, AvatarStream, dataset_stream, make_multi_human,
                               make_training_pair, random_identity, random_style, render_avatar, render_pattern,
                               split_pool)

identities = st.builds(
    IdentitySpec,
    face_hue=st.floats(0, 1, exclude_max=True),
    eye_spacing=st.floats(0.2, 0.5),
    eye_size=st.floats(0.05, 0.15),
    mouth_curve=st.floats(-1, 1),
    skin_tone=st.integers(0, 7),
)
styles = st.builds(
    StyleSpec,
    bg_hue=st.floats(0, 1, exclude_max=True),
    face_center=st.tuples(st.floats(0.25, 0.75), st.floats(0.25, 0.75)),
    face_scale=st.floats(0.25, 0.45),
    accessory=st.sampled_from(ACCESSORIES),
)


@settings(max_examples=60, deadline=None)
@given(identities, styles)
def test_render_is_pure_and_well_formed(ident, style):
    a, b = render_avatar(ident, style), render_avatar(ident, style)
    assert a.image.tobytes() == b.image.tobytes()
    assert (a.face_mask == b.face_mask).all()
    assert a.image.shape == (3, CANVAS, CANVAS) and a.image.dtype == np.float32
    assert a.image.min() >= 0 and a.image.max() <= 1
    assert a.face_crop.shape == (3, CROP, CROP)
    assert (a.instance_masks[0] == a.face_mask).all()


@settings(max_examples=60, deadline=None)
@given(identities, styles)
def test_masks_stay_off_the_border(ident, style):
    m = render_avatar(ident, style).face_mask
    assert m.any()
    assert not (m[0].any() or m[-1].any() or m[:, 0].any() or m[:, -1].any())


@settings(max_examples=60, deadline=None)
@given(identities, identities, styles)
def test_identity_only_changes_face_pixels(a, b, style):
    ia, ib = render_avatar(a, style), render_avatar(b, style)
    outside = ~ia.face_mask
    np.testing.assert_array_equal(ia.image[:, outside], ib.image[:, outside])


@settings(max_examples=60, deadline=None)
@given(styles)
def test_style_tokens_quantise_fields(style):
    toks = style.style_tokens
    assert len(toks) == 5
    assert all(0 < t < VOCAB_SIZE for t in toks)
    for i, t in enumerate(toks[:4]):
        assert 1 + i * N_BINS <= t < 1 + (i + 1) * N_BINS
    assert toks == StyleSpec(style.bg_hue, style.face_center, style.face_scale, style.accessory).style_tokens


def test_large_centered_face_coverage():
    # oracle: pi * (0.45 * 24 / 2)^2 / 24^2 of the canvas, up to rasterisation
    style = StyleSpec(0.3, (0.5, 0.5), 0.45, "none")
    m = render_avatar(random_identity(np.random.default_rng(0)), style).face_mask
    frac = m.mean()
    expected = math.pi * (0.45 * CANVAS / 2) ** 2 / CANVAS ** 2
    assert 0.15 <= frac <= 0.64
    assert abs(frac - expected) < 0.02


def test_invalid_specs_rejected():
    with pytest.raises(ValueError):
        IdentitySpec(1.0, 0.3, 0.1, 0.0, 0)
    with pytest.raises(ValueError):
        IdentitySpec(0.1, 0.3, 0.1, 0.0, 8)
    with pytest.raises(ValueError):
        StyleSpec(0.1, (0.1, 0.5), 0.3)
    with pytest.raises(ValueError):
        StyleSpec(0.1, (0.5, 0.5), 0.3, "scarf")


def test_training_pair_masks_face_only():
    s = render_avatar(random_identity(np.random.default_rng(1)), random_style(np.random.default_rng(2)))
    style_image, crop, target = make_training_pair(s)
    np.testing.assert_array_equal(style_image[:, ~s.face_mask], target[:, ~s.face_mask])
    assert (style_image[:, s.face_mask] == MASK_FILL).all()
    restored = style_image.copy()
    restored[:, s.face_mask] = s.image[:, s.face_mask]
    assert restored.tobytes() == target.tobytes()
    np.testing.assert_array_equal(crop, s.face_crop)


def test_training_pair_rejects_multi():
    rng = np.random.default_rng(0)
    comp = make_multi_human([random_identity(rng), random_identity(rng)],
                            [StyleSpec(0.2, (0.3, 0.4), 0.3), StyleSpec(0.2, (0.7, 0.4), 0.3)])
    with pytest.raises(ValueError):
        make_training_pair(comp)


def test_crop_recoverable_at_canonical_style():
    rng = np.random.default_rng(7)
    diffs = []
    for _ in range(300):
        ident = random_identity(rng)
        c = render_avatar(ident, random_style(rng)).face_crop
        diffs.append(np.abs(c - render_avatar(ident, CANONICAL_STYLE).face_crop).mean())
    assert np.mean(diffs) < 0.1


def test_multi_human_masks_disjoint_and_owned():
    rng = np.random.default_rng(3)
    ids = [random_identity(rng), random_identity(rng)]
    st2 = [StyleSpec(0.6, (0.3, 0.5), 0.3), StyleSpec(0.6, (0.72, 0.5), 0.3)]
    comp = make_multi_human(ids, st2)
    assert len(comp.instance_masks) == 2
    assert not (comp.instance_masks[0] & comp.instance_masks[1]).any()
    # pixels of instance 0 depend only on identity 0 and the shared style
    other = make_multi_human([ids[0], random_identity(rng)], st2)
    m0 = comp.instance_masks[0]
    np.testing.assert_array_equal(comp.image[:, m0], other.image[:, m0])


def test_multi_human_identical_identities_translate():
    ident = random_identity(np.random.default_rng(4))
    # integer pixel offset between the two face centres
    comp = make_multi_human([ident, ident], [StyleSpec(0.1, (0.25, 0.5), 0.3), StyleSpec(0.1, (0.75, 0.5), 0.3)])
    m0, m1 = comp.instance_masks
    shift = 12
    np.testing.assert_array_equal(np.roll(m0, shift, axis=1), m1)
    np.testing.assert_array_equal(np.roll(comp.image, shift, axis=2)[:, m1], comp.image[:, m1])


def test_multi_human_rejects_overlap_and_count():
    rng = np.random.default_rng(5)
    a, b = random_identity(rng), random_identity(rng)
    with pytest.raises(ValueError):
        make_multi_human([a, b], [StyleSpec(0.1, (0.5, 0.5), 0.3), StyleSpec(0.1, (0.55, 0.5), 0.3)])
    with pytest.raises(ValueError):
        make_multi_human([a], [StyleSpec(0.1, (0.5, 0.5), 0.3)])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_three_person_masks_disjoint(seed):
    rng = np.random.default_rng(seed)
    ids = [random_identity(rng) for _ in range(3)]
    jitter = rng.uniform(0, 0.04, size=(3, 2))
    centres = np.array([(0.25, 0.25), (0.71, 0.25), (0.48, 0.71)]) + jitter
    comp = make_multi_human(ids, [StyleSpec(0.4, tuple(c), 0.25) for c in centres])
    total = sum(m.astype(int) for m in comp.instance_masks)
    assert total.max() == 1


def test_stream_reproducible_and_fork():
    a = list(dataset_stream(3, 20, 16))
    b = list(dataset_stream(3, 20, 16))
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))
    s = dataset_stream(3, 20, 16)
    for _ in range(5):
        next(s)
    fork = s.copy()
    assert [x.image.tobytes() for x in s] == [x.image.tobytes() for x in fork]


def test_stream_label_counts_binomial():
    counts = np.bincount([s.labels[0] for s in dataset_stream(0, 1600, 16)], minlength=16)
    assert counts.sum() == 1600
    assert ((counts >= 70) & (counts <= 130)).all(), counts


def test_disjoint_seeds_differ():
    assert next(dataset_stream(0, 1, 16)).image.tobytes() != next(dataset_stream(1, 1, 16)).image.tobytes()


def test_stream_errors():
    with pytest.raises(ValueError):
        AvatarStream(0, 0, 16)
    with pytest.raises(ValueError):
        AvatarStream(0, 10, 1)


def test_pool_split_disjoint():
    train, held = split_pool(0, 16, 4)
    assert len(train) == 16 and len(held) == 4
    assert not set(train) & set(held)


def test_nonhuman_samples_are_face_free():
    samples = list(dataset_stream(0, 200, 16, nonhuman_fraction=0.5))
    faces = [s for s in samples if s.is_human]
    patterns = [s for s in samples if not s.is_human]
    assert 60 < len(patterns) < 140
    assert all(s.face_crop is None and not s.face_mask.any() and not s.labels for s in patterns)
    assert all(s.labels for s in faces)
    p = render_pattern(CANONICAL_STYLE)
    assert p.instance_masks == []


@settings(max_examples=30, deadline=None)
@given(identities, styles)
def test_ppm_pgm_round_trip(ident, style):
    s = render_avatar(ident, style)
    img = imageio.decode_ppm(imageio.encode_ppm(s.image))
    assert np.abs(img - s.image).max() <= 0.5 / 255 + 1e-7
    assert imageio.encode_ppm(img) == imageio.encode_ppm(s.image)
    m = imageio.decode_pgm(imageio.encode_pgm(s.face_mask))
    np.testing.assert_array_equal(m > 0.5, s.face_mask)


def test_ppm_header_layout(tmp_path):
    img = np.zeros((3, 2, 3), dtype=np.float32)
    img[0, 0, 0] = 1.0
    buf = imageio.encode_ppm(img)
    assert buf.startswith(b"P6\n3 2\n255\n")
    assert len(buf) == len(b"P6\n3 2\n255\n") + 18
    assert buf[len(b"P6\n3 2\n255\n")] == 255
    commented = b"P6\n# made by hand\n3 2\n255\n" + buf[len(b"P6\n3 2\n255\n"):]
    np.testing.assert_array_equal(imageio.decode_ppm(commented), img)
    imageio.write_ppm(tmp_path / "x.ppm", img)
    np.testing.assert_array_equal(imageio.read_ppm(tmp_path / "x.ppm"), img)
    with pytest.raises(ValueError):
        imageio.decode_pgm(buf)
