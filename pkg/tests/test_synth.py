import itertools
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from punet.errors import ArgumentError, ConfigError, DimensionError
from punet.evaluation import dice_coefficient
from punet.model import RaterTag
from punet.synth import (
    CUP,
    DISC,
    RaterProfile,
    SynthConfig,
    build_dataset,
    default_profiles,
    generate_scene,
    ideal_mask,
    load_dataset,
    majority_vote,
    render_rater_mask,
    sample_scene,
    save_dataset,
)


def brute_force_vote(masks):
    masks = [np.asarray(m) for m in masks]
    out = np.zeros(masks[0].shape, np.uint8)
    for idx in np.ndindex(out.shape):
        ones = sum(1 for m in masks if m[idx] == 1)
        out[idx] = 1 if ones > len(masks) - ones else 0
    return out


# -- scenes -------------------------------------------------------------------


def test_scene_is_deterministic():
    s1, im1 = generate_scene(3)
    s2, im2 = generate_scene(3)
    assert s1 == s2 and im1.tobytes() == im2.tobytes()
    assert im1.shape == (64, 64, 3) and im1.dtype == np.float32


@pytest.mark.parametrize("seed", range(25))
def test_cup_inside_disc(seed):
    scene = sample_scene(seed, 0, SynthConfig())
    m = ideal_mask(scene, (64, 64))
    assert 0 < m[..., CUP].sum() < m[..., DISC].sum()
    assert not np.any(m[..., CUP] & ~m[..., DISC])


def test_target_domain_mean_shift():
    cfg = SynthConfig()
    src = build_dataset(6, seed=4, cfg=cfg, domain="source")
    tgt = build_dataset(6, seed=4, cfg=cfg, domain="target")
    diff = tgt.images.mean(axis=(1, 2, 3)) - src.images.mean(axis=(1, 2, 3))
    np.testing.assert_allclose(diff, cfg.target.intensity_shift, atol=1e-5)
    # geometry and labels are shared across domains
    np.testing.assert_array_equal(tgt.rater_masks, src.rater_masks)


def test_unknown_domain():
    with pytest.raises(ArgumentError):
        SynthConfig().style("elsewhere")


# -- rater masks ------------------------------------------------------------------


def test_identity_profile_gives_ideal_mask():
    scene = sample_scene(1, 0, SynthConfig())
    np.testing.assert_array_equal(render_rater_mask(scene, RaterProfile(1)), ideal_mask(scene, (64, 64)))


def test_dilation_grows_area():
    scene = sample_scene(2, 0, SynthConfig())
    ideal = ideal_mask(scene, (64, 64))
    grown = render_rater_mask(scene, RaterProfile(1, dilation_px=2))
    shrunk = render_rater_mask(scene, RaterProfile(1, dilation_px=-2))
    for c in (DISC, CUP):
        assert grown[..., c].sum() > ideal[..., c].sum() > shrunk[..., c].sum()


def test_different_dilations_disagree():
    scene = sample_scene(3, 0, SynthConfig())
    a = render_rater_mask(scene, RaterProfile(1, dilation_px=-1))
    b = render_rater_mask(scene, RaterProfile(2, dilation_px=1))
    assert dice_coefficient(a[..., DISC], b[..., DISC]) < 1


@pytest.mark.parametrize("seed", range(5))
def test_dice_decreases_with_dilation_gap(seed):
    scene = sample_scene(seed, 0, SynthConfig())
    ref = render_rater_mask(scene, RaterProfile(1))
    for sign in (1, -1):
        dice = [dice_coefficient(ref[..., DISC], render_rater_mask(scene, RaterProfile(2, sign * d))[..., DISC]) for d in range(8)]
        assert all(a > b for a, b in zip(dice, dice[1:])), dice


def test_jitter_is_deterministic_and_bounded():
    scene = sample_scene(5, 0, SynthConfig())
    p = RaterProfile(3, 0, 1.5, 99)
    a, b = render_rater_mask(scene, p), render_rater_mask(scene, p)
    assert a.tobytes() == b.tobytes()
    ideal = ideal_mask(scene, (64, 64))
    assert 0 < np.sum(a != ideal) < 0.2 * ideal.sum()


@pytest.mark.parametrize("seed", range(5))
def test_cup_nested_for_every_rater(seed):
    ds = build_dataset(2, seed=seed)
    cup, disc = ds.rater_masks[..., CUP], ds.rater_masks[..., DISC]
    assert not np.any(cup & ~disc)
    assert not np.any(ds.mv_masks[..., CUP] & ~ds.mv_masks[..., DISC])


def test_profile_validation():
    with pytest.raises(ConfigError):
        RaterProfile(1, dilation_px=8).validate((64, 64))
    RaterProfile(1, dilation_px=7).validate((64, 64))
    with pytest.raises(ConfigError):
        default_profiles((0, 1), (0.5,))


# -- majority vote -------------------------------------------------------------------


def test_vote_examples():
    def vote(bits):
        return majority_vote([np.array([b]) for b in bits])[0]

    assert vote([1, 1, 1, 1, 0, 0]) == 1
    assert vote([1, 1, 1, 0, 0, 0]) == 0
    m = np.random.default_rng(0).integers(0, 2, (5, 5))
    np.testing.assert_array_equal(majority_vote([m, m, m, m]), m)


def test_vote_errors():
    with pytest.raises(DimensionError):
        majority_vote([np.zeros((2, 2)), np.zeros((3, 2))])
    with pytest.raises(ArgumentError):
        majority_vote([])


def test_vote_exhaustive_r3_single_pixel():
    for bits in itertools.product((0, 1), repeat=3):
        assert majority_vote([np.array(b) for b in bits]) == (sum(bits) >= 2)


@given(r=st.integers(1, 7), seed=st.integers(0, 2**16))
def test_vote_matches_brute_force(r, seed):
    masks = np.random.default_rng(seed).integers(0, 2, (r, 3, 3, 2))
    np.testing.assert_array_equal(majority_vote(list(masks)), brute_force_vote(list(masks)))


# -- datasets ------------------------------------------------------------------------


def test_dataset_counts_and_mv():
    ds = build_dataset(10, seed=0)
    assert len(ds) == 70 and ds.n_raters == 6
    for k in range(ds.n_scenes):
        np.testing.assert_array_equal(ds.mv_masks[k], brute_force_vote(list(ds.rater_masks[k])))
    np.testing.assert_array_equal(ds.mask(0, RaterTag.aggregate()), ds.mv_masks[0])
    with pytest.raises(ArgumentError):
        ds.mask(0, RaterTag.rater(7))


def test_build_needs_two_raters():
    with pytest.raises(ConfigError):
        build_dataset(1, profiles=[RaterProfile(1)])


def test_threads_do_not_change_bytes():
    a = build_dataset(6, seed=9, threads=1)
    b = build_dataset(6, seed=9, threads=3)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.rater_masks.tobytes() == b.rater_masks.tobytes()


def test_save_load_roundtrip(tmp_path):
    ds = build_dataset(3, seed=2, domain="target")
    save_dataset(ds, tmp_path)
    manifest = json.loads((tmp_path / "dataset.json").read_text())
    assert manifest["counts"] == {"scenes": 3, "raters": 6, "samples": 21, "per_subset": 3}
    assert sorted(p.name for p in (tmp_path / "scenes" / "0").iterdir()) == ["image.ptnsr", "mv.ptnsr"] + [
        f"rater{j}.ptnsr" for j in range(1, 7)
    ]
    back, _ = load_dataset(tmp_path)
    assert back.images.tobytes() == ds.images.tobytes()
    assert back.rater_masks.tobytes() == ds.rater_masks.tobytes()
    assert back.mv_masks.tobytes() == ds.mv_masks.tobytes()
    assert back.scenes == ds.scenes and back.profiles == ds.profiles and back.domain == "target"


def test_split_is_disjoint():
    ds = build_dataset(5, seed=1)
    tr, te = ds.split(3)
    assert tr.scene_ids == [0, 1, 2] and te.scene_ids == [3, 4]
    np.testing.assert_array_equal(te.images[0], ds.images[3])
