import numpy as np
import pytest

from punet import tensor as T
from punet.errors import ArgumentError, ConfigError, DimensionError
from punet.model import (
    GROUPS,
    FineTuneMode,
    Insertion,
    ITB,
    PUNet,
    RaterTag,
    UNetConfig,
    add_itb_params,
    count_params,
    expected_prompt_mode_count,
    forward,
    itb_forward,
    load_checkpoint,
    param_partition,
    prompt_propagate,
    save_checkpoint,
)
from punet.tensor import ParamStore, Tape, Tensor, backward

from itb_cases import check_permutation_equivariance, check_shape, check_zero_init_identity

TINY = dict(stages=2, base_channels=4, channel_mults=(1, 2, 2), input_size=(16, 16), n_raters=3)


@pytest.fixture(scope="module")
def default_model():
    return PUNet(UNetConfig(), seed=0)


def _itb(d=16, heads=2, seed=0):
    store = ParamStore()
    add_itb_params(store, "itb", d, 4, np.random.default_rng(seed))
    return ITB.from_store(store, "itb", heads, 1e-5), store


# -- RaterTag ---------------------------------------------------------------


def test_rater_tag_parse_and_str():
    assert RaterTag.parse("c") == RaterTag.aggregate() == RaterTag.parse("mv")
    assert RaterTag.parse("r3") == RaterTag.rater(3)
    assert str(RaterTag.rater(2)) == "r2" and str(RaterTag.aggregate()) == "c"
    with pytest.raises(ArgumentError):
        RaterTag.rater(0)
    with pytest.raises(ArgumentError):
        RaterTag.parse("x1")


# -- ITB ----------------------------------------------------------------------


def test_itb_shapes():
    itb, _ = _itb()
    f, p = itb_forward(T.tensor(np.zeros((8, 8, 16))), T.tensor(np.zeros((1, 16))), itb)
    assert f.shape == (8, 8, 16) and p.shape == (1, 16)


def test_itb_token_sequence_length():
    itb, _ = _itb()
    with Tape() as tape:
        itb_forward(T.tensor(np.ones((8, 8, 16))), T.tensor(np.ones((1, 16)), requires_grad=True), itb)
    concat = [e for e in tape.entries if e.op == "concat"]
    assert len(concat) == 1
    assert tape._nodes[concat[0].output].shape == (65, 16)


def test_itb_dim_mismatch():
    itb, _ = _itb()
    with pytest.raises(DimensionError):
        itb_forward(T.tensor(np.zeros((4, 4, 8))), T.tensor(np.zeros((1, 8))), itb)
    with pytest.raises(DimensionError):
        itb_forward(T.tensor(np.zeros((4, 4, 16))), T.tensor(np.zeros((1, 8))), itb)


@pytest.mark.parametrize("seed", range(10))
def test_itb_invariants(seed):
    assert check_shape(seed)
    assert check_zero_init_identity(seed)
    assert check_permutation_equivariance(seed)


# -- prompt propagation ---------------------------------------------------------


def test_prompt_propagate_identity_and_shape():
    p = T.tensor(np.random.default_rng(0).standard_normal((1, 16)))
    out = prompt_propagate(p, T.tensor(np.eye(16)), T.tensor(np.zeros(16)))
    np.testing.assert_array_equal(out.data, p.data)
    out = prompt_propagate(p, T.tensor(np.eye(16, 32)), T.tensor(np.zeros(32)))
    assert out.shape == (1, 32)
    with pytest.raises(DimensionError):
        prompt_propagate(p, T.tensor(np.eye(8, 32)), T.tensor(np.zeros(32)))


def test_stage_maps_receive_gradient_in_prompt_mode():
    model = PUNet(UNetConfig(**TINY), seed=1)
    param_partition(model, FineTuneMode.PROMPT_AND_HEAD)
    x = np.random.default_rng(0).standard_normal((16, 16, 3)).astype(np.float32)
    with Tape() as tape:
        loss = T.tsum(T.sigmoid(model(x, RaterTag.rater(2))))
    grads = backward(loss, tape, model.params)
    assert set(grads) == set(model.params.trainable())
    for k in range(model.bank.n_maps):
        assert np.abs(grads[f"stage_map.{k}.w"]).max() > 0
    emb = grads["prompt.embeddings"]
    assert np.abs(emb[2]).max() > 0
    assert not np.any(np.delete(emb, 2, axis=0))


# -- forward ----------------------------------------------------------------------


def test_forward_shape(default_model):
    x = np.zeros((64, 64, 3), np.float32)
    assert default_model(x, RaterTag.aggregate()).shape == (64, 64, 2)
    assert forward(x, RaterTag.rater(1), default_model, default_model.bank).shape == (64, 64, 2)


def test_forward_rejects_bad_input(default_model):
    with pytest.raises(DimensionError):
        default_model(np.zeros((32, 32, 3), np.float32), RaterTag.aggregate())
    with pytest.raises(ArgumentError):
        default_model(np.zeros((64, 64, 3), np.float32), RaterTag.rater(7))
    with pytest.raises(ArgumentError):
        default_model(np.zeros((64, 64, 3), np.float32), None)


def test_tags_are_not_degenerate(default_model):
    x = np.random.default_rng(2).random((64, 64, 3)).astype(np.float32)
    a = default_model(x, RaterTag.rater(1)).data
    b = default_model(x, RaterTag.rater(4)).data
    assert np.abs(a - b).max() > 0


def test_batched_equals_per_sample():
    model = PUNet(UNetConfig(**TINY), seed=3)
    x = np.random.default_rng(0).random((3, 16, 16, 3)).astype(np.float32)
    tags = [RaterTag.rater(1), RaterTag.aggregate(), RaterTag.rater(3)]
    batched = model(x, tags).data
    for i in range(3):
        np.testing.assert_allclose(batched[i], model(x[i], tags[i]).data, rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize(
    "insertion,expected", [(Insertion.DOWN, 2), (Insertion.UP, 2), (Insertion.BOTH, 4)]
)
def test_itb_call_counts(insertion, expected):
    cfg = UNetConfig(stages=3, base_channels=4, channel_mults=(1, 2, 2, 2), input_size=(16, 16), insertion=insertion)
    model = PUNet(cfg, seed=0)
    model(np.zeros((16, 16, 3), np.float32), RaterTag.aggregate())
    assert model.itb_calls == expected
    assert len(cfg.insertion_points()) == expected
    if insertion is Insertion.DOWN:
        assert model.itb_calls == cfg.stages - 1
        assert all(side == "down" for side, _ in cfg.insertion_points())


def test_forward_is_deterministic():
    x = np.random.default_rng(5).random((16, 16, 3)).astype(np.float32)
    a = PUNet(UNetConfig(**TINY), seed=11)(x, RaterTag.rater(2)).data
    b = PUNet(UNetConfig(**TINY), seed=11)(x, RaterTag.rater(2)).data
    assert a.tobytes() == b.tobytes()


def test_config_validation():
    with pytest.raises(ConfigError):
        UNetConfig(input_size=(60, 64))
    with pytest.raises(ConfigError):
        UNetConfig(channel_mults=(1, 2))
    with pytest.raises(ValueError):
        UNetConfig(insertion="sideways")


def test_init_values(default_model):
    p = default_model.params
    for k in range(default_model.bank.n_maps):
        w = p[f"stage_map.{k}.w"].data
        np.testing.assert_array_equal(w, np.eye(*w.shape))
        assert not p[f"stage_map.{k}.b"].data.any()
    emb = p["prompt.embeddings"].data
    assert emb.shape == (7, 1, 16)
    assert 0.01 < emb.std() < 0.03
    assert (p["itb.0.ln1_g"].data == 1).all() and not p["itb.0.ln1_b"].data.any()


# -- partition and counting ---------------------------------------------------------


def test_partition_modes(default_model):
    store = default_model.params
    total = count_params(store)
    param_partition(default_model, FineTuneMode.FULL)
    assert count_params(store, trainable_only=True) == total

    param_partition(default_model, FineTuneMode.HEAD_ONLY)
    assert count_params(store, trainable_only=True) == 16 * 2 + 2 == count_params(store, {"head"})

    param_partition(default_model, FineTuneMode.PROMPT_AND_HEAD)
    n = count_params(store, trainable_only=True)
    assert n == expected_prompt_mode_count(default_model.config)
    assert n / total <= 0.01
    trainable_groups = {store.group(k) for k in store.trainable()}
    assert trainable_groups == {"prompt", "stage_map", "head"}


def test_partition_completeness(default_model):
    store = default_model.params
    assert {store.group(n) for n in store} <= set(GROUPS)
    assert sum(count_params(store, {g}) for g in GROUPS) == count_params(store)
    assert count_params(store, set()) == 0


def test_prompt_count_arithmetic_by_hand():
    cfg = UNetConfig()
    # ITBs sit at widths 32, 64 (down) then 64, 32 (up)
    # 7 prompts x 16; maps 16->32, 32->64, 64->64, 64->32; 1x1 head 16->2
    by_hand = 7 * 16 + (16 * 32 + 32) + (32 * 64 + 64) + (64 * 64 + 64) + (64 * 32 + 32) + (16 * 2 + 2)
    assert by_hand == 9042
    assert expected_prompt_mode_count(cfg) == by_hand


# -- checkpoints ---------------------------------------------------------------------


def test_checkpoint_roundtrip(tmp_path):
    model = PUNet(UNetConfig(**TINY), seed=4)
    param_partition(model, FineTuneMode.PROMPT_AND_HEAD)
    save_checkpoint(model, tmp_path, {"note": 1})
    back, extra = load_checkpoint(tmp_path)
    assert extra == {"note": 1}
    assert back.config.to_dict() == model.config.to_dict()
    for name, p in model.params.items():
        q = back.params.entry(name)
        assert q.value.data.tobytes() == p.value.data.tobytes()
        assert (q.frozen, q.group) == (p.frozen, p.group)
    x = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)
    assert back(x, RaterTag.rater(1)).data.tobytes() == model(x, RaterTag.rater(1)).data.tobytes()


def test_checkpoint_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "nope")
