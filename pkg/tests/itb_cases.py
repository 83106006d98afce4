"""Randomized ITB configurations shared by the model and acceptance tests."""

import numpy as np

from punet import tensor as T
from punet.model import ITB, add_itb_params, itb_forward
from punet.tensor import ParamStore, Tensor


def random_case(seed: int):
    """(feature map, prompt, itb) with random sizes, weights and biases."""
    rng = np.random.default_rng(seed)
    heads = int(rng.choice([1, 2, 4]))
    d = heads * int(rng.integers(1, 5))
    H, W = (int(v) for v in rng.integers(1, 6, 2))
    n_prompt = int(rng.integers(1, 4))
    batch = [] if rng.random() < 0.5 else [int(rng.integers(1, 3))]
    with T.default_dtype(np.float64):
        store = ParamStore()
        add_itb_params(store, "itb", d, int(rng.integers(1, 5)), rng)
        for name, p in store.items():
            # random affine LayerNorm and biases so nothing is trivially zero
            if not name.split(".")[-1].startswith("w") and "ffn_w" not in name:
                store.set_value(name, p.value.data + rng.normal(0, 0.3, p.value.shape))
        store.astype(np.float64)
        itb = ITB.from_store(store, "itb", heads, 1e-5)
        feat = Tensor(rng.standard_normal((*batch, H, W, d)))
        prompt = Tensor(rng.standard_normal((*batch, n_prompt, d)))
    return feat, prompt, itb, store, rng


def check_shape(seed: int) -> bool:
    feat, prompt, itb, _, _ = random_case(seed)
    f_hat, p_hat = itb_forward(feat, prompt, itb)
    return f_hat.shape == feat.shape and p_hat.shape == prompt.shape


def check_zero_init_identity(seed: int) -> bool:
    feat, prompt, itb, store, _ = random_case(seed)
    for name in ("itb.wo", "itb.bo", "itb.ffn_w2", "itb.ffn_b2", "itb.ln1_b", "itb.ln2_b"):
        store.set_value(name, np.zeros(store[name].shape))
    f_hat, p_hat = itb_forward(feat, prompt, itb)
    return np.array_equal(f_hat.data, feat.data) and np.array_equal(p_hat.data, prompt.data)


def check_permutation_equivariance(seed: int, atol: float = 1e-10) -> bool:
    feat, prompt, itb, _, rng = random_case(seed)
    *lead, H, W, C = feat.shape
    perm = rng.permutation(H * W)
    inv = np.argsort(perm)
    tokens = feat.data.reshape(*lead, H * W, C)
    shuffled = Tensor(tokens[..., perm, :].reshape(feat.shape))
    ref, p_ref = itb_forward(feat, prompt, itb)
    out, p_out = itb_forward(shuffled, prompt, itb)
    restored = out.data.reshape(*lead, H * W, C)[..., inv, :].reshape(feat.shape)
    return np.allclose(restored, ref.data, rtol=0, atol=atol) and np.allclose(p_out.data, p_ref.data, rtol=0, atol=atol)
