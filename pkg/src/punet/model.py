"""PU-Net: a U-shaped conv net with prompt-carrying transformer blocks.

Layout of the default network (input ``H x W``)::

    stem      conv 3x3 at H, then stride-2 conv          -> F_0 at H/2
    encoder   N stages: stride-2 conv + conv             -> F_1 .. F_N
    decoder   N stages: upsample + conv, concat skip, conv
    top       upsample, concat stem features, conv at H
    head      1x1 conv to ``classes`` logits

Implantable transformer blocks (ITBs) sit between adjacent downsampling
stages (after F_1 .. F_{N-1}) and/or between adjacent upsampling stages.
The selected rater prompt enters the first block through a channel-wise
linear map and is carried from block to block by one map per block.
"""

from __future__ import annotations

import enum
import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import ptnsr
from . import tensor as T
from .errors import ArgumentError, ConfigError, DimensionError
from .tensor import ParamStore, Tensor

GROUPS = ("backbone", "itb", "prompt", "stage_map", "head")


class Insertion(str, enum.Enum):
    DOWN = "down"
    UP = "up"
    BOTH = "both"


class FineTuneMode(str, enum.Enum):
    FULL = "full"
    HEAD_ONLY = "head"
    PROMPT_AND_HEAD = "prompt"


@dataclass(frozen=True)
class RaterTag:
    """Prompt selector: slot 0 is the aggregate (majority-vote) case."""

    slot: int

    AGGREGATE_SLOT = 0

    @classmethod
    def aggregate(cls) -> "RaterTag":
        return cls(0)

    @classmethod
    def rater(cls, j: int) -> "RaterTag":
        if j < 1:
            raise ArgumentError(f"rater index must be >= 1, got {j}")
        return cls(j)

    @classmethod
    def parse(cls, text: str) -> "RaterTag":
        text = text.strip().lower()
        if text in ("c", "mv", "aggregate"):
            return cls.aggregate()
        if text.startswith("r") and text[1:].isdigit():
            return cls.rater(int(text[1:]))
        raise ArgumentError(f"cannot parse rater tag {text!r}")

    @property
    def is_aggregate(self) -> bool:
        return self.slot == 0

    def __str__(self) -> str:
        return "c" if self.slot == 0 else f"r{self.slot}"


@dataclass
class UNetConfig:
    stages: int = 3
    base_channels: int = 16
    # width multipliers for F_0 .. F_N; the wide bottleneck keeps the
    # prompt+head share of parameters under 1% at the default size
    channel_mults: tuple[int, ...] = (1, 2, 4, 16)
    input_size: tuple[int, int] = (64, 64)
    classes: int = 2
    heads: int = 2
    ffn_ratio: int = 4
    prompt_dim: int | None = None
    prompt_tokens: int = 1
    insertion: Insertion = Insertion.BOTH
    n_raters: int = 6
    use_prompts: bool = True
    seg_heads: int = 1
    ln_eps: float = 1e-5

    def __post_init__(self) -> None:
        self.insertion = Insertion(self.insertion)
        self.channel_mults = tuple(int(m) for m in self.channel_mults)
        self.input_size = tuple(int(s) for s in self.input_size)
        if self.prompt_dim is None:
            self.prompt_dim = self.base_channels
        self.validate()

    def validate(self) -> None:
        if self.stages < 1:
            raise ConfigError("stages must be >= 1")
        if len(self.channel_mults) != self.stages + 1:
            raise ConfigError(f"channel_mults needs {self.stages + 1} entries, got {len(self.channel_mults)}")
        div = 2 ** (self.stages + 1)
        if any(s % div for s in self.input_size):
            raise ConfigError(f"input size {self.input_size} must be divisible by {div}")
        for c in self.widths:
            if c % self.heads:
                raise ConfigError(f"channel width {c} not divisible by {self.heads} heads")
        if self.n_raters < 1 or self.prompt_tokens < 1 or self.seg_heads < 1:
            raise ConfigError("n_raters, prompt_tokens and seg_heads must be >= 1")

    @property
    def widths(self) -> list[int]:
        return [self.base_channels * m for m in self.channel_mults]

    def insertion_points(self) -> list[tuple[str, int]]:
        """(side, level) for every ITB in execution order."""
        pts: list[tuple[str, int]] = []
        if self.insertion in (Insertion.DOWN, Insertion.BOTH):
            pts += [("down", i) for i in range(1, self.stages)]
        if self.insertion in (Insertion.UP, Insertion.BOTH):
            pts += [("up", i) for i in range(self.stages - 1, 0, -1)]
        return pts

    def to_dict(self) -> dict:
        d = asdict(self)
        d["insertion"] = self.insertion.value
        d["channel_mults"] = list(self.channel_mults)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


@dataclass
class ITB:
    """Weights of one implantable transformer block (views into a store)."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    heads: int = 2
    eps: float = 1e-5

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    @classmethod
    def from_store(cls, store: ParamStore, prefix: str, heads: int, eps: float) -> "ITB":
        names = [f.name for f in cls.__dataclass_fields__.values() if f.name not in ("heads", "eps")]
        return cls(**{n: store[f"{prefix}.{n}"] for n in names}, heads=heads, eps=eps)


def multi_head_attention(z: Tensor, itb: ITB) -> Tensor:
    """Self-attention over the token axis of ``z`` (``[B,] L x d``)."""
    batched = z.ndim == 3
    if not batched:
        z = z.reshape(1, *z.shape)
    B, L, d = z.shape
    h = itb.heads
    dh = d // h

    def heads_first(t: Tensor) -> Tensor:
        return t.reshape(B, L, h, dh).transpose(0, 2, 1, 3)

    q = heads_first(z @ itb.wq + itb.bq)
    k = heads_first(z @ itb.wk + itb.bk)
    v = heads_first(z @ itb.wv + itb.bv)
    scores = T.mul(q @ k.transpose(0, 1, 3, 2), 1.0 / math.sqrt(dh))
    ctx = T.softmax(scores) @ v
    out = ctx.transpose(0, 2, 1, 3).reshape(B, L, d) @ itb.wo + itb.bo
    return out if batched else out.reshape(L, d)


def encoder_layer(z: Tensor, itb: ITB) -> Tensor:
    """``Z_h = LN(MSA(Z)) + Z``; ``Z_out = LN(FFN(Z_h)) + Z_h``."""
    hidden = T.layer_norm(multi_head_attention(z, itb), itb.ln1_g, itb.ln1_b, itb.eps) + z
    ffn = T.relu(hidden @ itb.ffn_w1 + itb.ffn_b1) @ itb.ffn_w2 + itb.ffn_b2
    return T.layer_norm(ffn, itb.ln2_g, itb.ln2_b, itb.eps) + hidden


def itb_forward(feat: Tensor, prompt: Tensor | None, itb: ITB) -> tuple[Tensor, Tensor | None]:
    """Run one ITB on a feature map and its prompt tokens.

    ``feat`` is ``[B,] H x W x C``; ``prompt`` is ``[B,] T x C`` (or None to
    run the block on imaging tokens alone). Returns the enhanced map and the
    updated prompt tokens with unchanged shapes.
    """
    *lead, H, W, C = feat.shape
    if C != itb.dim:
        raise DimensionError(f"ITB width {itb.dim} does not match feature channels {C}")
    n = H * W
    tokens = feat.reshape(*lead, n, C)
    if prompt is not None:
        if prompt.shape[-1] != C:
            raise DimensionError(f"prompt dim {prompt.shape[-1]} != feature channels {C}")
        if prompt.ndim != tokens.ndim:
            raise DimensionError(f"prompt rank {prompt.shape} does not match tokens {tokens.shape}")
        tokens = T.concat(tokens, prompt, axis=-2)
    z = encoder_layer(tokens, itb)
    if prompt is None:
        return z.reshape(*lead, H, W, C), None
    img, p_hat = T.split(z, n, axis=-2)
    return img.reshape(*lead, H, W, C), p_hat


def prompt_propagate(p_hat: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Channel-wise affine map applied to each prompt token independently."""
    if p_hat.shape[-1] != w.shape[0]:
        raise DimensionError(f"stage map expects width {w.shape[0]}, prompt has {p_hat.shape[-1]}")
    return p_hat @ w + b


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, shape).astype(np.float32)


def _xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out)).astype(np.float32)


def add_itb_params(
    store: ParamStore, prefix: str, d: int, ffn_ratio: int, rng: np.random.Generator, group: str = "itb"
) -> None:
    """Xavier projections, unit LayerNorm gains and zero biases for one ITB."""
    for p in ("q", "k", "v", "o"):
        store.add(f"{prefix}.w{p}", _xavier_uniform(rng, d, d), group)
        store.add(f"{prefix}.b{p}", np.zeros(d, np.float32), group)
    for ln in ("ln1", "ln2"):
        store.add(f"{prefix}.{ln}_g", np.ones(d, np.float32), group)
        store.add(f"{prefix}.{ln}_b", np.zeros(d, np.float32), group)
    hid = ffn_ratio * d
    store.add(f"{prefix}.ffn_w1", _xavier_uniform(rng, d, hid), group)
    store.add(f"{prefix}.ffn_b1", np.zeros(hid, np.float32), group)
    store.add(f"{prefix}.ffn_w2", _xavier_uniform(rng, hid, d), group)
    store.add(f"{prefix}.ffn_b2", np.zeros(d, np.float32), group)


class PromptBank:
    """The R+1 stage-0 prompts plus the per-block channel-wise maps."""

    def __init__(self, store: ParamStore, n_maps: int) -> None:
        self.store = store
        self.n_maps = n_maps

    @property
    def embeddings(self) -> Tensor:
        return self.store["prompt.embeddings"]

    @property
    def slots(self) -> int:
        return self.embeddings.shape[0]

    def stage_map(self, k: int) -> tuple[Tensor, Tensor]:
        return self.store[f"stage_map.{k}.w"], self.store[f"stage_map.{k}.b"]

    def select(self, tags: list[RaterTag]) -> Tensor:
        for t in tags:
            if not 0 <= t.slot < self.slots:
                raise ArgumentError(f"rater tag {t} outside the {self.slots - 1} configured raters")
        return T.take(self.embeddings, [t.slot for t in tags])


class PUNet:
    """Network weights in a :class:`ParamStore` plus the forward pass."""

    def __init__(self, config: UNetConfig, seed: int = 0, params: ParamStore | None = None) -> None:
        self.config = config
        self.itb_calls = 0
        self.params = params if params is not None else self._init_params(seed)
        pts = config.insertion_points()
        self.itbs = [
            ITB.from_store(self.params, f"itb.{k}", config.heads, config.ln_eps) for k in range(len(pts))
        ]
        self.bank = PromptBank(self.params, len(pts)) if config.use_prompts else None

    # -- construction -----------------------------------------------------

    def _init_params(self, seed: int) -> ParamStore:
        cfg = self.config
        rng = np.random.default_rng(seed)
        store = ParamStore()
        w = cfg.widths
        cs = cfg.base_channels

        def conv(name, k, cin, cout, group="backbone"):
            store.add(f"{name}.w", _kaiming_uniform(rng, (k, k, cin, cout), k * k * cin), group)
            store.add(f"{name}.b", np.zeros(cout, np.float32), group)

        conv("stem.conv", 3, 3, cs)
        conv("stem.down", 3, cs, w[0])
        for i in range(1, cfg.stages + 1):
            conv(f"enc.{i}.down", 3, w[i - 1], w[i])
            conv(f"enc.{i}.conv", 3, w[i], w[i])
        for i in range(cfg.stages - 1, -1, -1):
            conv(f"dec.{i}.up", 3, w[i + 1], w[i])
            conv(f"dec.{i}.conv", 3, 2 * w[i], w[i])
        conv("top.conv", 3, w[0] + cs, cs)

        for k, (side, level) in enumerate(cfg.insertion_points()):
            add_itb_params(store, f"itb.{k}", w[level], cfg.ffn_ratio, rng)

        if cfg.use_prompts:
            slots = cfg.n_raters + 1
            emb = rng.normal(0.0, 0.02, (slots, cfg.prompt_tokens, cfg.prompt_dim)).astype(np.float32)
            store.add("prompt.embeddings", emb, "prompt")
            prev = cfg.prompt_dim
            for k, (side, level) in enumerate(cfg.insertion_points()):
                d = w[level]
                store.add(f"stage_map.{k}.w", np.eye(prev, d, dtype=np.float32), "stage_map")
                store.add(f"stage_map.{k}.b", np.zeros(d, np.float32), "stage_map")
                prev = d

        for j in range(cfg.seg_heads):
            store.add(f"head.{j}.w", _kaiming_uniform(rng, (1, 1, cs, cfg.classes), cs), "head")
            store.add(f"head.{j}.b", np.zeros(cfg.classes, np.float32), "head")
        return store

    # -- forward ----------------------------------------------------------

    def _conv(self, name: str, x: Tensor, stride: int = 1, act: bool = True) -> Tensor:
        w = self.params[f"{name}.w"]
        pad = w.shape[0] // 2
        y = T.conv2d(x, w, self.params[f"{name}.b"], stride=stride, padding=pad)
        return T.relu(y) if act else y

    def _itb(self, k: int, feat: Tensor, prompt: Tensor | None) -> tuple[Tensor, Tensor | None]:
        self.itb_calls += 1
        if prompt is not None:
            w, b = self.bank.stage_map(k)
            prompt = prompt_propagate(prompt, w, b)
        return itb_forward(feat, prompt, self.itbs[k])

    def forward(self, x, tags: RaterTag | list[RaterTag] | None = None, head: int | list[int] = 0) -> Tensor:
        """Segmentation logits for ``x`` (``[B,] H x W x 3``) under ``tags``.

        ``head`` selects the segmentation head, either once for the batch or
        per sample (multi-head baselines).
        """
        cfg = self.config
        x = x if isinstance(x, Tensor) else T.tensor(x)
        batched = x.ndim == 4
        if x.shape[-3:] != (*cfg.input_size, 3):
            raise DimensionError(f"input {x.shape} does not match configured size {cfg.input_size}x3")
        if not batched:
            x = x.reshape(1, *x.shape)
        B = x.shape[0]
        per_sample = list(head) if isinstance(head, (list, tuple)) else None
        for h in per_sample or [head]:
            if not 0 <= h < cfg.seg_heads:
                raise ArgumentError(f"segmentation head {h} outside [0, {cfg.seg_heads})")
        if per_sample is not None and len(per_sample) != B:
            raise ArgumentError(f"{len(per_sample)} head indices for a batch of {B}")

        prompt = None
        if cfg.use_prompts:
            if tags is None:
                raise ArgumentError("a rater tag is required for a prompted model")
            if isinstance(tags, RaterTag):
                tags = [tags] * B
            if len(tags) != B:
                raise ArgumentError(f"{len(tags)} tags for a batch of {B}")
            prompt = self.bank.select(list(tags))

        slots = {pt: k for k, pt in enumerate(cfg.insertion_points())}

        stem = self._conv("stem.conv", x)
        feat = self._conv("stem.down", stem, stride=2)
        skips = [feat]
        for i in range(1, cfg.stages + 1):
            feat = self._conv(f"enc.{i}.down", feat, stride=2)
            feat = self._conv(f"enc.{i}.conv", feat)
            if ("down", i) in slots:
                feat, prompt = self._itb(slots[("down", i)], feat, prompt)
            skips.append(feat)

        feat = skips[-1]
        for i in range(cfg.stages - 1, -1, -1):
            feat = self._conv(f"dec.{i}.up", T.upsample_nearest(feat, 2))
            feat = self._conv(f"dec.{i}.conv", T.concat(feat, skips[i], axis=-1))
            if ("up", i) in slots:
                feat, prompt = self._itb(slots[("up", i)], feat, prompt)

        feat = self._conv("top.conv", T.concat(T.upsample_nearest(feat, 2), stem, axis=-1))
        if per_sample is None:
            logits = self._conv(f"head.{head}", feat, act=False)
        else:
            logits = None
            for h in sorted(set(per_sample)):
                sel = np.array([hh == h for hh in per_sample], dtype=feat.dtype).reshape(B, 1, 1, 1)
                part = self._conv(f"head.{h}", feat, act=False) * sel
                logits = part if logits is None else logits + part
        return logits if batched else logits.reshape(*logits.shape[1:])

    __call__ = forward

    def predict(self, x, tags=None, head: int = 0) -> np.ndarray:
        """Binary masks (sigmoid > 0.5, i.e. logit > 0) without recording."""
        return (self.forward(x, tags, head).data > 0).astype(np.uint8)

    # -- persistence ------------------------------------------------------

    def save(self, directory: str | os.PathLike, extra: dict | None = None) -> None:
        save_checkpoint(self, directory, extra)


def forward(x, r: RaterTag, model: PUNet, bank: PromptBank | None = None) -> Tensor:
    """Functional alias of :meth:`PUNet.forward`."""
    if bank is not None and bank.store is not model.params:
        raise ArgumentError("prompt bank does not belong to this model")
    return model.forward(x, r)


def param_partition(model: PUNet, mode: FineTuneMode | str) -> ParamStore:
    """Set freeze flags for ``mode`` and return the model's store."""
    mode = FineTuneMode(mode)
    trainable = {
        FineTuneMode.FULL: set(GROUPS),
        FineTuneMode.HEAD_ONLY: {"head"},
        FineTuneMode.PROMPT_AND_HEAD: {"prompt", "stage_map", "head"},
    }[mode]
    for name, p in model.params.items():
        model.params.set_frozen(name, p.group not in trainable)
    return model.params


def count_params(store: ParamStore, groups=None, trainable_only: bool = False) -> int:
    """Scalar count over parameters whose group is in ``groups`` (all if None)."""
    total = 0
    for name, p in store.items():
        if groups is not None and p.group not in groups:
            continue
        if trainable_only and p.frozen:
            continue
        total += p.value.size
    return total


def expected_prompt_mode_count(cfg: UNetConfig) -> int:
    """Trainable size in prompt mode from config arithmetic alone."""
    w = cfg.widths
    total = (cfg.n_raters + 1) * cfg.prompt_tokens * cfg.prompt_dim
    prev = cfg.prompt_dim
    for _, level in cfg.insertion_points():
        total += prev * w[level] + w[level]
        prev = w[level]
    total += cfg.seg_heads * (cfg.base_channels * cfg.classes + cfg.classes)
    return total


# --------------------------------------------------------------------------
# Checkpoints: a directory of PTNSR files plus manifest.json
#
# manifest = {
#   "format": "punet-checkpoint", "version": 1,
#   "config": UNetConfig.to_dict(),
#   "params": [{"name", "file", "group", "frozen", "shape"}, ...],
#   "extra": {...}                      # free-form (e.g. training state)
# }

MANIFEST = "manifest.json"


def save_checkpoint(model: PUNet, directory: str | os.PathLike, extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in model.params.items():
        fname = f"{name}.ptnsr"
        ptnsr.save(d / fname, p.value.data)
        entries.append({"name": name, "file": fname, "group": p.group, "frozen": p.frozen, "shape": list(p.value.shape)})
    manifest = {
        "format": "punet-checkpoint",
        "version": 1,
        "config": model.config.to_dict(),
        "params": entries,
        "extra": extra or {},
    }
    (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def read_manifest(directory: str | os.PathLike) -> dict:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "punet-checkpoint":
        raise ConfigError(f"{path} is not a PU-Net checkpoint manifest")
    return manifest


def load_checkpoint(directory: str | os.PathLike) -> tuple[PUNet, dict]:
    d = Path(directory)
    manifest = read_manifest(d)
    cfg = UNetConfig.from_dict(manifest["config"])
    store = ParamStore()
    for e in manifest["params"]:
        arr = ptnsr.load(d / e["file"])
        if list(arr.shape) != e["shape"]:
            raise DimensionError(f"{e['file']}: shape {arr.shape} != manifest {e['shape']}")
        store.add(e["name"], arr, e["group"], e["frozen"])
    return PUNet(cfg, params=store), manifest.get("extra", {})
