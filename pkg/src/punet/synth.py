"""Synthetic multi-rater optic disc/cup benchmark.

Each scene is a fundus-like image with a bright elliptical disc and a
brighter nested cup. Every rater annotates the same scene with a systematic
bias (dilation or erosion by a few pixels) plus smooth per-scene boundary
jitter; the aggregate label is the strict per-pixel majority of the raters.

Dataset directory layout::

    dataset.json                 manifest (seed, domain, profiles, counts, split)
    scenes/<k>/image.ptnsr       H x W x 3
    scenes/<k>/rater<j>.ptnsr    H x W x 2, j = 1..R   (channels: disc, cup)
    scenes/<k>/mv.ptnsr          H x W x 2
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import ptnsr
from .errors import ArgumentError, ConfigError, DimensionError
from .model import RaterTag

DISC, CUP = 0, 1


@dataclass(frozen=True)
class RaterProfile:
    id: int
    dilation_px: int = 0
    jitter_amp: float = 0.0
    jitter_seed_mix: int = 0

    def validate(self, size: tuple[int, int]) -> None:
        if abs(self.dilation_px) >= min(size) / 8:
            raise ConfigError(f"rater {self.id}: |dilation| {self.dilation_px} must be < {min(size) / 8}")
        if self.jitter_amp < 0:
            raise ConfigError(f"rater {self.id}: negative jitter amplitude")


def default_profiles(
    dilations=(-2, -1, 0, 0, 1, 2), jitters=(0.5, 0.7, 0.9, 1.1, 1.3, 1.5)
) -> list[RaterProfile]:
    if len(dilations) != len(jitters):
        raise ConfigError("dilations and jitters must have the same length")
    return [
        RaterProfile(j + 1, int(d), float(a), 7919 * (j + 1)) for j, (d, a) in enumerate(zip(dilations, jitters))
    ]


@dataclass
class DomainStyle:
    """Appearance parameters; geometry never depends on these."""

    intensity_shift: float = 0.0
    contrast: float = 1.0
    texture_amp: float = 0.04
    noise_sigma: float = 0.03


@dataclass
class SynthConfig:
    size: tuple[int, int] = (64, 64)
    disc_radius: tuple[float, float] = (0.18, 0.26)
    cup_scale: tuple[float, float] = (0.4, 0.65)
    center_jitter: float = 0.08
    edge_softness: float = 0.7
    source: DomainStyle = field(default_factory=DomainStyle)
    target: DomainStyle = field(
        default_factory=lambda: DomainStyle(intensity_shift=0.15, contrast=0.8, texture_amp=0.06, noise_sigma=0.04)
    )

    def style(self, domain: str) -> DomainStyle:
        if domain == "source":
            return self.source
        if domain == "target":
            return self.target
        raise ArgumentError(f"unknown domain {domain!r} (expected 'source' or 'target')")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("source", "target"):
            if key in d and isinstance(d[key], dict):
                d[key] = DomainStyle(**d[key])
        for key in ("size", "disc_radius", "cup_scale"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class SyntheticScene:
    cx: float
    cy: float
    a: float
    b: float
    cup_scale: float
    cup_dx: float
    cup_dy: float
    texture_seed: int

    @property
    def cup_axes(self) -> tuple[float, float]:
        return self.a * self.cup_scale, self.b * self.cup_scale

    @property
    def cup_center(self) -> tuple[float, float]:
        return self.cx + self.cup_dx, self.cy + self.cup_dy


@dataclass
class MultiRaterSample:
    image: np.ndarray
    rater: RaterTag
    mask: np.ndarray
    scene: int = -1


def _scene_rng(seed: int, k: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, k, stream])


def _grid(size: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    H, W = size
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    return xx + 0.5, yy + 0.5


def sample_scene(seed: int, k: int, cfg: SynthConfig) -> SyntheticScene:
    rng = _scene_rng(seed, k, 0)
    H, W = cfg.size
    m = min(H, W)
    cx = W / 2 + rng.uniform(-1, 1) * cfg.center_jitter * W
    cy = H / 2 + rng.uniform(-1, 1) * cfg.center_jitter * H
    a = rng.uniform(*cfg.disc_radius) * m
    b = rng.uniform(*cfg.disc_radius) * m
    s = rng.uniform(*cfg.cup_scale)
    # |offset| < (1 - s) * min(a, b) keeps the cup strictly inside the disc
    r_off = rng.uniform(0, 0.5) * (1 - s) * min(a, b)
    phi = rng.uniform(0, 2 * math.pi)
    return SyntheticScene(cx, cy, a, b, s, r_off * math.cos(phi), r_off * math.sin(phi), int(rng.integers(2**31)))


def _smooth_field(rng: np.random.Generator, size: tuple[int, int], cells: int = 6) -> np.ndarray:
    coarse = rng.standard_normal((cells, cells))
    zoom = (size[0] / cells, size[1] / cells)
    f = ndimage.zoom(coarse, zoom, order=3, mode="nearest")[: size[0], : size[1]]
    return f - f.mean()


def _ellipse_rho(scene_c, axes, size) -> tuple[np.ndarray, np.ndarray]:
    xx, yy = _grid(size)
    dx = xx - scene_c[0]
    dy = yy - scene_c[1]
    rho = np.sqrt((dx / axes[0]) ** 2 + (dy / axes[1]) ** 2)
    return rho, np.arctan2(dy, dx)


def render_image(scene: SyntheticScene, seed: int, k: int, cfg: SynthConfig, domain: str = "source") -> np.ndarray:
    """Fundus-like RGB image, deterministic per (seed, k, domain)."""
    style = cfg.style(domain)
    H, W = cfg.size
    xx, yy = _grid(cfg.size)
    rng = _scene_rng(seed, k, 1)
    bg = np.array([0.45, 0.22, 0.12]) + rng.uniform(-0.04, 0.04, 3)
    disc_col = np.array([0.30, 0.28, 0.18]) + rng.uniform(-0.03, 0.03, 3)
    cup_col = np.array([0.15, 0.20, 0.22]) + rng.uniform(-0.03, 0.03, 3)
    vignette = 1.0 - 0.35 * (((xx - W / 2) / W) ** 2 + ((yy - H / 2) / H) ** 2)

    def soft(center, axes):
        rho, _ = _ellipse_rho(center, axes, cfg.size)
        r_mean = 0.5 * (axes[0] + axes[1])
        return 1.0 / (1.0 + np.exp(-(1.0 - rho) * r_mean / cfg.edge_softness))

    disc = soft((scene.cx, scene.cy), (scene.a, scene.b))
    cup = soft(scene.cup_center, scene.cup_axes)
    img = vignette[..., None] * bg + disc[..., None] * disc_col + cup[..., None] * cup_col

    # domain-dependent appearance uses its own stream so geometry is shared
    trng = _scene_rng(seed, k, 2 if domain == "source" else 3)
    texture = _smooth_field(trng, cfg.size)
    noise = trng.standard_normal((H, W, 3))
    noise -= noise.mean()
    img = img + style.texture_amp * texture[..., None] + style.noise_sigma * noise
    mu = img.mean()
    img = mu + style.contrast * (img - mu) + style.intensity_shift
    return img.astype(np.float32)


def generate_scene(seed: int, cfg: SynthConfig | None = None, k: int = 0, domain: str = "source"):
    """Scene geometry plus its rendered image."""
    cfg = cfg or SynthConfig()
    scene = sample_scene(seed, k, cfg)
    return scene, render_image(scene, seed, k, cfg, domain)


def _radial_jitter(rng: np.random.Generator, theta: np.ndarray, amp: float, harmonics: int = 3) -> np.ndarray:
    if amp == 0:
        return np.zeros_like(theta)
    coef = rng.standard_normal((harmonics, 2))
    probe = np.linspace(0, 2 * math.pi, 720, endpoint=False)

    def series(t):
        return sum(coef[h, 0] * np.cos((h + 1) * t) + coef[h, 1] * np.sin((h + 1) * t) for h in range(harmonics))

    peak = np.abs(series(probe)).max()
    return amp * series(theta) / max(peak, 1e-12)


def _morph(mask: np.ndarray, px: int) -> np.ndarray:
    if px == 0:
        return mask
    if px > 0:
        return mask | (ndimage.distance_transform_edt(~mask) <= px)
    return mask & (ndimage.distance_transform_edt(mask) > -px)


def _structure_mask(center, axes, size, jitter: np.ndarray | None) -> np.ndarray:
    rho, theta = _ellipse_rho(center, axes, size)
    if jitter is None:
        return rho < 1.0
    # boundary radius (px) of the ellipse along each pixel's direction
    r_b = 1.0 / np.sqrt((np.cos(theta) / axes[0]) ** 2 + (np.sin(theta) / axes[1]) ** 2)
    return rho < 1.0 + jitter / r_b


def ideal_mask(scene: SyntheticScene, size: tuple[int, int]) -> np.ndarray:
    disc = _structure_mask((scene.cx, scene.cy), (scene.a, scene.b), size, None)
    cup = _structure_mask(scene.cup_center, scene.cup_axes, size, None)
    return np.stack([disc, cup], axis=-1).astype(np.uint8)


def render_rater_mask(scene: SyntheticScene, profile: RaterProfile, size: tuple[int, int] = (64, 64)) -> np.ndarray:
    """One rater's H x W x 2 binary annotation of ``scene``."""
    profile.validate(size)
    chans = []
    for c, (center, axes) in enumerate(
        [((scene.cx, scene.cy), (scene.a, scene.b)), (scene.cup_center, scene.cup_axes)]
    ):
        jitter = None
        if profile.jitter_amp > 0:
            rng = np.random.default_rng([scene.texture_seed, profile.id, profile.jitter_seed_mix, c])
            _, theta = _ellipse_rho(center, axes, size)
            jitter = _radial_jitter(rng, theta, profile.jitter_amp)
        m = _structure_mask(center, axes, size, jitter)
        chans.append(_morph(m, profile.dilation_px))
    disc, cup = chans
    return np.stack([disc, cup & disc], axis=-1).astype(np.uint8)


def majority_vote(masks) -> np.ndarray:
    """Per-pixel strict majority (> R/2) of R binary masks; ties give 0."""
    masks = [np.asarray(m) for m in masks]
    if not masks:
        raise ArgumentError("majority_vote needs at least one mask")
    shape = masks[0].shape
    for m in masks:
        if m.shape != shape:
            raise DimensionError(f"majority_vote: mask shapes {shape} and {m.shape} differ")
    votes = np.sum([m.astype(np.int64) for m in masks], axis=0)
    return (2 * votes > len(masks)).astype(np.uint8)


@dataclass
class MultiRaterDataset:
    """In-memory dataset D = {D^c, D^{r_1}, ..., D^{r_R}} over shared scenes."""

    images: np.ndarray  # n x H x W x 3 float32
    rater_masks: np.ndarray  # n x R x H x W x 2 uint8
    mv_masks: np.ndarray  # n x H x W x 2 uint8
    scenes: list[SyntheticScene]
    profiles: list[RaterProfile]
    seed: int = 0
    domain: str = "source"
    synth: SynthConfig = field(default_factory=SynthConfig)
    scene_ids: list[int] | None = None

    def __post_init__(self) -> None:
        if self.scene_ids is None:
            self.scene_ids = list(range(len(self.scenes)))

    @property
    def n_scenes(self) -> int:
        return len(self.scenes)

    @property
    def n_raters(self) -> int:
        return len(self.profiles)

    def __len__(self) -> int:
        return self.n_scenes * (self.n_raters + 1)

    def tags(self) -> list[RaterTag]:
        return [RaterTag.aggregate()] + [RaterTag.rater(j) for j in range(1, self.n_raters + 1)]

    def mask(self, k: int, tag: RaterTag) -> np.ndarray:
        if tag.is_aggregate:
            return self.mv_masks[k]
        if not 1 <= tag.slot <= self.n_raters:
            raise ArgumentError(f"tag {tag} outside {self.n_raters} raters")
        return self.rater_masks[k, tag.slot - 1]

    def sample(self, k: int, tag: RaterTag) -> MultiRaterSample:
        return MultiRaterSample(self.images[k], tag, self.mask(k, tag), k)

    def subset(self, indices) -> "MultiRaterDataset":
        idx = list(indices)
        return MultiRaterDataset(
            self.images[idx],
            self.rater_masks[idx],
            self.mv_masks[idx],
            [self.scenes[i] for i in idx],
            self.profiles,
            self.seed,
            self.domain,
            self.synth,
            [self.scene_ids[i] for i in idx],
        )

    def split(self, n_train: int) -> tuple["MultiRaterDataset", "MultiRaterDataset"]:
        return self.subset(range(n_train)), self.subset(range(n_train, self.n_scenes))


def _build_one(args):
    seed, k, cfg, domain, profiles = args
    scene, image = generate_scene(seed, cfg, k, domain)
    raters = np.stack([render_rater_mask(scene, p, cfg.size) for p in profiles])
    return scene, image, raters, majority_vote(list(raters))


def build_dataset(
    n_scenes: int,
    profiles: list[RaterProfile] | None = None,
    seed: int = 0,
    cfg: SynthConfig | None = None,
    domain: str = "source",
    threads: int = 1,
) -> MultiRaterDataset:
    """Generate ``n_scenes`` scenes with R rater masks and the MV mask each."""
    cfg = cfg or SynthConfig()
    profiles = profiles if profiles is not None else default_profiles()
    if len(profiles) < 2:
        raise ConfigError("a multi-rater dataset needs at least 2 raters")
    cfg.style(domain)
    for p in profiles:
        p.validate(cfg.size)
    jobs = [(seed, k, cfg, domain, profiles) for k in range(n_scenes)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(_build_one, jobs))
    else:
        results = [_build_one(j) for j in jobs]
    H, W = cfg.size
    return MultiRaterDataset(
        images=np.stack([r[1] for r in results]) if results else np.zeros((0, H, W, 3), np.float32),
        rater_masks=np.stack([r[2] for r in results]) if results else np.zeros((0, len(profiles), H, W, 2), np.uint8),
        mv_masks=np.stack([r[3] for r in results]) if results else np.zeros((0, H, W, 2), np.uint8),
        scenes=[r[0] for r in results],
        profiles=list(profiles),
        seed=seed,
        domain=domain,
        synth=cfg,
    )


def save_dataset(ds: MultiRaterDataset, directory: str | os.PathLike, extra: dict | None = None) -> Path:
    d = Path(directory)
    for k in range(ds.n_scenes):
        sd = d / "scenes" / str(k)
        sd.mkdir(parents=True, exist_ok=True)
        ptnsr.save(sd / "image.ptnsr", ds.images[k])
        for j in range(ds.n_raters):
            ptnsr.save(sd / f"rater{j + 1}.ptnsr", ds.rater_masks[k, j])
        ptnsr.save(sd / "mv.ptnsr", ds.mv_masks[k])
    manifest = {
        "format": "punet-multirater",
        "version": 1,
        "seed": ds.seed,
        "domain": ds.domain,
        "synth": ds.synth.to_dict(),
        "profiles": [asdict(p) for p in ds.profiles],
        "scenes": [asdict(s) for s in ds.scenes],
        "counts": {
            "scenes": ds.n_scenes,
            "raters": ds.n_raters,
            "samples": len(ds),
            "per_subset": ds.n_scenes,
        },
    }
    manifest.update(extra or {})
    (d / "dataset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return d


def load_dataset(directory: str | os.PathLike) -> tuple[MultiRaterDataset, dict]:
    d = Path(directory)
    path = d / "dataset.json"
    if not path.is_file():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "punet-multirater":
        raise ConfigError(f"{path} is not a multi-rater dataset manifest")
    profiles = [RaterProfile(**p) for p in manifest["profiles"]]
    n = manifest["counts"]["scenes"]
    R = len(profiles)
    images, raters, mv = [], [], []
    for k in range(n):
        sd = d / "scenes" / str(k)
        images.append(ptnsr.load(sd / "image.ptnsr"))
        raters.append(np.stack([ptnsr.load(sd / f"rater{j + 1}.ptnsr") for j in range(R)]).astype(np.uint8))
        mv.append(ptnsr.load(sd / "mv.ptnsr").astype(np.uint8))
    ds = MultiRaterDataset(
        np.stack(images),
        np.stack(raters),
        np.stack(mv),
        [SyntheticScene(**s) for s in manifest["scenes"]],
        profiles,
        manifest["seed"],
        manifest["domain"],
        SynthConfig.from_dict(manifest["synth"]),
    )
    return ds, manifest
