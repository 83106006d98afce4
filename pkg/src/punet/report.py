"""Report files: delimited tables, PPM overlays and matplotlib figures.

PPM layout written here (binary ``P6``)::

    P6\\n<width> <height>\\n255\\n<width*height*3 bytes, RGB, row-major>

The header is always emitted with single ``\\n`` separators and no comments,
so identical images give identical bytes. The reader accepts any whitespace
and ``#`` comments in the header.
"""

from __future__ import annotations

import os
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from scipy import ndimage  # noqa: E402

from .errors import DimensionError, PUNetError  # noqa: E402
from .evaluation import EvalMatrix, predict_dataset  # noqa: E402
from .model import FineTuneMode, PUNet, RaterTag, count_params, param_partition  # noqa: E402
from .synth import MultiRaterDataset  # noqa: E402

GT_COLOR = (0, 255, 0)
PRED_COLOR = (255, 0, 255)
BOTH_COLOR = (255, 255, 255)

# trainable parameter budgets of the reference full-size models
REFERENCE_PROMPT_PARAMS = 0.10e6
REFERENCE_TOTAL_PARAMS = 29.94e6


class PPMFormatError(PUNetError, ValueError):
    pass


def write_ppm(path: str | os.PathLike, rgb: np.ndarray) -> Path:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DimensionError(f"write_ppm expects H x W x 3, got {rgb.shape}")
    if rgb.dtype != np.uint8:
        raise PPMFormatError(f"write_ppm expects uint8 pixels, got {rgb.dtype}")
    h, w, _ = rgb.shape
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(rgb).tobytes())
    return path


def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, i = [], 0
    while len(tokens) < count:
        while i < len(buf) and buf[i : i + 1].isspace():
            i += 1
        if buf[i : i + 1] == b"#":
            while i < len(buf) and buf[i : i + 1] != b"\n":
                i += 1
            continue
        j = i
        while j < len(buf) and not buf[j : j + 1].isspace():
            j += 1
        if j == i:
            raise PPMFormatError("truncated PPM header")
        tokens.append(buf[i:j])
        i = j
    return tokens, i + 1  # one whitespace byte ends the header


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), start = _header_tokens(buf, 4)
    if magic != b"P6":
        raise PPMFormatError(f"unsupported PPM magic {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise PPMFormatError("non-integer PPM header field") from None
    if maxval != 255:
        raise PPMFormatError(f"only maxval 255 is supported, got {maxval}")
    payload = buf[start:]
    if len(payload) != w * h * 3:
        raise PPMFormatError(f"expected {w * h * 3} pixel bytes, found {len(payload)}")
    return np.frombuffer(payload, np.uint8).reshape(h, w, 3).copy()


def contour(mask: np.ndarray) -> np.ndarray:
    """Inner boundary: foreground pixels with a 4-connected background neighbour."""
    m = np.asarray(mask).astype(bool)
    return m & ~ndimage.binary_erosion(m, border_value=0)


def to_rgb8(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    lo, hi = float(img.min()), float(img.max())
    scaled = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    return np.round(scaled * 255).astype(np.uint8)


def render_overlay(image: np.ndarray, pred: np.ndarray, gt: np.ndarray, path: str | os.PathLike | None = None) -> np.ndarray:
    """Draw GT and predicted contours over ``image``; optionally write a PPM.

    ``pred``/``gt`` are H x W or H x W x C binary masks; contours of every
    channel are drawn. Where the two contours coincide the pixel is white.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape or pred.shape[:2] != np.shape(image)[:2]:
        raise DimensionError(f"render_overlay: image {np.shape(image)}, pred {pred.shape}, gt {gt.shape}")
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    pc = np.zeros(pred.shape[:2], bool)
    gc = np.zeros(pred.shape[:2], bool)
    for c in range(pred.shape[2]):
        pc |= contour(pred[..., c])
        gc |= contour(gt[..., c])
    out = to_rgb8(image)
    out[gc & ~pc] = GT_COLOR
    out[pc & ~gc] = PRED_COLOR
    out[pc & gc] = BOTH_COLOR
    if path is not None:
        write_ppm(path, out)
    return out


# --------------------------------------------------------------------------
# Text outputs


def params_summary(model: PUNet) -> str:
    """Exact trainable counts per fine-tune mode plus the reference ratio."""
    lines = ["mode,trainable,total,ratio"]
    total = count_params(model.params)
    saved = {n: p.frozen for n, p in model.params.items()}
    try:
        for mode in FineTuneMode:
            param_partition(model, mode)
            n = count_params(model.params, trainable_only=True)
            lines.append(f"{mode.value},{n},{total},{n / total:.6f}")
    finally:
        for n, f in saved.items():
            model.params.set_frozen(n, f)
    ref = REFERENCE_PROMPT_PARAMS / REFERENCE_TOTAL_PARAMS
    lines.append(f"reference,{REFERENCE_PROMPT_PARAMS:.0f},{REFERENCE_TOTAL_PARAMS:.0f},{ref:.6f}")
    return "\n".join(lines) + "\n"


def prompt_ratio(model: PUNet) -> tuple[int, int, float]:
    saved = {n: p.frozen for n, p in model.params.items()}
    try:
        param_partition(model, FineTuneMode.PROMPT_AND_HEAD)
        n = count_params(model.params, trainable_only=True)
    finally:
        for name, f in saved.items():
            model.params.set_frozen(name, f)
    total = count_params(model.params)
    return n, total, n / total


# --------------------------------------------------------------------------
# Figures


def plot_matrix(matrix: EvalMatrix, path: str | os.PathLike) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(10, 4.2), constrained_layout=True)
    for ax, data, title in zip(axes, (matrix.disc, matrix.cup), ("disc Dice", "cup Dice")):
        im = ax.imshow(data, vmin=0, vmax=1, cmap="viridis")
        ax.set_xticks(range(len(matrix.cols)), matrix.cols, rotation=45, ha="right")
        ax.set_yticks(range(len(matrix.rows)), matrix.rows)
        ax.set_title(title)
        for i in range(data.shape[0]):
            for j in range(data.shape[1]):
                if not np.isnan(data[i, j]):
                    ax.text(j, i, f"{100 * data[i, j]:.1f}", ha="center", va="center", fontsize=7, color="w")
        fig.colorbar(im, ax=ax, shrink=0.8)
    return _save(fig, path)


def plot_overlays(images: list[np.ndarray], titles: list[str], path: str | os.PathLike, ncols: int = 4) -> Path:
    n = len(images)
    nrows = max(1, -(-n // ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.4 * ncols, 2.5 * nrows), squeeze=False)
    for ax in axes.flat:
        ax.axis("off")
    for ax, img, t in zip(axes.flat, images, titles):
        ax.imshow(img, interpolation="nearest")
        ax.set_title(t, fontsize=8)
    return _save(fig, path)


def plot_loss(epochs: dict[str, list[float]], path: str | os.PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.4), constrained_layout=True)
    for label, losses in epochs.items():
        ax.plot(np.arange(1, len(losses) + 1), losses, marker="o", ms=3, label=label)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean Dice loss")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_ablation(report, path: str | os.PathLike) -> Path:
    means, stds = report.means(), report.stds()
    fig, ax = plt.subplots(figsize=(4.5, 3.4), constrained_layout=True)
    x = np.arange(len(report.variants))
    ax.bar(x, [means[v] for v in report.variants], yerr=[stds[v] for v in report.variants], capsize=4, color="0.6")
    for i, v in enumerate(report.variants):
        ax.scatter(np.full(len(report.values[v]), i), report.values[v], color="k", s=10, zorder=3)
    ax.set_xticks(x, report.variants)
    ax.set_ylabel(report.metric)
    ax.set_title(report.name)
    return _save(fig, path)


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


# --------------------------------------------------------------------------
# Bundles


def write_eval_report(
    directory: str | os.PathLike,
    model: PUNet,
    matrix: EvalMatrix,
    test: MultiRaterDataset,
    overlay_scenes: int = 2,
    losses: dict[str, list[float]] | None = None,
) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in (
        ("eval_matrix.csv", matrix.to_csv()),
        ("eval_matrix.md", matrix.to_markdown()),
        ("params.txt", params_summary(model)),
    ):
        (d / name).write_text(text)
        written.append(d / name)

    tags = [RaterTag.rater(j) for j in range(1, test.n_raters + 1)] + [RaterTag.aggregate()]
    images, titles = [], []
    n = min(overlay_scenes, test.n_scenes)
    for tag in tags:
        preds = predict_dataset(model, test.images[:n], tag)
        for k in range(n):
            p = d / "overlays" / f"scene{k}_prompt{tag}.ppm"
            images.append(render_overlay(test.images[k], preds[k], test.mask(k, tag), p))
            titles.append(f"scene {k}, prompt {tag}")
            written.append(p)
    written.append(plot_overlays(images, titles, d / "overlays.png", ncols=max(1, 2 * n)))
    written.append(plot_matrix(matrix, d / "eval_matrix.png"))
    if losses:
        written.append(plot_loss(losses, d / "loss.png"))
    return written


def write_ablation_report(directory: str | os.PathLike, report, tables: dict[str, EvalMatrix] | None = None) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    stem = "ablation_" + report.name.split()[-1]
    csv_path = d / f"{stem}.csv"
    csv_path.write_text(report.to_csv())
    md = [f"# {report.name}", "", report.summary(), ""]
    for name, table in (tables or {}).items():
        md += [f"## {name}", "", table.to_markdown()]
    md_path = d / f"{stem}.md"
    md_path.write_text("\n".join(md) + "\n")
    return [csv_path, md_path, plot_ablation(report, d / f"{stem}.png")]
