"""Dice metric and the prompt x label-source evaluation matrix."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, DimensionError
from .model import PUNet, RaterTag
from .synth import MultiRaterDataset
from .tensor import Tensor


def dice_coefficient(pred, gt) -> float:
    """2|A n B| / (|A| + |B|) for binary masks; both empty gives 1.0."""
    a = np.asarray(pred)
    b = np.asarray(gt)
    if a.shape != b.shape:
        raise DimensionError(f"dice_coefficient: shapes {a.shape} and {b.shape} differ")
    for m in (a, b):
        if m.size and not np.isin(m, (0, 1)).all():
            raise ContractError("dice_coefficient expects binary masks")
    a = a.astype(bool)
    b = b.astype(bool)
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def label_sources(n_raters: int) -> list[RaterTag]:
    """Column order: Rater 1..R, then majority vote."""
    return [RaterTag.rater(j) for j in range(1, n_raters + 1)] + [RaterTag.aggregate()]


def source_name(tag: RaterTag) -> str:
    return "MV" if tag.is_aggregate else f"Rater {tag.slot}"


def prompt_name(tag: RaterTag) -> str:
    return "P_c" if tag.is_aggregate else f"P_r{tag.slot}"


@dataclass
class EvalMatrix:
    """Mean (disc, cup) Dice per (row, label source); NaN marks N/A."""

    rows: list[str]
    cols: list[str]
    disc: np.ndarray
    cup: np.ndarray
    params: dict[str, int] = field(default_factory=dict)

    def cell(self, row: str, col: str) -> tuple[float, float]:
        i, j = self.rows.index(row), self.cols.index(col)
        return float(self.disc[i, j]), float(self.cup[i, j])

    @property
    def mean(self) -> np.ndarray:
        """Per-cell average of disc and cup Dice."""
        return 0.5 * (self.disc + self.cup)

    def overall_mean(self) -> float:
        return float(np.nanmean(self.mean))

    def diagonal(self) -> np.ndarray:
        n = min(len(self.rows), len(self.cols))
        return np.array([self.mean[i, i] for i in range(n)])

    def specialization_gap(self, n_raters: int) -> float:
        """Mean over raters j of Dice(P_rj, GT_j) - mean_k!=j Dice(P_rj, GT_k).

        Assumes the first ``n_raters`` rows and columns are the rater ones in
        the same order (as produced by :func:`evaluate_matrix`).
        """
        m = self.mean[:n_raters, :n_raters]
        gaps = []
        for j in range(n_raters):
            others = [m[j, k] for k in range(n_raters) if k != j]
            gaps.append(m[j, j] - float(np.mean(others)))
        return float(np.mean(gaps))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row", "label_source", "dice_disc", "dice_cup", "params"])
        for i, r in enumerate(self.rows):
            for j, c in enumerate(self.cols):
                d, u = self.disc[i, j], self.cup[i, j]
                w.writerow([r, c, _fmt(d), _fmt(u), self.params.get(r, "")])
        return buf.getvalue()

    def to_markdown(self, scale: float = 100.0) -> str:
        head = "| Prompt | " + " | ".join(self.cols) + " | Params |"
        sep = "|" + "---|" * (len(self.cols) + 2)
        lines = [head, sep]
        for i, r in enumerate(self.rows):
            cells = []
            for j in range(len(self.cols)):
                d, u = self.disc[i, j], self.cup[i, j]
                cells.append("N/A" if np.isnan(d) else f"({d * scale:.2f}, {u * scale:.2f})")
            p = self.params.get(r, "")
            lines.append(f"| {r} | " + " | ".join(cells) + f" | {p} |")
        return "\n".join(lines) + "\n"


def _fmt(v: float) -> str:
    return "NA" if np.isnan(v) else f"{v:.6f}"


def predict_dataset(model: PUNet, images: np.ndarray, tag: RaterTag | None, head: int = 0, batch: int = 8) -> np.ndarray:
    """Binary predictions for every image, batched, in scene order."""
    out = []
    for i in range(0, len(images), batch):
        x = Tensor(images[i : i + batch])
        tags = [tag] * len(x.data) if tag is not None else None
        out.append(model.predict(x, tags, head))
    return np.concatenate(out) if out else np.zeros((0,), np.uint8)


def score_predictions(preds: np.ndarray, dataset: MultiRaterDataset) -> tuple[np.ndarray, np.ndarray]:
    """Mean disc and cup Dice of ``preds`` against each label source."""
    sources = label_sources(dataset.n_raters)
    disc = np.zeros(len(sources))
    cup = np.zeros(len(sources))
    for j, src in enumerate(sources):
        d, u = [], []
        for k in range(dataset.n_scenes):
            gt = dataset.mask(k, src)
            d.append(dice_coefficient(preds[k, ..., 0], gt[..., 0]))
            u.append(dice_coefficient(preds[k, ..., 1], gt[..., 1]))
        disc[j], cup[j] = np.mean(d), np.mean(u)
    return disc, cup


def evaluate_matrix(
    model: PUNet, dataset: MultiRaterDataset, prompts: list[RaterTag] | None = None, batch: int = 8
) -> EvalMatrix:
    """(R+1) x (R+1) matrix: rows P_r1..P_rR, P_c; columns Rater 1..R, MV."""
    R = dataset.n_raters
    prompts = prompts if prompts is not None else label_sources(R)
    rows = []
    disc = np.zeros((len(prompts), R + 1))
    cup = np.zeros((len(prompts), R + 1))
    for i, tag in enumerate(prompts):
        preds = predict_dataset(model, dataset.images, tag, batch=batch)
        disc[i], cup[i] = score_predictions(preds, dataset)
        rows.append(prompt_name(tag))
    return EvalMatrix(rows, [source_name(t) for t in label_sources(R)], disc, cup)


def matrix_from_predictions(named_preds: dict[str, np.ndarray], dataset: MultiRaterDataset) -> EvalMatrix:
    rows = list(named_preds)
    R = dataset.n_raters
    disc = np.zeros((len(rows), R + 1))
    cup = np.zeros((len(rows), R + 1))
    for i, r in enumerate(rows):
        disc[i], cup[i] = score_predictions(named_preds[r], dataset)
    return EvalMatrix(rows, [source_name(t) for t in label_sources(R)], disc, cup)
