"""End-to-end runs: synthesize, pretrain, fine-tune, evaluate, ablate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .evaluation import (
    EvalMatrix,
    evaluate_matrix,
    label_sources,
    matrix_from_predictions,
    predict_dataset,
    source_name,
)
from .model import FineTuneMode, Insertion, PUNet, RaterTag, count_params
from .synth import MultiRaterDataset, build_dataset, majority_vote
from .training import TrainResult, TrainingStrategy, train

log = logging.getLogger(__name__)

# seed offsets keep source, target and per-scheme streams distinct
TARGET_SEED_OFFSET = 1000


def source_dataset(cfg: RunConfig, seed: int | None = None) -> MultiRaterDataset:
    seed = cfg.seed if seed is None else seed
    return build_dataset(cfg.n_source, cfg.profiles(), seed, cfg.synth(), "source", cfg.threads)


def target_dataset(cfg: RunConfig, seed: int | None = None) -> MultiRaterDataset:
    seed = cfg.seed if seed is None else seed
    n = cfg.n_train + cfg.n_test
    return build_dataset(n, cfg.profiles(), seed + TARGET_SEED_OFFSET, cfg.synth(), "target", cfg.threads)


def split_target(cfg: RunConfig, ds: MultiRaterDataset) -> tuple[MultiRaterDataset, MultiRaterDataset]:
    return ds.split(cfg.n_train)


def pretrain(cfg: RunConfig, source: MultiRaterDataset, seed: int, insertion: str | None = None) -> tuple[PUNet, TrainResult]:
    """Full-mode training on majority-vote labels of the source domain."""
    ucfg = cfg.unet() if insertion is None else cfg.unet(insertion=insertion)
    model = PUNet(ucfg, seed=seed)
    res = train(
        model,
        source,
        FineTuneMode.FULL,
        TrainingStrategy.FUSION,
        cfg.pretrain_schedule(),
        seed=seed,
        batch_size=cfg.batch_size,
        smooth=cfg.dice_smooth,
    )
    return model, res


def finetune(
    cfg: RunConfig, model: PUNet, train_set: MultiRaterDataset, seed: int, mode=None, strategy=None, **kw
) -> TrainResult:
    return train(
        model,
        train_set,
        mode or cfg.mode,
        strategy or cfg.strategy,
        cfg.finetune_schedule(),
        seed=seed,
        batch_size=cfg.batch_size,
        smooth=cfg.dice_smooth,
        **kw,
    )


def clone(model: PUNet) -> PUNet:
    from .tensor import ParamStore

    store = ParamStore()
    for name, p in model.params.items():
        store.add(name, p.value.data.copy(), p.group, p.frozen)
    return PUNet(model.config, params=store)


def routed_matrix(model: PUNet, test: MultiRaterDataset, strategy: TrainingStrategy | str) -> EvalMatrix:
    """Single-row table: each label source scored with the prompt ``strategy`` provides.

    Mix: rater j uses P_rj, MV uses P_c. Fusion: every source uses P_c.
    Individual: rater j uses P_rj; MV uses the pixelwise majority of the R
    individual-prompt predictions, since no aggregate prompt was trained.
    """
    strategy = TrainingStrategy(strategy)
    R = test.n_raters
    preds = {}
    per_rater = {}
    for src in label_sources(R):
        if strategy is TrainingStrategy.FUSION:
            tag = RaterTag.aggregate()
        elif src.is_aggregate and strategy is TrainingStrategy.INDIVIDUAL:
            if not per_rater:
                per_rater = {j: predict_dataset(model, test.images, RaterTag.rater(j)) for j in range(1, R + 1)}
            preds[source_name(src)] = majority_vote(list(per_rater.values()))
            continue
        else:
            tag = src
        if not src.is_aggregate and strategy is TrainingStrategy.INDIVIDUAL and src.slot in per_rater:
            preds[source_name(src)] = per_rater[src.slot]
            continue
        p = predict_dataset(model, test.images, tag)
        if strategy is TrainingStrategy.INDIVIDUAL:
            per_rater[src.slot] = p
        preds[source_name(src)] = p
    full = matrix_from_predictions(preds, test)
    # row i of ``full`` was predicted for column i; keep that cell only
    idx = np.arange(len(full.rows))
    row = f"PU-Net ({strategy.value})"
    return EvalMatrix([row], full.cols, full.disc[idx, idx][None], full.cup[idx, idx][None])


def frozen_identical(before: PUNet, after: PUNet, groups=("backbone", "itb")) -> bool:
    """Bit-level equality of every parameter in ``groups``."""
    for name, p in before.params.items():
        if p.group in groups:
            a, b = p.value.data, after.params[name].data
            if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
    return True


@dataclass
class SeedRun:
    seed: int
    insertion: str
    strategy: str
    matrix: EvalMatrix
    routed: EvalMatrix
    pretrain_loss: list[float]
    finetune_loss: list[float]
    frozen_identical: bool
    model: PUNet | None = None


@dataclass
class Experiment:
    """Caches pretrained backbones and datasets across ablation cells."""

    cfg: RunConfig
    keep_models: bool = False
    _data: dict = field(default_factory=dict)
    _pretrained: dict = field(default_factory=dict)
    runs: dict = field(default_factory=dict)

    def data(self, seed: int):
        if seed not in self._data:
            tr, te = split_target(self.cfg, target_dataset(self.cfg, seed))
            self._data[seed] = (source_dataset(self.cfg, seed), tr, te)
        return self._data[seed]

    def pretrained(self, seed: int, insertion: str) -> tuple[PUNet, TrainResult]:
        key = (seed, insertion)
        if key not in self._pretrained:
            src, _, _ = self.data(seed)
            log.info("pretraining seed=%d insertion=%s", seed, insertion)
            self._pretrained[key] = pretrain(self.cfg, src, seed, insertion)
        return self._pretrained[key]

    def run(self, seed: int, insertion: str = "both", strategy: str = "mix") -> SeedRun:
        key = (seed, insertion, strategy)
        if key in self.runs:
            return self.runs[key]
        base, pre_res = self.pretrained(seed, insertion)
        _, tr, te = self.data(seed)
        model = clone(base)
        log.info("fine-tuning seed=%d insertion=%s strategy=%s", seed, insertion, strategy)
        res = finetune(self.cfg, model, tr, seed, FineTuneMode.PROMPT_AND_HEAD, strategy)
        frozen_ok = frozen_identical(base, model)
        matrix = evaluate_matrix(model, te)
        matrix.params = {r: count_params(model.params, trainable_only=True) for r in matrix.rows}
        run = SeedRun(
            seed,
            insertion,
            strategy,
            matrix,
            routed_matrix(model, te, strategy),
            pre_res.epoch_loss,
            res.epoch_loss,
            frozen_ok,
            model if self.keep_models else None,
        )
        self.runs[key] = run
        return run


# --------------------------------------------------------------------------
# Ablations


@dataclass
class AblationReport:
    name: str
    variants: list[str]
    seeds: list[int]
    metric: str
    values: dict[str, list[float]]  # variant -> per-seed metric
    ordering_expected: list[str]
    tables: dict[str, EvalMatrix] = field(default_factory=dict)

    def means(self) -> dict[str, float]:
        return {v: float(np.mean(self.values[v])) for v in self.variants}

    def stds(self) -> dict[str, float]:
        return {v: float(np.std(self.values[v])) for v in self.variants}

    def ordering_holds(self) -> bool:
        m = self.means()
        seq = [m[v] for v in self.ordering_expected]
        return all(a >= b for a, b in zip(seq, seq[1:]))

    def summary(self) -> str:
        m = self.means()
        observed = " > ".join(sorted(self.variants, key=lambda v: -m[v]))
        expected = " >= ".join(self.ordering_expected)
        status = "holds" if self.ordering_holds() else "DEVIATES at desk scale"
        return f"{self.name}: expected {expected}; observed {observed}; {status}"

    def to_csv(self) -> str:
        head = ["variant", "metric", "mean", "std"] + [f"seed{s}" for s in self.seeds]
        lines = [",".join(head)]
        m, s = self.means(), self.stds()
        for v in self.variants:
            vals = [f"{x:.6f}" for x in self.values[v]]
            lines.append(",".join([v, self.metric, f"{m[v]:.6f}", f"{s[v]:.6f}"] + vals))
        return "\n".join(lines) + "\n"


def _mv_dice(run: SeedRun) -> float:
    i = run.matrix.rows.index("P_c")
    j = run.matrix.cols.index("MV")
    return float(run.matrix.mean[i, j])


def run_ablation_locations(exp: Experiment, seeds: list[int]) -> AblationReport:
    """Down / Up / Both insertion under identical budgets; MV-GT Dice with P_c."""
    variants = [Insertion.DOWN.value, Insertion.UP.value, Insertion.BOTH.value]
    values = {v: [_mv_dice(exp.run(s, v, "mix")) for s in seeds] for v in variants}
    return AblationReport(
        "insertion locations", variants, list(seeds), "mv_dice_mean", values, ["both", "up", "down"]
    )


def run_ablation_strategy(exp: Experiment, seeds: list[int]) -> AblationReport:
    """Individual / Fusion / Mix prompt sets; mean Dice over routed cells."""
    variants = [s.value for s in TrainingStrategy]
    values = {v: [exp.run(s, "both", v).routed.overall_mean() for s in seeds] for v in variants}
    report = AblationReport("training strategy", variants, list(seeds), "routed_dice_mean", values, ["mix", "individual"])
    return report


def strategy_dominance(report: AblationReport) -> bool:
    m = report.means()
    return m["mix"] >= m["individual"] and m["mix"] >= m["fusion"]


def mean_matrix(tables: list[EvalMatrix]) -> EvalMatrix:
    """Cell-wise mean of same-shaped matrices (e.g. across seeds)."""
    first = tables[0]
    disc = np.mean([t.disc for t in tables], axis=0)
    cup = np.mean([t.cup for t in tables], axis=0)
    return EvalMatrix(list(first.rows), list(first.cols), disc, cup, dict(first.params))


def stack_rows(tables: list[EvalMatrix]) -> EvalMatrix:
    rows = [r for t in tables for r in t.rows]
    params = {k: v for t in tables for k, v in t.params.items()}
    return EvalMatrix(
        rows, list(tables[0].cols), np.vstack([t.disc for t in tables]), np.vstack([t.cup for t in tables]), params
    )


def strategy_table(exp: Experiment, seeds: list[int]) -> EvalMatrix:
    rows = [mean_matrix([exp.run(s, "both", v.value).routed for s in seeds]) for v in TrainingStrategy]
    return stack_rows(rows)


def locations_table(exp: Experiment, seeds: list[int]) -> EvalMatrix:
    rows = []
    for v in Insertion:
        m = mean_matrix([exp.run(s, v.value, "mix").matrix for s in seeds])
        i = m.rows.index("P_c")
        rows.append(EvalMatrix([f"PU-Net ({v.value}), P_c"], m.cols, m.disc[i : i + 1], m.cup[i : i + 1]))
    return stack_rows(rows)


def baseline_matrix(cfg: RunConfig, train_set: MultiRaterDataset, test: MultiRaterDataset, seed: int) -> EvalMatrix:
    """Prompt-free reference models trained from scratch on the target split."""
    from .training import baseline_label_sampling, baseline_multihead, train_single_label

    ucfg, sched = cfg.unet(), cfg.pretrain_schedule()
    R = test.n_raters
    preds: dict[str, np.ndarray] = {}
    params: dict[str, int] = {}
    for src in label_sources(R):
        model, _ = train_single_label(ucfg, train_set, src, sched, seed, cfg.batch_size)
        name = "Baseline-" + ("MV" if src.is_aggregate else f"R{src.slot}")
        preds[name] = predict_dataset(model, test.images, None)
        params[name] = count_params(model.params)
    model, _ = baseline_label_sampling(ucfg, train_set, sched, seed, cfg.batch_size)
    preds["Label sampling"] = predict_dataset(model, test.images, None)
    params["Label sampling"] = count_params(model.params)
    table = matrix_from_predictions(preds, test)

    # multi-head: column j is scored with head j, MV with the heads' vote
    model, _ = baseline_multihead(ucfg, train_set, sched, seed, cfg.batch_size)
    heads = [predict_dataset(model, test.images, None, head=j) for j in range(R)]
    full = matrix_from_predictions({f"h{j}": h for j, h in enumerate(heads)} | {"mv": majority_vote(heads)}, test)
    idx = np.arange(R + 1)
    mh = EvalMatrix(["Multi-head"], full.cols, full.disc[idx, idx][None], full.cup[idx, idx][None])
    params["Multi-head"] = count_params(model.params)
    out = stack_rows([table, mh])
    out.params = params
    return out
