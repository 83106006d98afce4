"""Acceptance gate: one test per criterion, each recording a pass/fail line.

The training-based criteria (3, 4, 5, 6) share one session-scoped experiment
over three seeds at the default configuration; it takes roughly ten minutes
per seed on one CPU core. Reports land in ``acceptance_report/``.
"""

import itertools
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from punet import pipeline as P
from punet.cli import main as cli_main
from punet.config import RunConfig
from punet.evaluation import dice_coefficient
from punet.gradcheck import COMPOSITE_TOL, PRIMITIVE_TOL, run_suite
from punet.model import PUNet, expected_prompt_mode_count, load_checkpoint
from punet.report import REFERENCE_PROMPT_PARAMS, REFERENCE_TOTAL_PARAMS, prompt_ratio, write_ablation_report
from punet.synth import majority_vote

from itb_cases import check_permutation_equivariance, check_shape, check_zero_init_identity
from test_evaluation import DICE_TABLE
from test_synth import brute_force_vote

SEEDS = [0, 1, 2]
REPORT_DIR = Path(os.environ.get("PUNET_ACCEPTANCE_DIR", Path(__file__).resolve().parents[1] / "acceptance_report"))


@pytest.fixture(scope="session")
def experiment():
    return P.Experiment(RunConfig())


@pytest.fixture(scope="session")
def strategy_report(experiment):
    report = P.run_ablation_strategy(experiment, SEEDS)
    write_ablation_report(REPORT_DIR, report, {"mean over seeds": P.strategy_table(experiment, SEEDS)})
    return report


@pytest.fixture(scope="session")
def locations_report(experiment, strategy_report):
    report = P.run_ablation_locations(experiment, SEEDS)
    write_ablation_report(REPORT_DIR, report, {"mean over seeds": P.locations_table(experiment, SEEDS)})
    return report


def test_criterion_1_gradient_suite(acceptance_record):
    t0 = time.perf_counter()
    results = run_suite(seed=0)
    elapsed = time.perf_counter() - t0
    prim = [r for r in results if r.tolerance == PRIMITIVE_TOL]
    comp = [r for r in results if r.tolerance == COMPOSITE_TOL]
    worst_p = max(r.error for r in prim)
    worst_c = max(r.error for r in comp)
    ok = all(r.passed for r in results) and len(comp) == 1 and elapsed < 120
    acceptance_record(
        1, ok, f"{len(prim)} primitives max rel err {worst_p:.1e} (<1e-4), composite {worst_c:.1e} (<1e-3), {elapsed:.1f}s"
    )
    assert ok


def test_criterion_2_parameter_efficiency(acceptance_record):
    model = PUNet(RunConfig().unet(), seed=0)
    n, total, ratio = prompt_ratio(model)
    ref = REFERENCE_PROMPT_PARAMS / REFERENCE_TOTAL_PARAMS
    ok = n == expected_prompt_mode_count(model.config) and ratio <= 0.01
    acceptance_record(2, ok, f"prompt+head {n}/{total} = {100 * ratio:.3f}% (<=1%); reference 0.10M/29.94M = {100 * ref:.2f}%")
    assert ok


def test_criterion_3_freeze_contract(experiment, strategy_report, locations_report, acceptance_record):
    runs = list(experiment.runs.values())
    ok = bool(runs) and all(r.frozen_identical for r in runs)
    acceptance_record(3, ok, f"backbone+ITB bit-identical after {len(runs)} prompt-mode fine-tunes")
    assert ok


def test_criterion_4_prompt_specialization(experiment, strategy_report, acceptance_record):
    gaps = [experiment.run(s, "both", "mix").matrix.specialization_gap(6) for s in SEEDS]
    mean = float(np.mean(gaps))
    (REPORT_DIR / "specialization.csv").write_text(
        "seed,gap\n" + "".join(f"{s},{g:.6f}\n" for s, g in zip(SEEDS, gaps)) + f"mean,{mean:.6f}\n"
    )
    table = P.mean_matrix([experiment.run(s, "both", "mix").matrix for s in SEEDS])
    (REPORT_DIR / "eval_matrix_mean.md").write_text(table.to_markdown())
    (REPORT_DIR / "eval_matrix_mean.csv").write_text(table.to_csv())
    ok = mean >= 0.02
    acceptance_record(4, ok, f"matched minus mismatched Dice {mean:.4f} (>=0.02); per seed {', '.join(f'{g:.4f}' for g in gaps)}")
    assert ok


def test_criterion_5_mix_training(strategy_report, acceptance_record):
    m = strategy_report.means()
    ok = P.strategy_dominance(strategy_report)
    per_seed = "; ".join(f"{v} " + "/".join(f"{x:.4f}" for x in strategy_report.values[v]) for v in strategy_report.variants)
    acceptance_record(
        5, ok, f"mix {m['mix']:.4f} vs individual {m['individual']:.4f}, fusion {m['fusion']:.4f}; per seed: {per_seed}"
    )
    assert ok


def test_criterion_6_insertion_locations(locations_report, acceptance_record):
    assert len(locations_report.variants) == 3
    m = locations_report.means()
    summary = locations_report.summary()
    acceptance_record(
        6, True, f"down {m['down']:.4f}, up {m['up']:.4f}, both {m['both']:.4f}; {summary.split('; ', 1)[1]}"
    )


def test_criterion_7_oracles(acceptance_record):
    rng = np.random.default_rng(0)
    random_ok = True
    for _ in range(512):
        r = int(rng.integers(1, 9))
        masks = list(rng.integers(0, 2, (r, 3, 3)))
        random_ok &= np.array_equal(majority_vote(masks), brute_force_vote(masks))
    exhaustive_ok = True
    cases = 0
    for bits in itertools.product((0, 1), repeat=12):
        masks = list(np.array(bits).reshape(3, 2, 2))
        exhaustive_ok &= np.array_equal(majority_vote(masks), brute_force_vote(masks))
        cases += 1
    dice_ok = all(abs(dice_coefficient(np.array(a), np.array(b)) - e) < 1e-15 for a, b, e in DICE_TABLE)
    ok = random_ok and exhaustive_ok and dice_ok
    acceptance_record(7, ok, f"vote: 512 random 3x3xR + {cases} exhaustive R=3 2x2; dice: {len(DICE_TABLE)} tabulated cases")
    assert ok


def test_criterion_8_determinism(tmp_path, acceptance_record):
    # default architecture and raters; data and epochs trimmed to keep two runs short
    cfg = {"n_source": 16, "n_train": 16, "n_test": 4, "pretrain_epochs": 3, "pretrain_drops": [2],
           "finetune_epochs": 2, "finetune_drops": [1]}
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    blobs = []
    for name in ("a", "b"):
        assert cli_main(["run", "--config", str(path), "--seed", "3", "--out", str(tmp_path / name)]) == 0
        blobs.append((tmp_path / name / "report" / "eval_matrix.csv").read_bytes())
    pre, _ = load_checkpoint(tmp_path / "a" / "pretrained")
    ft, _ = load_checkpoint(tmp_path / "a" / "finetuned")
    frozen_ok = P.frozen_identical(pre, ft)
    ok = blobs[0] == blobs[1] and len(blobs[0]) > 0 and frozen_ok
    acceptance_record(8, ok, f"two synth->pretrain->finetune->eval runs: eval_matrix.csv byte-identical ({len(blobs[0])} bytes)")
    assert ok


def test_criterion_9_itb_invariants(acceptance_record):
    n = 60
    shape = sum(check_shape(s) for s in range(n))
    ident = sum(check_zero_init_identity(s) for s in range(n))
    perm = sum(check_permutation_equivariance(s) for s in range(n))
    ok = shape == ident == perm == n
    acceptance_record(9, ok, f"{n} random configs: shape {shape}/{n}, zero-init identity {ident}/{n}, permutation {perm}/{n}")
    assert ok
