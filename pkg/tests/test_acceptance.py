"""End-to-end acceptance checks.

Each test prints one ``[PASS]``/``[FAIL]`` line with the measured numbers before
asserting. The two-view sweep (criteria 4-6) is shared through a module fixture;
point ``DOMINO_ACCEPTANCE_DIR`` at a finished sweep directory to reuse it.
"""

import csv
import json
import math
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.stats import ortho_group

from domino.config import Cell, Manifest, config_from_dict
from domino.datasets import dataset_from_spec
from domino.ndgrad import OP_KINDS, Array, get_default_dtype, set_default_dtype
from domino.objectives import NAMED_GRAPHS, CriticConfig, infonce_from_scores
from domino.selfcheck import EDGE_CASES, edge_grad_error, op_grad_error
from domino.simsuite import cca_measure, cka_linear, pwcca_weights, svcca
from domino.trainer import run_cell, run_experiment

OBJECTIVES = ["CR", "RR", "XX-CC", "CR-XX-CC", "RR-AE"]
SEEDS = [0, 1, 2]
DESK_DATA = {"kind": "two_view_synth", "n": 10000, "n_test": 2000, "seed": 0}
DESK = {"dataset": DESK_DATA, "epochs": 10, "eval_epochs": 20, "batch": 64, "base_channels": 16}
NOISY_VIEW = 1


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            sys.stdout.write(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}\n")
        return ok
    return emit


# --- 1. differentiation correctness -----------------------------------------------

def test_criterion_1_grad_checks(verdict):
    prev = get_default_dtype()
    set_default_dtype(np.float64)
    start = time.perf_counter()
    try:
        worst = {f"op {k}": max(op_grad_error(k, s) for s in range(20)) for k in OP_KINDS}
        worst.update({f"edge {e}": max(edge_grad_error(e, s) for s in range(20)) for e in EDGE_CASES})
    finally:
        set_default_dtype(prev)
    elapsed = time.perf_counter() - start
    bad = {k: v for k, v in worst.items() if not v < 1e-4}
    top = max(worst, key=worst.get)
    ok = verdict(1, not bad and elapsed < 120,
                 f"{len(worst)} ops/edges x 20 seeds, worst {top}={worst[top]:.2e}, "
                 f"failures={sorted(bad)}, {elapsed:.1f}s (limit 120s)")
    assert ok


# --- 2. InfoNCE closed forms -----------------------------------------------------

def test_criterion_2_infonce_closed_forms(verdict):
    cfg = CriticConfig(penalty=0.0)

    def loss(raw):
        return infonce_from_scores(Array(np.asarray(raw, dtype=np.float64)), cfg).item()

    sat = np.zeros((2, 2))
    np.fill_diagonal(sat, 1e9)
    cases = {
        "N=2 zero scores": (loss(np.zeros((2, 2))), 2.06e-9),
        "N=8 zero scores": (loss(np.zeros((8, 8))), math.log(7)),
        "clip saturation": (loss(sat), -20.0),
    }
    errs = {k: abs(got - want) for k, (got, want) in cases.items()}
    ok = verdict(2, all(e < 1e-6 for e in errs.values()),
                 ", ".join(f"{k}: {cases[k][0]:.9g} (|err| {errs[k]:.1e})" for k in cases))
    assert ok


# --- 3. similarity-suite oracles ---------------------------------------------------

def _eig_cca(zi, zj):
    n = len(zi)
    ci, cj = zi - zi.mean(0), zj - zj.mean(0)
    s11, s22, s12 = ci.T @ ci / (n - 1), cj.T @ cj / (n - 1), ci.T @ cj / (n - 1)
    if zi.shape[1] > zj.shape[1]:
        s11, s22, s12 = s22, s11, s12.T
    ev = np.linalg.eigvals(np.linalg.solve(s11, s12) @ np.linalg.solve(s22, s12.T))
    return float(np.mean(np.sqrt(np.clip(ev.real, 0, 1))))


def test_criterion_3_similarity_oracles(verdict):
    cca_err = 0.0
    for seed in range(50):
        rng = np.random.default_rng(1000 + seed)
        d1, d2 = rng.integers(1, 5, size=2)
        n = int(rng.integers(max(d1, d2) + 6, 51))
        zi = rng.standard_normal((n, d1))
        zj = zi @ rng.standard_normal((d1, d2)) * rng.uniform(0, 1) + rng.standard_normal((n, d2))
        cca_err = max(cca_err, abs(cca_measure(zi, zj) - _eig_cca(zi, zj)))

    rng = np.random.default_rng(7)
    z, w = rng.standard_normal((60, 8)), rng.standard_normal((60, 5))
    q = ortho_group.rvs(8, random_state=3)
    cka_err = max(abs(cka_linear(z, z) - 1), abs(cka_linear(z @ q, w) - cka_linear(z, w)),
                  abs(cka_linear(4.2 * z, w) - cka_linear(z, w)))
    a, b = rng.standard_normal((80, 4)), rng.standard_normal((80, 4))
    b += 0.5 * a
    sv_err = abs(svcca(a, b, 1.0) - cca_measure(a, b))
    alpha, _ = pwcca_weights(a, b)
    weights_ok = bool(np.all(alpha >= 0)) and abs(alpha.sum() - 1) < 1e-12
    ok = verdict(3, cca_err < 1e-6 and cka_err < 1e-6 and sv_err < 1e-6 and weights_ok,
                 f"cca vs eigen oracle max err {cca_err:.1e} (50 cases), CKA invariance err {cka_err:.1e}, "
                 f"svcca(keep=1)-cca {sv_err:.1e}, pwcca weights nonneg/sum-1 {weights_ok}")
    assert ok


# --- 4-6. desk-scale two-view sweep -------------------------------------------------

def _manifest(out):
    cells = [Cell(name, config_from_dict({**DESK, "edges": NAMED_GRAPHS[name], "name": name}), SEEDS)
             for name in OBJECTIVES]
    return Manifest(cells, out=str(out))


@pytest.fixture(scope="module")
def sweep(tmp_path_factory):
    reuse = os.environ.get("DOMINO_ACCEPTANCE_DIR")
    if reuse and (Path(reuse) / "timing.json").is_file():
        out = Path(reuse)
        timing = json.loads((out / "timing.json").read_text())
    else:
        out = Path(reuse) if reuse else tmp_path_factory.mktemp("two_view_sweep")
        cpu, wall = time.process_time(), time.perf_counter()
        res = run_experiment(_manifest(out), jobs=1)
        timing = {"cpu_s": time.process_time() - cpu, "wall_s": time.perf_counter() - wall,
                  "failures": [f"{n} seed {s}" for n, s, _ in res.failures]}
        (out / "timing.json").write_text(json.dumps(timing))
    return {"out": out, "timing": timing, "acc": _read_rows(out / "accuracy.csv"),
            "sim": _read_rows(out / "similarity.csv")}


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _mean_acc(rows, model, modality):
    vals = [float(r["acc"]) for r in rows if r["model"] == model and int(r["modality"]) == modality]
    return float(np.mean(vals)), len(vals)


def _mean_sim(rows, model, split, measure):
    return float(np.mean([float(r[measure]) for r in rows if r["model"] == model and r["split"] == split]))


def test_criterion_4_two_view_ordering(sweep, verdict):
    cr, n_cr = _mean_acc(sweep["acc"], "CR", NOISY_VIEW)
    margins, counts = {}, {"CR": n_cr}
    for name in ("RR", "XX-CC", "CR-XX-CC", "RR-AE"):
        mean, counts[name] = _mean_acc(sweep["acc"], name, NOISY_VIEW)
        margins[name] = mean - cr
    cpu_min = sweep["timing"]["cpu_s"] / 60
    complete = all(c == len(SEEDS) for c in counts.values()) and not sweep["timing"]["failures"]
    ok = verdict(4, complete and all(m >= 0.02 for m in margins.values()) and cpu_min < 60,
                 f"noisy-view accuracy CR={cr:.4f}; margins "
                 + ", ".join(f"{k}=+{v:.4f}" if v >= 0 else f"{k}={v:.4f}" for k, v in margins.items())
                 + f" (need >= 0.02); seeds per cell {counts}; CPU {cpu_min:.1f} min "
                 f"(wall {sweep['timing']['wall_s'] / 60:.1f} min, limit 60)")
    assert ok


def test_criterion_5_similarity_ordering(sweep, verdict):
    sim = sweep["sim"]
    cka = {(m, s): _mean_sim(sim, m, s, "cka") for m in OBJECTIVES for s in ("train", "holdout")}
    cca = {(m, s): _mean_sim(sim, m, s, "cca") for m in OBJECTIVES for s in ("train", "holdout")}
    lead = {f"{m}/{s}": cka[(m, s)] - cka[("CR", s)] for m in ("RR", "RR-AE") for s in ("train", "holdout")}
    gaps = {m: (abs(cka[(m, "train")] - cka[(m, "holdout")]), abs(cca[(m, "train")] - cca[(m, "holdout")]))
            for m in OBJECTIVES}
    ok = verdict(5, all(v >= 0.1 for v in lead.values()) and all(a < b for a, b in gaps.values()),
                 "CKA lead over CR " + ", ".join(f"{k}={v:+.3f}" for k, v in lead.items())
                 + " (need >= 0.1); train/holdout gap CKA vs CCA "
                 + ", ".join(f"{m}: {a:.4f}<{b:.4f}" if a < b else f"{m}: {a:.4f}>={b:.4f}"
                             for m, (a, b) in gaps.items()))
    assert ok


def test_criterion_6_determinism(sweep, verdict, tmp_path):
    # RR is the cheapest cell of the sweep
    cfg = config_from_dict({**DESK, "edges": NAMED_GRAPHS["RR"], "name": "RR", "seed": 0})
    again = run_cell(cfg, tmp_path / "rr", dataset_from_spec(DESK_DATA))
    first = sweep["out"] / "RR" / "seed_0"
    same_ckpt = (first / "checkpoint.ndck").read_bytes() == (tmp_path / "rr/checkpoint.ndck").read_bytes()
    acc_first = [float(r["acc"]) for r in _read_rows(first / "accuracy.csv")]
    acc_again = [r["acc"] for r in again["accuracy"]]
    ok = verdict(6, same_ckpt and acc_first == acc_again,
                 f"RR seed 0 rerun: checkpoint bit-identical={same_ckpt}, accuracy {acc_first} vs {acc_again}")
    assert ok


# --- 7. end-to-end smoke -------------------------------------------------------------

def test_criterion_7_cli_smoke(tmp_path, verdict):
    manifest = {"preset": "small", "cells": [{"objective": "CR", "seeds": [0, 1]},
                                             {"objective": "RR", "seeds": [0, 1]}]}
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(manifest))
    out = tmp_path / "runs"
    start = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "domino.cli", "run", str(path), "--out", str(out)],
                          capture_output=True, text=True)
    elapsed = time.perf_counter() - start
    bundle = ["report.md", "accuracy.csv", "similarity.csv", "summary.csv", "accuracy_table.csv",
              "similarity_table.csv", "accuracy.png", "similarity.png"]
    missing = [b for b in bundle if not (out / b).is_file()]
    ckpts = len(list(out.glob("*/seed_*/checkpoint.ndck")))
    ok = verdict(7, proc.returncode == 0 and not missing and ckpts == 4 and elapsed < 600,
                 f"exit {proc.returncode}, {elapsed:.1f}s (limit 600s), checkpoints {ckpts}/4, missing {missing}")
    assert ok, proc.stderr[-2000:]
