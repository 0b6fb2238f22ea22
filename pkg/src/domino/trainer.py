"""Pretraining over a pair graph, linear evaluation and experiment sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad
from .config import Manifest, TrainConfig
from .datasets import MultimodalDataset, dataset_from_spec, num_batches
from .model import LATENT_DIM, LinearHead, MultimodalModel
from .ndgrad import Array, Tape, checkpoint
from .ndgrad import ops
from .objectives import CriticConfig, PairGraph, total_loss
from .optim import RAdam, onecycle_lr
from .simsuite import RepMatrix, SimilarityReport, compare

log = logging.getLogger(__name__)

EVAL_BATCH = 256


class TrainingAborted(RuntimeError):
    pass


@dataclass
class PretrainResult:
    checkpoint: Path
    best_checkpoint: Path
    epoch_losses: list[dict[str, float]]
    lrs: list[float]
    model: MultimodalModel


def _set_precision(precision: str) -> None:
    ndgrad.set_default_dtype(np.float64 if precision == "float64" else np.float32)


def build_model(graph: PairGraph, dataset: MultimodalDataset, base_channels: int, seed: int) -> MultimodalModel:
    model = MultimodalModel(
        dataset.in_channels, base_channels=base_channels, seed=seed,
        with_heads=graph.heads_needed(), with_decoders=graph.decoders_needed(),
        with_sup=graph.sup_needed(), num_classes=dataset.num_classes,
    )
    graph.validate(len(dataset.in_channels), model)
    return model


def load_model(path) -> MultimodalModel:
    """Rebuild a model from the parameter names and shapes stored in a checkpoint."""
    arrays = checkpoint.load(path)
    mods = sorted({int(k.split("/")[0][3:]) for k in arrays if k.startswith("enc")})
    if not mods or mods != list(range(len(mods))):
        raise ValueError(f"{path}: no encoders found")
    in_channels = [arrays[f"enc{m}/conv1/w"].shape[1] for m in mods]
    base = arrays["enc0/conv1/w"].shape[0]

    def present(prefix):
        return {m for m in mods if any(k.startswith(f"{prefix}{m}/") for k in arrays)}

    sup = present("sup")
    num_classes = arrays[f"sup{min(sup)}/w"].shape[0] if sup else 10
    prev = ndgrad.get_default_dtype()
    ndgrad.set_default_dtype(arrays["enc0/conv1/w"].dtype)
    try:
        model = MultimodalModel(in_channels, base_channels=base, with_heads=present("head"),
                                with_decoders=present("dec"), with_sup=sup, num_classes=num_classes)
    finally:
        ndgrad.set_default_dtype(prev)
    model.load_state(arrays)
    return model


def _save_model(path: Path, model: MultimodalModel) -> None:
    checkpoint.save(path, model.state())


def _write_losses(path: Path, epoch_losses: list[dict[str, float]], lrs: list[float]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "edge", "value", "lr"])
        for epoch, (losses, lr) in enumerate(zip(epoch_losses, lrs)):
            for edge, val in losses.items():
                w.writerow([epoch, edge, repr(float(val)), repr(float(lr))])


def pretrain(cfg: TrainConfig, out_dir, dataset: MultimodalDataset | None = None,
             critic: CriticConfig = CriticConfig()) -> PretrainResult:
    """Train the encoders on ``cfg.edges``; writes checkpoints and ``losses.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    _set_precision(cfg.precision)
    dataset = dataset or dataset_from_spec(cfg.dataset)
    graph = cfg.graph()
    model = build_model(graph, dataset, cfg.base_channels, cfg.seed)
    model.train()
    params = model.parameters()
    opt = RAdam(params)
    dtype = ndgrad.get_default_dtype()

    steps_per_epoch = num_batches(dataset.n_train(), cfg.batch)
    total_steps = cfg.epochs * steps_per_epoch
    ckpt, best = out / "checkpoint.ndck", out / "best.ndck"
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    epoch_losses: list[dict[str, float]] = []
    lrs: list[float] = []
    best_loss = math.inf
    last_good = model.state()
    last_good = {k: v.copy() for k, v in last_good.items()}
    step = 0
    for epoch in range(cfg.epochs):
        sums: dict[str, float] = {}
        count = 0
        lr = cfg.lr
        for batch in dataset.train_batches(epoch, cfg.batch):
            lr = onecycle_lr(step, total_steps, cfg.lr, cfg.max_lr, cfg.pct_start, cfg.final_div)
            xs = [Array(batch.x1.astype(dtype)), Array(batch.x2.astype(dtype))]
            opt.zero_grad()
            with Tape() as tape:
                loss, parts = total_loss(graph, xs, model, batch.labels, critic)
            value = loss.item()
            if not math.isfinite(value):
                model.load_state(last_good)
                _save_model(ckpt, model)
                _write_losses(out / "losses.csv", epoch_losses, lrs)
                raise TrainingAborted(f"non-finite loss at epoch {epoch} step {step}; "
                                      f"restored last good checkpoint {ckpt}")
            tape.backward(loss)
            del tape
            opt.step(lr)
            step += 1
            count += 1
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            sums["total"] = sums.get("total", 0.0) + value
        means = {k: v / max(count, 1) for k, v in sums.items()}
        epoch_losses.append(means)
        lrs.append(lr)
        log.info("epoch %d/%d total=%.4f %s", epoch + 1, cfg.epochs, means.get("total", float("nan")),
                 " ".join(f"{k}={v:.4f}" for k, v in means.items() if k != "total"))
        last_good = {k: v.copy() for k, v in model.state().items()}
        if means.get("total", math.inf) < best_loss:
            best_loss = means["total"]
            _save_model(best, model)
    _save_model(ckpt, model)
    _write_losses(out / "losses.csv", epoch_losses, lrs)
    return PretrainResult(ckpt, best, epoch_losses, lrs, model)


# --- representations and linear evaluation ---------------------------------

def encode_all(model: MultimodalModel, modality: int, images: np.ndarray, batch: int = EVAL_BATCH) -> np.ndarray:
    """Latent codes for ``images`` with batchnorm in eval mode (no tape)."""
    if not 0 <= modality < len(model.encoders):
        raise ValueError(f"modality {modality} out of range (model has {len(model.encoders)})")
    enc = model.encoders[modality]
    was = enc.training
    enc.eval()
    dtype = enc.params["fc/w"].dtype
    try:
        out = [enc(Array(images[s:s + batch].astype(dtype))).z.data for s in range(0, len(images), batch)]
    finally:
        enc.train(was)
    return np.concatenate(out) if out else np.zeros((0, LATENT_DIM), dtype=dtype)


def collect_representations(model: MultimodalModel, modality: int, images: np.ndarray, split: str) -> RepMatrix:
    return RepMatrix(encode_all(model, modality, images), modality, split)


@dataclass
class ProbeResult:
    train_acc: float
    test_acc: float
    head: LinearHead = field(repr=False)


def train_linear_probe(z_train: np.ndarray, y_train: np.ndarray, z_test: np.ndarray, y_test: np.ndarray,
                       num_classes: int, epochs: int = 50, batch: int = 64, lr: float = 4e-4,
                       max_lr: float = 0.01, seed: int = 0) -> ProbeResult:
    """Softmax-regression probe trained with RAdam + one-cycle on fixed features."""
    dtype = ndgrad.get_default_dtype()
    rng = np.random.default_rng(seed)
    head = LinearHead(z_train.shape[1], num_classes, rng=rng)
    opt = RAdam(head.params)
    n = len(z_train)
    steps_per_epoch = num_batches(n, batch)
    total = epochs * steps_per_epoch
    step = 0
    z_train = z_train.astype(dtype)
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(n)
        for s in range(steps_per_epoch):
            idx = order[s * batch:(s + 1) * batch]
            opt.zero_grad()
            with Tape() as tape:
                loss = ops.softmax_xent(head(Array(z_train[idx])), y_train[idx])
            tape.backward(loss)
            opt.step(onecycle_lr(step, total, lr, max_lr))
            step += 1

    def acc(z, y):
        if len(z) == 0:
            return float("nan")
        logits = head(Array(z.astype(dtype))).data
        return float(np.mean(np.argmax(logits, axis=1) == y))

    return ProbeResult(acc(z_train, y_train), acc(z_test, y_test), head)


def linear_eval(ckpt, modality: int, dataset: MultimodalDataset, epochs: int = 50, batch: int = 64,
                lr: float = 4e-4, max_lr: float = 0.01, seed: int = 0,
                model: MultimodalModel | None = None) -> ProbeResult:
    """Top-1 accuracy of a linear probe on the frozen encoder of one modality."""
    model = model or load_model(ckpt)
    if not 0 <= modality < len(model.encoders):
        raise ValueError(f"modality {modality} out of range (model has {len(model.encoders)})")
    train, test = dataset.train[modality], dataset.test[modality]
    z_tr = encode_all(model, modality, train.images)
    z_te = encode_all(model, modality, test.images)
    result = train_linear_probe(z_tr, train.labels, z_te, test.labels, dataset.num_classes,
                                epochs, batch, lr, max_lr, seed)
    if ckpt is not None:
        probe_path = Path(ckpt).with_name(f"probe{modality}.ndck")
        checkpoint.save(probe_path, result.head.state(f"linear_probe{modality}"))
    return result


def similarity(ckpt, dataset: MultimodalDataset, name: str = "model", variance_keep: float = 0.99,
               model: MultimodalModel | None = None, max_samples: int | None = None) -> SimilarityReport:
    """CCA/SVCCA/PWCCA/CKA between the two modalities' latents on train and holdout."""
    model = model or load_model(ckpt)
    values, degenerate = {}, {}
    for split in ("train", "holdout"):
        x0, x1 = dataset.paired("train" if split == "train" else "test")
        if max_samples is not None:
            x0, x1 = x0[:max_samples], x1[:max_samples]
        z0 = encode_all(model, 0, x0)
        z1 = encode_all(model, 1, x1)
        values[split], degenerate[split] = compare(z0, z1, variance_keep)
    flags = {"centered": True, "variance_keep": variance_keep, "cca_eps": 1e-3,
             "degenerate": degenerate, "pwcca_orientation": "ij: weights from modality 0"}
    return SimilarityReport(name, values, flags)


# --- experiment sweeps ------------------------------------------------------

def run_cell(cfg: TrainConfig, out_dir, dataset: MultimodalDataset | None = None) -> dict:
    """Pretrain, evaluate each modality and measure similarity for one (cell, seed)."""
    out = Path(out_dir)
    dataset = dataset or dataset_from_spec(cfg.dataset)
    res = pretrain(cfg, out, dataset)
    rows = []
    for m in range(len(dataset.in_channels)):
        probe = linear_eval(res.checkpoint, m, dataset, cfg.eval_epochs, cfg.batch, cfg.lr, cfg.max_lr,
                            cfg.seed, model=res.model)
        rows.append({"model": cfg.name, "seed": cfg.seed, "modality": m, "split": "test", "acc": probe.test_acc})
    _write_csv(out / "accuracy.csv", ["model", "seed", "modality", "split", "acc"], rows)
    report = similarity(res.checkpoint, dataset, cfg.name, model=res.model)
    (out / "similarity.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    sim_rows = [{**r, "seed": cfg.seed} for r in report.rows()]
    _write_csv(out / "similarity.csv", ["model", "seed", "split", *SimilarityReport.MEASURES], sim_rows)
    return {"accuracy": rows, "similarity": sim_rows}


def _write_csv(path: Path, columns: list[str], rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def _cell_job(args):
    cfg_dict, out_dir = args
    cfg = TrainConfig(**cfg_dict)
    try:
        return cfg.name, cfg.seed, run_cell(cfg, out_dir), None
    except Exception:  # isolate per-cell failures
        return cfg.name, cfg.seed, None, traceback.format_exc()


@dataclass
class ExperimentResult:
    out: Path
    failures: list[tuple[str, int, str]]
    accuracy: list[dict]
    similarity: list[dict]


def run_experiment(manifest: Manifest, jobs: int | None = None) -> ExperimentResult:
    """Every (cell, seed) pair: pretrain -> per-modality linear eval -> similarity."""
    out = Path(manifest.out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = []
    for cell in manifest.cells:
        for seed in cell.seeds:
            cfg = TrainConfig(**{**cell.config.to_dict(), "seed": seed, "name": cell.name})
            tasks.append((cfg.to_dict(), str(out / cell.name / f"seed_{seed}")))
    jobs = jobs or manifest.jobs or 1
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_cell_job, tasks))
    else:
        cache: dict[str, MultimodalDataset] = {}
        results = []
        for cfg_dict, out_dir in tasks:
            key = json.dumps(cfg_dict["dataset"], sort_keys=True)
            try:
                if key not in cache:
                    cache[key] = dataset_from_spec(cfg_dict["dataset"])
                res = run_cell(TrainConfig(**cfg_dict), out_dir, cache[key])
                results.append((cfg_dict["name"], cfg_dict["seed"], res, None))
            except Exception:  # isolate per-cell failures
                log.exception("cell %s seed %s failed", cfg_dict["name"], cfg_dict["seed"])
                results.append((cfg_dict["name"], cfg_dict["seed"], None, traceback.format_exc()))
    acc, sim, failures = [], [], []
    for name, seed, res, err in results:
        if err is not None:
            failures.append((name, seed, err))
            continue
        acc.extend(res["accuracy"])
        sim.extend(res["similarity"])
    _write_csv(out / "accuracy.csv", ["model", "seed", "modality", "split", "acc"], acc)
    _write_csv(out / "similarity.csv", ["model", "seed", "split", *SimilarityReport.MEASURES], sim)
    _write_csv(out / "summary.csv", ["model", "modality", "acc_mean", "acc_sd", "n_seeds"], summarize(acc))
    if failures:
        (out / "failures.txt").write_text(
            "".join(f"FAILED {n} seed {s}\n{e}\n" for n, s, e in failures), encoding="utf-8")
    return ExperimentResult(out, failures, acc, sim)


def summarize(acc_rows: list[dict]) -> list[dict]:
    """Mean and sample sd of test accuracy over seeds per (model, modality); sd=0 for one seed."""
    groups: dict[tuple, list[float]] = {}
    for r in acc_rows:
        groups.setdefault((r["model"], int(r["modality"])), []).append(float(r["acc"]))
    out = []
    for (model, m), vals in groups.items():
        sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        out.append({"model": model, "modality": m, "acc_mean": float(np.mean(vals)), "acc_sd": sd,
                    "n_seeds": len(vals)})
    return out
