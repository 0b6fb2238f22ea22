import csv
import math

import numpy as np
import pytest

from domino import trainer
from domino.config import Cell, Manifest, TrainConfig
from domino.datasets import LabeledImageSet, MultimodalDataset, dataset_from_spec, num_batches
from domino.model import MultimodalModel
from domino.ndgrad import checkpoint
from domino.optim import onecycle_schedule
from domino.trainer import (TrainingAborted, encode_all, linear_eval, load_model, pretrain, run_experiment,
                            summarize, train_linear_probe)

SMALL = {"kind": "synth", "n": 192, "n_test": 96, "seed": 0}


@pytest.fixture(scope="module")
def small_ds():
    return dataset_from_spec(SMALL)


def _cfg(edges, **kw):
    base = dict(dataset=SMALL, edges=edges, batch=32, epochs=6, eval_epochs=5, base_channels=4, seed=0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.mark.parametrize("name", ["CR", "XX", "CC", "RR", "CR-XX-CC", "RR-AE", "CR-CCA", "Supervised"])
def test_loss_decreases(name, small_ds, tmp_path):
    from domino.objectives import NAMED_GRAPHS
    res = pretrain(_cfg(NAMED_GRAPHS[name]), tmp_path, small_ds)
    assert res.epoch_losses[-1]["total"] < res.epoch_losses[0]["total"]
    assert (tmp_path / "checkpoint.ndck").is_file() and (tmp_path / "best.ndck").is_file()
    assert (tmp_path / "losses.csv").read_text().startswith("epoch,edge,value,lr\n")


def test_pretrain_deterministic(small_ds, tmp_path):
    cfg = _cfg(["CR:0", "XX:0-1"], epochs=2)
    pretrain(cfg, tmp_path / "a", small_ds)
    pretrain(cfg, tmp_path / "b", small_ds)
    assert (tmp_path / "a/checkpoint.ndck").read_bytes() == (tmp_path / "b/checkpoint.ndck").read_bytes()
    assert (tmp_path / "a/losses.csv").read_bytes() == (tmp_path / "b/losses.csv").read_bytes()


def test_rr_with_noise_modality_still_decreases(small_ds, tmp_path):
    a = small_ds.train[0]
    noise = LabeledImageSet(np.random.default_rng(0).uniform(0, 1, a.images.shape).astype(np.float32), a.labels)
    tn = small_ds.test[0]
    noise_te = LabeledImageSet(np.random.default_rng(1).uniform(0, 1, tn.images.shape).astype(np.float32), tn.labels)
    ds = MultimodalDataset((a, noise), (tn, noise_te), "two_view", 0)
    res = pretrain(_cfg(["RR:0-1"]), tmp_path, ds)
    assert res.epoch_losses[-1]["total"] < res.epoch_losses[0]["total"]


def test_nonfinite_loss_aborts_and_restores(small_ds, tmp_path, monkeypatch):
    real = trainer.total_loss
    calls = {"n": 0}

    def flaky(*args, **kw):
        loss, parts = real(*args, **kw)
        calls["n"] += 1
        if calls["n"] > num_batches(small_ds.n_train(), 32):  # first step of epoch 1
            loss = loss * float("nan")
        return loss, parts

    monkeypatch.setattr(trainer, "total_loss", flaky)
    with pytest.raises(TrainingAborted, match="non-finite"):
        pretrain(_cfg(["RR:0-1"], epochs=3), tmp_path, small_ds)
    saved = checkpoint.load(tmp_path / "checkpoint.ndck")
    best = checkpoint.load(tmp_path / "best.ndck")
    assert all(saved[k].tobytes() == best[k].tobytes() for k in saved)
    assert len((tmp_path / "losses.csv").read_text().strip().splitlines()) == 1 + 2  # header + one epoch


def test_schedule_spans_all_steps(small_ds, tmp_path):
    res = pretrain(_cfg(["RR:0-1"], epochs=3), tmp_path, small_ds)
    total = 3 * num_batches(small_ds.n_train(), 32)
    sched = onecycle_schedule(total)
    assert len(sched) == total
    assert res.lrs[-1] == pytest.approx(sched[-1])


def test_checkpoint_roundtrip(small_ds, tmp_path):
    res = pretrain(_cfg(["RR:0-1", "AE:0", "SUP:1"], epochs=1), tmp_path, small_ds)
    back = load_model(res.checkpoint)
    assert set(back.decoders) == {0} and set(back.sup) == {1}
    for k, v in res.model.state().items():
        assert back.state()[k].tobytes() == v.tobytes()
    x = small_ds.test[0].images[:16]
    np.testing.assert_array_equal(encode_all(back, 0, x), encode_all(res.model, 0, x))


def test_supervised_edge_touches_only_its_modality(small_ds, tmp_path):
    res = pretrain(_cfg(["SUP:0"], epochs=1), tmp_path, small_ds)
    fresh = MultimodalModel([1, 1], base_channels=4, seed=0, with_sup={0})
    after, before = res.model.state(), fresh.state()
    assert any(after[k].tobytes() != before[k].tobytes() for k in after if k.startswith("enc0/"))
    assert all(after[k].tobytes() == before[k].tobytes() for k in after if k.startswith("enc1/"))


def test_autoencoder_reconstruction_improves(small_ds, tmp_path):
    res = pretrain(_cfg(["AE:0"], epochs=8), tmp_path, small_ds)
    mse = [e["AE:0"] for e in res.epoch_losses]
    assert sum(b > a for a, b in zip(mse, mse[1:])) <= 1
    assert mse[-1] < mse[0]


# --- linear evaluation -------------------------------------------------------

def test_linear_eval_leaves_encoder_frozen(small_ds, tmp_path):
    res = pretrain(_cfg(["RR:0-1"], epochs=1), tmp_path, small_ds)
    before = {k: v.copy() for k, v in res.model.state().items()}
    probe = linear_eval(res.checkpoint, 1, small_ds, epochs=3, batch=32)
    assert 0 <= probe.test_acc <= 1
    after = load_model(res.checkpoint).state()
    assert all(after[k].tobytes() == before[k].tobytes() for k in before)
    assert (tmp_path / "probe1.ndck").is_file()
    with pytest.raises(ValueError, match="modality 2"):
        linear_eval(res.checkpoint, 2, small_ds)


def test_random_encoder_band():
    # band frozen from one 5-seed run at the small preset (observed 0.43..0.50)
    ds = dataset_from_spec({"kind": "synth", "n": 2000, "n_test": 500, "seed": 0})
    accs = []
    for seed in range(5):
        model = MultimodalModel([1, 1], base_channels=16, seed=seed)
        accs.append(linear_eval(None, 0, ds, epochs=10, seed=seed, model=model).test_acc)
    assert all(0.15 <= a <= 0.6 for a in accs), accs


def test_probe_on_one_hot_features():
    y = np.random.default_rng(0).integers(0, 10, 700)
    z = np.eye(64)[y]
    res = train_linear_probe(z[:500], y[:500], z[500:], y[500:], 10)
    assert res.train_acc > 0.99 and res.test_acc > 0.99


# --- sweeps --------------------------------------------------------------------

def test_experiment_counts(tmp_path):
    cells = [Cell(n, _cfg(e, epochs=1, eval_epochs=1, name=n), [0, 1]) for n, e in
             (("RR", ["RR:0-1"]), ("CR", ["CR:0", "CR:1"]))]
    res = run_experiment(Manifest(cells, out=str(tmp_path / "runs")))
    assert not res.failures
    assert len(list((tmp_path / "runs").glob("*/seed_*/checkpoint.ndck"))) == 4
    assert len(res.accuracy) == 8
    assert len(res.similarity) == 4 * 2  # train + holdout per (cell, seed)
    with open(tmp_path / "runs/accuracy.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 8
    summary = summarize(res.accuracy)
    assert len(summary) == 4 and all(r["n_seeds"] == 2 for r in summary)


def test_summary_single_seed_sd_zero():
    rows = summarize([{"model": "RR", "modality": 0, "acc": 0.5}, {"model": "RR", "modality": 0, "acc": 0.7},
                      {"model": "CR", "modality": 1, "acc": 0.9}])
    by = {(r["model"], r["modality"]): r for r in rows}
    assert by[("CR", 1)]["acc_sd"] == 0.0
    assert by[("RR", 0)]["acc_sd"] == pytest.approx(math.sqrt(0.02))


def test_failed_cell_is_isolated(tmp_path):
    good = Cell("RR", _cfg(["RR:0-1"], epochs=1, eval_epochs=1, name="RR"), [0])
    bad = Cell("BAD", _cfg(["RR:0-1"], epochs=1, eval_epochs=1, name="BAD",
                           dataset={"kind": "two_view", "images": str(tmp_path / "missing")}), [0])
    res = run_experiment(Manifest([bad, good], out=str(tmp_path / "runs")))
    assert [(n, s) for n, s, _ in res.failures] == [("BAD", 0)]
    assert len(res.accuracy) == 2
    assert (tmp_path / "runs/failures.txt").read_text().startswith("FAILED BAD seed 0\n")
