"""Command-line entry point: ``domino <subcommand>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, Manifest, TrainConfig, parse_config
from .datasets import FormatError, MultimodalDataset, dataset_from_spec

log = logging.getLogger("domino")


def _dataset_for_ckpt(ckpt: Path, override: str | None) -> MultimodalDataset:
    if override:
        spec = json.loads(Path(override).read_text(encoding="utf-8")) if Path(override).is_file() \
            else json.loads(override)
        return dataset_from_spec(spec)
    cfg_path = ckpt.parent / "config.json"
    if not cfg_path.is_file():
        raise ConfigError(f"no config.json next to {ckpt}; pass --dataset")
    return dataset_from_spec(json.loads(cfg_path.read_text(encoding="utf-8"))["dataset"])


def cmd_gen_data(args) -> int:
    spec: dict = {"kind": args.kind, "seed": args.seed, "n": args.n, "n_test": args.n_test}
    for key in ("images", "labels", "test_images", "test_labels", "other"):
        val = getattr(args, key)
        if val is not None:
            spec[key] = val
    if args.kind == "two_view" and "images" not in spec:
        spec["kind"] = "two_view_synth"
        log.warning("no IDX files given; building the two-view pipeline on synthetic glyphs")
    ds = dataset_from_spec(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dataset.ndck"
    ds.save(path)
    print(path)
    return 0


def cmd_pretrain(args) -> int:
    from .trainer import pretrain

    cfg = parse_config(args.config)
    if isinstance(cfg, Manifest):
        raise ConfigError(f"{args.config} is a manifest; use `domino run`")
    out = Path(args.out or Path(args.config).with_suffix(""))
    res = pretrain(cfg, out)
    print(res.checkpoint)
    return 0


def cmd_eval(args) -> int:
    from .trainer import linear_eval

    ckpt = Path(args.ckpt)
    ds = _dataset_for_ckpt(ckpt, args.dataset)
    cfg_path = ckpt.parent / "config.json"
    defaults = TrainConfig(**json.loads(cfg_path.read_text(encoding="utf-8"))) if cfg_path.is_file() else TrainConfig()
    res = linear_eval(ckpt, args.modality, ds, epochs=args.epochs or defaults.eval_epochs,
                      batch=defaults.batch, lr=defaults.lr, max_lr=defaults.max_lr, seed=defaults.seed)
    print(json.dumps({"modality": args.modality, "train_acc": res.train_acc, "test_acc": res.test_acc}))
    return 0


def cmd_similarity(args) -> int:
    from .trainer import _write_csv, similarity
    from .simsuite import SimilarityReport

    ckpt = Path(args.ckpt)
    ds = _dataset_for_ckpt(ckpt, args.dataset)
    report = similarity(ckpt, ds, name=args.name, variance_keep=args.keep)
    payload = report.to_json()
    (ckpt.parent / "similarity.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                                                 encoding="utf-8")
    _write_csv(ckpt.parent / "similarity.csv", ["model", "split", *SimilarityReport.MEASURES], report.rows())
    json.dump(payload, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")
    return 0


def cmd_report(args) -> int:
    from .report import emit_report

    print(emit_report(args.dir))
    return 0


def cmd_grad_check(args) -> int:
    from .ndgrad import OP_KINDS
    from .ndgrad import set_default_dtype
    from .selfcheck import EDGE_CASES, edge_grad_error, op_grad_error

    set_default_dtype(np.float64)
    start = time.perf_counter()
    failed = 0
    rows = [("op", k, op_grad_error) for k in OP_KINDS] + [("edge", e, edge_grad_error) for e in EDGE_CASES]
    for group, name, fn in rows:
        worst = max(fn(name, s) for s in range(args.seeds))
        ok = worst < args.tol
        failed += not ok
        print(f"{group:4s} {name:12s} max_rel_err={worst:.2e} {'ok' if ok else 'FAIL'}")
    print(f"{len(rows) - failed}/{len(rows)} passed in {time.perf_counter() - start:.1f}s")
    return 1 if failed else 0


def cmd_run(args) -> int:
    from .report import emit_report
    from .trainer import run_experiment

    manifest = parse_config(args.manifest)
    if isinstance(manifest, TrainConfig):
        raise ConfigError(f"{args.manifest} is a single config; use `domino pretrain`")
    if args.out:
        manifest.out = args.out
    result = run_experiment(manifest, jobs=args.jobs)
    emit_report(result.out)
    print(result.out)
    if result.failures:
        for name, seed, err in result.failures:
            last = err.strip().splitlines()[-1] if err.strip() else "unknown error"
            print(f"FAILED {name} seed {seed}: {last}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="domino", description="Multimodal contrastive pretraining toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="build a paired dataset container")
    g.add_argument("--kind", choices=["two_view", "two_view_synth", "two_domain", "synth"], required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--n-test", type=int, default=500)
    g.add_argument("--images")
    g.add_argument("--labels")
    g.add_argument("--test-images")
    g.add_argument("--test-labels")
    g.add_argument("--other", help="NDCK image set for the second domain")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("pretrain", help="pretrain encoders from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.set_defaults(func=cmd_pretrain)

    e = sub.add_parser("eval", help="linear evaluation of one modality")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--modality", type=int, required=True)
    e.add_argument("--epochs", type=int)
    e.add_argument("--dataset", help="dataset spec as JSON text or a JSON file")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("similarity", help="CCA/SVCCA/PWCCA/CKA between modalities")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--dataset")
    s.add_argument("--name", default="model")
    s.add_argument("--keep", type=float, default=0.99)
    s.set_defaults(func=cmd_similarity)

    r = sub.add_parser("report", help="render tables and charts for an experiment directory")
    r.add_argument("--dir", required=True)
    r.set_defaults(func=cmd_report)

    c = sub.add_parser("grad-check", help="finite-difference check of every op and objective edge")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_grad_check)

    m = sub.add_parser("run", help="run every cell and seed of a manifest, then report")
    m.add_argument("manifest")
    m.add_argument("--jobs", type=int)
    m.add_argument("--out")
    m.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError, ValueError) as exc:
        print(f"domino: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
