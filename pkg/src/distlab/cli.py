"""Command-line front end.

Exit codes: 0 success, 1 a verification check failed, 2 config error,
3 missing artifact, 4 partial sweep failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .config import ConfigError, dump_resolved, load_config
from .datagen import (SPLITS, FeatureSpec, FeatureVocabulary, TransformSet, load_dataset, load_external,
                      manifold_vocabulary, random_vocabulary, sample_dataset, sample_splits,
                      save_dataset, split_external)
from .evalcal import calibration_report, distribution_error_probs, fidelity
from .netlib import build_network, load_checkpoint, predict_batched, save_checkpoint
from .regularize import ScheduleSpec
from .tensor import OptimizerConfig
from .theory import (SweepFailed, SweepSetup, lemma3_sweep, theorem_sweep, verify_lemma1,
                     verify_lemma2)
from .trainlab import DistillConfig, TeacherTrainConfig, train_student, train_teacher

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_MISSING, EXIT_SWEEP = 0, 1, 2, 3, 4


class MissingArtifact(FileNotFoundError):
    pass


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_jsonable))


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


# --- config -> objects ----------------------------------------------------------------

def build_vocabulary(cfg: dict, seed: int) -> FeatureVocabulary:
    v = cfg["data"]["vocabulary"]
    if v["kind"] == "explicit":
        feats = [FeatureSpec(f.get("name", f"z{i}"), np.asarray(f["label_distribution"], dtype=float),
                             np.asarray(f["representation_mean"], dtype=float),
                             float(f.get("representation_scale", v["representation_scale"])))
                 for i, f in enumerate(v["features"])]
        weights = v.get("sampling_weights") or [1.0 / len(feats)] * len(feats)
        k = len(feats[0].label_distribution)
        return FeatureVocabulary(k, len(feats[0].representation_mean), feats, np.asarray(weights))
    common = dict(seed=seed, mean_spread=v["mean_spread"], representation_scale=v["representation_scale"])
    if v["kind"] == "manifold":
        return manifold_vocabulary(v["n_features"], v["n_classes"], v["patch_dim"],
                                   sharpness=v["sharpness"], neighbors=v["neighbors"], **common)
    return random_vocabulary(v["n_features"], v["n_classes"], v["patch_dim"],
                             concentration=v["concentration"], **common)


def build_splits(cfg: dict) -> dict:
    data, seed = cfg["data"], cfg["seed"]
    if data["source"] == "external":
        ext = data["external"]
        full = load_external(ext["path"], ext["format"], labels_path=ext.get("labels_path"),
                             n_classes=ext.get("n_classes"))
        return split_external(full)
    vocab = build_vocabulary(cfg, seed)
    tf_cfg = data["transforms"]
    tf = TransformSet.random(vocab.patch_dim, tf_cfg["count"], tf_cfg["magnitude"], seed=seed,
                             permute=tf_cfg["permute"])
    return sample_splits(vocab, data["sizes"], data["m"], tf, seed=seed)


def load_splits(data_dir) -> dict:
    root = Path(data_dir)
    if not root.is_dir():
        raise MissingArtifact(f"data directory {root} does not exist")
    out = {s: load_dataset(root / s) for s in SPLITS if (root / s / "manifest.json").exists()}
    if "train" not in out:
        raise MissingArtifact(f"no train split under {root}")
    return out


def _optimizer(d: dict) -> OptimizerConfig:
    return OptimizerConfig(learning_rate0=d["learning_rate0"], momentum=d["momentum"],
                           weight_decay=d["weight_decay"], decay_milestones=tuple(d["decay_milestones"]),
                           decay_factor=d["decay_factor"])


def build_model(arch: dict, data, seed: int):
    kind = arch["kind"]
    feature_dim = arch.get("feature_dim") or (16 if kind == "patchwise" else None)
    return build_network(kind, data.n_patches, data.patch_dim, data.n_classes,
                         hidden=arch.get("hidden", ()), head=arch.get("head"),
                         feature_dim=feature_dim, seed=seed)


def teacher_config(cfg: dict) -> TeacherTrainConfig:
    t = cfg["teacher"]
    return TeacherTrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], optimizer=_optimizer(t["optimizer"]),
                              lambda_lr=t["lambda_lr"], mode=t["mode"], checkpoint_every=t["checkpoint_every"],
                              seed=cfg["seed"], augment=t["augment"],
                              cr_schedule=ScheduleSpec(t["cr_schedule"]["kind"], t["cr_schedule"]["max_weight"],
                                                       t["epochs"]))


def distill_config(cfg: dict) -> DistillConfig:
    s = cfg["student"]
    return DistillConfig(alpha=s["alpha"], temperature=s["temperature"], epochs=s["epochs"],
                         batch_size=s["batch_size"], optimizer=_optimizer(s["optimizer"]),
                         seed=cfg["seed"], augment=s["augment"])


def _splits_for(args, cfg) -> dict:
    return load_splits(args.data) if args.data else build_splits(cfg)


def _first_split(splits: dict, *names: str):
    for name in names:
        if name in splits:
            return splits[name]
    raise MissingArtifact(f"none of the splits {names} is available")


def _eval_split(splits: dict):
    return _first_split(splits, "test", "holdout", "train")


# --- commands -------------------------------------------------------------------------

def cmd_gen_data(args, cfg) -> int:
    out = Path(args.out)
    splits = build_splits(cfg)
    for name, ds in splits.items():
        save_dataset(ds, out / name)
    dump_resolved(cfg, out)
    train = splits["train"]
    size = train.vocabulary.size if train.vocabulary is not None else "n/a"
    print(f"N={len(train)} M={train.n_patches} |Z|={size} K={train.n_classes} "
          f"splits={','.join(f'{k}:{len(v)}' for k, v in splits.items())}")
    return EXIT_OK


def cmd_train_teacher(args, cfg) -> int:
    out = Path(args.out)
    splits = _splits_for(args, cfg)
    train = splits["train"]
    net = build_model(cfg["teacher"]["architecture"], train, cfg["seed"])
    tcfg = teacher_config(cfg)
    evals = {"test": _eval_split(splits)}
    record = train_teacher(net, train, tcfg, eval_sets=evals, out_dir=out)
    save_checkpoint(net, out / "teacher", epoch=tcfg.epochs, config=cfg,
                    extra_arrays=None if record.buffer is None else record.buffer.arrays())
    record.write(out)
    dump_resolved(cfg, out)
    print(f"teacher mode={tcfg.mode} train_acc={record.final['train_acc']:.4f} "
          f"test_acc={record.final.get('test_acc', float('nan')):.4f}")
    return EXIT_OK


def _require_checkpoint(path) -> Path:
    if path is None:
        raise MissingArtifact("a checkpoint directory is required")
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise MissingArtifact(f"no checkpoint at {p}")
    return p


def cmd_distill(args, cfg) -> int:
    out = Path(args.out)
    teacher, _ = load_checkpoint(_require_checkpoint(args.teacher))
    splits = _splits_for(args, cfg)
    train = splits["train"]
    student = build_model(cfg["student"]["architecture"], train, cfg["seed"] + 1000)
    dcfg = distill_config(cfg)
    record = train_student(student, teacher, train, dcfg, eval_sets={"test": _eval_split(splits)})
    save_checkpoint(student, out / "student", epoch=dcfg.epochs, config=cfg)
    record.write(out)
    dump_resolved(cfg, out)
    print(f"student alpha={dcfg.alpha} temperature={dcfg.temperature} "
          f"test_acc={record.final.get('test_acc', float('nan')):.4f}")
    return EXIT_OK


def cmd_evaluate(args, cfg) -> int:
    out = Path(args.out)
    teacher, _ = load_checkpoint(_require_checkpoint(args.teacher))
    splits = _splits_for(args, cfg)
    evalset = _eval_split(splits)
    temp = _first_split(splits, "temperature-holdout", "holdout", "test", "train")
    bins = cfg["eval"]["bins"]
    probs, logits = predict_batched(teacher, evalset.patches, return_logits=True)
    _, t_logits = predict_batched(teacher, temp.patches, return_logits=True)
    cal = calibration_report(logits, evalset.labels, t_logits, temp.labels, bins)
    report = {"split": evalset.split, "n_examples": len(evalset), "bins": bins,
              "accuracy": float(np.mean(np.argmax(probs, 1) == evalset.labels)),
              "calibration": {k: v for k, v in cal.to_dict().items() if k != "bins"}}
    out.mkdir(parents=True, exist_ok=True)
    with (out / "reliability.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["bin", "lower", "upper", "count", "confidence", "accuracy"])
        writer.writeheader()
        writer.writerows(cal.bins)
    _write_json(out / "calibration.json", cal.to_dict())
    if evalset.true_distribution is not None:
        report["distribution_error"] = {str(n): distribution_error_probs(probs, evalset.true_distribution, n)
                                        for n in cfg["eval"]["norms"]}
    if args.student:
        student, _ = load_checkpoint(_require_checkpoint(args.student))
        s_probs = predict_batched(student, evalset.patches)
        fid = fidelity(s_probs, probs)
        _write_json(out / "fidelity.json", fid.to_dict())
        report["fidelity"] = fid.to_dict()
        report["student_accuracy"] = float(np.mean(np.argmax(s_probs, 1) == evalset.labels))
    _write_json(out / "evaluation.json", report)
    dump_resolved(cfg, out)
    print(f"accuracy={report['accuracy']:.4f} ece={cal.ece_raw:.4f} nll={cal.nll_raw:.4f} "
          f"T*={cal.fitted_temperature:.3f}")
    return EXIT_OK


def _sweep_setup(overrides: dict, where: str) -> SweepSetup:
    names = {f.name for f in fields(SweepSetup)}
    for key in overrides:
        if key not in names:
            raise ConfigError(f"{where}.{key}", "unknown sweep setup field")
    vals = dict(overrides)
    if "hidden" in vals:
        vals["hidden"] = tuple(vals["hidden"])
    if "decay_at" in vals:
        vals["decay_at"] = tuple(vals["decay_at"])
    return SweepSetup(**vals)


def run_theory_checks(cfg: dict, out: Path | None = None) -> list[dict]:
    """Lemma 1-3 oracles plus one theorem-direction sweep; one dict per check."""
    th = cfg["theory"]
    seed = cfg["seed"]
    results = []

    l1 = th["lemma1"]
    vocab = random_vocabulary(l1["n_features"], l1["n_classes"], l1["patch_dim"], seed=seed)
    res1 = verify_lemma1(sample_dataset(vocab, l1["n"], l1["m"], seed=seed), steps=l1["steps"], lr=l1["lr"])
    results.append({"check": "lemma1_closed_form", "value": res1.gap, "threshold": l1["tolerance"],
                    "passed": res1.gap < l1["tolerance"]})

    l2 = th["lemma2"]
    vocab = random_vocabulary(l2["n_features"], l2["n_classes"], 4, seed=seed)
    res2 = verify_lemma2(vocab, l2["n_grid"], l2["m"], l2["seeds"])
    results.append({"check": "lemma2_slope", "value": res2.slope, "threshold": l2["slope_tolerance"],
                    "passed": abs(res2.slope - l2["slope"]) <= l2["slope_tolerance"]})

    l3 = th["lemma3"]
    gaps = lemma3_sweep(lambda z, s: manifold_vocabulary(z, l3["n_classes"], 4, seed=s),
                        l3["z_grid"], l3["n"], l3["m"], l3["seeds"])
    frac3 = float((np.diff(gaps, axis=1) <= 0).all(axis=1).mean())
    results.append({"check": "lemma3_mixing_gap_decreases", "value": frac3, "threshold": 0.5,
                    "passed": frac3 > 0.5})

    tm = th["theorem"]
    curve = theorem_sweep(tm["parameter"], tm["grid"], tm["seeds"], _sweep_setup(tm["setup"], "theory.theorem.setup"),
                          out_dir=None if out is None else out / "theorem")
    frac = curve.nonincreasing_fraction()
    results.append({"check": f"theorem_{tm['parameter']}_direction", "value": frac, "threshold": 0.5,
                    "passed": frac > 0.5})
    return results


def cmd_verify_theory(args, cfg) -> int:
    out = Path(args.out)
    results = run_theory_checks(cfg, out)
    for r in results:
        print(f"{'PASS' if r['passed'] else 'FAIL'} {r['check']} value={r['value']:.6g} threshold={r['threshold']}")
    _write_json(out / "theory.json", {"checks": results, "all_passed": all(r["passed"] for r in results)})
    dump_resolved(cfg, out)
    return EXIT_OK if all(r["passed"] for r in results) else EXIT_CHECK_FAILED


def _write_results_csv(path: Path, rows: list[dict], parameter: str) -> None:
    cols = ["parameter", "value", *sorted({k for r in rows for k in r} - {"value"})]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for r in rows:
            writer.writerow({"parameter": parameter, **r})


def cmd_sweep(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sw = cfg["sweep"]
    setup = _sweep_setup(sw["setup"], "sweep.setup")
    dump_resolved(cfg, out)
    try:
        curve = theorem_sweep(sw["parameter"], sw["grid"], sw["seeds"], setup, out_dir=out, jobs=args.jobs)
    except SweepFailed as exc:
        _write_results_csv(out / "results.csv", exc.partial.rows, sw["parameter"])
        print(f"sweep failed: {exc}", file=sys.stderr)
        return EXIT_SWEEP
    _write_results_csv(out / "results.csv", curve.rows, sw["parameter"])
    print(f"{sw['parameter']}: mean distribution error {np.round(curve.mean_error, 5).tolist()}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train-teacher": cmd_train_teacher, "distill": cmd_distill,
            "evaluate": cmd_evaluate, "verify-theory": cmd_verify_theory, "sweep": cmd_sweep}


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config (defaults if omitted)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=int, help="override the top-level seed")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")
    common.add_argument("--data", help="dataset directory written by gen-data")
    parser = argparse.ArgumentParser(prog="distlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="sample and serialize datasets")
    p = sub.add_parser("train-teacher", parents=[common], help="train a teacher with checkpoints")
    p.add_argument("--mode", choices=["standard", "soteacher", "no-lr", "no-cr"])
    p = sub.add_parser("distill", parents=[common], help="distill a student from a teacher checkpoint")
    p.add_argument("--teacher", help="teacher checkpoint directory")
    p.add_argument("--alpha", type=float)
    p.add_argument("--temperature", type=float)
    p = sub.add_parser("evaluate", parents=[common], help="calibration, fidelity and distance to p*")
    p.add_argument("--teacher", help="teacher checkpoint directory")
    p.add_argument("--student", help="optional student checkpoint directory")
    sub.add_parser("verify-theory", parents=[common], help="run the lemma oracles and a theorem sweep")
    sub.add_parser("sweep", parents=[common], help="train teachers over a parameter grid")
    return parser


def _overrides(args) -> dict:
    out: dict = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if getattr(args, "mode", None):
        out.setdefault("teacher", {})["mode"] = args.mode
    if getattr(args, "alpha", None) is not None:
        out.setdefault("student", {})["alpha"] = args.alpha
    if getattr(args, "temperature", None) is not None:
        out.setdefault("student", {})["temperature"] = args.temperature
    return out


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, _overrides(args))
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifact, FileNotFoundError) as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
