"""Command-line interface: gen, build-tree, train, tune, eval, sweep, report.

All stages are deterministic given the config's seed; later stages recompute
earlier ones rather than loading cached state, so interrupting a stage never
poisons a subsequent run.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import fileio
from .core import DataFormatError
from .experiment import Experiment, ExperimentConfig, ExperimentError, run_experiment
from .hierarchy import build_hierarchy
from .synth import SynthConfig, generate


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="hierzsl",
        description="Blind zero-shot classification: hierarchical rules over "
        "conventional or semantic-attribute posteriors.",
    )
    parser.add_argument("--config", default=None, help="flat key=value config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="output directory (or file for build-tree)")
    parser.add_argument("--jobs", type=int, default=None, help="parallel workers for training")
    sub = parser.add_subparsers(dest="command", required=True)

    gen_p = sub.add_parser("gen", help="generate a synthetic dataset with known ground truth")
    gen_p.add_argument("--classes", type=int, default=None)
    gen_p.add_argument("--novel", type=int, default=None)
    gen_p.add_argument("--features", type=int, default=None)
    gen_p.add_argument("--attributes", type=int, default=None)
    gen_p.add_argument("--sigma", type=float, default=None)
    gen_p.add_argument("--flip-rate", type=float, default=None)
    gen_p.add_argument("--items", type=int, default=None)

    tree_p = sub.add_parser("build-tree", help="cluster attribute vectors into a class tree")
    tree_p.add_argument("--attributes", required=True)
    tree_p.add_argument("--catalog", required=True)
    tree_p.add_argument("--known-only", action="store_true", help="exclude novel classes")

    sub.add_parser("train", help="train leaf and attribute classifiers, save model arrays")
    sub.add_parser("tune", help="train and tune decision-rule parameters")
    sub.add_parser("eval", help="train, tune, and evaluate the blind test split")
    sub.add_parser("sweep", help="eval plus full parameter-sweep curves")

    report_p = sub.add_parser("report", help="print result tables from an output directory")
    report_p.add_argument("--results", default=None, help="directory holding summary.csv")
    return parser


# -- gen -------------------------------------------------------------------------

_GEN_KEYS = {
    "classes": ("n_classes", int),
    "novel": ("n_novel", int),
    "features": ("n_features", int),
    "attributes": ("n_attributes", int),
    "sigma": ("noise_sigma", float),
    "flip_rate": ("flip_rate", float),
    "items_per_class": ("items_per_class", int),
    "seed": ("seed", int),
}


def _synth_config(args) -> SynthConfig:
    cfg = SynthConfig()
    if args.config:
        for key, value in fileio.read_kv(args.config).items():
            if key == "split_fractions":
                parts = tuple(float(x) for x in value.split(","))
                cfg = replace(cfg, split_fractions=parts)
            elif key in _GEN_KEYS:
                name, cast = _GEN_KEYS[key]
                cfg = replace(cfg, **{name: cast(value)})
            else:
                raise DataFormatError(f"unknown generator config key {key!r}")
    for flag, name in (
        ("classes", "n_classes"), ("novel", "n_novel"), ("features", "n_features"),
        ("attributes", "n_attributes"), ("sigma", "noise_sigma"),
        ("flip_rate", "flip_rate"), ("items", "items_per_class"),
    ):
        value = getattr(args, flag)
        if value is not None:
            cfg = replace(cfg, **{name: value})
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def write_dataset(bundle, out_dir) -> Path:
    """Write every file the experiment pipeline ingests, plus a ready config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_catalog(out / "catalog.csv", bundle.catalog)
    fileio.write_attribute_matrix(out / "attributes.csv", bundle.attributes, bundle.catalog)
    fileio.export_hierarchy(bundle.generating_tree, out / "tree.json", bundle.catalog)
    fileio.write_features(out / "train.csv", bundle.split.train, bundle.catalog)
    fileio.write_features(out / "validation.csv", bundle.split.validation, bundle.catalog)
    fileio.write_features(out / "test.csv", bundle.split.test, bundle.catalog)

    c = bundle.config
    fileio.write_kv(out / "dataset_manifest.txt", {
        "classes": c.n_classes, "novel": c.n_novel, "features": c.n_features,
        "attributes": c.n_attributes, "sigma": c.noise_sigma, "flip_rate": c.flip_rate,
        "items_per_class": c.items_per_class,
        "split_fractions": ",".join(repr(float(f)) for f in c.split_fractions),
        "seed": c.seed,
    })
    exp = ExperimentConfig(
        features_train=str(out / "train.csv"),
        features_validation=str(out / "validation.csv"),
        features_test=str(out / "test.csv"),
        attributes=str(out / "attributes.csv"),
        catalog=str(out / "catalog.csv"),
        out=str(out / "results"),
        seed=c.seed,
    )
    fileio.write_kv(out / "experiment.txt", exp.to_kv())
    return out


def cmd_gen(args) -> int:
    cfg = _synth_config(args)
    bundle = generate(cfg)
    out = write_dataset(bundle, args.out or "dataset")
    print(f"dataset written to {out}")
    return 0


# -- build-tree -------------------------------------------------------------------


def cmd_build_tree(args) -> int:
    catalog = fileio.read_catalog(args.catalog)
    attributes, row_names = fileio.read_attribute_matrix(args.attributes)
    if tuple(row_names) != catalog.names:
        raise DataFormatError("attribute matrix rows do not match catalog order")
    indices = catalog.known_indices if args.known_only else np.arange(catalog.n_classes)
    tree, _ = build_hierarchy(attributes, indices, catalog)
    out = Path(args.out or "tree.json")
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "tree.json"
    fileio.export_hierarchy(tree, out, catalog)
    print(f"hierarchy with {tree.n_leaves} leaves written to {out}")
    return 0


# -- experiment stages --------------------------------------------------------------


def _experiment_config(args) -> ExperimentConfig:
    if not args.config:
        raise DataFormatError("this command needs --config")
    cfg = ExperimentConfig.from_kv(fileio.read_kv(args.config))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    if args.jobs is not None:
        cfg = replace(cfg, jobs=args.jobs)
    return cfg


def _save_models(exp: Experiment, out: Path):
    arrays = {
        "leaf_classes": exp.leaf_model.classes_,
        "leaf_weights": exp.leaf_model.weights_,
        "leaf_biases": exp.leaf_model.biases_,
        "leaf_calib_a": np.array([c.a for c in exp.leaf_model.calibrations_]),
        "leaf_calib_b": np.array([c.b for c in exp.leaf_model.calibrations_]),
    }
    if exp.direct_bank is not None:
        bank = exp.direct_bank
        n_a, d = bank.n_attributes_, bank.n_features_in_
        kinds = np.zeros((n_a, 3), dtype=int)
        consts = np.zeros((n_a, 3))
        weights = np.zeros((n_a, 3, d))
        biases = np.zeros((n_a, 3))
        cal_a = np.zeros((n_a, 3))
        cal_b = np.zeros((n_a, 3))
        for j, slots in enumerate(bank.bank_):
            for k, v in enumerate((-1, 0, 1)):
                slot = slots[v]
                if slot[0] == "const":
                    consts[j, k] = slot[1]
                else:
                    kinds[j, k] = 1
                    _, model, calib = slot
                    weights[j, k] = model.weights
                    biases[j, k] = model.bias
                    cal_a[j, k], cal_b[j, k] = calib.a, calib.b
        arrays.update(
            attr_kinds=kinds, attr_consts=consts, attr_weights=weights,
            attr_biases=biases, attr_calib_a=cal_a, attr_calib_b=cal_b,
        )
    np.savez(out / "models.npz", **arrays)
    report = exp.direct_bank.report_ if exp.direct_bank is not None else []
    (out / "training_report.txt").write_text("\n".join(report) + ("\n" if report else ""))


def cmd_train(args) -> int:
    cfg = _experiment_config(args)
    exp = Experiment(cfg).load().train()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _save_models(exp, out)
    print(f"models saved under {out}")
    return 0


def cmd_tune(args) -> int:
    cfg = _experiment_config(args)
    exp = Experiment(cfg).load().train().build_sources().tune()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    from .experiment import TUNED_HEADER

    rows = [(m, s, r.value, r.reached) for (m, s), r in sorted(exp.tuned.items())]
    fileio.write_table(out / "tuned.csv", TUNED_HEADER, rows)
    fileio.write_kv(out / "manifest.txt", exp.manifest())
    for method, source, value, reached in rows:
        flag = "" if reached else "  [accuracy-unreachable]"
        print(f"{method:8s} {source:14s} -> {value!r}{flag}")
    return 0


def cmd_eval(args) -> int:
    exp = run_experiment(_experiment_config(args), with_curves=False)
    print(f"evaluation written to {exp.config.out}")
    return 0


def cmd_sweep(args) -> int:
    exp = run_experiment(_experiment_config(args), with_curves=True)
    print(f"evaluation and sweep curves written to {exp.config.out}")
    return 0


# -- report ----------------------------------------------------------------------------


def cmd_report(args) -> int:
    results = Path(args.results or args.out or "results")
    summary_path = results / "summary.csv"
    if not summary_path.exists():
        raise DataFormatError(f"no summary.csv under {results}")
    header, rows = fileio.read_table(summary_path)
    print(f"== summary ({summary_path})")

    def display(value):
        try:
            return str(int(value))
        except ValueError:
            pass
        try:
            return f"{float(value):.4f}"
        except ValueError:
            return value

    shown_rows = [[display(v) for v in row] for row in rows]
    widths = [
        max(len(h), *(len(r[i]) for r in shown_rows)) if shown_rows else len(h)
        for i, h in enumerate(header)
    ]

    def fmt_row(values):
        return "  ".join(str(v).ljust(w) for v, w in zip(values, widths))

    print(fmt_row(header))
    for row in shown_rows:
        print(fmt_row(row))
    curves_path = results / "curves.csv"
    if curves_path.exists():
        _, curve_rows = fileio.read_table(curves_path)
        methods = sorted({(r[0], r[1]) for r in curve_rows})
        print(f"\n== sweep curves ({curves_path})")
        for method, source in methods:
            pts = [r for r in curve_rows if r[0] == method and r[1] == source]
            subsets = sorted({r[3] for r in pts})
            for subset in subsets:
                sel = [r for r in pts if r[3] == subset]
                accs = [float(r[4]) for r in sel]
                rewards = [float(r[5]) for r in sel]
                print(
                    f"{method:14s} {source:14s} {subset:9s} "
                    f"accuracy {min(accs):.3f}..{max(accs):.3f}  "
                    f"strict reward {min(rewards):.3f}..{max(rewards):.3f}  ({len(sel)} points)"
                )
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "build-tree": cmd_build_tree,
    "train": cmd_train,
    "tune": cmd_tune,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ExperimentError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 2
    except (DataFormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
