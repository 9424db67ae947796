"""Command-line front door: synthetic data generation, training, evaluation,
prediction, explanation, ablations, prototype export and gradient checking.

Every command that writes output also writes a run manifest recording the
command line, effective configuration, seed, input digests and artifacts.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    Label,
    SynthConfig,
    ValidationError,
    generate_synthetic,
    load_dataset,
    split_dataset,
    write_clinical_csv,
    write_embeddings_binary,
    write_embeddings_csv,
)
from .evaluation import (
    AblationRow,
    evaluate,
    run_ablations,
    write_ablation_csv,
    write_metrics_csv,
)
from .explain import explain as explain_case
from .gradcheck import format_results, run_battery
from .prototypes import export_prototypes_csv
from .training import (
    CheckpointError,
    TrainConfig,
    TrainedModel,
    TrainingDivergedError,
    load_checkpoint,
    save_checkpoint,
    train,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2

_thread_limiter = None


class _Parser(argparse.ArgumentParser):
    """Argument parser that exits with the validation code on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_manifest(out_dir: Path, command: str, argv: list[str], config: dict,
                    seed: int | None, inputs: list[Path], outputs: list[Path],
                    started: float) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "seed": seed,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "wall_clock_seconds": time.time() - started,
        "version": __version__,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _ensure_out_dir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _build_config(args) -> TrainConfig:
    """Config precedence: built-in defaults < --config file < explicit flags."""
    values: dict = {}
    if getattr(args, "config", None):
        values.update(json.loads(Path(args.config).read_text()))
    overrides = {
        "seed": args.seed,
        "batch_size": getattr(args, "batch_size", None),
        "max_epochs": getattr(args, "max_epochs", None),
        "patience": getattr(args, "patience", None),
        "k_neighbors": getattr(args, "k", None),
        "tau_conf": getattr(args, "tau_conf", None),
        "lr_image": getattr(args, "lr_image", None),
        "lr_tabular": getattr(args, "lr_tabular", None),
        "lr_prototypes": getattr(args, "lr_prototypes", None),
        "slots_per_class": getattr(args, "slots_per_class", None),
    }
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    for flag in ("no_gate", "no_multitask", "no_cross_attention", "no_prototypes"):
        if getattr(args, flag, False):
            values[flag] = True
    return TrainConfig.from_dict(values)


def _load_cases(args):
    return load_dataset(args.data_clinical, args.data_embeddings)


def _load_trained(args) -> TrainedModel:
    return TrainedModel.from_checkpoint(load_checkpoint(args.checkpoint))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_synth(args, argv) -> int:
    started = time.time()
    out = _ensure_out_dir(args)
    fractions = tuple(float(v) for v in args.fractions.split(","))
    if len(fractions) != 3:
        raise ValidationError("--fractions needs three comma-separated values")
    cfg = SynthConfig(
        n_cases=args.n,
        class_fractions=fractions,
        embedding_separation=args.separation,
        tabular_signal=args.tabular_signal,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
        embedding_dim=args.dim,
    )
    cases = generate_synthetic(cfg)
    clinical_path = out / "clinical.csv"
    write_clinical_csv(cases, clinical_path)
    if args.emb_format == "csv":
        emb_path = out / "embeddings.csv"
        write_embeddings_csv(cases, emb_path)
    else:
        emb_path = out / "embeddings.pmxe"
        write_embeddings_binary(cases, emb_path)
    _write_manifest(out, "gen-synth", argv, dataclasses.asdict(cfg), args.seed,
                    [], [clinical_path, emb_path], started)
    print(f"wrote {len(cases)} cases to {clinical_path} and {emb_path}")
    return EXIT_OK


def cmd_train(args, argv) -> int:
    started = time.time()
    out = _ensure_out_dir(args)
    cfg = _build_config(args)
    cases = _load_cases(args)
    split = split_dataset(cases, cfg.seed)
    trained = train(split, cfg)
    ckpt_path = out / "checkpoint.pmxc"
    digest = save_checkpoint(trained.checkpoint, ckpt_path)
    history_path = out / "history.json"
    history_path.write_text(json.dumps(trained.history, indent=2) + "\n")
    _write_manifest(out, "train", argv, cfg.to_dict(), cfg.seed,
                    [Path(args.data_clinical), Path(args.data_embeddings)],
                    [ckpt_path, history_path], started)
    best = trained.checkpoint.best_epoch
    best_acc = trained.history[best - 1]["val_accuracy"]
    print(f"trained {len(trained.history)} epochs; best epoch {best} "
          f"(val accuracy {best_acc:.4f}); checkpoint {digest[:12]} -> {ckpt_path}")
    return EXIT_OK


def _select_partition(args, trained: TrainedModel):
    cases = _load_cases(args)
    if args.on == "all":
        return cases
    split = split_dataset(cases, trained.config.seed)
    return {"train": split.train, "val": split.val, "test": split.test}[args.on]


def cmd_eval(args, argv) -> int:
    started = time.time()
    out = _ensure_out_dir(args)
    trained = _load_trained(args)
    cases = _select_partition(args, trained)
    report = evaluate(trained, cases)
    json_path = out / "metrics.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    csv_path = out / "metrics.csv"
    write_metrics_csv(report, csv_path)
    _write_manifest(out, "eval", argv, trained.config.to_dict(), trained.config.seed,
                    [Path(args.checkpoint), Path(args.data_clinical),
                     Path(args.data_embeddings)], [json_path, csv_path], started)
    print(f"accuracy {report.accuracy:.4f} on {len(cases)} cases ({args.on}); "
          f"metrics -> {json_path}")
    return EXIT_OK


def cmd_predict(args, argv) -> int:
    started = time.time()
    out = _ensure_out_dir(args)
    trained = _load_trained(args)
    cases = _load_cases(args)
    k = args.k if args.k is not None else trained.config.k_neighbors
    tau = args.tau_conf if args.tau_conf is not None else trained.config.tau_conf
    emb_std, clin_std = trained.transform(cases)
    if trained.model.bank is None:
        preds = trained.model.predict_head(emb_std, clin_std)
        votes = None
    else:
        preds, votes, _ = trained.model.predict_knn(emb_std, clin_std, k, tau)
    pred_path = out / "predictions.csv"
    with open(pred_path, "w") as fh:
        fh.write("patient_id,prediction,confidence\n")
        for i, case in enumerate(cases):
            conf = "" if votes is None else repr(float(votes[i].max()))
            fh.write(f"{case.patient_id},{Label(int(preds[i])).display_name},{conf}\n")
    _write_manifest(out, "predict", argv, trained.config.to_dict(),
                    trained.config.seed,
                    [Path(args.checkpoint), Path(args.data_clinical),
                     Path(args.data_embeddings)], [pred_path], started)
    print(f"wrote {len(cases)} predictions -> {pred_path}")
    return EXIT_OK


def cmd_explain(args, argv) -> int:
    started = time.time()
    out = _ensure_out_dir(args)
    trained = _load_trained(args)
    cases = _load_cases(args)
    by_id = {c.patient_id: c for c in cases}
    if args.case not in by_id:
        raise ValidationError(f"patient id {args.case!r} not present in the data files")
    true_label = None
    if args.true_label is not None:
        try:
            true_label = Label[args.true_label.upper()]
        except KeyError:
            raise ValidationError(
                f"--true-label must be one of {[l.display_name for l in Label]}"
            ) from None
    report = explain_case(trained, by_id[args.case], true_label=true_label,
                          k=args.k, tau_conf=args.tau_conf)
    report_path = out / f"explanation_{args.case}.json"
    report_path.write_text(report.to_json() + "\n")
    _write_manifest(out, "explain", argv, trained.config.to_dict(),
                    trained.config.seed,
                    [Path(args.checkpoint), Path(args.data_clinical),
                     Path(args.data_embeddings)], [report_path], started)
    print(report.to_json())
    return EXIT_OK


def cmd_ablate(args, argv) -> int:
    started = time.time()
    out = _ensure_out_dir(args)
    base_cfg = _build_config(args)
    cases = _load_cases(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [base_cfg.seed]

    per_seed: list[list[AblationRow]] = []
    for seed in seeds:
        cfg = dataclasses.replace(base_cfg, seed=seed)
        split = split_dataset(cases, seed)
        per_seed.append(run_ablations(split, cfg))

    names = [row.configuration for row in per_seed[0]]
    acc = np.array([[row.accuracy for row in rows] for rows in per_seed])
    mean_acc = acc.mean(axis=0)
    full_mean = mean_acc[names.index("full")]
    rows = [AblationRow(name, float(a), float(full_mean - a))
            for name, a in zip(names, mean_acc)]
    csv_path = out / "ablations.csv"
    extra = {"accuracy_std": acc.std(axis=0)} if len(seeds) > 1 else None
    write_ablation_csv(rows, csv_path, extra_columns=extra)
    _write_manifest(out, "ablate", argv, base_cfg.to_dict(), base_cfg.seed,
                    [Path(args.data_clinical), Path(args.data_embeddings)],
                    [csv_path], started)
    for row in rows:
        print(f"{row.configuration:20s} accuracy={row.accuracy:.4f} "
              f"delta={row.delta:+.4f}")
    print(f"ablation table -> {csv_path}")
    return EXIT_OK


def cmd_export_prototypes(args, argv) -> int:
    started = time.time()
    out = _ensure_out_dir(args)
    trained = _load_trained(args)
    if trained.model.bank is None:
        raise ValidationError("checkpoint was trained without prototypes")
    csv_path = out / "prototypes.csv"
    export_prototypes_csv(trained.model.bank, csv_path)
    _write_manifest(out, "export-prototypes", argv, trained.config.to_dict(),
                    trained.config.seed, [Path(args.checkpoint)], [csv_path], started)
    print(f"wrote {trained.model.bank.total} prototypes -> {csv_path}")
    return EXIT_OK


def cmd_gradcheck(args, argv) -> int:
    results = run_battery(seeds=tuple(range(args.seeds)))
    text = format_results(results)
    print(text)
    if args.out_dir:
        started = time.time()
        out = _ensure_out_dir(args)
        report_path = out / "gradcheck.txt"
        report_path.write_text(text + "\n")
        _write_manifest(out, "gradcheck", argv, {"seeds": args.seeds}, None,
                        [], [report_path], started)
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _add_data_args(p):
    p.add_argument("--data-clinical", required=True, help="clinical CSV path")
    p.add_argument("--data-embeddings", required=True, help="embedding file path")


def _add_config_args(p):
    p.add_argument("--config", help="JSON file of training configuration fields")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--k", type=int, default=None, help="k-NN neighbor count")
    p.add_argument("--tau-conf", type=float, default=None, help="vote temperature")
    p.add_argument("--lr-image", type=float, default=None)
    p.add_argument("--lr-tabular", type=float, default=None)
    p.add_argument("--lr-prototypes", type=float, default=None)
    p.add_argument("--slots-per-class", type=int, default=None)
    p.add_argument("--no-gate", action="store_true")
    p.add_argument("--no-multitask", action="store_true")
    p.add_argument("--no-cross-attention", action="store_true")
    p.add_argument("--no-prototypes", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="protomedx",
                     description="Prototype-based explainable bone health classification")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic cohort")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fractions", default="0.45,0.38,0.17")
    p.add_argument("--separation", type=float, default=4.0)
    p.add_argument("--tabular-signal", type=float, default=0.8)
    p.add_argument("--noise-sigma", type=float, default=1.0)
    p.add_argument("--dim", type=int, default=1151)
    p.add_argument("--emb-format", choices=("pmxe", "csv"), default="pmxe")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_data_args(p)
    p.add_argument("--out-dir", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--on", choices=("test", "val", "train", "all"), default="test",
                   help="partition to evaluate (re-derived from the checkpoint seed)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict labels for every case in the files")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--tau-conf", type=float, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("explain", help="write an explanation report for one case")
    _add_data_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--case", required=True, help="patient id to explain")
    p.add_argument("--true-label", default=None,
                   help="enable audit mode with this true class name")
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--tau-conf", type=float, default=None)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("ablate", help="run the component ablation table")
    _add_data_args(p)
    p.add_argument("--out-dir", required=True)
    _add_config_args(p)
    p.add_argument("--seeds", default=None,
                   help="comma-separated seeds; accuracies are averaged")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-prototypes", help="dump the prototype bank as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_export_prototypes)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seeds", type=int, default=3, help="number of seeds per check")
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _apply_thread_cap() -> None:
    global _thread_limiter
    cap = os.environ.get("PMX_THREADS")
    if cap:
        import threadpoolctl

        _thread_limiter = threadpoolctl.threadpool_limits(limits=int(cap))


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        _apply_thread_cap()
        return args.func(args, argv)
    except (ValidationError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except TrainingDivergedError as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # pragma: no cover - defensive
        print(f"unexpected failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
