"""``ghostspec`` command-line interface.

Subcommands: extract, compare, matrix, classify, transform, family, eval.

Defaults for any flag can be supplied by a JSON config file (``--config`` or
the ``GHOSTSPEC_CONFIG`` environment variable) whose keys are flag names with
dashes replaced by underscores, e.g. ``{"rho": 0.0, "metric": "mse"}``.
Explicit flags win over the file.

Exit codes: 0 success, 2 input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import ALIGNMENT_MODES
from .errors import GhostSpecError, InputError, NumericalError
from .evalkit import (
    LabeledPair,
    evaluate,
    pairwise_matrix,
    read_labels,
    write_labels,
    write_matrix_csv,
    write_report,
)
from .fingerprint import VARIANTS, ModelFingerprint, extract_fingerprint, read_fingerprint, write_fingerprint
from .similarity import (
    COMPONENT_SELECTIONS,
    DEFAULT_STEEPNESS,
    DEFAULT_TAU,
    THRESHOLD_CORR,
    THRESHOLD_MSE,
    SimilarityParams,
    classify,
    compare,
)
from .transforms import (
    ATTACK_KINDS,
    PERTURBATIONS,
    AttackSpec,
    SyntheticFamilySpec,
    attack_checkpoint,
    depth_varying_corpus,
    generate_family,
)
from .weights_io import CONFIG_NAME, DTYPES, discover_layout, open_checkpoint, write_checkpoint

log = logging.getLogger("ghostspec")

CONFIG_ENV = "GHOSTSPEC_CONFIG"
JSON_SCHEMA_VERSION = 1
EXIT_OK, EXIT_INPUT, EXIT_NUMERICAL = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors become :class:`InputError`."""

    def error(self, message: str):
        raise InputError(f"{self.prog}: {message}")


# --- argument helpers ----------------------------------------------------------

def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _rho_list(text: str) -> list[float]:
    try:
        values = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty rho list")
    return values


def _attack_list(text: str) -> list[str]:
    kinds = [x.strip() for x in text.split(",") if x.strip()]
    unknown = [k for k in kinds if k not in ATTACK_KINDS]
    if unknown or not kinds:
        raise argparse.ArgumentTypeError(f"unknown attack {unknown or text!r}; choose from {', '.join(ATTACK_KINDS)}")
    return kinds


def _add_similarity_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tau", type=float, default=DEFAULT_TAU, help="sigmoid midpoint")
    p.add_argument("--k", type=float, default=DEFAULT_STEEPNESS, dest="steepness_k", help="sigmoid steepness")
    p.add_argument("--rho", type=float, default=0.002, help="POSA gap penalty per skipped layer")
    p.add_argument("--components", choices=sorted(COMPONENT_SELECTIONS), default="both")
    p.add_argument("--alignment", choices=ALIGNMENT_MODES, default="posa")
    p.add_argument("--threshold-mse", type=float, default=THRESHOLD_MSE)
    p.add_argument("--threshold-corr", type=float, default=THRESHOLD_CORR)


def _params(args: argparse.Namespace) -> SimilarityParams:
    return SimilarityParams(
        tau=args.tau,
        steepness_k=args.steepness_k,
        rho=args.rho,
        components=args.components,
        alignment=args.alignment,
        threshold_mse=args.threshold_mse,
        threshold_corr=args.threshold_corr,
    )


def _metrics(choice: str) -> tuple[str, ...]:
    return ("mse", "corr") if choice == "both" else (choice,)


def _load_fingerprint_dir(directory: str) -> list[ModelFingerprint]:
    path = Path(directory)
    if not path.is_dir():
        raise InputError(f"{path}: not a directory")
    files = sorted(path.glob("*.json"))
    if not files:
        raise InputError(f"{path}: no fingerprint files (*.json)")
    fps = [read_fingerprint(f) for f in files]
    seen: dict[str, Path] = {}
    for fp, f in zip(fps, files):
        if fp.model_id in seen:
            raise InputError(f"duplicate model_id {fp.model_id!r} in {seen[fp.model_id].name} and {f.name}")
        seen[fp.model_id] = f
    return sorted(fps, key=lambda fp: fp.model_id)


# --- commands --------------------------------------------------------------------

def cmd_extract(args: argparse.Namespace) -> int:
    handle = open_checkpoint(args.checkpoint)
    layout = discover_layout(
        handle,
        name_template=args.name_template,
        head_dim=args.head_dim,
        num_q_heads=args.num_heads,
        num_kv_heads=args.num_kv_heads,
    )
    fp = extract_fingerprint(handle, layout, variant=args.variant, model_id=args.model_id, workers=args.workers)
    out = Path(args.out) if args.out else Path(f"{fp.model_id}.json")
    write_fingerprint(fp, out)
    print(f"wrote {out} ({fp.num_layers} layers, d_model {fp.hidden_dim}, variant {fp.variant})")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    fa, fb = read_fingerprint(args.fp_a), read_fingerprint(args.fp_b)
    params = _params(args)
    report = compare(fa, fb, params, metrics=_metrics(args.metric))
    doc: dict = {
        "schema_version": JSON_SCHEMA_VERSION,
        "model_a": report.model_a,
        "model_b": report.model_b,
        "params": params.as_dict(),
    }
    if report.mse_score is not None:
        doc["mse"] = {
            "score": report.mse_score,
            "d_path": report.d_path,
            "verdict": "related" if report.verdict_mse else "unrelated",
            "alignment": [list(p) for p in report.alignment.pairs],
        }
    if report.corr_score is not None:
        doc["corr"] = {
            "score": report.corr_score,
            "verdict": "related" if report.verdict_corr else "unrelated",
        }
    if args.json:
        print(json.dumps(doc, indent=2, sort_keys=True))
        return EXIT_OK
    print(f"{report.model_a} vs {report.model_b}")
    if "mse" in doc:
        m = doc["mse"]
        print(f"  ghostspec-mse  {m['score']:.6f}  (d_path {m['d_path']:.6g})  {m['verdict']}")
    if "corr" in doc:
        c = doc["corr"]
        print(f"  ghostspec-corr {c['score']:.6f}  {c['verdict']}")
    return EXIT_OK


def cmd_matrix(args: argparse.Namespace) -> int:
    fps = _load_fingerprint_dir(args.fp_dir)
    result = pairwise_matrix(fps, metric=args.metric, params=_params(args), workers=args.workers)
    scores = Path(args.out_scores)
    write_matrix_csv(scores, result.model_ids, result.scores)
    print(f"wrote {scores} ({len(fps)}x{len(fps)} {args.metric} scores)")
    if args.out_distances:
        write_matrix_csv(args.out_distances, result.model_ids, result.distances)
        print(f"wrote {args.out_distances}")
    return EXIT_OK


def cmd_classify(args: argparse.Namespace) -> int:
    threshold = args.threshold
    if threshold is None:
        threshold = THRESHOLD_MSE if args.metric == "mse" else THRESHOLD_CORR
    for s in args.scores:
        print(f"{s:.6f} {'related' if classify(s, threshold) else 'unrelated'}")
    return EXIT_OK


def cmd_transform(args: argparse.Namespace) -> int:
    handle = open_checkpoint(args.checkpoint)
    layout = discover_layout(handle, head_dim=args.head_dim)
    low, high = args.scale_range
    specs = [
        AttackSpec(kind, seed=args.seed + n, scale_range=(low, high), head_dim=layout.head_dim)
        for n, kind in enumerate(args.attack)
    ]
    tensors = attack_checkpoint(handle, layout, specs)
    dtype = args.dtype or handle.records[layout.tensor_name(0, "q")].dtype
    out = Path(args.out)
    if out.suffix != ".safetensors":
        out = out / "model.safetensors"
    write_checkpoint(out, tensors, dtype=dtype, config=handle.config)
    print(f"wrote {out} ({', '.join(args.attack)}, seed {args.seed}, {dtype})")
    return EXIT_OK


def cmd_family(args: argparse.Namespace) -> int:
    out = Path(args.out)
    if args.depth_corpus:
        models, pairs = depth_varying_corpus(seed=args.seed)
        labels = [LabeledPair(a, b, related) for a, b, related in pairs]
    else:
        spec = SyntheticFamilySpec(
            d_model=args.num_heads * args.head_dim,
            num_layers=args.num_layers,
            num_heads=args.num_heads,
            head_dim=args.head_dim,
            num_kv_heads=args.num_kv_heads,
            perturbation=args.perturbation,
            magnitude=args.magnitude,
            num_changed=args.num_changed,
            seed=args.seed,
        )
        models = generate_family(spec)
        labels = [LabeledPair("base", "derivative", True)]
    for name, model in models.items():
        model.write(out / name, dtype=args.dtype)
    write_labels(out / "labels.csv", labels)
    print(f"wrote {len(models)} checkpoints and labels.csv to {out}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    pairs = read_labels(args.labels)
    fps = {fp.model_id: fp for fp in _load_fingerprint_dir(args.fp_dir)}
    summary = evaluate(fps, pairs, _params(args), metrics=_metrics(args.metric), rho_values=args.sweep_rho)
    for metric, m in summary["metrics"].items():
        print(
            f"{metric:4s}  best F1 {m['best_f1']:.4f} at t={m['best_threshold']:.6f}  "
            f"F1@{m['threshold']:.2f} {m['f1_at_threshold']:.4f}  gap {m['discriminative_gap']:.6f}"
        )
    for row in summary.get("rho_sensitivity", []):
        print(f"rho {row['rho']:<8g} delta_mse {row['delta_mse']:.6f}  delta_corr {row['delta_corr']:.6f}")
    if args.report:
        files = write_report(args.report, summary)
        print(f"wrote {len(files)} report files to {args.report}")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ghostspec", description="Spectral fingerprints for model lineage checks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser.add_argument("--config", help=f"JSON file of flag defaults (default: ${CONFIG_ENV})")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("extract", help="fingerprint a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--variant", choices=VARIANTS, default="attention_invariant")
    p.add_argument("--out", help="fingerprint path (default: <model_id>.json)")
    p.add_argument("--model-id")
    p.add_argument("--head-dim", type=_positive_int)
    p.add_argument("--num-heads", type=_positive_int)
    p.add_argument("--num-kv-heads", type=_positive_int)
    p.add_argument("--name-template", help="tensor name with {layer} and {proj} placeholders")
    p.add_argument("--workers", type=_positive_int, default=1)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("compare", help="score two fingerprints")
    p.add_argument("fp_a")
    p.add_argument("fp_b")
    p.add_argument("--metric", choices=("both", "mse", "corr"), default="both")
    p.add_argument("--json", action="store_true", help="machine-readable report")
    _add_similarity_flags(p)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("matrix", help="pairwise score matrix over a fingerprint directory")
    p.add_argument("fp_dir")
    p.add_argument("--metric", choices=("mse", "corr"), default="mse")
    p.add_argument("--out-scores", default="scores.csv")
    p.add_argument("--out-distances")
    p.add_argument("--workers", type=_positive_int, default=1)
    _add_similarity_flags(p)
    p.set_defaults(func=cmd_matrix)

    p = sub.add_parser("classify", help="apply the decision threshold to scores")
    p.add_argument("scores", type=float, nargs="+")
    p.add_argument("--metric", choices=("mse", "corr"), default="mse")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("transform", help="apply functionality-preserving attacks")
    p.add_argument("checkpoint")
    p.add_argument("--attack", type=_attack_list, default=["qk_perhead", "vo_blockdiag"],
                   help=f"comma list of {', '.join(ATTACK_KINDS)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory or .safetensors path")
    p.add_argument("--scale-range", type=float, nargs=2, default=(0.5, 2.0), metavar=("LOW", "HIGH"))
    p.add_argument("--head-dim", type=_positive_int)
    p.add_argument("--dtype", choices=sorted(DTYPES), help="output dtype (default: same as input)")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("family", help="write a synthetic model family with labels.csv")
    p.add_argument("--out", required=True)
    p.add_argument("--perturbation", choices=PERTURBATIONS, default="low_rank_update")
    p.add_argument("--depth-corpus", action="store_true",
                   help="write the base + pruned/expanded relatives + independents corpus instead")
    p.add_argument("--num-layers", type=_positive_int, default=8)
    p.add_argument("--num-heads", type=_positive_int, default=4)
    p.add_argument("--num-kv-heads", type=_positive_int)
    p.add_argument("--head-dim", type=_positive_int, default=16)
    p.add_argument("--magnitude", type=float, default=0.01)
    p.add_argument("--num-changed", type=_positive_int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=sorted(DTYPES), default="F64")
    p.set_defaults(func=cmd_family)

    p = sub.add_parser("eval", help="F1 threshold sweep and gaps over a labelled corpus")
    p.add_argument("labels")
    p.add_argument("fp_dir")
    p.add_argument("--metric", choices=("both", "mse", "corr"), default="both")
    p.add_argument("--sweep-rho", type=_rho_list, help="comma list of gap penalties")
    p.add_argument("--report", help="directory for CSV tables and summary.json")
    _add_similarity_flags(p)
    p.set_defaults(func=cmd_eval)
    return parser


def _config_defaults(path: str | None) -> dict:
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"{path}: no such config file") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON config ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(data, dict):
        raise InputError(f"{path}: config must be a JSON object")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def _apply_config(parser: argparse.ArgumentParser, argv: Sequence[str], defaults: dict) -> None:
    """Install config values as defaults of the chosen subcommand."""
    if not defaults:
        return
    sub_action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    command = next((a for a in argv if a in sub_action.choices), None)
    if command is None:
        return
    subparser = sub_action.choices[command]
    known = {a.dest for a in subparser._actions}
    if "k" in defaults:
        defaults["steepness_k"] = defaults.pop("k")
    unknown = sorted(set(defaults) - known)
    if unknown:
        log.warning("config keys not used by %s: %s", command, ", ".join(unknown))
    subparser.set_defaults(**{k: v for k, v in defaults.items() if k in known})


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        pre, _ = parser.parse_known_args(argv) if "--config" in argv else (None, None)
        config_path = pre.config if pre is not None else os.environ.get(CONFIG_ENV)
        _apply_config(parser, argv, _config_defaults(config_path))
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except NumericalError as exc:
        print(f"ghostspec: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (InputError, OSError) as exc:
        print(f"ghostspec: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except GhostSpecError as exc:
        print(f"ghostspec: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    raise SystemExit(main())
