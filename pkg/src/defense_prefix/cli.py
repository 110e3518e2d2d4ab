"""Command-line front end.

    defense-prefix synth  --mode classify|detect --manifest IN --classes FILE --out DIR --seed N
    defense-prefix train  --config FILE --out dp.bin [--resume]
    defense-prefix train  --emit-config FILE
    defense-prefix eval   --task classify|regions --model ID --manifest FILE --classes FILE
                          [--dp dp.bin] [--baseline] [--out reports.jsonl]
    defense-prefix ablate --config FILE --axis position|tokens|lambda --values V1,V2 --out DIR

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from .errors import ConfigError, DefensePrefixError
from .prefix_core import TrainingConfig

log = logging.getLogger("defense_prefix")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

CONFIG_TEMPLATE = {
    "model": "toy-64",
    "backend": "toy",
    "data": {
        "classes": "classes.txt",
        "clean_manifest": "train/clean.jsonl",
        "attack_manifest": "train/attacked.jsonl",
        # used by `ablate` only
        "eval_clean_manifest": "test/clean.jsonl",
        "eval_attack_manifest": "test/attacked.jsonl",
    },
    "prompt": "a photo of a <CLS>.",
    "training": TrainingConfig().to_dict(),
}


# -- helpers -------------------------------------------------------------------

def read_classes(path) -> list[str]:
    """One class name per line; blank lines and ``#`` comments are ignored."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"class list not found: {path}")
    names = [ln.strip() for ln in path.read_text(encoding="utf-8").splitlines()]
    names = [n for n in names if n and not n.startswith("#")]
    if len(names) < 2:
        raise ConfigError(f"{path}: at least two class names are needed")
    return names


def _classes_for(args_classes, manifest) -> list[str]:
    if args_classes:
        return read_classes(args_classes)
    if manifest.classes:
        return list(manifest.classes)
    raise ConfigError("no class list: pass --classes or use a manifest with a header")


def load_run_config(path, need=("clean_manifest", "attack_manifest", "classes")) -> dict:
    """Read and validate a YAML run config, reporting every problem at once."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    problems = []
    unknown = sorted(set(raw) - set(CONFIG_TEMPLATE))
    problems += [f"unknown top-level key {k!r}" for k in unknown]
    if not raw.get("model"):
        problems.append("model is required")
    if raw.get("backend", "toy") not in ("toy", "pretrained"):
        problems.append(f"backend must be 'toy' or 'pretrained' (got {raw.get('backend')!r})")
    data = raw.get("data") or {}
    for key in need:
        if not data.get(key):
            problems.append(f"data.{key} is required")
    try:
        training = TrainingConfig.from_dict(raw.get("training"))
    except ConfigError as exc:
        problems += exc.problems
        training = None
    if problems:
        raise ConfigError(problems)
    return {"model": raw["model"], "backend": raw.get("backend", "toy"), "data": data,
            "prompt": raw.get("prompt", CONFIG_TEMPLATE["prompt"]), "training": training}


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    from .attack_forge import (DetectionRecord, build_classification_attacks, build_detection_attacks,
                               read_manifest, write_manifest)

    manifest = read_manifest(args.manifest)
    classes = _classes_for(args.classes, manifest)
    out = Path(args.out)
    if args.mode == "classify":
        records = build_classification_attacks(manifest, classes, out, args.seed)
        write_manifest(records, out / "manifest.jsonl", classes)
        print(f"wrote {len(records)} attack records to {out / 'manifest.jsonl'}")
    else:
        if not all(isinstance(r, DetectionRecord) for r in manifest):
            raise ConfigError("--mode detect needs a detection manifest")
        det, attacks = build_detection_attacks(manifest, classes, out, args.seed)
        write_manifest(det, out / "manifest.jsonl", classes)
        write_manifest(attacks, out / "attack_records.jsonl", classes)
        skipped = sum(a.skipped for a in attacks)
        print(f"wrote {len(attacks)} box attack records ({skipped} skipped) for {len(det)} images "
              f"to {out / 'manifest.jsonl'}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.emit_config:
        path = Path(args.emit_config)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(CONFIG_TEMPLATE, sort_keys=False), encoding="utf-8")
        print(f"wrote config template to {path}")
        return EXIT_OK
    if not args.config or not args.out:
        raise ConfigError("train needs --config and --out (or --emit-config)")
    from .gateway import load_model
    from .prefix_core import save_dp, train_dp

    run = load_run_config(args.config)
    classes = read_classes(run["data"]["classes"])
    h = load_model(run["model"], run["backend"])
    out = Path(args.out)
    ckpt = Path(args.checkpoint_dir) if args.checkpoint_dir else out.with_name(out.name + ".ckpt")
    loss_log = Path(args.loss_log) if args.loss_log else out.with_name(out.name + ".loss.jsonl")
    dp = train_dp(h, run["data"]["clean_manifest"], run["data"]["attack_manifest"], classes,
                  run["training"], checkpoint_dir=ckpt, resume=args.resume, loss_log=loss_log)
    save_dp(dp, out)
    print(f"wrote {out} (config {dp.training_config_digest}); loss log {loss_log}")
    return EXIT_OK


def _write_outputs(reports, out, csv_path):
    from .eval_bench import reports_csv, summary_table, write_reports

    print(summary_table(reports))
    if out:
        write_reports(reports, out)
        print(f"wrote {len(reports)} report(s) to {out}")
    if csv_path:
        Path(csv_path).write_text(reports_csv(reports), encoding="utf-8")


def cmd_eval(args) -> int:
    from .attack_forge import read_manifest
    from .eval_bench import accuracy_report, encode_classification_manifest
    from .gateway import load_model
    from .prefix_core import check_compatible, load_dp
    from .region_eval import encode_regions
    from .templates import inference_prompt

    if not args.dp and not args.baseline:
        raise ConfigError("eval needs --dp, --baseline, or both")
    manifest = read_manifest(args.manifest)
    classes = _classes_for(args.classes, manifest)
    prompt = args.prompt or inference_prompt(args.dataset)
    h = load_model(args.model, args.backend)
    dp = None
    if args.dp:
        dp = check_compatible(load_dp(args.dp), h, args.allow_model_mismatch)
    if args.task == "classify":
        x, y, digest = encode_classification_manifest(h, manifest, len(classes))
    else:
        x, y, digest = encode_regions(h, manifest, len(classes))
    model_digest = h.state_digest()
    conditions = ([True] if args.baseline else []) + ([False] if dp is not None else [])
    reports = []
    for baseline in conditions:
        r = accuracy_report(h, x, y, classes, prompt, dp, baseline,
                            dataset_id=args.dataset_id or Path(args.manifest).stem,
                            config_digest=dp.training_config_digest if dp is not None and not baseline else "",
                            data_digest_=digest, task=args.task)
        r.model_digest = model_digest
        reports.append(r)
    _write_outputs(reports, args.out, args.csv)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .eval_bench import BenchData, ablate, write_reports
    from .gateway import load_model

    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values must list at least one value")
    run = load_run_config(args.config, need=("clean_manifest", "attack_manifest", "classes",
                                             "eval_clean_manifest", "eval_attack_manifest"))
    classes = read_classes(run["data"]["classes"])
    h = load_model(run["model"], run["backend"])
    d = run["data"]
    data = BenchData.from_manifests(h, classes, d["clean_manifest"], d["attack_manifest"],
                                    d["eval_clean_manifest"], d["eval_attack_manifest"])
    result = ablate(h, data, run["training"], args.axis, values, run["prompt"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    table = result.table()
    (out / "table.txt").write_text(table + "\n", encoding="utf-8")
    (out / "ablation.csv").write_text(result.csv(), encoding="utf-8")
    reports = [*result.baseline] + [r for row in result.rows for r in (row.clean, row.attacked)]
    write_reports(reports, out / "reports.jsonl")
    print(table)
    return EXIT_OK


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="defense-prefix",
                                description="Train and evaluate a defense prefix against typographic attacks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render typographic attacks for a manifest")
    s.add_argument("--mode", required=True, choices=("classify", "detect"))
    s.add_argument("--manifest", required=True, help="clean manifest (image or detection records)")
    s.add_argument("--classes", help="class list, one per line (default: manifest header)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="learn a defense prefix")
    t.add_argument("--config", help="YAML run config")
    t.add_argument("--out", help="output prefix file (dp.bin)")
    t.add_argument("--resume", action="store_true", help="continue from the last checkpoint")
    t.add_argument("--checkpoint-dir", help="default: <out>.ckpt")
    t.add_argument("--loss-log", help="default: <out>.loss.jsonl")
    t.add_argument("--emit-config", metavar="FILE", help="write a config template and exit")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="zero-shot accuracy with and/or without a prefix")
    e.add_argument("--task", required=True, choices=("classify", "regions"))
    e.add_argument("--model", required=True)
    e.add_argument("--backend", default="toy", choices=("toy", "pretrained"))
    e.add_argument("--manifest", required=True)
    e.add_argument("--classes")
    e.add_argument("--dp", help="prefix file from `train`")
    e.add_argument("--baseline", action="store_true", help="also report the prefix-free model")
    e.add_argument("--prompt", help="prompt with one <CLS> slot")
    e.add_argument("--dataset", default="", help="pick the standard prompt for a known dataset")
    e.add_argument("--dataset-id", default="")
    e.add_argument("--allow-model-mismatch", action="store_true",
                   help="use a prefix trained for another model (warns)")
    e.add_argument("--out", help="reports as JSON lines")
    e.add_argument("--csv", help="reports as CSV")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train one prefix per value of an axis and compare")
    a.add_argument("--config", required=True)
    a.add_argument("--axis", required=True, choices=("position", "tokens", "lambda"))
    a.add_argument("--values", required=True, help="comma-separated values")
    a.add_argument("--out", required=True, help="output directory")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DefensePrefixError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
