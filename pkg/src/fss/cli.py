"""Command-line entry points: sample / train / sweep / eval / report."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import yaml

from fss.datasets import DatasetAdapter, FolderDataset
from fss.runner import (
    ExperimentSpec,
    RunRecord,
    emit_report,
    resolve_dataset,
    run_experiment,
    summarize,
)
from fss.sampler import make_task


def _load_dataset_arg(arg: str) -> DatasetAdapter:
    """A dataset argument is either a folder-layout root or a YAML ref."""
    path = Path(arg)
    if path.is_dir():
        return FolderDataset(path)
    if path.suffix in (".yaml", ".yml"):
        doc = yaml.safe_load(path.read_text())
        ref = doc.get("dataset", doc)
        spec = ExperimentSpec(
            dataset=ref,
            split_fraction=doc.get("split_fraction", 0.5),
            split_seed=doc.get("split_seed", 0),
        )
        support, _ = resolve_dataset(spec)
        return support
    raise SystemExit(f"not a dataset root or YAML ref: {arg}")


def _load_records(records_dir: str) -> list[RunRecord]:
    paths = sorted(Path(records_dir).rglob("record.json"))
    if not paths:
        raise SystemExit(f"no records under {records_dir}")
    return [RunRecord.from_json(p.read_text()) for p in paths]


def _cmd_sample(args: argparse.Namespace) -> int:
    adapter = _load_dataset_arg(args.dataset)
    _, manifest = make_task(
        adapter,
        args.k,
        args.seed,
        query_source=None,
        support_split=args.split,
        min_pixels=args.min_pixels,
    )
    if args.out:
        Path(args.out).write_text(manifest.to_json())
        print(args.out)
    else:
        sys.stdout.write(manifest.to_json())
    return 0


def _run_specs(specs: list[ExperimentSpec], out: str, force: bool) -> int:
    records: list[RunRecord] = []
    for spec in specs:
        for rec in run_experiment(spec, out, force=force):
            records.append(rec)
            state = "cached" if rec.cached else rec.status
            miou = "-" if rec.miou is None else f"{rec.miou:.4f}"
            print(f"{rec.method} k={rec.shots} seed={rec.seed} {state} miou={miou}")
    failures = sum(r.status == "failed" for r in records)
    if failures:
        print(f"{failures} run(s) failed; see failure records for details")
    sys.stdout.write(summarize(records).to_csv())
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    doc = yaml.safe_load(Path(args.config).read_text())
    return _run_specs([ExperimentSpec.from_dict(doc)], args.out, args.force)


def _cmd_sweep(args: argparse.Namespace) -> int:
    doc = yaml.safe_load(Path(args.config).read_text())
    methods = doc.pop("methods", None) or [doc.get("method", "linear")]
    specs = [ExperimentSpec.from_dict({**doc, "method": m}) for m in methods]
    return _run_specs(specs, args.out, args.force)


def _cmd_eval(args: argparse.Namespace) -> int:
    sys.stdout.write(summarize(_load_records(args.records)).to_csv())
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    formats = tuple(f for f in args.formats.split(",") if f)
    for path in emit_report(_load_records(args.records), args.out, formats):
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fss", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="sample a support set and print its manifest")
    p.add_argument("--dataset", required=True, help="dataset root or YAML ref")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--min-pixels", type=int, default=1)
    p.add_argument("--out", help="write the manifest here instead of stdout")
    p.set_defaults(fn=_cmd_sample)

    p = sub.add_parser("train", help="run one experiment spec")
    p.add_argument("--config", required=True, help="experiment spec YAML")
    p.add_argument("--out", default=None, help="results root (default $FSS_RESULTS_ROOT or ./runs)")
    p.add_argument("--force", action="store_true", help="re-run cached cells")
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("sweep", help="run an experiment spec across methods")
    p.add_argument("--config", required=True, help="spec YAML with a 'methods' list")
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("eval", help="aggregate stored run records")
    p.add_argument("--records", required=True, help="directory containing record.json files")
    p.set_defaults(fn=_cmd_eval)

    p = sub.add_parser("report", help="emit CSV/JSON/plot report from records")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--formats", default="csv,json,plots")
    p.set_defaults(fn=_cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    raise SystemExit(main())
