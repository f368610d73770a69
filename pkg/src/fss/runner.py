"""Experiment orchestration: multi-seed sweeps, records, reports.

Each (shots, seed) cell of an experiment produces one RunRecord persisted
as canonical JSON under <out>/runs/<spec-hash>/k<shots>_s<seed>/, next to
the task manifest. Completed cells are skipped on rerun, and a failing
run becomes a failure record instead of aborting the sweep. Records are
all a report needs; nothing is recomputed at emission time.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
from matplotlib import ticker

import fss
from fss.datasets import (
    DatasetAdapter,
    FolderDataset,
    SyntheticBlobConfig,
    split_fixed,
    synth_blobs,
)
from fss.encoders import EncoderConfig, tiny_encoder
from fss.metrics import aggregate_runs, object_size_report
from fss.sampler import make_task
from fss.trainer import METHODS, TrainConfig, predict_masks, run_task

DEFAULT_SEEDS = (0, 1, 2)
DEFAULT_SHOTS = (1, 2, 5, 10)

_RESULTS_ROOT_ENV = "FSS_RESULTS_ROOT"


@dataclass(frozen=True)
class ExperimentSpec:
    """Everything needed to reproduce a sweep: dataset and encoder refs,
    method, shot counts, seeds, and training overrides."""

    dataset: dict
    encoder: dict = field(default_factory=dict)
    method: str = "linear"
    shots: tuple[int, ...] = DEFAULT_SHOTS
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    train: dict = field(default_factory=dict)
    split_fraction: float = 0.5
    split_seed: int = 0
    query_split: str = "val"
    object_size_class: int | None = None
    name: str = ""

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if not self.shots or any(s < 1 for s in self.shots):
            raise ValueError("shots must be >= 1")
        if "kind" not in self.dataset:
            raise ValueError("dataset ref needs a 'kind'")

    def to_dict(self) -> dict:
        return {
            "dataset": dict(self.dataset),
            "encoder": dict(self.encoder),
            "method": self.method,
            "shots": list(self.shots),
            "seeds": list(self.seeds),
            "train": dict(self.train),
            "split_fraction": self.split_fraction,
            "split_seed": self.split_seed,
            "query_split": self.query_split,
            "object_size_class": self.object_size_class,
            "name": self.name,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentSpec:
        d = dict(d)
        for key in ("shots", "seeds"):
            if isinstance(d.get(key), list):
                d[key] = tuple(d[key])
        return cls(**d)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def resolve_dataset(spec: ExperimentSpec) -> tuple[DatasetAdapter, DatasetAdapter | str]:
    """Dataset ref -> (support adapter, query source for make_task)."""
    ref = dict(spec.dataset)
    kind = ref.pop("kind")
    if kind == "synthetic":
        ds = synth_blobs(SyntheticBlobConfig(**ref))
        train_view, val_view = split_fixed(ds, spec.split_fraction, spec.split_seed)
        return train_view, val_view
    if kind == "folder":
        return FolderDataset(ref["root"]), spec.query_split
    raise ValueError(f"unknown dataset kind {kind!r}")


def resolve_encoder(spec: ExperimentSpec):
    ref = dict(spec.encoder)
    kind = ref.pop("kind", "tiny")
    if kind != "tiny":
        raise ValueError(f"unknown encoder kind {kind!r}")
    cfg = EncoderConfig.from_dict(ref)
    return lambda: tiny_encoder(cfg)


@dataclass
class RunRecord:
    """One (method, shots, seed) outcome, reloadable without re-running."""

    experiment: dict
    method: str
    shots: int
    seed: int
    manifest_digest: str
    status: str  # "ok" | "failed"
    miou: float | None
    per_class_iou: dict[str, float | None] | None
    excluded_class_ids: tuple[int, ...]
    trainable: dict | None
    stage1: dict | None
    stage2: dict | None
    wall_time_s: float
    version: str
    error: str | None = None
    object_size: list[list[float]] | None = None
    cached: bool = False  # runtime flag, never serialized

    def to_json(self) -> str:
        payload = {
            "experiment": self.experiment,
            "method": self.method,
            "shots": self.shots,
            "seed": self.seed,
            "manifest_digest": self.manifest_digest,
            "status": self.status,
            "miou": self.miou,
            "per_class_iou": self.per_class_iou,
            "excluded_class_ids": list(self.excluded_class_ids),
            "trainable": self.trainable,
            "stage1": self.stage1,
            "stage2": self.stage2,
            "wall_time_s": self.wall_time_s,
            "version": self.version,
            "error": self.error,
            "object_size": self.object_size,
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> RunRecord:
        d = json.loads(text)
        d["excluded_class_ids"] = tuple(d.get("excluded_class_ids", ()))
        return cls(**d)


def _results_root(out_dir: str | Path | None) -> Path:
    if out_dir is not None:
        return Path(out_dir)
    return Path(os.environ.get(_RESULTS_ROOT_ENV, "runs"))


def _dataset_label(experiment: dict) -> str:
    return experiment.get("name") or experiment.get("dataset", {}).get("name", "dataset")


def run_experiment(
    spec: ExperimentSpec, out_dir: str | Path | None = None, *, force: bool = False
) -> list[RunRecord]:
    """Run every (shots, seed) cell, persisting one record per cell.

    Already-persisted cells load from disk (marked cached) unless force is
    set. Failures persist as status="failed" records and the sweep moves
    on. Support sets depend only on (dataset, k, seed), so two methods at
    the same seed share task manifests by construction.
    """
    root = _results_root(out_dir) / "runs" / spec.digest()[:12]
    root.mkdir(parents=True, exist_ok=True)
    (root / "spec.json").write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=2) + "\n")

    support_adapter, query_source = resolve_dataset(spec)
    encoder_factory = resolve_encoder(spec)

    records: list[RunRecord] = []
    for shots in spec.shots:
        for seed in spec.seeds:
            run_dir = root / f"k{shots}_s{seed}"
            record_path = run_dir / "record.json"
            if record_path.exists() and not force:
                rec = RunRecord.from_json(record_path.read_text())
                rec.cached = True
                records.append(rec)
                continue

            run_dir.mkdir(parents=True, exist_ok=True)
            t0 = time.perf_counter()
            try:
                task, manifest = make_task(
                    support_adapter, shots, seed, query_source=query_source
                )
                (run_dir / "manifest.json").write_text(manifest.to_json())
                cfg = TrainConfig.from_dict(
                    {**spec.train, "method": spec.method, "seed": seed}
                )
                encoder = encoder_factory()
                head, r1, r2, cm = run_task(task, encoder, cfg)
                miou, excluded = cm.miou()
                size_pairs = None
                if spec.object_size_class is not None:
                    pairs = predict_masks(task.query, encoder, head, task.catalog)
                    size_pairs = [
                        [float(a), float(v)]
                        for a, v in object_size_report(
                            pairs, spec.object_size_class, task.catalog.ignore_id
                        )
                    ]
                rec = RunRecord(
                    experiment=spec.to_dict(),
                    method=spec.method,
                    shots=shots,
                    seed=seed,
                    manifest_digest=manifest.digest(),
                    status="ok",
                    miou=miou,
                    per_class_iou={
                        str(cid): v for cid, v in cm.per_class_iou().items()
                    },
                    excluded_class_ids=excluded,
                    trainable=r2.trainable.to_dict() if r2.trainable else None,
                    stage1=r1.to_dict(),
                    stage2=r2.to_dict(),
                    wall_time_s=time.perf_counter() - t0,
                    version=fss.__version__,
                    object_size=size_pairs,
                )
            except Exception as e:  # noqa: BLE001 - failure isolation
                rec = RunRecord(
                    experiment=spec.to_dict(),
                    method=spec.method,
                    shots=shots,
                    seed=seed,
                    manifest_digest="",
                    status="failed",
                    miou=None,
                    per_class_iou=None,
                    excluded_class_ids=(),
                    trainable=None,
                    stage1=None,
                    stage2=None,
                    wall_time_s=time.perf_counter() - t0,
                    version=fss.__version__,
                    error=f"{type(e).__name__}: {e}",
                )
            record_path.write_text(rec.to_json())
            records.append(rec)
    return records


# ---------------------------------------------------------------------------
# Aggregation and reporting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReportTable:
    """Aggregated (method, shots) cells: mean/std mIoU across seeds."""

    rows: tuple[dict, ...]

    def to_csv(self) -> str:
        lines = ["method,shots,mean_miou,std_miou,n_seeds,n_datasets"]
        for r in self.rows:
            std = "" if r["std_miou"] is None else f"{r['std_miou']:.6f}"
            lines.append(
                f"{r['method']},{r['shots']},{r['mean_miou']:.6f},{std},"
                f"{r['n_seeds']},{r['n_datasets']}"
            )
        return "\n".join(lines) + "\n"


def summarize(records: Iterable[RunRecord]) -> ReportTable:
    """Aggregate successful records per (method, shots).

    When several datasets contribute, each seed's values first average
    across datasets, then seeds aggregate; with one dataset that first
    step is the identity. Cells with one seed report std as None.
    """
    cells: dict[tuple[str, int], dict[int, dict[str, float]]] = {}
    for rec in records:
        if rec.status != "ok" or rec.miou is None:
            continue
        per_seed = cells.setdefault((rec.method, rec.shots), {})
        per_seed.setdefault(rec.seed, {})[_dataset_label(rec.experiment)] = rec.miou

    rows = []
    for (method, shots), per_seed in sorted(cells.items()):
        seed_means = [float(np.mean(list(v.values()))) for _, v in sorted(per_seed.items())]
        n_datasets = max(len(v) for v in per_seed.values())
        agg = aggregate_runs(seed_means)
        rows.append(
            {
                "method": method,
                "shots": shots,
                "mean_miou": agg.mean,
                "std_miou": agg.std,
                "n_seeds": agg.n,
                "n_datasets": n_datasets,
            }
        )
    return ReportTable(rows=tuple(rows))


def _best_lr(table: Mapping[float, float]) -> float:
    best, best_score = None, -np.inf
    for lr in sorted(table):
        v = table[lr]
        if not np.isnan(v) and v >= best_score:
            best, best_score = lr, v
    if best is None:
        raise ValueError("score table has no finite entries")
    return best


def lr_transfer(
    scores_by_dataset: Mapping[str, Mapping[float, float]],
) -> dict[tuple[str, str], float | None]:
    """Cross-dataset LR robustness: mIoU drop on the target when reusing
    the source dataset's best learning rate.

    Diagonal entries are None (undefined, not zero). Pairs whose source
    best-lr was never scored on the target are omitted. Off-diagonal drops
    are >= 0 by construction of "best".
    """
    out: dict[tuple[str, str], float | None] = {}
    for src, src_table in scores_by_dataset.items():
        src_best = _best_lr(src_table)
        for tgt, tgt_table in scores_by_dataset.items():
            if src == tgt:
                out[(src, tgt)] = None
                continue
            if src_best not in tgt_table or np.isnan(tgt_table[src_best]):
                continue
            out[(src, tgt)] = float(tgt_table[_best_lr(tgt_table)] - tgt_table[src_best])
    return out


def _record_sort_key(rec: RunRecord) -> tuple:
    return (rec.method, rec.shots, rec.seed, rec.status)


def emit_report(
    records: Sequence[RunRecord],
    out_dir: str | Path,
    formats: Sequence[str] = ("csv", "json", "plots"),
) -> tuple[Path, ...]:
    """Write summary CSV, per-record JSON lines, and shot-scaling plots.

    Deterministic: equal records give byte-identical files, including the
    plot images. A report manifest listing every emitted file and its
    sha256 is always written, even for an empty format list.
    """
    if not records:
        raise ValueError("no records to report")
    unknown = set(formats) - {"csv", "json", "plots"}
    if unknown:
        raise ValueError(f"unknown report formats: {sorted(unknown)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ordered = sorted(records, key=_record_sort_key)
    written: list[Path] = []

    if "csv" in formats:
        p = out / "summary.csv"
        p.write_text(summarize(ordered).to_csv())
        written.append(p)
        for rec in ordered:
            if rec.object_size:
                p = out / f"object_size_{rec.method}_k{rec.shots}_s{rec.seed}.csv"
                lines = ["area,iou"] + [f"{int(a)},{v:.6f}" for a, v in rec.object_size]
                p.write_text("\n".join(lines) + "\n")
                written.append(p)

    if "json" in formats:
        p = out / "records.jsonl"
        p.write_text(
            "".join(json.dumps(json.loads(r.to_json()), sort_keys=True) + "\n" for r in ordered)
        )
        written.append(p)

    if "plots" in formats:
        table = summarize(ordered)
        fig, ax = plt.subplots(figsize=(6, 4))
        methods = sorted({r["method"] for r in table.rows})
        for method in methods:
            pts = sorted(
                (r["shots"], r["mean_miou"]) for r in table.rows if r["method"] == method
            )
            ax.semilogx([p_[0] for p_ in pts], [p_[1] for p_ in pts], marker="o", label=method)
        ax.set_xlabel("shots")
        ax.set_ylabel("mean mIoU")
        ax.set_xticks(sorted({r["shots"] for r in table.rows}))
        ax.get_xaxis().set_major_formatter(ticker.ScalarFormatter())
        ax.legend()
        fig.tight_layout()
        p = out / "shots_curve.png"
        fig.savefig(p, dpi=100, metadata={"Software": "fss"})
        plt.close(fig)
        written.append(p)

    manifest = {
        "files": {
            f.name: hashlib.sha256(f.read_bytes()).hexdigest() for f in sorted(written)
        },
        "n_records": len(ordered),
        "version": fss.__version__,
    }
    mp = out / "report_manifest.json"
    mp.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    written.append(mp)
    return tuple(written)
