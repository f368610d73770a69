"""Benchmark task sampling: presence index, greedy support draw, manifests.

A k-shot task needs every catalog class in at least k support images while
the support holds exactly n_classes * k unique images. The draw walks the
classes in a fixed order and picks k fresh images containing each class,
without replacement across the whole support; when a class's remaining pool
runs dry the partial selection is discarded and the draw restarts on the
same RNG stream.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from fss.datamodel import FewShotTask, class_presence
from fss.datasets import DatasetAdapter

PRNG_ID = "numpy-pcg64"


class UnsatisfiableClassError(ValueError):
    """A sampled-over class has no images at all in the indexed split."""


class InfeasibleTaskError(RuntimeError):
    """No valid support set was found within the restart budget."""


@dataclass(frozen=True)
class PresenceIndex:
    """Per-class lists of image ids containing that class.

    Lists follow the adapter's id order, so indices built from equal
    datasets are equal.
    """

    per_class: dict[int, tuple[str, ...]]
    dataset_digest: str
    split: str
    min_pixels: int


def build_index(
    adapter: DatasetAdapter, split: str = "train", min_pixels: int = 1
) -> PresenceIndex:
    """Scan one split's masks and index which images contain which class."""
    ids = adapter.image_ids(split)
    if not ids:
        raise ValueError(f"split {split!r} of {adapter.name!r} is empty")
    classes = adapter.catalog.sampled_class_ids()
    per_class: dict[int, list[str]] = {cid: [] for cid in classes}
    for image_id in ids:
        sample = adapter.load(image_id)
        for cid in class_presence(sample.mask, min_pixels):
            per_class[cid].append(image_id)
    for cid in classes:
        if not per_class[cid]:
            raise UnsatisfiableClassError(
                f"class {cid} ({adapter.catalog.name_of(cid)!r}) appears in no "
                f"image of split {split!r}"
            )
    return PresenceIndex(
        per_class={cid: tuple(v) for cid, v in per_class.items()},
        dataset_digest=adapter.digest(),
        split=split,
        min_pixels=min_pixels,
    )


@dataclass(frozen=True)
class SamplerConfig:
    k: int
    seed: int
    class_order: tuple[int, ...] | None = None
    max_restarts: int = 1000

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if self.max_restarts < 0:
            raise ValueError(f"max_restarts must be >= 0, got {self.max_restarts}")


def _resolve_class_order(index: PresenceIndex, cfg: SamplerConfig) -> tuple[int, ...]:
    indexed = tuple(sorted(index.per_class))
    if cfg.class_order is None:
        return indexed
    if tuple(sorted(cfg.class_order)) != indexed:
        raise ValueError(
            f"class_order {cfg.class_order} is not a permutation of indexed classes {indexed}"
        )
    return tuple(cfg.class_order)


def sample_support(index: PresenceIndex, cfg: SamplerConfig) -> tuple[str, ...]:
    """Draw support image ids for a k-shot task.

    Deterministic in (index, cfg): the generator is PCG64 seeded with
    cfg.seed and restarts keep consuming the same stream. Returns exactly
    n_classes * k unique ids covering every class at least k times.
    """
    order = _resolve_class_order(index, cfg)
    for cid in order:
        if len(index.per_class[cid]) < cfg.k:
            raise InfeasibleTaskError(
                f"class {cid} appears in only {len(index.per_class[cid])} images, "
                f"fewer than k={cfg.k}"
            )

    rng = np.random.default_rng(cfg.seed)
    restarts = 0
    while True:
        chosen: list[str] = []
        taken: set[str] = set()
        dry_class: int | None = None
        for cid in order:
            pool = [i for i in index.per_class[cid] if i not in taken]
            if len(pool) < cfg.k:
                dry_class = cid
                break
            for j in rng.choice(len(pool), size=cfg.k, replace=False):
                chosen.append(pool[j])
                taken.add(pool[j])
        if dry_class is None:
            return tuple(chosen)
        restarts += 1
        if restarts > cfg.max_restarts:
            raise InfeasibleTaskError(
                f"gave up after {restarts} restarts; class {dry_class} kept "
                f"running out of unused images (k={cfg.k})"
            )


@dataclass(frozen=True)
class TaskManifest:
    """Reproducibility record for one sampled task.

    Serialization is canonical (sorted keys, newline-terminated), so equal
    inputs give byte-identical manifests and a stable digest.
    """

    dataset_digest: str
    k: int
    seed: int
    class_order: tuple[int, ...]
    min_pixels: int
    prng: str
    support_split: str
    support_ids: tuple[str, ...]

    def to_json(self) -> str:
        payload = {
            "dataset_digest": self.dataset_digest,
            "k": self.k,
            "seed": self.seed,
            "class_order": list(self.class_order),
            "min_pixels": self.min_pixels,
            "prng": self.prng,
            "support_split": self.support_split,
            "support_ids": list(self.support_ids),
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> TaskManifest:
        d = json.loads(text)
        return cls(
            dataset_digest=d["dataset_digest"],
            k=int(d["k"]),
            seed=int(d["seed"]),
            class_order=tuple(int(c) for c in d["class_order"]),
            min_pixels=int(d["min_pixels"]),
            prng=d["prng"],
            support_split=d["support_split"],
            support_ids=tuple(d["support_ids"]),
        )

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def make_task(
    adapter: DatasetAdapter,
    k: int,
    seed: int,
    *,
    query_source: str | DatasetAdapter | None = "val",
    support_split: str = "train",
    min_pixels: int = 1,
    class_order: tuple[int, ...] | None = None,
    max_restarts: int = 1000,
) -> tuple[FewShotTask, TaskManifest]:
    """Sample a complete task: support from one split, query = a whole split.

    ``query_source`` may name a split of ``adapter``, be a separate adapter
    (its full id list becomes the query), or None for a support-only task.
    """
    index = build_index(adapter, split=support_split, min_pixels=min_pixels)
    cfg = SamplerConfig(k=k, seed=seed, class_order=class_order, max_restarts=max_restarts)
    support_ids = sample_support(index, cfg)

    if query_source is None:
        query: tuple = ()
    elif isinstance(query_source, DatasetAdapter):
        query = tuple(query_source.load(i) for i in query_source.image_ids())
    else:
        query = tuple(adapter.load(i) for i in adapter.image_ids(query_source))

    task = FewShotTask(
        support=tuple(adapter.load(i) for i in support_ids),
        query=query,
        k=k,
        catalog=adapter.catalog,
        seed=seed,
        min_pixels=min_pixels,
    )
    manifest = TaskManifest(
        dataset_digest=index.dataset_digest,
        k=k,
        seed=seed,
        class_order=_resolve_class_order(index, cfg),
        min_pixels=min_pixels,
        prng=PRNG_ID,
        support_split=support_split,
        support_ids=support_ids,
    )
    return task, manifest
