"""Core data types: class catalogs, label masks, samples, few-shot tasks.

Masks are integer numpy arrays of shape (H, W) whose values are catalog
class ids or the catalog's ignore id. Images are float32 arrays of shape
(H, W, C) in [0, 1]. Everything here is plain data; torch enters only at
the model boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_IGNORE_ID = 255


@dataclass(frozen=True)
class ClassCatalog:
    """Immutable list of (class_id, name) pairs plus labeling conventions.

    If ``background_is_class`` is true, class id 0 must be present and names
    the background, which is then an ordinary member of the catalog: it is
    sampled over and evaluated like any other class. If false, the catalog
    contains no background entry at all and background pixels carry
    ``ignore_id`` (or are handled by the dataset adapter).
    """

    classes: tuple[tuple[int, str], ...]
    ignore_id: int = DEFAULT_IGNORE_ID
    background_is_class: bool = False

    def __post_init__(self) -> None:
        if len(self.classes) == 0:
            raise ValueError("catalog must contain at least one class")
        ids = [cid for cid, _ in self.classes]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate class ids in catalog: {sorted(ids)}")
        for cid, name in self.classes:
            if cid < 0:
                raise ValueError(f"negative class id {cid} ({name!r})")
            if cid == self.ignore_id:
                raise ValueError(
                    f"class id {cid} ({name!r}) collides with ignore_id"
                )
        if self.background_is_class and 0 not in ids:
            raise ValueError("background_is_class requires class id 0")

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(cid for cid, _ in self.classes)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def name_of(self, class_id: int) -> str:
        for cid, name in self.classes:
            if cid == class_id:
                return name
        raise KeyError(class_id)

    def sampled_class_ids(self) -> tuple[int, ...]:
        """Class ids a benchmark task must cover, in ascending order.

        Background is never silently excluded here: when it is a class it is
        covered, and when it is not a class it is not in the catalog.
        """
        return tuple(sorted(self.class_ids))

    def to_dict(self) -> dict:
        return {
            "classes": [[cid, name] for cid, name in self.classes],
            "ignore_id": self.ignore_id,
            "background_is_class": self.background_is_class,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ClassCatalog:
        return cls(
            classes=tuple((int(cid), str(name)) for cid, name in d["classes"]),
            ignore_id=int(d["ignore_id"]),
            background_is_class=bool(d["background_is_class"]),
        )


@dataclass(frozen=True)
class MaskValidation:
    """Outcome of checking a mask against a catalog."""

    ok: bool
    violations: tuple[str, ...] = ()


def validate_mask(mask: np.ndarray | "LabelMask", catalog: ClassCatalog) -> MaskValidation:
    """Check that every mask value is a catalog class id or the ignore id.

    Structural problems (wrong rank, empty array, non-integer dtype) raise
    ValueError; value problems are reported, not raised.
    """
    data = mask.data if isinstance(mask, LabelMask) else mask
    if not isinstance(data, np.ndarray) or data.ndim != 2:
        raise ValueError(f"mask must be a 2-D array, got ndim={getattr(data, 'ndim', None)}")
    if data.size == 0:
        raise ValueError(f"mask has zero size: shape {data.shape}")
    if not np.issubdtype(data.dtype, np.integer):
        raise ValueError(f"mask dtype must be integer, got {data.dtype}")

    allowed = np.array(sorted(set(catalog.class_ids) | {catalog.ignore_id}))
    bad = np.unique(data[~np.isin(data, allowed)])
    if bad.size:
        violations = tuple(f"value {int(v)} is not a class id or ignore id" for v in bad)
        return MaskValidation(ok=False, violations=violations)
    return MaskValidation(ok=True)


@dataclass(frozen=True)
class LabelMask:
    """A 2-D integer mask bound to its catalog.

    Construction checks structure only (rank, size, dtype); use
    :func:`validate_mask` to audit values. The pixel array is made
    read-only so masks can be shared safely.
    """

    data: np.ndarray
    catalog: ClassCatalog

    def __post_init__(self) -> None:
        if not isinstance(self.data, np.ndarray) or self.data.ndim != 2:
            raise ValueError(
                f"mask must be a 2-D array, got ndim={getattr(self.data, 'ndim', None)}"
            )
        if self.data.size == 0:
            raise ValueError(f"mask has zero size: shape {self.data.shape}")
        if not np.issubdtype(self.data.dtype, np.integer):
            raise ValueError(f"mask dtype must be integer, got {self.data.dtype}")
        self.data.flags.writeable = False

    @property
    def shape(self) -> tuple[int, int]:
        return (int(self.data.shape[0]), int(self.data.shape[1]))


def class_presence(mask: LabelMask, min_pixels: int = 1) -> set[int]:
    """Return the catalog class ids present in the mask.

    A class counts as present when at least ``min_pixels`` of its pixels
    appear. Ignore pixels never contribute.
    """
    if min_pixels < 1:
        raise ValueError(f"min_pixels must be >= 1, got {min_pixels}")
    values, counts = np.unique(mask.data, return_counts=True)
    ids = set(mask.catalog.class_ids)
    return {int(v) for v, c in zip(values, counts) if int(v) in ids and c >= min_pixels}


@dataclass(frozen=True)
class SegSample:
    """One image with its mask. Image is float32 (H, W, C) in [0, 1]."""

    image_id: str
    image: np.ndarray
    mask: LabelMask

    def __post_init__(self) -> None:
        if not isinstance(self.image, np.ndarray) or self.image.ndim != 3:
            raise ValueError(
                f"image must be a 3-D (H, W, C) array, got ndim={getattr(self.image, 'ndim', None)}"
            )
        if self.image.dtype != np.float32:
            raise ValueError(f"image dtype must be float32, got {self.image.dtype}")
        if self.image.shape[:2] != self.mask.data.shape:
            raise ValueError(
                f"image {self.image.shape[:2]} and mask {self.mask.data.shape} disagree"
            )
        check = validate_mask(self.mask, self.mask.catalog)
        if not check.ok:
            raise ValueError(f"invalid mask for {self.image_id!r}: {'; '.join(check.violations)}")
        self.image.flags.writeable = False

    @property
    def resolution(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass(frozen=True)
class FewShotTask:
    """A k-shot segmentation problem: a support set to adapt on, a query set
    to evaluate on.

    Invariants enforced here: every sampled-over catalog class appears in at
    least k support masks, the support contains exactly
    n_classes * k unique images, and support and query ids are disjoint.
    """

    support: tuple[SegSample, ...]
    query: tuple[SegSample, ...]
    k: int
    catalog: ClassCatalog
    seed: int
    min_pixels: int = field(default=1)

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not self.support:
            raise ValueError("support set is empty")

        support_ids = [s.image_id for s in self.support]
        if len(set(support_ids)) != len(support_ids):
            raise ValueError("support contains duplicate images")
        expected = self.catalog.n_classes * self.k
        if len(support_ids) != expected:
            raise ValueError(
                f"support must hold exactly n_classes * k = {expected} images, "
                f"got {len(support_ids)}"
            )

        query_ids = {q.image_id for q in self.query}
        overlap = query_ids & set(support_ids)
        if overlap:
            raise ValueError(f"support and query overlap: {sorted(overlap)}")

        counts = {cid: 0 for cid in self.catalog.sampled_class_ids()}
        for s in self.support:
            for cid in class_presence(s.mask, self.min_pixels):
                if cid in counts:
                    counts[cid] += 1
        short = {cid: c for cid, c in counts.items() if c < self.k}
        if short:
            raise ValueError(
                f"classes under-covered in support (need >= {self.k} images each): {short}"
            )

    @property
    def support_ids(self) -> tuple[str, ...]:
        return tuple(s.image_id for s in self.support)

    @property
    def query_ids(self) -> tuple[str, ...]:
        return tuple(q.image_id for q in self.query)
