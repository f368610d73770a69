"""Dataset adapters, synthetic data, deterministic splits, and augmentation.

Adapters expose (image_ids, load, split_of, digest) over any backing store.
Two concrete stores ship here: an in-memory dict (synthetic data, tests) and
an on-disk folder layout (catalog.yaml + images/ + masks/ + splits/*.txt)
with 8-bit PNGs, so a dataset can round-trip through export/load.
"""

from __future__ import annotations

import abc
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
import yaml
from PIL import Image
from torchvision.transforms import InterpolationMode

from fss.datamodel import ClassCatalog, LabelMask, SegSample


def sample_rng(*parts: int | str) -> np.random.Generator:
    """Independent numpy generator derived from a tuple of ints/strings.

    Strings are folded through sha256 so image ids give stable entropy
    across processes (unlike hash()).
    """
    entropy: list[int] = []
    for p in parts:
        if isinstance(p, str):
            entropy.append(int.from_bytes(hashlib.sha256(p.encode()).digest()[:8], "big"))
        else:
            entropy.append(int(p) & 0xFFFFFFFFFFFFFFFF)
    return np.random.default_rng(np.random.SeedSequence(entropy))


class DatasetAdapter(abc.ABC):
    """Uniform access to a segmentation dataset."""

    name: str
    catalog: ClassCatalog

    @abc.abstractmethod
    def image_ids(self, split: str | None = None) -> tuple[str, ...]:
        """Ids in deterministic order; filtered to one split when given."""

    @abc.abstractmethod
    def load(self, image_id: str) -> SegSample:
        ...

    @abc.abstractmethod
    def split_of(self, image_id: str) -> str:
        ...

    @property
    def splits(self) -> tuple[str, ...]:
        return tuple(sorted({self.split_of(i) for i in self.image_ids()}))

    def digest(self) -> str:
        """Identity hash: name, catalog, split table, and a content payload.

        Adapters decide how much content the payload covers (in-memory sets
        hash mask bytes; folder adapters hash ids only, which is documented
        on the class).
        """
        payload = {
            "name": self.name,
            "catalog": self.catalog.to_dict(),
            "splits": {i: self.split_of(i) for i in self.image_ids()},
            "content": self._content_payload(),
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def _content_payload(self) -> dict:
        return {}


class InMemoryDataset(DatasetAdapter):
    """Samples held in a dict. Digest covers mask bytes, so two in-memory
    datasets hash equal only when their labels match exactly."""

    def __init__(
        self,
        name: str,
        catalog: ClassCatalog,
        samples: dict[str, SegSample],
        split_table: dict[str, str] | None = None,
    ) -> None:
        self.name = name
        self.catalog = catalog
        self._samples = dict(samples)
        self._split_table = dict(split_table) if split_table else {i: "train" for i in samples}
        missing = set(self._samples) ^ set(self._split_table)
        if missing:
            raise ValueError(f"split table and samples disagree on ids: {sorted(missing)}")
        self._content_cache: dict | None = None

    def image_ids(self, split: str | None = None) -> tuple[str, ...]:
        ids = sorted(self._samples)
        if split is None:
            return tuple(ids)
        return tuple(i for i in ids if self._split_table[i] == split)

    def load(self, image_id: str) -> SegSample:
        return self._samples[image_id]

    def split_of(self, image_id: str) -> str:
        return self._split_table[image_id]

    def _content_payload(self) -> dict:
        # samples are immutable, so hash the mask bytes once
        if self._content_cache is None:
            self._content_cache = {
                i: hashlib.sha256(self._samples[i].mask.data.tobytes()).hexdigest()
                for i in self.image_ids()
            }
        return self._content_cache


class SubsetAdapter(DatasetAdapter):
    """View over a parent adapter restricted to a fixed id list, with every
    id reassigned to one split name."""

    def __init__(self, parent: DatasetAdapter, ids: tuple[str, ...], split: str) -> None:
        unknown = set(ids) - set(parent.image_ids())
        if unknown:
            raise ValueError(f"ids not in parent dataset: {sorted(unknown)}")
        self.name = f"{parent.name}/{split}"
        self.catalog = parent.catalog
        self._parent = parent
        self._ids = tuple(ids)
        self._split = split

    def image_ids(self, split: str | None = None) -> tuple[str, ...]:
        if split is None or split == self._split:
            return self._ids
        return ()

    def load(self, image_id: str) -> SegSample:
        if image_id not in set(self._ids):
            raise KeyError(image_id)
        return self._parent.load(image_id)

    def split_of(self, image_id: str) -> str:
        return self._split

    def _content_payload(self) -> dict:
        return {"parent": self._parent.digest(), "split": self._split}


def split_fixed(
    adapter: DatasetAdapter, fraction: float, seed: int
) -> tuple[DatasetAdapter, DatasetAdapter]:
    """Deterministic disjoint train/val split by seeded shuffle.

    ``fraction`` is the train share; the train side gets round-half-up of
    n * fraction (783 at 0.5 -> 392 train, 391 val).
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0, 1), got {fraction}")
    ids = sorted(adapter.image_ids())
    order = np.random.default_rng(seed).permutation(len(ids))
    n_train = int(np.floor(len(ids) * fraction + 0.5))
    train_ids = tuple(sorted(ids[j] for j in order[:n_train]))
    val_ids = tuple(sorted(ids[j] for j in order[n_train:]))
    return (
        SubsetAdapter(adapter, train_ids, "train"),
        SubsetAdapter(adapter, val_ids, "val"),
    )


# ---------------------------------------------------------------------------
# Synthetic blob data
# ---------------------------------------------------------------------------

_BG_COLOR = (0.05, 0.05, 0.05)
_PALETTE = (
    ("red", (0.90, 0.12, 0.12)),
    ("green", (0.12, 0.90, 0.12)),
    ("blue", (0.15, 0.30, 0.90)),
    ("yellow", (0.92, 0.85, 0.10)),
    ("magenta", (0.80, 0.15, 0.85)),
    ("cyan", (0.10, 0.85, 0.85)),
    ("orange", (0.95, 0.55, 0.10)),
    ("brown", (0.55, 0.35, 0.15)),
)


@dataclass(frozen=True)
class SyntheticBlobConfig:
    """Recipe for a deterministic dataset of colored ellipses on dark ground.

    ``n_classes`` counts catalog classes. With ``background_is_class`` the
    ids are 0 = background plus n_classes - 1 blob colors; without it all
    n_classes ids are blob colors and background pixels carry the ignore id.
    Identical configs generate bit-identical datasets.
    """

    n_images: int = 80
    n_classes: int = 3
    background_is_class: bool = True
    size: int = 64
    blobs_per_image: int = 2
    noise: float = 0.02
    seed: int = 0
    name: str = "blobs"

    def __post_init__(self) -> None:
        n_fg = self.n_classes - 1 if self.background_is_class else self.n_classes
        if n_fg < 1:
            raise ValueError("need at least one foreground class")
        if n_fg > len(_PALETTE):
            raise ValueError(f"at most {len(_PALETTE)} foreground classes supported")
        if self.n_images < 1 or self.size < 16 or self.blobs_per_image < 1:
            raise ValueError("degenerate blob config")

    def catalog(self) -> ClassCatalog:
        if self.background_is_class:
            classes = [(0, "background")]
            classes += [(i + 1, _PALETTE[i][0]) for i in range(self.n_classes - 1)]
        else:
            classes = [(i, _PALETTE[i][0]) for i in range(self.n_classes)]
        return ClassCatalog(
            classes=tuple(classes), background_is_class=self.background_is_class
        )

    def to_dict(self) -> dict:
        return {
            "kind": "synthetic",
            "n_images": self.n_images,
            "n_classes": self.n_classes,
            "background_is_class": self.background_is_class,
            "size": self.size,
            "blobs_per_image": self.blobs_per_image,
            "noise": self.noise,
            "seed": self.seed,
            "name": self.name,
        }


def _render_blob_image(
    cfg: SyntheticBlobConfig, catalog: ClassCatalog, index: int
) -> SegSample:
    rng = sample_rng(cfg.seed, "blob-image", index)
    size = cfg.size
    if cfg.background_is_class:
        fg_ids = [cid for cid in catalog.class_ids if cid != 0]
        bg_label = 0
    else:
        fg_ids = list(catalog.class_ids)
        bg_label = catalog.ignore_id
    colors = {cid: _PALETTE[j][1] for j, cid in enumerate(fg_ids)}

    img = np.empty((size, size, 3), dtype=np.float32)
    img[:] = _BG_COLOR
    mask = np.full((size, size), bg_label, dtype=np.int64)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    for _ in range(cfg.blobs_per_image):
        cid = int(fg_ids[rng.integers(len(fg_ids))])
        cx, cy = rng.uniform(0.15, 0.85, size=2) * size
        rx, ry = rng.uniform(0.12, 0.30, size=2) * size
        theta = rng.uniform(0.0, np.pi)
        dx, dy = xx - cx, yy - cy
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        inside = (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
        img[inside] = colors[cid]
        mask[inside] = cid  # later blobs occlude earlier ones

    img += rng.normal(0.0, cfg.noise, size=img.shape).astype(np.float32)
    np.clip(img, 0.0, 1.0, out=img)
    return SegSample(
        image_id=f"blob_{index:04d}",
        image=img.astype(np.float32),
        mask=LabelMask(mask, catalog),
    )


def synth_blobs(cfg: SyntheticBlobConfig) -> InMemoryDataset:
    """Generate the dataset described by cfg, every image in split 'train'."""
    catalog = cfg.catalog()
    samples = {}
    for i in range(cfg.n_images):
        s = _render_blob_image(cfg, catalog, i)
        samples[s.image_id] = s
    return InMemoryDataset(name=cfg.name, catalog=catalog, samples=samples)


# ---------------------------------------------------------------------------
# Folder layout
# ---------------------------------------------------------------------------


class FolderDataset(DatasetAdapter):
    """Dataset stored as catalog.yaml + images/*.png + masks/*.png + splits/.

    Digest covers identity (catalog, ids, split table) but not pixel bytes;
    re-exported datasets with identical ids hash equal.
    """

    def __init__(self, root: str | Path) -> None:
        self.root = Path(root)
        meta = yaml.safe_load((self.root / "catalog.yaml").read_text())
        self.name = meta["name"]
        self.catalog = ClassCatalog.from_dict(meta["catalog"])
        self._split_table: dict[str, str] = {}
        for split_file in sorted((self.root / "splits").glob("*.txt")):
            for image_id in split_file.read_text().split():
                self._split_table[image_id] = split_file.stem

    def image_ids(self, split: str | None = None) -> tuple[str, ...]:
        ids = sorted(self._split_table)
        if split is None:
            return tuple(ids)
        return tuple(i for i in ids if self._split_table[i] == split)

    def load(self, image_id: str) -> SegSample:
        if image_id not in self._split_table:
            raise KeyError(image_id)
        img = np.asarray(Image.open(self.root / "images" / f"{image_id}.png").convert("RGB"))
        mask = np.asarray(Image.open(self.root / "masks" / f"{image_id}.png"), dtype=np.int64)
        return SegSample(
            image_id=image_id,
            image=(img.astype(np.float32) / 255.0),
            mask=LabelMask(mask, self.catalog),
        )

    def split_of(self, image_id: str) -> str:
        return self._split_table[image_id]


def export_dataset(adapter: DatasetAdapter, root: str | Path) -> Path:
    """Write an adapter's content to the folder layout FolderDataset reads.

    Images quantize to 8-bit RGB; masks are stored as single-channel 8-bit
    PNGs, so class ids must stay below 256.
    """
    root = Path(root)
    for sub in ("images", "masks", "splits"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    (root / "catalog.yaml").write_text(
        yaml.safe_dump(
            {"name": adapter.name, "catalog": adapter.catalog.to_dict()}, sort_keys=True
        )
    )

    by_split: dict[str, list[str]] = {}
    for image_id in adapter.image_ids():
        s = adapter.load(image_id)
        if int(s.mask.data.max()) > 255 or int(s.mask.data.min()) < 0:
            raise ValueError(f"mask ids outside 8-bit range for {image_id!r}")
        img8 = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(img8, mode="RGB").save(root / "images" / f"{image_id}.png")
        Image.fromarray(s.mask.data.astype(np.uint8), mode="L").save(
            root / "masks" / f"{image_id}.png"
        )
        by_split.setdefault(adapter.split_of(image_id), []).append(image_id)

    for split, ids in sorted(by_split.items()):
        (root / "splits" / f"{split}.txt").write_text("\n".join(sorted(ids)) + "\n")
    return root


# ---------------------------------------------------------------------------
# Resizing and augmentation
# ---------------------------------------------------------------------------


def _resize_image(image: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an (H, W, C) float32 image via torch."""
    t = torch.from_numpy(np.array(image, dtype=np.float32)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=out_hw, mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).contiguous().numpy()


def _resize_mask(mask: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Nearest resize (pixel-center convention) of a 2-D integer mask."""
    in_h, in_w = mask.shape
    out_h, out_w = out_hw
    rows = np.minimum((np.arange(out_h) + 0.5) * in_h / out_h, in_h - 1).astype(np.int64)
    cols = np.minimum((np.arange(out_w) + 0.5) * in_w / out_w, in_w - 1).astype(np.int64)
    return mask[rows[:, None], cols[None, :]]


def resize_to(sample: SegSample, resolution: int | tuple[int, int]) -> SegSample:
    """Resize a sample: image bilinear, mask nearest."""
    out_hw = (resolution, resolution) if isinstance(resolution, int) else tuple(resolution)
    if out_hw == sample.resolution:
        return sample
    return SegSample(
        image_id=sample.image_id,
        image=_resize_image(sample.image, out_hw).astype(np.float32),
        mask=LabelMask(_resize_mask(sample.mask.data, out_hw), sample.mask.catalog),
    )


PHOTOMETRIC_OPS = ("auto-contrast", "equalize", "color", "contrast", "brightness", "sharpness")
DEFAULT_RANDAUG_OPS = (
    "auto-contrast",
    "equalize",
    "rotate",
    "color",
    "contrast",
    "brightness",
    "sharpness",
)
_MAX_MAGNITUDE = 30
_ROTATE_MAX_DEG = 30.0
_FACTOR_SPAN = 0.9


@dataclass(frozen=True)
class AugmentationConfig:
    """Training-time augmentation: flip, scale jitter, crop, RandAug subset.

    The scale step resizes the shorter side to a value drawn from
    ``scale_range`` (inclusive). Photometric RandAug ops touch the image
    only; rotate is geometric and transforms image and mask together
    (mask nearest, ignore fill). ``randaug_magnitude`` follows the usual
    0..30 scale.
    """

    hflip_prob: float = 0.5
    scale_range: tuple[int, int] = (400, 1600)
    crop_size: tuple[int, int] = (1024, 1024)
    randaug_n: int = 2
    randaug_magnitude: int = 9
    randaug_ops: tuple[str, ...] = DEFAULT_RANDAUG_OPS

    def __post_init__(self) -> None:
        lo, hi = self.scale_range
        if lo < 1 or hi < lo:
            raise ValueError(f"bad scale_range {self.scale_range}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ValueError(f"bad hflip_prob {self.hflip_prob}")
        if not 0 <= self.randaug_magnitude <= _MAX_MAGNITUDE:
            raise ValueError(f"bad randaug_magnitude {self.randaug_magnitude}")
        unknown = set(self.randaug_ops) - set(DEFAULT_RANDAUG_OPS)
        if unknown:
            raise ValueError(f"unknown ops: {sorted(unknown)}")
        if self.randaug_n > 0 and not self.randaug_ops:
            raise ValueError("randaug_n > 0 with empty op list")


def _scaled_hw(h: int, w: int, shorter: int) -> tuple[int, int]:
    if h <= w:
        return shorter, max(1, int(round(w * shorter / h)))
    return max(1, int(round(h * shorter / w))), shorter


def _pad_to(img: np.ndarray, mask: np.ndarray, crop_hw: tuple[int, int], ignore_id: int):
    ch, cw = crop_hw
    h, w = mask.shape
    if h >= ch and w >= cw:
        return img, mask
    ph, pw = max(ch - h, 0), max(cw - w, 0)
    top, left = ph // 2, pw // 2
    img = np.pad(img, ((top, ph - top), (left, pw - left), (0, 0)), constant_values=0.0)
    mask = np.pad(mask, ((top, ph - top), (left, pw - left)), constant_values=ignore_id)
    return img, mask


def _apply_randaug_op(
    op: str,
    sign_u: float,
    magnitude: int,
    img_t: torch.Tensor,
    mask: np.ndarray,
    ignore_id: int,
) -> tuple[torch.Tensor, np.ndarray]:
    # sign_u is drawn for every slot so the RNG stream shape does not
    # depend on which op came up
    sign = -1.0 if sign_u < 0.5 else 1.0
    strength = magnitude / _MAX_MAGNITUDE
    if op == "auto-contrast":
        return TF.autocontrast(img_t), mask
    if op == "equalize":
        return TF.equalize(img_t), mask
    if op == "rotate":
        angle = sign * _ROTATE_MAX_DEG * strength
        img_t = TF.rotate(img_t, angle, interpolation=InterpolationMode.BILINEAR, fill=[0.0])
        m = torch.from_numpy(mask.astype(np.float32))[None]
        m = TF.rotate(
            m, angle, interpolation=InterpolationMode.NEAREST, fill=[float(ignore_id)]
        )
        return img_t, m[0].round().long().numpy().astype(np.int64)
    factor = 1.0 + sign * _FACTOR_SPAN * strength
    if op == "color":
        return TF.adjust_saturation(img_t, factor), mask
    if op == "contrast":
        return TF.adjust_contrast(img_t, factor), mask
    if op == "brightness":
        return TF.adjust_brightness(img_t, factor), mask
    if op == "sharpness":
        return TF.adjust_sharpness(img_t, factor), mask
    raise ValueError(f"unknown op {op!r}")


def augment(sample: SegSample, cfg: AugmentationConfig, rng: np.random.Generator) -> SegSample:
    """One stochastic training view of a sample.

    Order: hflip, scale jitter (image bilinear / mask nearest), pad+crop to
    cfg.crop_size, then randaug_n RandAug ops. All randomness comes from
    ``rng`` in a fixed draw order, so equal generator states give equal
    views. Output mask values are a subset of the input's plus ignore.
    """
    catalog = sample.mask.catalog
    img = np.asarray(sample.image)
    mask = np.asarray(sample.mask.data)

    if rng.random() < cfg.hflip_prob:
        img, mask = img[:, ::-1], mask[:, ::-1]

    shorter = int(rng.integers(cfg.scale_range[0], cfg.scale_range[1] + 1))
    out_hw = _scaled_hw(*mask.shape, shorter)
    if out_hw != mask.shape:
        img = _resize_image(np.ascontiguousarray(img), out_hw)
        mask = _resize_mask(np.ascontiguousarray(mask), out_hw)

    top_u, left_u = rng.random(2)
    img, mask = _pad_to(img, mask, cfg.crop_size, catalog.ignore_id)
    ch, cw = cfg.crop_size
    top = int(top_u * (mask.shape[0] - ch + 1))
    left = int(left_u * (mask.shape[1] - cw + 1))
    img = img[top : top + ch, left : left + cw]
    mask = mask[top : top + ch, left : left + cw]

    if cfg.randaug_n > 0:
        img8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        img_t = torch.from_numpy(np.ascontiguousarray(img8)).permute(2, 0, 1)
        for _ in range(cfg.randaug_n):
            op = cfg.randaug_ops[int(rng.integers(len(cfg.randaug_ops)))]
            sign_u = float(rng.random())
            img_t, mask = _apply_randaug_op(
                op, sign_u, cfg.randaug_magnitude, img_t, mask, catalog.ignore_id
            )
        img = img_t.permute(1, 2, 0).contiguous().numpy().astype(np.float32) / 255.0

    return SegSample(
        image_id=sample.image_id,
        image=np.ascontiguousarray(img, dtype=np.float32),
        mask=LabelMask(np.ascontiguousarray(mask), catalog),
    )
