"""Adaptation methods: segmentation heads, SVF, LoRA, BitFit, accounting.

All surgery works in place on an existing model and reports exact
parameter counts afterwards. Frozen factors (SVF's U/Vt, LoRA's base
weights) stay in the parameter table as requires_grad=False entries so
frozen-set audits can hash them.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

Selector = Callable[[str, nn.Module], bool]

ADAPTER_PARAM_MARKERS = (".lora_a", ".lora_b", ".decomposition.")


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------


class _BNConvHead(nn.Module):
    """Per-channel BatchNorm followed by a 1x1 classifier.

    ``bn_momentum=None`` keeps cumulative running averages instead of an
    exponential one; with a frozen encoder the feature statistics are
    stationary and the cumulative estimate converges within a few-shot
    training budget, where the default EMA does not.
    ``single_image_running_stats`` switches a lone-image training batch to
    the running estimates once any exist.
    """

    def __init__(
        self,
        in_channels: int,
        n_classes: int,
        bn_momentum: float | None = None,
        single_image_running_stats: bool = False,
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.in_channels = in_channels
        self.n_classes = n_classes
        self.single_image_running_stats = single_image_running_stats
        self.bn = nn.BatchNorm2d(in_channels, momentum=bn_momentum)
        self.conv = nn.Conv2d(in_channels, n_classes, kernel_size=1)
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            nn.init.trunc_normal_(self.conv.weight, std=0.02, generator=g)
            self.conv.bias.zero_()

    def _normalize(self, x: torch.Tensor) -> torch.Tensor:
        use_running = (
            self.single_image_running_stats
            and self.training
            and x.shape[0] == 1
            and int(self.bn.num_batches_tracked) > 0
        )
        if use_running:
            return F.batch_norm(
                x,
                self.bn.running_mean,
                self.bn.running_var,
                self.bn.weight,
                self.bn.bias,
                training=False,
                eps=self.bn.eps,
            )
        return self.bn(x)

    def _classify(self, x: torch.Tensor, out_resolution: tuple[int, int] | None) -> torch.Tensor:
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} channels, got {x.shape[1]}")
        logits = self.conv(self._normalize(x))
        if out_resolution is not None and tuple(logits.shape[2:]) != tuple(out_resolution):
            logits = F.interpolate(
                logits, size=tuple(out_resolution), mode="bilinear", align_corners=False
            )
        return logits


class LinearHead(_BNConvHead):
    """Probe over the final feature map."""

    def forward(
        self, features: torch.Tensor, out_resolution: tuple[int, int] | None = None
    ) -> torch.Tensor:
        return self._classify(features, out_resolution)


class MultilayerHead(_BNConvHead):
    """Probe over the channel-concatenation of the last n_taps block outputs."""

    def __init__(
        self,
        embed_dim: int,
        n_taps: int,
        n_classes: int,
        bn_momentum: float | None = None,
        single_image_running_stats: bool = False,
        seed: int = 0,
    ) -> None:
        if n_taps < 1:
            raise ValueError(f"n_taps must be >= 1, got {n_taps}")
        super().__init__(
            embed_dim * n_taps, n_classes, bn_momentum, single_image_running_stats, seed
        )
        self.n_taps = n_taps
        self.embed_dim = embed_dim

    def forward(
        self,
        taps: Sequence[torch.Tensor],
        out_resolution: tuple[int, int] | None = None,
    ) -> torch.Tensor:
        if len(taps) != self.n_taps:
            raise ValueError(f"expected {self.n_taps} taps, got {len(taps)}")
        shapes = {tuple(t.shape) for t in taps}
        if len(shapes) != 1:
            raise ValueError(f"taps disagree on shape: {sorted(shapes)}")
        # concatenate in block order, shallowest tap first
        return self._classify(torch.cat(list(taps), dim=1), out_resolution)


# ---------------------------------------------------------------------------
# SVF
# ---------------------------------------------------------------------------


class SVFDecomposition(nn.Module):
    """W = U diag(s) Vt with only the singular values trainable.

    U and Vt are parameters with requires_grad off: optimizers skip them
    while parameter-table hashes still cover them.
    """

    def __init__(
        self, u: torch.Tensor, s: torch.Tensor, vt: torch.Tensor, original_shape: tuple[int, ...]
    ) -> None:
        super().__init__()
        self.u = nn.Parameter(u, requires_grad=False)
        self.s = nn.Parameter(s)
        self.vt = nn.Parameter(vt, requires_grad=False)
        self.original_shape = tuple(original_shape)

    def reconstruct(self) -> torch.Tensor:
        return ((self.u * self.s) @ self.vt).reshape(self.original_shape)


def svf_decompose(weight: torch.Tensor) -> SVFDecomposition:
    """Full SVD of a weight matrix; conv kernels reshape to (out, rest)."""
    if not torch.isfinite(weight).all():
        raise ValueError("weight has non-finite entries")
    if weight.ndim == 2:
        mat = weight
    elif weight.ndim == 4:
        mat = weight.reshape(weight.shape[0], -1)
    else:
        raise ValueError(f"weight must be 2-D or 4-D, got ndim={weight.ndim}")
    u, s, vt = torch.linalg.svd(mat.detach(), full_matrices=False)
    return SVFDecomposition(u, s, vt, tuple(weight.shape))


def svf_reconstruct(dec: SVFDecomposition) -> torch.Tensor:
    """Effective weight in the original shape."""
    return dec.reconstruct()


class SVFLinear(nn.Module):
    """Linear layer whose weight is reconstructed from an SVF decomposition
    on every forward pass. Bias is kept frozen."""

    def __init__(self, base: nn.Linear) -> None:
        super().__init__()
        self.in_features = base.in_features
        self.out_features = base.out_features
        self.decomposition = svf_decompose(base.weight.detach().clone())
        if base.bias is not None:
            self.bias = nn.Parameter(base.bias.detach().clone(), requires_grad=False)
        else:
            self.bias = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.linear(x, self.decomposition.reconstruct(), self.bias)


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------


class LoRALinear(nn.Module):
    """Frozen linear layer plus a trainable low-rank delta (alpha/r) B A.

    B starts at zero so the adapted forward equals the frozen forward
    exactly at initialization.
    """

    def __init__(
        self, base: nn.Linear, rank: int = 4, alpha: float | None = None, seed: int = 0
    ) -> None:
        super().__init__()
        max_rank = min(base.in_features, base.out_features)
        if not 1 <= rank <= max_rank:
            raise ValueError(f"rank must be in [1, {max_rank}], got {rank}")
        self.in_features = base.in_features
        self.out_features = base.out_features
        self.rank = rank
        self.alpha = float(alpha) if alpha is not None else float(rank)
        self.scaling = self.alpha / rank
        self.base = base
        for p in self.base.parameters():
            p.requires_grad = False
        g = torch.Generator().manual_seed(seed)
        a = torch.empty(rank, base.in_features)
        nn.init.kaiming_uniform_(a, a=math.sqrt(5), generator=g)
        self.lora_a = nn.Parameter(a)
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.base(x)
        return out + F.linear(F.linear(x, self.lora_a), self.lora_b) * self.scaling

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.scaling * (self.lora_b @ self.lora_a)


# ---------------------------------------------------------------------------
# Surgery helpers
# ---------------------------------------------------------------------------


def freeze_all(model: nn.Module) -> nn.Module:
    for p in model.parameters():
        p.requires_grad = False
    return model


def _make_selector(targets: Selector | Sequence[str] | None) -> Selector:
    if targets is None:
        return lambda name, module: True
    if callable(targets):
        return targets
    leaves = set(targets)
    return lambda name, module: name.split(".")[-1] in leaves


def _replace_module(root: nn.Module, qualname: str, new: nn.Module) -> None:
    parts = qualname.split(".")
    parent = root
    for p in parts[:-1]:
        parent = getattr(parent, p)
    setattr(parent, parts[-1], new)


def _matched_linears(
    model: nn.Module, targets: Selector | Sequence[str] | None
) -> list[tuple[str, nn.Linear]]:
    select = _make_selector(targets)
    return [
        (name, mod)
        for name, mod in model.named_modules()
        if isinstance(mod, nn.Linear) and select(name, mod)
    ]


def svf_inject(
    model: nn.Module, targets: Selector | Sequence[str] | None = None
) -> tuple[nn.Module, "TrainableReport"]:
    """Replace target linear layers with SVF-parameterized ones, in place.

    Everything else in the model is frozen; afterwards the model's only
    trainable parameters are the singular-value vectors.
    """
    matched = _matched_linears(model, targets)
    if not matched:
        raise ValueError("no linear layers matched the SVF target selector")
    freeze_all(model)
    for name, mod in matched:
        _replace_module(model, name, SVFLinear(mod))
    return model, trainable_fraction(model)


def lora_inject(
    model: nn.Module,
    targets: Selector | Sequence[str] | None = ("q", "v"),
    rank: int = 4,
    alpha: float | None = None,
    seed: int = 0,
) -> tuple[nn.Module, "TrainableReport"]:
    """Wrap target linear layers with low-rank adapters, in place.

    Base weights and all unmatched parameters are frozen; only the A/B
    factors stay trainable. Per-layer init draws derive from (seed, name)
    so layers get independent streams.
    """
    matched = _matched_linears(model, targets)
    if not matched:
        raise ValueError("no linear layers matched the LoRA target selector")
    freeze_all(model)
    for name, mod in matched:
        layer_seed = int.from_bytes(
            hashlib.sha256(f"{seed}:{name}".encode()).digest()[:8], "big"
        )
        _replace_module(model, name, LoRALinear(mod, rank=rank, alpha=alpha, seed=layer_seed))
    return model, trainable_fraction(model)


def lora_merge(model: nn.Module) -> nn.Module:
    """Bake every adapter's delta into its base weight, in place.

    Adapted layers become plain linear layers; calling this on a model
    without adapters (including one already merged) raises.
    """
    adapted = [
        (name, mod) for name, mod in model.named_modules() if isinstance(mod, LoRALinear)
    ]
    if not adapted:
        raise ValueError("no low-rank adapters to merge (already merged?)")
    for name, mod in adapted:
        plain = nn.Linear(mod.in_features, mod.out_features, bias=mod.base.bias is not None)
        with torch.no_grad():
            plain.weight.copy_(mod.merged_weight())
            if mod.base.bias is not None:
                plain.bias.copy_(mod.base.bias)
        plain.weight.requires_grad = False
        if plain.bias is not None:
            plain.bias.requires_grad = False
        _replace_module(model, name, plain)
    return model


def bitfit_mark(model: nn.Module) -> "TrainableReport":
    """Freeze everything except parameters named 'bias', in place."""
    biases = [p for name, p in model.named_parameters() if name.split(".")[-1] == "bias"]
    if not biases:
        raise ValueError("model has no bias parameters")
    freeze_all(model)
    for p in biases:
        p.requires_grad = True
    return trainable_fraction(model)


def finetune_mark(model: nn.Module) -> "TrainableReport":
    """Mark every parameter trainable, in place."""
    for p in model.parameters():
        p.requires_grad = True
    return trainable_fraction(model)


# ---------------------------------------------------------------------------
# Accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupCount:
    name: str
    total: int
    trainable: int


@dataclass(frozen=True)
class TrainableReport:
    """Exact parameter counts with a per-group breakdown.

    Groups partition the parameter table: adapter parameters (low-rank
    factors, singular-value decompositions) split into their own
    '<group>/adapters' row.
    """

    total: int
    trainable: int
    groups: tuple[GroupCount, ...]

    @property
    def fraction(self) -> float:
        return self.trainable / self.total

    def __post_init__(self) -> None:
        if self.trainable > self.total:
            raise ValueError("trainable exceeds total")
        if sum(g.total for g in self.groups) != self.total:
            raise ValueError("groups do not partition the parameter table")

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "trainable": self.trainable,
            "fraction": self.fraction,
            "groups": [
                {"name": g.name, "total": g.total, "trainable": g.trainable}
                for g in self.groups
            ],
        }


def _is_adapter_param(name: str) -> bool:
    return any(marker in f".{name}" for marker in ADAPTER_PARAM_MARKERS)


def trainable_fraction(
    model: nn.Module | dict[str, nn.Module],
) -> TrainableReport:
    """Count parameters of one module or a named collection of modules."""
    modules = model if isinstance(model, dict) else {"model": model}
    counts: dict[str, list[int]] = {}
    total = 0
    trainable = 0
    for group, module in modules.items():
        for name, p in module.named_parameters():
            key = f"{group}/adapters" if _is_adapter_param(name) else group
            c = counts.setdefault(key, [0, 0])
            c[0] += p.numel()
            total += p.numel()
            if p.requires_grad:
                c[1] += p.numel()
                trainable += p.numel()
    groups = tuple(
        GroupCount(name=k, total=v[0], trainable=v[1]) for k, v in sorted(counts.items())
    )
    return TrainableReport(total=total, trainable=trainable, groups=groups)


def parameter_digests(model: nn.Module | dict[str, nn.Module]) -> dict[str, str]:
    """sha256 per parameter, keyed by qualified name. Buffers (running
    statistics) are deliberately not covered: they are not parameters."""
    modules = model if isinstance(model, dict) else {"model": model}
    out: dict[str, str] = {}
    for group, module in modules.items():
        for name, p in module.named_parameters():
            data = p.detach().cpu().contiguous().numpy().tobytes()
            out[f"{group}.{name}"] = hashlib.sha256(data).hexdigest()
    return out
