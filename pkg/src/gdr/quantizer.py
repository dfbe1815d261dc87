"""Grouped discretization pipeline.

Stages, in order: optional project-up through the pseudo-inverse of a
learnable matrix, channel split into attribute groups, per-group squared-L2
distances to the codes, Gumbel-perturbed softmax weights, per-group index
selection, code lookup, an annealed residual that blends the continuous
representation back in during pretraining, optional project-down, and a final
joint normalization. Works in two modes: ``vqvae`` (hard codes with a
straight-through gradient) and ``dvae`` (additionally emits the softmax code
mixture for soft decoding).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
from torch import nn

from .codebook import (
    GroupedCodebook,
    ScalarIndexMap,
    TupleIndexMap,
    select_codes,
    tuple_to_scalar,
)

logger = logging.getLogger(__name__)

RANK_GUARD_THRESHOLD = 1e-6
PINV_IDENTITY_TOLERANCE = 1e-4


@dataclass
class QuantizerConfig:
    """Switches and scalars for the discretization pipeline."""

    mode: str = "vqvae"  # "vqvae" or "dvae"
    temperature: float = 1.0
    epsilon: float = 1e-5
    expansion_rate: int = 8
    organize_channels: bool = True
    residual_enabled: bool = True
    final_normalize: bool = True
    utilization_weight: float = 0.1
    codebook_weight: float = 1.0
    commitment_weight: float = 0.25
    tied_projection: bool = True  # False: independent up-projection (ablation)

    def __post_init__(self) -> None:
        if self.mode not in ("vqvae", "dvae"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.expansion_rate not in (1, 2, 4, 8):
            raise ValueError("expansion_rate must be one of 1, 2, 4, 8")
        if self.utilization_weight < 0:
            raise ValueError("utilization_weight must be nonnegative")


@dataclass
class ResidualSchedule:
    """Cosine annealing of the continuous-residual weight.

    Starts at 0.5, reaches 0 at half the pretraining budget, and stays 0 for
    the rest of training and at inference.
    """

    total_pretrain_steps: int

    def alpha(self, step: int) -> float:
        half = self.total_pretrain_steps / 2.0
        if half <= 0 or step >= half:
            return 0.0
        return 0.25 * (1.0 + math.cos(math.pi * step / half))


class InvertibleProjection(nn.Module):
    """Learnable down-projection ``W`` with its pseudo-inverse as the up-projection.

    ``W`` has shape ``(expanded, base)``. Project-up multiplies by ``pinv(W)``
    (shape ``(base, expanded)``), project-down by ``W``. The pseudo-inverse is
    differentiable, so gradients reach ``W`` through both directions. With
    ``tied=False`` the up-projection is an independent parameter instead
    (initialized from the initial pseudo-inverse), which breaks the coupling.
    """

    def __init__(
        self,
        base_channels: int,
        expanded_channels: int,
        seed: int = 0,
        tied: bool = True,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if expanded_channels < base_channels:
            raise ValueError("expanded width must be at least the base width")
        self.base_channels = base_channels
        self.expanded_channels = expanded_channels
        self.tied = tied
        gen = torch.Generator().manual_seed(int(seed))
        init = torch.empty(expanded_channels, base_channels, dtype=dtype).normal_(
            0.0, 1.0 / math.sqrt(expanded_channels), generator=gen
        )
        self.weight = nn.Parameter(init)
        if not tied:
            with torch.no_grad():
                up0 = torch.linalg.pinv(self.weight)
            self.up_weight = nn.Parameter(up0.clone())
        else:
            self.up_weight = None
        self._pinv_cache: tuple | None = None

    def _cache_key(self) -> tuple:
        return (
            self.weight.data_ptr(),
            self.weight._version,
            self.weight.dtype,
            torch.is_grad_enabled() and self.weight.requires_grad,
        )

    def up_matrix(self) -> torch.Tensor:
        """The ``(base, expanded)`` up-projection matrix, recomputed per weight update."""
        if not self.tied:
            return self.up_weight
        key = self._cache_key()
        if self._pinv_cache is not None and self._pinv_cache[0] == key:
            return self._pinv_cache[1]
        svals = torch.linalg.svdvals(self.weight.detach())
        if float(svals.min()) <= RANK_GUARD_THRESHOLD:
            logger.warning(
                "projection matrix lost full column rank (min singular value %.3e); "
                "re-initializing",
                float(svals.min()),
            )
            gen = torch.Generator().manual_seed(int(svals.numel()) + 1)
            with torch.no_grad():
                self.weight.normal_(
                    0.0, 1.0 / math.sqrt(self.expanded_channels), generator=gen
                )
            key = self._cache_key()
        pinv = torch.linalg.pinv(self.weight)
        residual = pinv @ self.weight - torch.eye(
            self.base_channels, dtype=pinv.dtype, device=pinv.device
        )
        if float(residual.detach().abs().max()) >= PINV_IDENTITY_TOLERANCE:
            raise RuntimeError(
                "pseudo-inverse identity check failed: "
                f"max |pinv(W) W - I| = {float(residual.detach().abs().max()):.3e}"
            )
        self._pinv_cache = (key, pinv)
        return pinv


def project_up(z: torch.Tensor, proj: InvertibleProjection) -> torch.Tensor:
    """Expand channels: ``(..., base) -> (..., expanded)``."""
    if z.shape[-1] != proj.base_channels:
        raise ValueError(
            f"input has {z.shape[-1]} channels, projection expects {proj.base_channels}"
        )
    return z @ proj.up_matrix()


def project_down(x_plus: torch.Tensor, proj: InvertibleProjection) -> torch.Tensor:
    """Recover base channels: ``(..., expanded) -> (..., base)``."""
    if x_plus.shape[-1] != proj.expanded_channels:
        raise ValueError(
            f"input has {x_plus.shape[-1]} channels, projection expects "
            f"{proj.expanded_channels}"
        )
    return x_plus @ proj.weight


def split_groups(z: torch.Tensor, group_dims: Sequence[int]) -> list[torch.Tensor]:
    """Slice the channel axis into per-group chunks."""
    dims = tuple(int(d) for d in group_dims)
    if z.shape[-1] != sum(dims):
        raise ValueError(
            f"channel width {z.shape[-1]} does not match group dims summing to {sum(dims)}"
        )
    return list(torch.split(z, dims, dim=-1))


def grouped_distances(
    z_groups: Sequence[torch.Tensor], cb: GroupedCodebook
) -> list[torch.Tensor]:
    """Per-group squared L2 distances to every code: list of ``(..., a_k)``."""
    if len(z_groups) != cb.num_groups:
        raise ValueError(f"got {len(z_groups)} groups, codebook has {cb.num_groups}")
    out = []
    for k, (zg, codes) in enumerate(zip(z_groups, cb.codes)):
        if zg.shape[-1] != cb.group_dims[k]:
            raise ValueError(
                f"group {k} has {zg.shape[-1]} channels, codebook expects "
                f"{cb.group_dims[k]}"
            )
        z_sq = (zg**2).sum(dim=-1, keepdim=True)
        c_sq = (codes**2).sum(dim=-1)
        d = z_sq - 2.0 * (zg @ codes.T) + c_sq
        out.append(d.clamp_min(0.0))
    return out


def sample_gumbel(
    shape: tuple[int, ...],
    rng: torch.Generator,
    dtype: torch.dtype = torch.float32,
    device: torch.device | str = "cpu",
) -> torch.Tensor:
    u = torch.rand(shape, generator=rng, dtype=dtype, device=device)
    return -torch.log(-torch.log(u + 1e-20) + 1e-20)


def gumbel_soft_weights(
    distances: Sequence[torch.Tensor],
    temperature: float,
    rng: Optional[torch.Generator] = None,
    noise_enabled: bool = True,
) -> list[torch.Tensor]:
    """Soft selection weights ``softmax((-D + G) / temperature)`` per group.

    ``G`` is standard Gumbel noise when enabled, zero otherwise; rows over the
    code axis sum to one. Noise-free weights are monotone in ``-D``, so their
    argmax is the nearest code.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if noise_enabled and rng is None:
        raise ValueError("noise_enabled requires an explicit rng")
    weights = []
    for d in distances:
        if not bool(torch.isfinite(d).all()):
            raise ValueError("non-finite distances")
        logits = -d
        if noise_enabled:
            logits = logits + sample_gumbel(
                tuple(d.shape), rng, dtype=d.dtype, device=d.device
            )
        weights.append(torch.softmax(logits / temperature, dim=-1))
    return weights


def tuple_indexes(d_soft: Sequence[torch.Tensor], radices: Sequence[int]) -> TupleIndexMap:
    """Per-group argmax of the soft weights (first index wins on ties)."""
    stacked = torch.stack([w.argmax(dim=-1) for w in d_soft], dim=-1)
    return TupleIndexMap(indexes=stacked, radices=tuple(int(a) for a in radices))


def utilization_loss(d_soft: Sequence[torch.Tensor]) -> torch.Tensor:
    """Negative summed entropy of the batch-mean soft code usage.

    Bounded in ``[-sum_k ln(a_k), 0]``; most negative when every group's mean
    usage is uniform, zero when each group collapses to one code.
    """
    total = None
    for w in d_soft:
        mean_usage = w.reshape(-1, w.shape[-1]).mean(dim=0)
        ent = -(mean_usage * mean_usage.clamp_min(1e-30).log()).sum()
        total = -ent if total is None else total - ent
    return total


def fuse_residual(
    z_plus: torch.Tensor, x_plus: torch.Tensor, alpha: float
) -> torch.Tensor:
    """Blend the continuous representation back in: ``alpha*Z + (1-alpha)*X``."""
    if z_plus.shape != x_plus.shape:
        raise ValueError(
            f"shape mismatch {tuple(z_plus.shape)} vs {tuple(x_plus.shape)}"
        )
    if not 0.0 <= alpha <= 0.5:
        raise ValueError("alpha must lie in [0, 0.5]")
    return alpha * z_plus + (1.0 - alpha) * x_plus


def final_normalize(x: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Standardize jointly over height, width, and channel (per sample if batched)."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    reduce_dims = tuple(range(max(x.ndim - 3, 0), x.ndim))
    mean = x.mean(dim=reduce_dims, keepdim=True)
    var = x.var(dim=reduce_dims, keepdim=True, unbiased=False)
    return (x - mean) / torch.sqrt(var + epsilon)


def straight_through(z: torch.Tensor, quantized: torch.Tensor) -> torch.Tensor:
    """Forward the quantized value, backward the identity gradient to ``z``."""
    return z + (quantized - z).detach()


@dataclass
class QuantizerOutput:
    """Everything the discretization produces for one forward pass."""

    x: torch.Tensor
    x_tuple: TupleIndexMap
    x_scalar: ScalarIndexMap
    d_soft: list[torch.Tensor]
    utilization_loss: torch.Tensor
    z_soft: Optional[torch.Tensor] = None
    vq_loss: Optional[torch.Tensor] = None
    alpha: float = 0.0


class GdrQuantizer(nn.Module):
    """Owns the codebook and projection parameters and runs the full pipeline."""

    def __init__(
        self,
        codebook: GroupedCodebook,
        config: QuantizerConfig,
        base_channels: Optional[int] = None,
        seed: int = 0,
    ):
        super().__init__()
        self.config = config
        self.group_sizes = codebook.group_sizes
        self.group_dims = codebook.group_dims
        self.codes = nn.ParameterList(
            nn.Parameter(c.clone()) for c in codebook.codes
        )
        total = sum(codebook.group_dims)
        if config.organize_channels:
            if base_channels is None:
                if total % config.expansion_rate:
                    raise ValueError(
                        "cannot infer base width: total code width "
                        f"{total} is not divisible by expansion rate"
                    )
                base_channels = total // config.expansion_rate
            if base_channels * config.expansion_rate != total:
                raise ValueError(
                    f"expansion_rate * base_channels = "
                    f"{config.expansion_rate * base_channels} must equal the "
                    f"total code width {total}"
                )
            self.projection: Optional[InvertibleProjection] = InvertibleProjection(
                base_channels,
                total,
                seed=seed,
                tied=config.tied_projection,
                dtype=codebook.dtype,
            )
            self.base_channels = base_channels
        else:
            if base_channels is not None and base_channels != total:
                raise ValueError(
                    "without channel organizing the base width must equal the "
                    f"total code width {total}"
                )
            self.projection = None
            self.base_channels = total

    @property
    def codebook(self) -> GroupedCodebook:
        return GroupedCodebook(
            group_sizes=self.group_sizes,
            group_dims=self.group_dims,
            codes=list(self.codes),
        )

    @property
    def num_combinations(self) -> int:
        return math.prod(self.group_sizes)

    def forward(
        self,
        z: torch.Tensor,
        rng: Optional[torch.Generator] = None,
        noise_enabled: Optional[bool] = None,
        alpha: float = 0.0,
        temperature: Optional[float] = None,
    ) -> QuantizerOutput:
        """Discretize ``z`` of shape ``(..., base_channels)``.

        ``noise_enabled`` defaults to the module's training flag. ``alpha`` is
        the residual weight supplied by the pretraining schedule; leave 0 at
        inference. Deterministic given the rng state and the parameters.
        """
        cfg = self.config
        if z.shape[-1] != self.base_channels:
            raise ValueError(
                f"input has {z.shape[-1]} channels, quantizer expects "
                f"{self.base_channels}"
            )
        if noise_enabled is None:
            noise_enabled = self.training
        tau = cfg.temperature if temperature is None else temperature
        cb = self.codebook

        z_grouped = project_up(z, self.projection) if self.projection is not None else z
        groups = split_groups(z_grouped, self.group_dims)
        dists = grouped_distances(groups, cb)
        d_soft = gumbel_soft_weights(dists, tau, rng=rng, noise_enabled=noise_enabled)
        x_tuple = tuple_indexes(d_soft, self.group_sizes)
        x_scalar = tuple_to_scalar(x_tuple)
        hard = select_codes(cb, x_tuple)

        vq_loss = None
        if cfg.mode == "vqvae" and torch.is_grad_enabled():
            codebook_term = torch.mean((hard - z_grouped.detach()) ** 2)
            commitment_term = torch.mean((z_grouped - hard.detach()) ** 2)
            vq_loss = (
                cfg.codebook_weight * codebook_term
                + cfg.commitment_weight * commitment_term
            )

        z_soft = None
        if cfg.mode == "dvae":
            z_soft = torch.cat(
                [w @ self.codes[k] for k, w in enumerate(d_soft)], dim=-1
            )

        # Straight-through only matters when gradients are live; the plain hard
        # lookup keeps eval outputs bit-identical to a direct code read.
        x_q = straight_through(z_grouped, hard) if torch.is_grad_enabled() else hard
        if cfg.residual_enabled and alpha > 0.0:
            x_q = fuse_residual(z_grouped, x_q, alpha)
        x = project_down(x_q, self.projection) if self.projection is not None else x_q
        if cfg.final_normalize:
            x = final_normalize(x, cfg.epsilon)

        return QuantizerOutput(
            x=x,
            x_tuple=x_tuple,
            x_scalar=x_scalar,
            d_soft=d_soft,
            utilization_loss=utilization_loss(d_soft),
            z_soft=z_soft,
            vq_loss=vq_loss,
            alpha=alpha,
        )
