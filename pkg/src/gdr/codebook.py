"""Grouped codebooks, tuple/scalar index arithmetic, and parameter accounting.

A grouped codebook holds ``g`` attribute-level code tables. Group ``k`` has
``group_sizes[k]`` codes of width ``group_dims[k]``. The product of the group
sizes is the effective feature-level codebook size: every combination of
per-group choices names one virtual feature-level code, addressed either by a
tuple of per-group indexes or by its mixed-radix scalar encoding.

The scalar encoding is little-endian: group 0 occupies the least significant
place, so ``scalar = sum_k t_k * prod_{j<k} a_j``. It degenerates to plain
positional encoding with base ``a`` when all groups share one size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import torch

PRODUCT_CODEBOOK_CAP = 65536


@dataclass
class GroupedCodebook:
    """Per-group code tables; ``codes[k]`` has shape ``(group_sizes[k], group_dims[k])``."""

    group_sizes: tuple[int, ...]
    group_dims: tuple[int, ...]
    codes: list[torch.Tensor]

    def __post_init__(self) -> None:
        self.group_sizes = tuple(int(a) for a in self.group_sizes)
        self.group_dims = tuple(int(d) for d in self.group_dims)
        if len(self.group_sizes) == 0:
            raise ValueError("need at least one group")
        if len(self.group_sizes) != len(self.group_dims):
            raise ValueError(
                f"group_sizes has {len(self.group_sizes)} entries but group_dims "
                f"has {len(self.group_dims)}"
            )
        if any(a < 1 for a in self.group_sizes) or any(d < 1 for d in self.group_dims):
            raise ValueError("group sizes and dims must be positive")
        if len(self.codes) != len(self.group_sizes):
            raise ValueError("one code table required per group")
        for k, table in enumerate(self.codes):
            expected = (self.group_sizes[k], self.group_dims[k])
            if tuple(table.shape) != expected:
                raise ValueError(
                    f"group {k} codes have shape {tuple(table.shape)}, expected {expected}"
                )
            if not bool(torch.isfinite(table).all()):
                raise ValueError(f"group {k} codes contain non-finite entries")

    @property
    def num_groups(self) -> int:
        return len(self.group_sizes)

    @property
    def num_combinations(self) -> int:
        """Effective feature-level codebook size, the product of group sizes."""
        return math.prod(self.group_sizes)

    @property
    def total_dim(self) -> int:
        return sum(self.group_dims)

    @property
    def dtype(self) -> torch.dtype:
        return self.codes[0].dtype


@dataclass
class TupleIndexMap:
    """Per-group code choices; ``indexes`` has shape ``(..., g)``."""

    indexes: torch.Tensor
    radices: tuple[int, ...]

    def __post_init__(self) -> None:
        self.radices = tuple(int(a) for a in self.radices)
        if self.indexes.ndim < 1 or self.indexes.shape[-1] != len(self.radices):
            raise ValueError(
                f"last axis of indexes must have length {len(self.radices)}, "
                f"got shape {tuple(self.indexes.shape)}"
            )
        if self.indexes.numel():
            radix = torch.tensor(self.radices, device=self.indexes.device)
            if bool((self.indexes < 0).any()) or bool((self.indexes >= radix).any()):
                raise ValueError("tuple index out of radix range")


@dataclass
class ScalarIndexMap:
    """Mixed-radix scalar encodings of tuple indexes; ``indexes`` has shape ``(...)``."""

    indexes: torch.Tensor
    radix_product: int

    def __post_init__(self) -> None:
        self.radix_product = int(self.radix_product)
        if self.indexes.numel():
            if bool((self.indexes < 0).any()) or bool(
                (self.indexes >= self.radix_product).any()
            ):
                raise ValueError("scalar index out of range")


def new_grouped_codebook(
    group_sizes: Sequence[int],
    group_dims: Sequence[int],
    init_scale: float = 0.02,
    seed: int = 0,
    dtype: torch.dtype = torch.float32,
) -> GroupedCodebook:
    """Create a codebook with i.i.d. zero-mean Gaussian codes, stddev `init_scale`.

    Groups are sampled sequentially from one generator, so a single-group
    codebook reproduces the draw of a flat ``(n, c)`` table under the same seed.
    """
    if init_scale <= 0:
        raise ValueError("init_scale must be positive")
    sizes = tuple(int(a) for a in group_sizes)
    dims = tuple(int(d) for d in group_dims)
    if not sizes or not dims:
        raise ValueError("group_sizes and group_dims must be nonempty")
    if len(sizes) != len(dims):
        raise ValueError("group_sizes and group_dims must have equal length")
    gen = torch.Generator().manual_seed(int(seed))
    codes = [
        torch.empty(a, d, dtype=dtype).normal_(0.0, init_scale, generator=gen)
        for a, d in zip(sizes, dims)
    ]
    return GroupedCodebook(group_sizes=sizes, group_dims=dims, codes=codes)


def place_values(radices: Sequence[int]) -> list[int]:
    """Little-endian mixed-radix place values: ``[1, a_0, a_0*a_1, ...]``."""
    values = [1]
    for a in radices[:-1]:
        values.append(values[-1] * int(a))
    return values


def tuple_to_scalar(t: TupleIndexMap) -> ScalarIndexMap:
    """Encode tuple indexes as mixed-radix scalars (group 0 least significant)."""
    weights = torch.tensor(
        place_values(t.radices), dtype=torch.long, device=t.indexes.device
    )
    scalar = (t.indexes.long() * weights).sum(dim=-1)
    return ScalarIndexMap(indexes=scalar, radix_product=math.prod(t.radices))


def scalar_to_tuple(s: ScalarIndexMap, radices: Sequence[int]) -> TupleIndexMap:
    """Invert :func:`tuple_to_scalar` for the given radices."""
    radices = tuple(int(a) for a in radices)
    if math.prod(radices) != s.radix_product:
        raise ValueError(
            f"radices {radices} have product {math.prod(radices)}, "
            f"expected {s.radix_product}"
        )
    parts = []
    for value, a in zip(place_values(radices), radices):
        parts.append((s.indexes.long() // value) % a)
    return TupleIndexMap(indexes=torch.stack(parts, dim=-1), radices=radices)


def select_codes(cb: GroupedCodebook, t: TupleIndexMap) -> torch.Tensor:
    """Concatenate each group's chosen code: output shape ``(..., sum(group_dims))``."""
    if t.radices != cb.group_sizes:
        raise ValueError(
            f"tuple radices {t.radices} do not match group sizes {cb.group_sizes}"
        )
    picked = [cb.codes[k][t.indexes[..., k]] for k in range(cb.num_groups)]
    return torch.cat(picked, dim=-1)


def product_codebook(
    cb: GroupedCodebook, cap: int = PRODUCT_CODEBOOK_CAP
) -> torch.Tensor:
    """Materialize the equivalent flat codebook, rows ordered by scalar index.

    Test/analysis utility only; refuses to build more than `cap` rows.
    """
    n = cb.num_combinations
    if n > cap:
        raise ValueError(f"product codebook would have {n} rows, above cap {cap}")
    scalars = ScalarIndexMap(indexes=torch.arange(n), radix_product=n)
    tuples = scalar_to_tuple(scalars, cb.group_sizes)
    return select_codes(cb, tuples)


@dataclass
class ParameterAccounting:
    """Codebook parameter counts for the grouped and flat formulations."""

    grouped_params: int
    nongrouped_params: int
    ratio: float
    codes_params: int


def parameter_accounting(
    cb: GroupedCodebook, proj_width: int, base_c: int
) -> ParameterAccounting:
    """Count learnable codebook-side parameters, projection matrix included.

    The flat equivalent needs ``n * base_c`` code parameters; the grouped form
    needs ``sum_k a_k * d_k`` plus the ``proj_width x base_c`` recovery matrix.
    """
    codes_params = sum(a * d for a, d in zip(cb.group_sizes, cb.group_dims))
    grouped = codes_params + int(proj_width) * int(base_c)
    nongrouped = cb.num_combinations * int(base_c)
    return ParameterAccounting(
        grouped_params=grouped,
        nongrouped_params=nongrouped,
        ratio=grouped / nongrouped,
        codes_params=codes_params,
    )
