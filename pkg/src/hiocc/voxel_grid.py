"""Dense semantic voxel grids and the coarse multi-class label pyramid.

A grid stores one semantic label per voxel on a regular lattice, with a
separate validity mask for voxels whose ground truth is unknown.  Coarser
levels are built by merging 2x2x2 blocks of children and keeping the full
per-class histogram of each block rather than a single collapsed label, so
that no class evidence is lost on the way down.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Class id reserved for free (empty) space at every resolution.
FREE_CLASS = 0


@dataclass(frozen=True)
class GridSpec:
    """Geometry of a dense voxel lattice.

    Args:
        dims: number of voxels along (x, y, z).
        voxel_size: edge length of one voxel in meters.
        origin: world-frame coordinates of the grid's minimum corner.
    """

    dims: tuple[int, int, int]
    voxel_size: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self) -> None:
        if len(self.dims) != 3 or any(int(d) <= 0 for d in self.dims):
            raise ValueError(f"dims must be three positive ints, got {self.dims!r}")
        if not self.voxel_size > 0:
            raise ValueError(f"voxel_size must be positive, got {self.voxel_size!r}")
        if len(self.origin) != 3:
            raise ValueError(f"origin must have three components, got {self.origin!r}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "origin", tuple(float(c) for c in self.origin))

    @property
    def num_voxels(self) -> int:
        x, y, z = self.dims
        return x * y * z

    @property
    def extent(self) -> np.ndarray:
        """Physical size of the grid along each axis, in meters."""
        return np.asarray(self.dims, dtype=np.float64) * self.voxel_size

    def halved(self, levels: int = 1) -> "GridSpec":
        """Spec of the grid downsampled by 2 along every axis, `levels` times.

        Each halving requires the current dims to be even; voxel size doubles
        and the origin is unchanged (blocks nest exactly).
        """
        dims = self.dims
        size = self.voxel_size
        for _ in range(levels):
            if any(d % 2 != 0 for d in dims):
                raise ValueError(f"dims {dims} not divisible by 2")
            dims = tuple(d // 2 for d in dims)
            size *= 2.0
        return GridSpec(dims=dims, voxel_size=size, origin=self.origin)

    def doubled(self, levels: int = 1) -> "GridSpec":
        """Spec of the grid upsampled by 2 along every axis, `levels` times."""
        dims = self.dims
        size = self.voxel_size
        for _ in range(levels):
            dims = tuple(d * 2 for d in dims)
            size /= 2.0
        return GridSpec(dims=dims, voxel_size=size, origin=self.origin)

    def voxel_centers(self) -> np.ndarray:
        """World coordinates of all voxel centers, [num_voxels, 3] in C order."""
        x, y, z = self.dims
        ii, jj, kk = np.meshgrid(
            np.arange(x), np.arange(y), np.arange(z), indexing="ij"
        )
        idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3).astype(np.float64)
        return (idx + 0.5) * self.voxel_size + np.asarray(self.origin, np.float64)

    def linear_index(self, coords: np.ndarray) -> np.ndarray:
        """Map integer (x, y, z) coords [N, 3] to flat C-order indices [N]."""
        coords = np.asarray(coords)
        x, y, z = self.dims
        if coords.ndim != 2 or coords.shape[1] != 3:
            raise ValueError(f"coords must be [N, 3], got {coords.shape}")
        if (coords < 0).any() or (coords >= np.asarray(self.dims)).any():
            raise ValueError("coords out of grid bounds")
        return (coords[:, 0] * y + coords[:, 1]) * z + coords[:, 2]

    def unravel(self, linear: np.ndarray) -> np.ndarray:
        """Inverse of linear_index: flat indices [N] -> integer coords [N, 3]."""
        linear = np.asarray(linear, dtype=np.int64)
        if linear.size and (linear.min() < 0 or linear.max() >= self.num_voxels):
            raise ValueError("linear index out of range")
        cx, cy, cz = np.unravel_index(linear, self.dims)
        return np.stack([cx, cy, cz], axis=-1)


@dataclass
class SemanticGrid:
    """Dense per-voxel class labels plus a validity mask.

    labels: int array [X, Y, Z], values in [0, num_classes).
    valid: bool array [X, Y, Z]; False marks voxels with unknown ground truth.
    """

    spec: GridSpec
    labels: np.ndarray
    num_classes: int
    valid: np.ndarray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels)
        if self.labels.shape != self.spec.dims:
            raise ValueError(
                f"labels shape {self.labels.shape} != grid dims {self.spec.dims}"
            )
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError(f"labels must be integer, got {self.labels.dtype}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.valid is None:
            self.valid = np.ones(self.spec.dims, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.spec.dims:
            raise ValueError(
                f"valid shape {self.valid.shape} != grid dims {self.spec.dims}"
            )
        inside = self.labels[self.valid]
        if inside.size and (inside.min() < 0 or inside.max() >= self.num_classes):
            raise ValueError(
                f"labels out of range [0, {self.num_classes}) on valid voxels"
            )

    @property
    def flat_labels(self) -> np.ndarray:
        return self.labels.reshape(-1)

    @property
    def flat_valid(self) -> np.ndarray:
        return self.valid.reshape(-1)

    @property
    def occupancy(self) -> np.ndarray:
        """Bool [X, Y, Z]: True where the voxel holds a non-free class."""
        return self.labels != FREE_CLASS


@dataclass
class ClassHistogramGrid:
    """Per-voxel class fractions at a coarsened resolution.

    fractions: float64 [X, Y, Z, C]; rows over defined voxels sum to 1 and
    rows over undefined voxels are all zero.  defined: bool [X, Y, Z], True
    where the underlying block contained at least one valid child.
    """

    spec: GridSpec
    fractions: np.ndarray
    defined: np.ndarray

    def __post_init__(self) -> None:
        self.fractions = np.asarray(self.fractions, dtype=np.float64)
        self.defined = np.asarray(self.defined, dtype=bool)
        if self.fractions.shape[:3] != self.spec.dims:
            raise ValueError(
                f"fractions shape {self.fractions.shape} != dims {self.spec.dims}"
            )
        if self.defined.shape != self.spec.dims:
            raise ValueError(
                f"defined shape {self.defined.shape} != dims {self.spec.dims}"
            )

    @property
    def num_classes(self) -> int:
        return self.fractions.shape[3]

    @property
    def flat_fractions(self) -> np.ndarray:
        return self.fractions.reshape(-1, self.num_classes)

    @property
    def flat_defined(self) -> np.ndarray:
        return self.defined.reshape(-1)

    def check(self, atol: float = 1e-12) -> None:
        """Assert the row-sum invariant; raises ValueError on violation."""
        sums = self.fractions.sum(axis=-1)
        if self.fractions.min(initial=0.0) < 0:
            raise ValueError("negative class fraction")
        bad_def = np.abs(sums[self.defined] - 1.0) > atol
        if bad_def.any():
            raise ValueError("defined rows must sum to 1")
        if sums[~self.defined].any():
            raise ValueError("undefined rows must be all zero")


@dataclass
class SubdivisionMask:
    """Which coarse voxels hold more than one class among their children."""

    spec: GridSpec
    requires_split: np.ndarray
    defined: np.ndarray

    def __post_init__(self) -> None:
        self.requires_split = np.asarray(self.requires_split, dtype=bool)
        self.defined = np.asarray(self.defined, dtype=bool)
        for name, arr in (("requires_split", self.requires_split), ("defined", self.defined)):
            if arr.shape != self.spec.dims:
                raise ValueError(f"{name} shape {arr.shape} != dims {self.spec.dims}")
        if (self.requires_split & ~self.defined).any():
            raise ValueError("requires_split set on an undefined voxel")

    @property
    def flat_requires_split(self) -> np.ndarray:
        return self.requires_split.reshape(-1)

    @property
    def flat_defined(self) -> np.ndarray:
        return self.defined.reshape(-1)


@dataclass
class LevelStats:
    """Homogeneity summary of one pyramid level."""

    level: int
    dims: tuple[int, int, int]
    total_voxels: int
    total_defined: int
    requires_split: int
    homogeneous_fraction: float
    homogeneous_fraction_all: float
    per_class_counts: np.ndarray


def _block_counts(grid: SemanticGrid) -> np.ndarray:
    """Valid-child class counts of each 2x2x2 block, int64 [X/2, Y/2, Z/2, C]."""
    x, y, z = grid.spec.dims
    if x % 2 or y % 2 or z % 2:
        raise ValueError(f"grid dims {grid.spec.dims} not divisible by 2")
    nx, ny, nz = x // 2, y // 2, z // 2
    c = grid.num_classes
    bx = np.repeat(np.arange(nx), 2)
    by = np.repeat(np.arange(ny), 2)
    bz = np.repeat(np.arange(nz), 2)
    block = (
        bx[:, None, None] * (ny * nz) + by[None, :, None] * nz + bz[None, None, :]
    )
    key = block * c + grid.labels
    counts = np.bincount(
        key[grid.valid].reshape(-1), minlength=nx * ny * nz * c
    )
    return counts.reshape(nx, ny, nz, c).astype(np.int64)


def _merge_counts(counts: np.ndarray) -> np.ndarray:
    """Sum 2x2x2 blocks of a counts grid [X, Y, Z, C] -> [X/2, Y/2, Z/2, C]."""
    x, y, z, c = counts.shape
    if x % 2 or y % 2 or z % 2:
        raise ValueError(f"counts dims {(x, y, z)} not divisible by 2")
    return counts.reshape(x // 2, 2, y // 2, 2, z // 2, 2, c).sum(axis=(1, 3, 5))


def _counts_to_histogram(spec: GridSpec, counts: np.ndarray) -> ClassHistogramGrid:
    total = counts.sum(axis=-1)
    defined = total > 0
    fractions = np.zeros(counts.shape, dtype=np.float64)
    np.divide(
        counts, total[..., None], out=fractions, where=defined[..., None]
    )
    return ClassHistogramGrid(spec=spec, fractions=fractions, defined=defined)


def build_histogram_pyramid(
    grid: SemanticGrid, levels: int
) -> list[ClassHistogramGrid]:
    """Build `levels` successively coarser class-histogram grids.

    Level i halves the resolution of level i-1 (level 0 being the input
    grid); each coarse voxel's fractions are the class shares among its
    valid full-resolution descendants.  Invalid children contribute
    nothing; a coarse voxel with no valid descendant is undefined.

    Args:
        grid: full-resolution labels; every dim must be divisible by
            2**levels.
        levels: number of coarsenings, >= 1.

    Returns:
        List of ClassHistogramGrid, finest (level 1) first.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    dims = np.asarray(grid.spec.dims)
    if (dims % (2**levels)).any():
        raise ValueError(
            f"dims {grid.spec.dims} not divisible by 2**levels = {2 ** levels}"
        )
    counts = _block_counts(grid)
    spec = grid.spec.halved()
    out = [_counts_to_histogram(spec, counts)]
    for _ in range(levels - 1):
        counts = _merge_counts(counts)
        spec = spec.halved()
        out.append(_counts_to_histogram(spec, counts))
    return out


def subdivision_mask(hist: ClassHistogramGrid) -> SubdivisionMask:
    """Mark coarse voxels whose children span more than one class.

    A voxel requires splitting iff it is defined and at least two classes
    have nonzero fraction; free space counts as a class, so a free/occupied
    boundary block is heterogeneous.
    """
    distinct = (hist.fractions > 0.0).sum(axis=-1)
    requires = hist.defined & (distinct > 1)
    return SubdivisionMask(
        spec=hist.spec, requires_split=requires, defined=hist.defined.copy()
    )


def plurality_labels(hist: ClassHistogramGrid) -> np.ndarray:
    """Most-frequent child class per coarse voxel, ties to the smallest id.

    Undefined voxels get FREE_CLASS.
    """
    labels = np.argmax(hist.fractions, axis=-1).astype(np.int32)
    labels[~hist.defined] = FREE_CLASS
    return labels


def majority_downsample(grid: SemanticGrid, levels: int = 1) -> SemanticGrid:
    """Downsample labels by plurality vote over each block's valid children."""
    hist = build_histogram_pyramid(grid, levels)[-1]
    return SemanticGrid(
        spec=hist.spec,
        labels=plurality_labels(hist),
        num_classes=grid.num_classes,
        valid=hist.defined.copy(),
    )


def homogeneity_stats(grid: SemanticGrid, levels: int = 2) -> list[LevelStats]:
    """Per-level split statistics of the histogram pyramid.

    homogeneous_fraction is 1 - requires_split / defined voxels (1.0 when
    nothing is defined); homogeneous_fraction_all uses all voxels of the
    level as denominator, counting undefined ones as homogeneous.
    """
    pyramid = build_histogram_pyramid(grid, levels)
    out = []
    for i, hist in enumerate(pyramid, start=1):
        mask = subdivision_mask(hist)
        n_def = int(mask.defined.sum())
        n_split = int(mask.requires_split.sum())
        n_all = hist.spec.num_voxels
        counts = np.bincount(
            plurality_labels(hist)[hist.defined], minlength=hist.num_classes
        ).astype(np.int64)
        out.append(
            LevelStats(
                level=i,
                dims=hist.spec.dims,
                total_voxels=n_all,
                total_defined=n_def,
                requires_split=n_split,
                homogeneous_fraction=1.0 - n_split / n_def if n_def else 1.0,
                homogeneous_fraction_all=1.0 - n_split / n_all,
                per_class_counts=counts,
            )
        )
    return out


def generate_synthetic_scene(
    spec: GridSpec,
    num_classes: int,
    heterogeneity: float,
    seed: int,
) -> SemanticGrid:
    """Random scene whose level-1 heterogeneous-block share is exact.

    Lays down a ground slab and random boxes for plausible structure, then
    rewrites each 2x2x2 block so that exactly round(heterogeneity * B) of
    the B blocks contain two classes and the rest contain one.  All voxels
    are valid, so level-1 homogeneous_fraction == 1 - heterogeneity
    whenever heterogeneity * B is integral.

    Args:
        spec: target full-resolution geometry; all dims must be even.
        num_classes: class count including free; >= 2 when heterogeneity > 0.
        heterogeneity: requested fraction of mixed blocks, in [0, 1].
        seed: RNG seed; output is a pure function of the arguments.
    """
    x, y, z = spec.dims
    if x % 2 or y % 2 or z % 2:
        raise ValueError(f"dims {spec.dims} must be even")
    if not 0.0 <= heterogeneity <= 1.0:
        raise ValueError(f"heterogeneity must be in [0, 1], got {heterogeneity}")
    if num_classes < 1 or (heterogeneity > 0 and num_classes < 2):
        raise ValueError("need at least two classes to plant mixed blocks")
    rng = np.random.default_rng(seed)

    labels = np.zeros(spec.dims, dtype=np.int32)
    ground = min(2, num_classes - 1)
    slab = max(1, z // 4)
    labels[:, :, :slab] = ground
    n_boxes = max(2, (x * y) // 64)
    for _ in range(n_boxes):
        cls = int(rng.integers(1, num_classes)) if num_classes > 1 else 0
        sx = int(rng.integers(1, max(2, x // 4) + 1))
        sy = int(rng.integers(1, max(2, y // 4) + 1))
        sz = int(rng.integers(1, max(2, z // 2) + 1))
        x0 = int(rng.integers(0, x - sx + 1))
        y0 = int(rng.integers(0, y - sy + 1))
        z0 = int(rng.integers(0, z - sz + 1))
        labels[x0 : x0 + sx, y0 : y0 + sy, z0 : z0 + sz] = cls

    # Enforce the planted mix exactly, block by block.
    nx, ny, nz = x // 2, y // 2, z // 2
    n_blocks = nx * ny * nz
    n_mixed = int(round(heterogeneity * n_blocks))
    mixed = np.zeros(n_blocks, dtype=bool)
    mixed[rng.permutation(n_blocks)[:n_mixed]] = True

    blocks = (
        labels.reshape(nx, 2, ny, 2, nz, 2)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(n_blocks, 8)
    )
    # Plurality label of each block, ties to the smallest id.
    counts = np.bincount(
        (np.arange(n_blocks)[:, None] * num_classes + blocks).reshape(-1),
        minlength=n_blocks * num_classes,
    ).reshape(n_blocks, num_classes)
    base = np.argmax(counts, axis=-1).astype(np.int32)

    blocks[:] = base[:, None]
    if n_mixed:
        other = (
            base[mixed] + rng.integers(1, num_classes, size=n_mixed)
        ) % num_classes
        # First `split` children keep the base label, the rest flip.
        split = rng.integers(1, 8, size=n_mixed)
        flip = np.arange(8)[None, :] >= split[:, None]
        mixed_rows = blocks[mixed]
        mixed_rows[flip] = np.broadcast_to(other[:, None], (n_mixed, 8))[flip]
        blocks[mixed] = mixed_rows

    labels = (
        blocks.reshape(nx, ny, nz, 2, 2, 2)
        .transpose(0, 3, 1, 4, 2, 5)
        .reshape(x, y, z)
    )
    return SemanticGrid(spec=spec, labels=labels, num_classes=num_classes)
