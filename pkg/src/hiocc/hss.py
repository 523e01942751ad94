"""Hierarchical refinement: pick coarse voxels, predict their children.

A scoring head ranks coarse voxels by how likely they are to contain a
class boundary; the top K are subdivided into their 2x2x2 children by a
small MLP, and the child predictions overwrite the upsampled coarse
prediction only where a parent was selected.  Octant o of a parent at
(x, y, z) is the child at (2x + dx, 2y + dy, 2z + dz) with
(dx, dy, dz) = ((o >> 2) & 1, (o >> 1) & 1, o & 1).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mini_nn import mlp_forward, softmax
from .voxel_grid import GridSpec, SemanticGrid, SubdivisionMask

NUM_CHILDREN = 8


@dataclass
class SelectionSet:
    """Coarse voxels chosen for refinement.

    indices: flat C-order voxel indices [k], ordered by descending score
    with ties broken by ascending index; duplicates are rejected.
    """

    indices: np.ndarray
    scores: np.ndarray
    k: int

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.indices.shape != (self.k,) or self.scores.shape != (self.k,):
            raise ValueError(
                f"expected {self.k} indices and scores, got "
                f"{self.indices.shape} / {self.scores.shape}"
            )
        if len(np.unique(self.indices)) != self.k:
            raise ValueError("selection contains duplicate indices")
        if self.k > 1:
            s, i = self.scores, self.indices
            ok = (s[:-1] > s[1:]) | ((s[:-1] == s[1:]) & (i[:-1] < i[1:]))
            if not ok.all():
                raise ValueError(
                    "selection must be sorted by descending score, "
                    "ties by ascending index"
                )

    def to_json(self) -> str:
        return json.dumps(
            {
                "k": self.k,
                "indices": self.indices.tolist(),
                "scores": self.scores.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "SelectionSet":
        data = json.loads(text)
        return cls(
            indices=np.asarray(data["indices"], dtype=np.int64),
            scores=np.asarray(data["scores"], dtype=np.float64),
            k=int(data["k"]),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "SelectionSet":
        return cls.from_json(Path(path).read_text())


def select_topk(
    scores: np.ndarray, k: int, eligible: np.ndarray | None = None
) -> SelectionSet:
    """Deterministically pick the k highest-scoring eligible voxels.

    Ties are broken toward the smaller flat index, so the result is a
    pure function of (scores, k, eligible).  k may not exceed the number
    of eligible voxels.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1:
        raise ValueError(f"scores must be flat [n], got shape {scores.shape}")
    n = scores.shape[0]
    if eligible is None:
        eligible = np.ones(n, dtype=bool)
    eligible = np.asarray(eligible, dtype=bool)
    if eligible.shape != (n,):
        raise ValueError(f"eligible mask must be [{n}], got {eligible.shape}")
    pool = np.nonzero(eligible)[0]
    if k < 0 or k > len(pool):
        raise ValueError(f"k = {k} outside [0, {len(pool)}] eligible voxels")
    order = np.lexsort((pool, -scores[pool]))[:k]
    chosen = pool[order]
    return SelectionSet(indices=chosen, scores=scores[chosen], k=k)


def entropy_scores(low_logits: np.ndarray) -> np.ndarray:
    """Prediction entropy per coarse voxel, a training-free split score."""
    p = softmax(np.asarray(low_logits, dtype=np.float64), axis=-1)
    return -np.where(p > 0, p * np.log(p), 0.0).sum(axis=-1)


def octant_offsets() -> np.ndarray:
    """The 8 child offsets [(dx, dy, dz)] in octant order, int64 [8, 3]."""
    o = np.arange(NUM_CHILDREN)
    return np.stack([(o >> 2) & 1, (o >> 1) & 1, o & 1], axis=-1).astype(np.int64)


def child_coordinates(low_spec: GridSpec, selection: SelectionSet) -> np.ndarray:
    """Full-resolution (x, y, z) of all children, parent-major octant order.

    Returns int64 [8k, 3] on the doubled grid.
    """
    parents = low_spec.unravel(selection.indices)  # [k, 3]
    return (
        2 * parents[:, None, :] + octant_offsets()[None, :, :]
    ).reshape(-1, 3)


@dataclass
class ChildFeatures:
    """Subdivided features for every child of the selected parents.

    features: [8k, C]; row r belongs to parent_indices[r], octant
    octants[r]; rows are parent-major in selection order.
    """

    features: np.ndarray
    parent_indices: np.ndarray
    octants: np.ndarray


def subdivide_selected(
    low_features: np.ndarray,
    selection: SelectionSet,
    layers,
    activation: str = "relu",
) -> ChildFeatures:
    """Expand each selected parent feature into 8 child features.

    The MLP maps C to 8 * C; its output is reshaped so octant o of parent
    j lands at row 8 * j + o.
    """
    low_features = np.asarray(low_features, dtype=np.float64)
    if low_features.ndim != 2:
        raise ValueError(f"low_features must be [n, C], got {low_features.shape}")
    c = low_features.shape[1]
    parents = low_features[selection.indices]  # [k, C]
    out = mlp_forward(parents, layers, activation=activation)
    if out.shape != (selection.k, NUM_CHILDREN * c):
        raise ValueError(
            f"subdivision MLP must produce [k, {NUM_CHILDREN * c}], got {out.shape}"
        )
    feats = out.reshape(selection.k * NUM_CHILDREN, c)
    return ChildFeatures(
        features=feats,
        parent_indices=np.repeat(selection.indices, NUM_CHILDREN),
        octants=np.tile(np.arange(NUM_CHILDREN, dtype=np.int64), selection.k),
    )


def gather_child_labels(
    gt: SemanticGrid, selection: SelectionSet
) -> tuple[np.ndarray, np.ndarray]:
    """One-hot ground-truth labels of all selected children.

    Returns (onehot [8k, C], valid [8k]); invalid children get an all-zero
    row and must be excluded via the mask.
    """
    low_spec = gt.spec.halved()
    coords = child_coordinates(low_spec, selection)
    labels = gt.labels[coords[:, 0], coords[:, 1], coords[:, 2]]
    valid = gt.valid[coords[:, 0], coords[:, 1], coords[:, 2]]
    onehot = np.zeros((len(coords), gt.num_classes))
    rows = np.nonzero(valid)[0]
    onehot[rows, labels[valid]] = 1.0
    return onehot, valid


def recombine_predictions(
    low_logits: np.ndarray,
    high_logits: np.ndarray,
    selection: SelectionSet,
    low_spec: GridSpec,
    num_classes: int | None = None,
) -> SemanticGrid:
    """Merge coarse and refined predictions into one full-resolution grid.

    Unselected regions take the nearest-neighbor upsample of the coarse
    argmax; children of selected parents take the fine argmax.  Argmax
    ties resolve to the smallest class id at both resolutions.
    """
    low_logits = np.asarray(low_logits, dtype=np.float64)
    if low_logits.ndim != 2 or low_logits.shape[0] != low_spec.num_voxels:
        raise ValueError(
            f"low_logits must be [{low_spec.num_voxels}, C], got {low_logits.shape}"
        )
    c = low_logits.shape[1]
    high_logits = np.asarray(high_logits, dtype=np.float64)
    if high_logits.shape != (selection.k * NUM_CHILDREN, c):
        raise ValueError(
            f"high_logits must be [{selection.k * NUM_CHILDREN}, {c}], "
            f"got {high_logits.shape}"
        )
    full_spec = low_spec.doubled()
    low_arg = np.argmax(low_logits, axis=-1).astype(np.int32)
    full = low_arg.reshape(low_spec.dims)
    for axis in range(3):
        full = np.repeat(full, 2, axis=axis)
    if selection.k:
        coords = child_coordinates(low_spec, selection)
        full[coords[:, 0], coords[:, 1], coords[:, 2]] = np.argmax(
            high_logits, axis=-1
        ).astype(np.int32)
    return SemanticGrid(
        spec=full_spec, labels=full, num_classes=num_classes or c
    )


def subdivision_recall(selection: SelectionSet, mask: SubdivisionMask) -> float:
    """Share of ground-truth split voxels covered by the selection.

    1.0 when nothing requires splitting.
    """
    req = mask.flat_requires_split
    total = int(req.sum())
    if total == 0:
        return 1.0
    return float(req[selection.indices].sum() / total)
