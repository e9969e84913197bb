"""On-disk and in-memory data model for feature batches.

Feature tensors are stored one file per (collection, layer) in NumPy's
``.npy`` format with the spatial grid kept in the array shape:
``[n_h, n_w, D]`` for 2D collections and ``[n_x, n_y, n_z, D]`` for 3D.
Masks use the same header convention as 8-bit arrays at the original
image/volume resolution.  A JSON manifest ties the files of one dataset
together; its schema is documented in the README.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from batchad.errors import DataError, SchemaError

# Rows with Euclidean norm below this are treated as all-zero and left
# untouched by normalization (flagged instead).
ZERO_NORM_TOL = 1e-12


def l2_normalize(tokens):
    """Row-normalize ``tokens`` to unit Euclidean norm.

    Returns ``(normalized, zero_rows)`` where ``zero_rows`` flags rows whose
    norm is (numerically) zero; those rows are returned unchanged.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    norms = np.linalg.norm(tokens, axis=1)
    zero_rows = norms <= ZERO_NORM_TOL
    safe = np.where(zero_rows, 1.0, norms)
    return tokens / safe[:, None], zero_rows


@dataclass
class FeatureTensor:
    """Row-normalized patch tokens of one (collection, layer) pair."""

    collection_id: int
    layer_id: int
    tokens: np.ndarray          # [N, D], unit rows except flagged zeros
    grid_shape: tuple[int, ...]
    zero_rows: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.zero_rows is None:
            self.zero_rows = np.zeros(self.tokens.shape[0], dtype=bool)
        n = int(np.prod(self.grid_shape))
        if n != self.tokens.shape[0]:
            raise DataError(
                f"grid {self.grid_shape} implies {n} tokens, "
                f"got {self.tokens.shape[0]}"
            )

    @property
    def n_tokens(self):
        return self.tokens.shape[0]

    @property
    def dim(self):
        return self.tokens.shape[1]


@dataclass
class CollectionEntry:
    id: int
    features: dict[int, str]            # layer id -> feature file
    original_shape: tuple[int, ...]
    name: str = ""
    grid_shape: tuple[int, ...] | None = None
    mask: str | None = None
    foreground: str | None = None
    cls: str | None = None


@dataclass
class DatasetManifest:
    modality: str                       # "2d" | "3d"
    collections: list[CollectionEntry]
    root: str = "."

    @property
    def size(self):
        return len(self.collections)

    @property
    def layers(self):
        return sorted(self.collections[0].features)

    def path(self, rel):
        return os.path.join(self.root, rel)

    def entry(self, collection_id):
        return self.collections[collection_id]


def _as_tuple(value, what):
    try:
        return tuple(int(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{what} must be a list of integers, got {value!r}") from exc


def load_manifest(path):
    """Parse and validate a dataset manifest file.

    Ids must be dense ``0..B-1``, the modality must be consistent across
    entries, and every referenced file must exist.
    """
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise SchemaError(f"manifest not found: {path}")
    except json.JSONDecodeError as exc:
        raise SchemaError(f"manifest is not valid JSON: {exc}")

    modality = raw.get("modality")
    if modality not in ("2d", "3d"):
        raise SchemaError(f"modality must be '2d' or '3d', got {modality!r}")
    ndim = 2 if modality == "2d" else 3

    entries_raw = raw.get("collections")
    if not entries_raw:
        raise SchemaError("empty base set: manifest lists no collections")

    root = os.path.dirname(os.path.abspath(path))
    entries = []
    seen = set()
    for item in entries_raw:
        cid = item.get("id")
        if not isinstance(cid, int):
            raise SchemaError(f"collection id must be an integer, got {cid!r}")
        if cid in seen:
            raise SchemaError(f"duplicate collection id {cid}")
        seen.add(cid)

        features = item.get("features")
        if not features:
            raise SchemaError(f"collection {cid} lists no feature files")
        features = {int(layer): rel for layer, rel in features.items()}

        shape = _as_tuple(item.get("original_shape", ()), "original_shape")
        if len(shape) != ndim:
            raise SchemaError(
                f"collection {cid}: original_shape {shape} does not match "
                f"modality '{modality}'"
            )

        grid = item.get("grid_shape")
        entries.append(CollectionEntry(
            id=cid,
            features=features,
            original_shape=shape,
            name=item.get("name", f"collection_{cid}"),
            grid_shape=_as_tuple(grid, "grid_shape") if grid else None,
            mask=item.get("mask"),
            foreground=item.get("foreground"),
            cls=item.get("cls"),
        ))

    if seen != set(range(len(entries))):
        raise SchemaError(
            f"collection ids must be dense 0..{len(entries) - 1}, got {sorted(seen)}"
        )
    entries.sort(key=lambda e: e.id)

    layer_sets = {tuple(sorted(e.features)) for e in entries}
    if len(layer_sets) != 1:
        raise SchemaError(f"collections disagree on layers: {sorted(layer_sets)}")

    manifest = DatasetManifest(modality=modality, collections=entries, root=root)
    for entry in entries:
        for rel in list(entry.features.values()) + [
            p for p in (entry.mask, entry.foreground, entry.cls) if p
        ]:
            full = manifest.path(rel)
            if not os.path.exists(full):
                raise SchemaError(f"referenced file missing: {full}")
    return manifest


def write_features(path, grid_array):
    """Write a feature grid (spatial dims + feature dim) as ``.npy``."""
    arr = np.asarray(grid_array)
    if arr.ndim < 2:
        raise DataError(f"feature grid needs >=2 dims, got shape {arr.shape}")
    np.save(path, arr)


def read_feature_file(path, expect_ndim=None):
    """Load a raw feature grid; validates dtype, finiteness, and rank."""
    arr = np.load(path)
    if not np.issubdtype(arr.dtype, np.floating):
        raise DataError(f"{path}: expected float dtype, got {arr.dtype}")
    if expect_ndim is not None and arr.ndim != expect_ndim:
        raise DataError(f"{path}: expected {expect_ndim} dims, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: non-finite values present")
    return np.asarray(arr, dtype=np.float64)


def load_features(manifest, collection_id, layer_id):
    """Load one (collection, layer) tensor, row-normalized."""
    entry = manifest.entry(collection_id)
    if layer_id not in entry.features:
        raise SchemaError(f"collection {collection_id} has no layer {layer_id}")
    ndim = (2 if manifest.modality == "2d" else 3) + 1
    grid = read_feature_file(manifest.path(entry.features[layer_id]), ndim)
    grid_shape = grid.shape[:-1]
    if entry.grid_shape is not None and tuple(entry.grid_shape) != grid_shape:
        raise DataError(
            f"collection {collection_id} layer {layer_id}: file grid {grid_shape} "
            f"!= manifest grid {tuple(entry.grid_shape)}"
        )
    tokens, zero_rows = l2_normalize(grid.reshape(-1, grid.shape[-1]))
    return FeatureTensor(
        collection_id=collection_id,
        layer_id=layer_id,
        tokens=tokens,
        grid_shape=grid_shape,
        zero_rows=zero_rows,
    )


def load_mask(manifest, collection_id):
    """Load a binary ground-truth (or foreground) mask for one collection."""
    entry = manifest.entry(collection_id)
    if entry.mask is None:
        return None
    return _read_mask(manifest.path(entry.mask), entry.original_shape)


def load_foreground(manifest, collection_id):
    entry = manifest.entry(collection_id)
    if entry.foreground is None:
        return None
    return _read_mask(manifest.path(entry.foreground), entry.original_shape)


def _read_mask(path, expect_shape):
    arr = np.load(path)
    if arr.shape != tuple(expect_shape):
        raise DataError(f"{path}: mask shape {arr.shape} != {tuple(expect_shape)}")
    uniq = np.unique(arr)
    if not np.isin(uniq, (0, 1)).all():
        raise DataError(f"{path}: mask values outside {{0,1}}: {uniq[:10]}")
    return arr.astype(np.uint8)


def load_cls(manifest, collection_id):
    """Load the screening token of one collection, unit-normalized."""
    entry = manifest.entry(collection_id)
    if entry.cls is None:
        raise SchemaError(f"collection {collection_id} has no screening token file")
    vec = np.load(manifest.path(entry.cls)).astype(np.float64).ravel()
    norm = np.linalg.norm(vec)
    if norm <= ZERO_NORM_TOL:
        raise DataError(f"collection {collection_id}: zero screening token")
    return vec / norm


class ExclusionSet:
    """Set of (collection_id, position) pairs removed from the base set."""

    def __init__(self, entries=()):
        self._entries = {(int(c), int(p)) for c, p in entries}

    def __len__(self):
        return len(self._entries)

    def __contains__(self, pair):
        return (int(pair[0]), int(pair[1])) in self._entries

    def __iter__(self):
        return iter(sorted(self._entries))

    def __eq__(self, other):
        return isinstance(other, ExclusionSet) and self._entries == other._entries

    def add(self, collection_id, position):
        self._entries.add((int(collection_id), int(position)))

    def update(self, pairs):
        for c, p in pairs:
            self.add(c, p)

    def positions(self, collection_id, n_tokens=None):
        """Excluded position indices of one collection, sorted ascending."""
        pos = np.array(
            sorted(p for c, p in self._entries if c == collection_id), dtype=np.int64
        )
        if n_tokens is not None and pos.size and pos[-1] >= n_tokens:
            raise DataError(
                f"excluded position {pos[-1]} out of range for collection "
                f"{collection_id} with {n_tokens} tokens"
            )
        return pos

    def mask(self, collection_id, n_tokens):
        """Boolean [n_tokens] array, True where the position is excluded."""
        out = np.zeros(n_tokens, dtype=bool)
        out[self.positions(collection_id, n_tokens)] = True
        return out

    def save(self, path):
        with open(path, "w") as fh:
            for c, p in sorted(self._entries):
                fh.write(f"{c} {p}\n")

    @classmethod
    def load(cls, path):
        entries = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                c, p = line.split()
                entries.append((int(c), int(p)))
        return cls(entries)
