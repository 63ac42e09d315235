"""Seeded synthetic composed-retrieval data.

Each modification code m owns a fixed random linear edit map A_m
(columns normalized). A triplet is a reference vector drawn uniformly
on the sphere, a code, and the normalized image of the reference under
that code's map plus isotropic noise. The gallery holds every train and
val target plus distractor targets built the same way from held-out
references, so distractors live on the same manifold and retrieval is
not trivially easy.

Per-query candidate subsets (for subset recall) are the target plus its
nearest gallery neighbors by dot product. Fractional subsampling takes
a prefix of one seeded permutation, so the fractions used in data-size
sweeps are nested.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

_GEN_TAG = 0x41
_SUB_TAG = 0x42

MAGIC = "WRFDATA v1"

# Header echo order; also the load-time parse schema.
_CONFIG_FIELDS = (
    ("d_ref", int),
    ("d_mod", int),
    ("n_mods", int),
    ("n_train", int),
    ("n_val", int),
    ("gallery_size", int),
    ("noise_sigma", float),
    ("subset_size", int),
    ("seed", int),
)


@dataclass(frozen=True)
class DatasetConfig:
    d_ref: int = 32
    d_mod: int = 8
    n_mods: int = 8
    n_train: int = 512
    n_val: int = 512
    gallery_size: int = 2048
    noise_sigma: float = 0.1
    subset_size: int = 6
    seed: int = 0

    def __post_init__(self):
        if self.d_ref < 1 or self.d_mod < 1:
            raise ConfigError("d_ref and d_mod must be >= 1")
        if self.n_mods < 2:
            raise ConfigError("n_mods must be >= 2")
        if self.n_train < 1 or self.n_val < 1:
            raise ConfigError("n_train and n_val must be >= 1")
        if self.gallery_size < self.n_train + self.n_val:
            raise ConfigError(
                f"gallery_size must be >= n_train + n_val, got "
                f"{self.gallery_size} < {self.n_train + self.n_val}"
            )
        if not (np.isfinite(self.noise_sigma) and self.noise_sigma >= 0.0):
            raise ConfigError(f"noise_sigma must be finite and >= 0, got {self.noise_sigma}")
        if not (2 <= self.subset_size <= self.gallery_size):
            raise ConfigError("subset_size must lie in [2, gallery_size]")


@dataclass(frozen=True)
class Triplet:
    ref: np.ndarray
    mod_code: int
    target_index: int


@dataclass(frozen=True)
class TripletTable:
    """Column-wise triplet storage; one row per query.

    subsets[i] is query i's candidate list for subset recall: its
    target first, then the nearest gallery neighbors of that target.
    """

    refs: np.ndarray  # (n, d_ref) float64, unit rows
    mod_codes: np.ndarray  # (n,) uint32
    target_indices: np.ndarray  # (n,) uint32
    subsets: np.ndarray  # (n, subset_size) uint32

    def __post_init__(self):
        n = self.refs.shape[0]
        if self.refs.ndim != 2:
            raise DataError("refs must be 2-d")
        for name in ("mod_codes", "target_indices"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise DataError(f"{name} must have shape ({n},), got {arr.shape}")
        if self.subsets.ndim != 2 or self.subsets.shape[0] != n:
            raise DataError("subsets must be (n, subset_size)")
        if n and not (self.subsets == self.target_indices[:, None]).any(axis=1).all():
            raise DataError("every subset must contain its query's target index")
        for arr in (self.refs, self.mod_codes, self.target_indices, self.subsets):
            arr.flags.writeable = False

    def __len__(self) -> int:
        return self.refs.shape[0]

    def take(self, idx: np.ndarray) -> "TripletTable":
        return TripletTable(
            self.refs[idx].copy(),
            self.mod_codes[idx].copy(),
            self.target_indices[idx].copy(),
            self.subsets[idx].copy(),
        )

    def triplet(self, i: int) -> Triplet:
        return Triplet(self.refs[i], int(self.mod_codes[i]), int(self.target_indices[i]))


@dataclass(frozen=True)
class SynthDataset:
    config: DatasetConfig
    train: TripletTable
    val: TripletTable
    gallery: np.ndarray  # (gallery_size, d_ref), unit rows
    mod_embeddings: np.ndarray  # (n_mods, d_mod), unit rows
    edit_maps: np.ndarray | None = None  # kept in memory only; oracle access

    def __post_init__(self):
        self.gallery.flags.writeable = False
        self.mod_embeddings.flags.writeable = False


def _unit_rows(arr: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise DataError(f"degenerate {what}: zero-norm row while normalizing")
    return arr / norms


def _nearest_subsets(gallery: np.ndarray, targets: np.ndarray, subset_size: int) -> np.ndarray:
    """Target first, then its (subset_size - 1) nearest gallery rows."""
    scores = gallery[targets] @ gallery.T
    scores[np.arange(len(targets)), targets] = -np.inf
    order = np.argsort(-scores, axis=1, kind="stable")
    return np.concatenate(
        [targets[:, None], order[:, : subset_size - 1]], axis=1
    ).astype(np.uint32)


def generate(config: DatasetConfig, edit_maps: np.ndarray | None = None) -> SynthDataset:
    """Build the full dataset from the config seed.

    edit_maps overrides the drawn maps (shape (n_mods, d_ref, d_ref));
    it exists so tests can install identity edits and check the
    noise-free oracle.
    """
    rng = np.random.default_rng([_GEN_TAG, config.seed])
    d, m = config.d_ref, config.n_mods
    if edit_maps is None:
        maps = rng.standard_normal((m, d, d))
        maps /= np.linalg.norm(maps, axis=1, keepdims=True)  # unit columns
    else:
        maps = np.asarray(edit_maps, dtype=np.float64)
        if maps.shape != (m, d, d):
            raise ConfigError(f"edit_maps must have shape {(m, d, d)}, got {maps.shape}")
    mod_embeddings = _unit_rows(rng.standard_normal((m, config.d_mod)), "mod embedding")

    total = config.gallery_size  # train + val + distractors, all built alike
    refs = _unit_rows(rng.standard_normal((total, d)), "reference")
    codes = rng.integers(0, m, size=total).astype(np.uint32)
    noise = rng.standard_normal((total, d))
    raw = np.einsum("nij,nj->ni", maps[codes], refs) + config.noise_sigma * noise
    gallery = _unit_rows(raw, "target")

    n_tr, n_va = config.n_train, config.n_val
    all_idx = np.arange(total, dtype=np.uint32)
    subsets = _nearest_subsets(gallery, all_idx[: n_tr + n_va], config.subset_size)
    train = TripletTable(
        refs[:n_tr].copy(), codes[:n_tr].copy(), all_idx[:n_tr].copy(), subsets[:n_tr]
    )
    val = TripletTable(
        refs[n_tr : n_tr + n_va].copy(),
        codes[n_tr : n_tr + n_va].copy(),
        all_idx[n_tr : n_tr + n_va].copy(),
        subsets[n_tr:],
    )
    return SynthDataset(config, train, val, gallery, mod_embeddings, edit_maps=maps)


def subsample(table: TripletTable, fraction: float, seed: int) -> TripletTable:
    """Seeded sample without replacement of ceil(fraction * n) rows.

    Shared seed gives nested subsets: the sample is a prefix of one
    permutation, so subsample(0.2) is contained in subsample(0.4).
    Row order of the original table is preserved.
    """
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1.0:
        return table
    n = len(table)
    count = math.ceil(fraction * n)
    perm = np.random.default_rng([_SUB_TAG, seed]).permutation(n)
    return table.take(np.sort(perm[:count]))


def subsample_dataset(dataset: SynthDataset, fraction: float, seed: int) -> SynthDataset:
    """Same dataset with a subsampled train table; val and gallery untouched."""
    if fraction == 1.0:
        return dataset
    return SynthDataset(
        dataset.config,
        subsample(dataset.train, fraction, seed),
        dataset.val,
        dataset.gallery,
        dataset.mod_embeddings,
        dataset.edit_maps,
    )


def _config_echo(config: DatasetConfig, n_train: int, n_val: int) -> list[str]:
    values = {name: getattr(config, name) for name, _ in _CONFIG_FIELDS}
    values["n_train"] = n_train  # echo actual table sizes (subsampled saves)
    values["n_val"] = n_val
    out = []
    for name, kind in _CONFIG_FIELDS:
        val = values[name]
        out.append(f"{name}={repr(float(val)) if kind is float else int(val)}")
    return out


def save_dataset(path: str | os.PathLike, dataset: SynthDataset) -> None:
    header_lines = [MAGIC, *_config_echo(dataset.config, len(dataset.train), len(dataset.val))]
    header = "\n".join(header_lines) + "\n\n"
    parts = [header.encode("utf-8")]

    def f64(arr):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def u32(arr):
        parts.append(np.ascontiguousarray(arr, dtype="<u4").tobytes())

    f64(dataset.gallery)
    f64(dataset.mod_embeddings)
    for table in (dataset.train, dataset.val):
        f64(table.refs)
        u32(table.mod_codes)
        u32(table.target_indices)
        u32(table.subsets)
    Path(path).write_bytes(b"".join(parts))


def load_dataset(path: str | os.PathLike) -> SynthDataset:
    raw = Path(path).read_bytes()
    split = raw.find(b"\n\n")
    if split < 0:
        raise DataError(f"{path}: missing header terminator")
    lines = raw[:split].decode("utf-8").split("\n")
    if not lines or lines[0] != MAGIC:
        raise DataError(f"{path}: bad magic line (expected {MAGIC!r})")
    kv = {}
    for line in lines[1:]:
        if "=" not in line:
            raise DataError(f"{path}: bad config line {line!r}")
        key, _, value = line.partition("=")
        kv[key] = value
    try:
        fields = {name: kind(kv[name]) for name, kind in _CONFIG_FIELDS}
    except (KeyError, ValueError) as exc:
        raise DataError(f"{path}: bad or missing config field ({exc})") from exc
    config = DatasetConfig(**fields)

    body = raw[split + 2 :]
    offset = 0

    def read(dtype, shape):
        nonlocal offset
        count = int(np.prod(shape))
        nbytes = count * np.dtype(dtype).itemsize
        if offset + nbytes > len(body):
            raise DataError(f"{path}: truncated binary section")
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=offset).reshape(shape)
        offset += nbytes
        return arr.copy()

    d, s = config.d_ref, config.subset_size
    gallery = read("<f8", (config.gallery_size, d))
    mod_embeddings = read("<f8", (config.n_mods, config.d_mod))
    tables = []
    for n in (config.n_train, config.n_val):
        refs = read("<f8", (n, d))
        codes = read("<u4", (n,))
        targets = read("<u4", (n,))
        subsets = read("<u4", (n, s))
        if codes.size and codes.max() >= config.n_mods:
            raise DataError(f"{path}: modification code out of range")
        if targets.size and targets.max() >= config.gallery_size:
            raise DataError(f"{path}: target index out of range")
        tables.append(TripletTable(refs, codes, targets, subsets))
    if offset != len(body):
        raise DataError(f"{path}: {len(body) - offset} trailing bytes")
    return SynthDataset(config, tables[0], tables[1], gallery, mod_embeddings)
