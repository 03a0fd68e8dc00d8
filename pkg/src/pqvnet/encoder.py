"""Snapshot-to-image encoding, dataset assembly, and on-disk formats.

An operating point becomes an N x N x 3 image: channel 0 holds normalized
absolute active powers (net bus demand on the diagonal, directed line flows
off it), channel 1 the same for reactive power, channel 2 voltage magnitudes
on the diagonal and complex voltage-drop magnitudes across lines off it.
Normalization constants are channel-wide maxima taken from the training
split, and entries are clipped at 1.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .grid import GridModel, Snapshot

MAGIC = b"PQVD"
FORMAT_VERSION = 1
N_CHANNELS = 3
SPLIT_NAMES = ("train", "val", "test")


class DatasetError(Exception):
    """Dataset assembly or (de)serialization failure."""


@dataclass(frozen=True)
class NormConstants:
    max_p: float
    max_q: float
    max_v: float

    def __post_init__(self):
        if not (self.max_p > 0 and self.max_q > 0 and self.max_v > 0):
            raise DatasetError("normalization constants must be positive (all-zero channel?)")


@dataclass(frozen=True)
class Batch:
    images: np.ndarray  # (b, N, N, 3)
    labels: np.ndarray  # (b, 2) one-hot, [1,0] = unsafe
    indices: np.ndarray  # (b,) dataset indices


def compute_norms(snapshots: Sequence[Snapshot]) -> NormConstants:
    """Channel-wide maxima over a snapshot population.

    P pools |net bus demand| and |directed line flows|; Q likewise; V pools
    voltage magnitudes and line voltage-drop magnitudes into one shared
    maximum.  Raises :class:`DatasetError` if a channel would be all zero.
    """
    if len(snapshots) == 0:
        raise DatasetError("cannot compute norms from an empty population")
    max_p = max(
        max(np.abs(s.p_net).max(), np.abs(s.p_from).max(initial=0.0), np.abs(s.p_to).max(initial=0.0))
        for s in snapshots
    )
    max_q = max(
        max(np.abs(s.q_net).max(), np.abs(s.q_from).max(initial=0.0), np.abs(s.q_to).max(initial=0.0))
        for s in snapshots
    )
    max_v = max(max(np.abs(s.v).max(), s.v_drop.max(initial=0.0)) for s in snapshots)
    return NormConstants(max_p=float(max_p), max_q=float(max_q), max_v=float(max_v))


def _encode(snapshot: Snapshot, n: int, line_ends: np.ndarray, norms: NormConstants) -> np.ndarray:
    img = np.zeros((n, n, N_CHANNELS))
    d = np.arange(n)
    img[d, d, 0] = np.abs(snapshot.p_net) / norms.max_p
    img[d, d, 1] = np.abs(snapshot.q_net) / norms.max_q
    img[d, d, 2] = np.abs(snapshot.v) / norms.max_v
    if line_ends.shape[0]:
        i = line_ends[:, 0].astype(np.intp)
        j = line_ends[:, 1].astype(np.intp)
        img[i, j, 0] = np.abs(snapshot.p_from) / norms.max_p
        img[j, i, 0] = np.abs(snapshot.p_to) / norms.max_p
        img[i, j, 1] = np.abs(snapshot.q_from) / norms.max_q
        img[j, i, 1] = np.abs(snapshot.q_to) / norms.max_q
        vd = snapshot.v_drop / norms.max_v
        img[i, j, 2] = vd
        img[j, i, 2] = vd
    return np.minimum(img, 1.0)


def encode_snapshot(snapshot: Snapshot, grid: GridModel, norms: NormConstants) -> np.ndarray:
    """Encode one solved operating point against the given grid topology."""
    ends = np.array([(ln.from_bus, ln.to_bus) for ln in grid.lines if ln.in_service], dtype=np.uint32)
    flows_ok = all(ln.in_service for ln in grid.lines)
    if not flows_ok:
        # flow arrays are aligned with the full line list; restrict them
        mask = np.array([ln.in_service for ln in grid.lines], dtype=bool)
        snapshot = Snapshot(
            v=snapshot.v,
            theta=snapshot.theta,
            p_net=snapshot.p_net,
            q_net=snapshot.q_net,
            p_from=snapshot.p_from[mask],
            p_to=snapshot.p_to[mask],
            q_from=snapshot.q_from[mask],
            q_to=snapshot.q_to[mask],
            v_drop=snapshot.v_drop[mask],
            p_load=snapshot.p_load,
            q_load=snapshot.q_load,
            p_gen=snapshot.p_gen,
            iterations=snapshot.iterations,
        )
    return _encode(snapshot, grid.n_buses, ends, norms)


def split_dataset(
    size: int, ratios: tuple[float, float, float] = (0.7, 0.1, 0.2), seed: int = 0
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Shuffle 0..size-1 with the seed and cut train/val/test index arrays.

    Split sizes are the rounded ratio shares (last split takes the
    remainder), so each is within one sample of its exact share.
    """
    if size < 10:
        raise DatasetError("need at least 10 samples to split")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise DatasetError("ratios must be three non-negatives summing to 1")
    n_train = int(round(ratios[0] * size))
    n_val = int(round(ratios[1] * size))
    if n_train + n_val > size:
        raise DatasetError("degenerate split sizes")
    perm = np.random.default_rng(seed).permutation(size)
    return (
        np.sort(perm[:n_train]),
        np.sort(perm[n_train : n_train + n_val]),
        np.sort(perm[n_train + n_val :]),
    )


@dataclass
class LabeledDataset:
    """Snapshots, security labels, split membership, and encoding constants.

    Images are never materialized for the whole collection; they are encoded
    per batch on demand.  ``labels`` is (S, 2) one-hot with the unsafe class
    first.  ``line_ends`` pins the topology so a stored dataset can be
    encoded without the grid file.
    """

    n_buses: int
    line_ends: np.ndarray  # (L, 2) uint32
    snapshots: list[Snapshot]
    is_safe: np.ndarray  # (S,) uint8
    min_damping: np.ndarray  # (S,) float64 oracle margin
    worst_contingency: np.ndarray  # (S,) int32, -1 for base case
    norms: NormConstants
    splits: dict[str, np.ndarray]

    @property
    def size(self) -> int:
        return len(self.snapshots)

    @property
    def labels(self) -> np.ndarray:
        y = np.zeros((self.size, 2))
        y[np.arange(self.size), self.is_safe.astype(int)] = 1.0
        return y

    def encode(self, idx: int) -> np.ndarray:
        return _encode(self.snapshots[idx], self.n_buses, self.line_ends, self.norms)

    def safe_share(self, split: str | None = None) -> float:
        sel = self.is_safe if split is None else self.is_safe[self.splits[split]]
        if sel.size == 0:
            raise DatasetError(f"split {split!r} is empty")
        return float(sel.mean())


def build_dataset(
    grid: GridModel,
    snapshots: Sequence[Snapshot],
    labels: Sequence,
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
    norm_scope: str = "train",
) -> LabeledDataset:
    """Assemble snapshots plus security labels into a split, normalized dataset.

    ``norm_scope`` chooses the population for the normalization maxima:
    "train" (default; keeps held-out data out of the constants) or "all".
    """
    if len(snapshots) != len(labels):
        raise DatasetError("snapshot/label count mismatch")
    if norm_scope not in ("train", "all"):
        raise DatasetError(f"unknown norm_scope {norm_scope!r}")
    train, val, test = split_dataset(len(snapshots), ratios=ratios, seed=seed)
    pop = [snapshots[i] for i in train] if norm_scope == "train" else list(snapshots)
    norms = compute_norms(pop)
    ends = np.array([(ln.from_bus, ln.to_bus) for ln in grid.lines], dtype=np.uint32)
    worst = np.array([-1 if lab.worst_contingency == "base" else int(lab.worst_contingency) for lab in labels], dtype=np.int32)
    return LabeledDataset(
        n_buses=grid.n_buses,
        line_ends=ends,
        snapshots=list(snapshots),
        is_safe=np.array([1 if lab.is_safe else 0 for lab in labels], dtype=np.uint8),
        min_damping=np.array([lab.min_damping for lab in labels], dtype=float),
        worst_contingency=worst,
        norms=norms,
        splits={"train": train, "val": val, "test": test},
    )


def batch_iter(
    dataset: LabeledDataset,
    split: str,
    batch_size: int,
    seed: int | Sequence[int] | None = None,
    shuffle: bool = False,
    dtype=np.float32,
) -> Iterator[Batch]:
    """Yield batches covering the split exactly once (last one may be short)."""
    if split not in dataset.splits:
        raise DatasetError(f"unknown split {split!r}")
    if batch_size < 1:
        raise DatasetError("batch_size must be positive")
    idx = dataset.splits[split]
    if shuffle:
        idx = np.random.default_rng(seed).permutation(idx)
    labels = dataset.labels
    for lo in range(0, idx.size, batch_size):
        sel = idx[lo : lo + batch_size]
        images = np.stack([dataset.encode(int(i)) for i in sel]).astype(dtype)
        yield Batch(images=images, labels=labels[sel].astype(dtype), indices=sel.copy())


# ---------------------------------------------------------------------------
# binary serialization (little-endian throughout)
# ---------------------------------------------------------------------------


def _w_arr(fh, arr: np.ndarray, dtype: str) -> None:
    fh.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes())


def _r_arr(fh, count: int, dtype: str) -> np.ndarray:
    dt = np.dtype(dtype)
    raw = fh.read(count * dt.itemsize)
    if len(raw) != count * dt.itemsize:
        raise DatasetError("truncated dataset file")
    return np.frombuffer(raw, dtype=dt).copy()


def write_dataset(dataset: LabeledDataset, path: str | Path) -> None:
    """Serialize to the binary dataset format (raw snapshots, not images)."""
    n, s = dataset.n_buses, dataset.size
    nl = dataset.line_ends.shape[0]
    ng = dataset.snapshots[0].p_gen.size if s else 0
    with open(Path(path), "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IIIIII", FORMAT_VERSION, n, s, N_CHANNELS, nl, ng))
        fh.write(struct.pack("<ddd", dataset.norms.max_p, dataset.norms.max_q, dataset.norms.max_v))
        for name in SPLIT_NAMES:
            idx = dataset.splits[name]
            fh.write(struct.pack("<I", idx.size))
            _w_arr(fh, idx, "<u4")
        _w_arr(fh, dataset.line_ends, "<u4")
        for i in range(s):
            snap = dataset.snapshots[i]
            fh.write(struct.pack("<BdiI", int(dataset.is_safe[i]), float(dataset.min_damping[i]),
                                 int(dataset.worst_contingency[i]), snap.iterations))
            for arr in (snap.v, snap.theta, snap.p_net, snap.q_net, snap.p_load, snap.q_load):
                _w_arr(fh, arr, "<f8")
            _w_arr(fh, snap.p_gen, "<f8")
            for arr in (snap.p_from, snap.p_to, snap.q_from, snap.q_to, snap.v_drop):
                _w_arr(fh, arr, "<f8")


def read_dataset(path: str | Path) -> LabeledDataset:
    """Read a dataset written by :func:`write_dataset`; strict on magic/version."""
    with open(Path(path), "rb") as fh:
        if fh.read(4) != MAGIC:
            raise DatasetError("not a dataset file (bad magic)")
        head = fh.read(24)
        if len(head) != 24:
            raise DatasetError("truncated dataset header")
        version, n, s, channels, nl, ng = struct.unpack("<IIIIII", head)
        if version != FORMAT_VERSION:
            raise DatasetError(f"unsupported dataset version {version}")
        if channels != N_CHANNELS:
            raise DatasetError(f"expected {N_CHANNELS} channels, file has {channels}")
        max_p, max_q, max_v = struct.unpack("<ddd", fh.read(24))
        splits = {}
        for name in SPLIT_NAMES:
            (cnt,) = struct.unpack("<I", fh.read(4))
            splits[name] = _r_arr(fh, cnt, "<u4").astype(np.int64)
        line_ends = _r_arr(fh, nl * 2, "<u4").reshape(nl, 2)
        snapshots = []
        is_safe = np.zeros(s, dtype=np.uint8)
        min_damping = np.zeros(s)
        worst = np.zeros(s, dtype=np.int32)
        rec_head = struct.Struct("<BdiI")
        for i in range(s):
            raw = fh.read(rec_head.size)
            if len(raw) != rec_head.size:
                raise DatasetError("truncated dataset record")
            is_safe[i], min_damping[i], worst[i], iters = rec_head.unpack(raw)
            v, theta, p_net, q_net, p_load, q_load = (_r_arr(fh, n, "<f8") for _ in range(6))
            p_gen = _r_arr(fh, ng, "<f8")
            p_from, p_to, q_from, q_to, v_drop = (_r_arr(fh, nl, "<f8") for _ in range(5))
            snapshots.append(
                Snapshot(
                    v=v, theta=theta, p_net=p_net, q_net=q_net,
                    p_from=p_from, p_to=p_to, q_from=q_from, q_to=q_to, v_drop=v_drop,
                    p_load=p_load, q_load=q_load, p_gen=p_gen, iterations=int(iters),
                )
            )
        if fh.read(1) != b"":
            raise DatasetError("trailing bytes after dataset records")
    return LabeledDataset(
        n_buses=n,
        line_ends=line_ends,
        snapshots=snapshots,
        is_safe=is_safe,
        min_damping=min_damping,
        worst_contingency=worst,
        norms=NormConstants(max_p, max_q, max_v),
        splits=splits,
    )


def write_ppm(rgb: np.ndarray, path: str | Path) -> None:
    """Write an (H, W, 3) uint8 array as a binary PPM (P6) file."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise DatasetError("write_ppm expects an (H, W, 3) uint8 array")
    h, w = rgb.shape[:2]
    with open(Path(path), "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(rgb).tobytes())


def image_to_ppm(image: np.ndarray, path: str | Path) -> None:
    """Export one encoded [0,1] image as an 8-bit PPM raster (P->R, Q->G, V->B)."""
    rgb = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    write_ppm(rgb, path)
