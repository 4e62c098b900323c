"""Dataset loading, synthetic data and membership masks."""
from __future__ import annotations

import csv
import dataclasses
import gzip
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import EmptyDataset, FormatError
from .fsutil import atomic_write_bytes, atomic_write_text
from .model import Record

IDX_LABELS = 0x00000801
IDX_IMAGES = 0x00000803
DATA_MAGIC = b"IHADAT1"


@dataclasses.dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    name: str = "dataset"
    num_classes: int = 0
    schema_hash: str = ""

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=np.float64)
        y = np.ascontiguousarray(self.y)
        if X.ndim != 2 or y.ndim != 1 or X.shape[0] != y.shape[0]:
            raise FormatError("dataset needs a 2-D feature array and one label per row")
        if not np.all(np.isfinite(X)):
            raise FormatError("dataset features must be finite")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.X.shape[0]

    def __getitem__(self, i) -> Record:
        return Record(self.X[i], self.y[i].item())

    @property
    def feature_dim(self) -> int:
        return self.X.shape[1]

    @property
    def records(self) -> list[Record]:
        return [self[i] for i in range(len(self))]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return dataclasses.replace(self, X=self.X[idx], y=self.y[idx])

    def save(self, path) -> None:
        """Write the internal binary cache format."""
        header = json.dumps(
            {
                "name": self.name,
                "num_classes": int(self.num_classes),
                "schema_hash": self.schema_hash,
                "n": len(self),
                "d": self.feature_dim,
                "y_dtype": self.y.dtype.str,
            },
            sort_keys=True,
        ).encode()
        y = self.y.astype(self.y.dtype.newbyteorder("<"))
        payload = DATA_MAGIC + struct.pack("<Q", len(header)) + header
        payload += self.X.astype("<f8").tobytes() + y.tobytes()
        path = Path(path)
        atomic_write_bytes(path, payload)

    @classmethod
    def load(cls, path) -> "Dataset":
        raw = Path(path).read_bytes()
        if raw[: len(DATA_MAGIC)] != DATA_MAGIC:
            raise FormatError(f"{path}: not a dataset cache file")
        pos = len(DATA_MAGIC)
        (hlen,) = struct.unpack("<Q", raw[pos : pos + 8])
        pos += 8
        meta = json.loads(raw[pos : pos + hlen])
        pos += hlen
        n, d = meta["n"], meta["d"]
        ydt = np.dtype(meta["y_dtype"]).newbyteorder("<")
        if len(raw) != pos + 8 * n * d + ydt.itemsize * n:
            raise FormatError(f"{path}: payload size does not match header")
        X = np.frombuffer(raw, dtype="<f8", count=n * d, offset=pos).reshape(n, d)
        y = np.frombuffer(raw, dtype=ydt, count=n, offset=pos + 8 * n * d)
        return cls(X, y.astype(np.dtype(meta["y_dtype"])), meta["name"], meta["num_classes"], meta["schema_hash"])


def _read_bytes(path) -> bytes:
    path = Path(path)
    data = path.read_bytes()
    if path.suffix == ".gz":
        data = gzip.decompress(data)
    return data


def _parse_idx(raw: bytes, expected_magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise FormatError(f"{path}: IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise FormatError(f"{path}: truncated IDX dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    count = int(np.prod(dims))
    if len(raw) != head + count:
        raise FormatError(f"{path}: IDX payload has {len(raw) - head} bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def load_idx(images_path, labels_path, odd_even: bool = False, name: str | None = None) -> Dataset:
    """Read an IDX image/label pair (MNIST layout). Pixels are scaled to [0, 1].

    With ``odd_even`` the labels become real targets 0.0 (even digit) and
    1.0 (odd digit), for a single-output squared-loss model.
    """
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    if odd_even:
        y = (labels % 2).astype(np.float64)
        num_classes = 2
    else:
        y = labels.astype(np.int64)
        num_classes = int(y.max()) + 1 if y.size else 0
    return Dataset(X, y, name or Path(images_path).name, num_classes)


def load_csv_tabular(path, label_column: str = "label", name: str | None = None) -> Dataset:
    """Read a comma-separated file with a header row; labels become class indices."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if label_column not in header:
            raise FormatError(f"{path}: no column named {label_column!r}")
        li = header.index(label_column)
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: {len(row)} fields, header has {len(header)}")
            try:
                labels.append(int(float(row[li])))
                feats.append([float(v) for j, v in enumerate(row) if j != li])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not labels:
        raise EmptyDataset(f"{path}: no data rows")
    y = np.asarray(labels, dtype=np.int64)
    if y.min() < 0:
        raise FormatError(f"{path}: negative class label")
    schema = hashlib.sha256((",".join(header) + "|" + label_column).encode()).hexdigest()
    return Dataset(np.asarray(feats), y, name or Path(path).stem, int(y.max()) + 1, schema)


def synth_tabular(
    seed: int,
    n: int,
    feature_dim: int,
    num_classes: int,
    class_separation: float = 0.5,
    base_rate: float = 0.2,
    label_noise: float = 0.0,
) -> Dataset:
    """Sparse binary features drawn from per-class Bernoulli prototypes.

    Each class owns a random 0/1 prototype; feature ``j`` of a class-``c``
    record is on with probability ``base_rate + class_separation *
    (prototype[c, j] - base_rate)``. ``label_noise`` relabels that fraction
    of records uniformly at random, which makes memorisation visible.
    """
    if n <= 0:
        raise EmptyDataset("n must be positive")
    if feature_dim <= 0 or num_classes <= 0:
        raise ValueError("feature_dim and num_classes must be positive")
    if not 0.0 <= class_separation <= 1.0:
        raise ValueError("class_separation must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    prototypes = rng.random((num_classes, feature_dim)) < 0.5
    probs = base_rate + class_separation * (prototypes - base_rate)
    y = rng.integers(0, num_classes, size=n)
    X = (rng.random((n, feature_dim)) < probs[y]).astype(np.float64)
    if label_noise > 0:
        flip = rng.random(n) < label_noise
        y = np.where(flip, rng.integers(0, num_classes, size=n), y)
    return Dataset(X, y.astype(np.int64), f"synth-{seed}", num_classes)


_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = x + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return z ^ (z >> np.uint64(31))


def counter_uniforms(seed: int, indices) -> np.ndarray:
    """Uniform(0, 1) draws keyed by ``(seed, index)``; each index is independent of the others."""
    idx = np.asarray(indices, dtype=np.uint64)
    key = _splitmix64(np.asarray([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))[0]
    bits = _splitmix64(_splitmix64(idx ^ key) + key)
    return (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53


@dataclasses.dataclass(frozen=True)
class MembershipMask:
    bits: np.ndarray
    gamma: float
    seed: int

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    def __len__(self) -> int:
        return self.bits.size

    @property
    def members(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    @property
    def non_members(self) -> np.ndarray:
        return np.flatnonzero(~self.bits)

    def dumps(self) -> str:
        return f"seed={self.seed},gamma={self.gamma!r}\n" + "".join("1" if b else "0" for b in self.bits) + "\n"

    @classmethod
    def loads(cls, text: str) -> "MembershipMask":
        lines = text.splitlines()
        if len(lines) < 2 or not lines[0].startswith("seed="):
            raise FormatError("mask file needs a 'seed=...,gamma=...' line followed by 0/1 characters")
        try:
            fields = dict(part.split("=", 1) for part in lines[0].split(","))
            seed, gamma = int(fields["seed"]), float(fields["gamma"])
        except (KeyError, ValueError) as exc:
            raise FormatError(f"bad mask header: {lines[0]!r}") from exc
        body = lines[1].strip()
        if set(body) - {"0", "1"}:
            raise FormatError("mask body may only contain 0 and 1")
        return cls(np.frombuffer(body.encode(), dtype=np.uint8) == ord("1"), gamma, seed)

    def save(self, path) -> None:
        path = Path(path)
        atomic_write_text(path, self.dumps())

    @classmethod
    def load(cls, path) -> "MembershipMask":
        return cls.loads(Path(path).read_text())


def bernoulli_split(dataset, gamma: float = 0.5, seed: int = 0) -> MembershipMask:
    """Mark each record a member independently with probability ``gamma``.

    Bits come from a counter-based generator keyed by ``(seed, index)``, so
    appending records never changes earlier bits.
    """
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie strictly between 0 and 1")
    n = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    return MembershipMask(counter_uniforms(seed, np.arange(n)) < gamma, float(gamma), int(seed))
