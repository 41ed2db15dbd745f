"""Sparse datasets: LIBSVM parsing, fetching/caching, splitting, batching."""

from __future__ import annotations

import hashlib
import io
import math
import os
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np
from scipy import sparse

from .errors import FetchError, ValidationError

CACHE_ENV_VAR = "SCHEDLAB_CACHE"


def _seed_entropy(seed: int) -> int:
    """Map a possibly negative 64-bit seed to SeedSequence entropy."""
    return int(seed) & 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class SparseExample:
    """One labelled sparse row; indices are 0-based and strictly ascending."""

    label: float
    indices: np.ndarray
    values: np.ndarray


class SparseDataset:
    """Labelled sparse feature rows with dimension metadata.

    ``X`` is CSR of shape (n_examples, n_features); file-format feature
    indices are 1-based and are mapped to 0-based columns at parse time.
    Instances are immutable after construction and safe to share.
    """

    def __init__(
        self,
        X: sparse.csr_matrix,
        y: np.ndarray,
        name: str = "",
        label_map: dict[float, float] | None = None,
    ):
        X = sparse.csr_matrix(X)
        y = np.asarray(y, dtype=np.float64)
        if X.shape[0] == 0:
            raise ValidationError("dataset must contain at least one example")
        if y.shape != (X.shape[0],):
            raise ValidationError(
                f"label vector shape {y.shape} does not match {X.shape[0]} rows"
            )
        if X.nnz and not np.isfinite(X.data).all():
            raise ValidationError("feature values must be finite")
        if not np.isfinite(y).all():
            raise ValidationError("labels must be finite")
        X.sort_indices()
        self.X = X
        self.y = y
        self.y.setflags(write=False)
        self.name = name
        self.label_map = dict(label_map) if label_map else None

    @property
    def n_examples(self) -> int:
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def example(self, i: int) -> SparseExample:
        row = self.X.getrow(i)
        return SparseExample(
            label=float(self.y[i]),
            indices=row.indices.copy(),
            values=row.data.copy(),
        )

    def class_counts(self) -> dict[float, int]:
        labels, counts = np.unique(self.y, return_counts=True)
        return {float(l): int(c) for l, c in zip(labels, counts)}

    def _binary_counts(self) -> tuple[int, int]:
        counts = self.class_counts()
        if len(counts) != 2:
            raise ValidationError(
                f"expected exactly 2 distinct labels, got {sorted(counts)}"
            )
        lo, hi = sorted(counts)
        return counts[hi], counts[lo]

    @property
    def positive_count(self) -> int:
        return self._binary_counts()[0]

    @property
    def negative_count(self) -> int:
        return self._binary_counts()[1]

    def subset(self, indices: Sequence[int], name: str | None = None) -> "SparseDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return SparseDataset(
            self.X[idx], self.y[idx],
            name=self.name if name is None else name,
            label_map=self.label_map,
        )

    def same_content(self, other: "SparseDataset") -> bool:
        """Value-level equality: labels, features, and dimension (not name)."""
        if self.X.shape != other.X.shape or not np.array_equal(self.y, other.y):
            return False
        a, b = self.X.tocsr(), other.X.tocsr()
        return (
            np.array_equal(a.indptr, b.indptr)
            and np.array_equal(a.indices, b.indices)
            and np.array_equal(a.data, b.data)
        )

    def __repr__(self) -> str:
        return (
            f"SparseDataset({self.name!r}, n={self.n_examples}, "
            f"d={self.n_features}, nnz={self.X.nnz})"
        )


def parse_libsvm(
    source: str | Path | bytes | IO[str],
    n_features: int | None = None,
    name: str = "",
) -> SparseDataset:
    """Parse LIBSVM text lines ``<label> <idx>:<val> ...`` into a dataset.

    Blank lines and ``#`` comments are skipped.  Feature indices must be
    positive and strictly ascending within a line (duplicates are an
    error).  The dimension is the maximum index observed unless
    ``n_features`` overrides it.
    """
    if isinstance(source, (str, Path)):
        stream: IO[str] = open(source, "r", encoding="ascii")
        close = True
        if not name:
            name = Path(source).name
    elif isinstance(source, bytes):
        stream = io.StringIO(source.decode("ascii"))
        close = False
    else:
        stream = source
        close = False

    labels: list[float] = []
    data: list[float] = []
    indices: list[int] = []
    indptr: list[int] = [0]
    max_index = 0
    try:
        for lineno, raw in enumerate(stream, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            try:
                labels.append(float(tokens[0]))
            except ValueError:
                raise ValidationError(
                    f"line {lineno}: malformed label {tokens[0]!r}"
                ) from None
            prev = 0
            for tok in tokens[1:]:
                try:
                    idx_s, val_s = tok.split(":", 1)
                    idx = int(idx_s)
                    val = float(val_s)
                except ValueError:
                    raise ValidationError(
                        f"line {lineno}: malformed feature token {tok!r}"
                    ) from None
                if idx < 1:
                    raise ValidationError(
                        f"line {lineno}: feature index must be >= 1, got {idx}"
                    )
                if idx == prev:
                    raise ValidationError(
                        f"line {lineno}: duplicate feature index {idx}"
                    )
                if idx < prev:
                    raise ValidationError(
                        f"line {lineno}: feature indices must ascend "
                        f"({idx} after {prev})"
                    )
                prev = idx
                indices.append(idx - 1)
                data.append(val)
            max_index = max(max_index, prev)
            indptr.append(len(data))
    finally:
        if close:
            stream.close()

    if not labels:
        raise ValidationError("no examples found in LIBSVM input")
    dim = max_index if n_features is None else int(n_features)
    if dim < max_index:
        raise ValidationError(
            f"declared dimension {dim} below max observed index {max_index}"
        )
    dim = max(dim, 1)
    X = sparse.csr_matrix(
        (
            np.asarray(data, dtype=np.float64),
            np.asarray(indices, dtype=np.int32),
            np.asarray(indptr, dtype=np.int64),
        ),
        shape=(len(labels), dim),
    )
    return SparseDataset(X, np.asarray(labels), name=name)


def serialize_libsvm(dataset: SparseDataset) -> str:
    """Render a dataset back to LIBSVM text (1-based indices).

    Uses ``repr`` for floats so that parse(serialize(ds)) reproduces the
    dataset value-for-value.
    """
    out: list[str] = []
    X = dataset.X
    for i in range(dataset.n_examples):
        lo, hi = X.indptr[i], X.indptr[i + 1]
        feats = " ".join(
            f"{int(j) + 1}:{v!r}" for j, v in zip(X.indices[lo:hi], X.data[lo:hi])
        )
        label = repr(float(dataset.y[i]))
        out.append(f"{label} {feats}".rstrip())
    return "\n".join(out) + "\n"


@dataclass(frozen=True)
class SplitSpec:
    """Seeded shuffle-then-prefix split; train gets floor(fraction * n)."""

    train_fraction: float = 0.8
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self) -> None:
        if not (0.0 < self.train_fraction < 1.0):
            raise ValidationError(
                f"train_fraction must lie in (0, 1), got {self.train_fraction}"
            )


def split(
    dataset: SparseDataset, spec: SplitSpec = SplitSpec()
) -> tuple[SparseDataset, SparseDataset]:
    """Split into (train, test) with sizes floor(f*n) and n - floor(f*n)."""
    n = dataset.n_examples
    if n < 2:
        raise ValidationError("need at least 2 examples to split")
    if spec.shuffle:
        order = np.random.default_rng(_seed_entropy(spec.seed)).permutation(n)
    else:
        order = np.arange(n)
    # tiny nudge guards against float droop on exact products like 0.7 * 10
    k = math.floor(spec.train_fraction * n + 1e-9)
    train = dataset.subset(order[:k], name=f"{dataset.name}[train]")
    test = dataset.subset(order[k:], name=f"{dataset.name}[test]")
    return train, test


def normalize_labels(dataset: SparseDataset) -> SparseDataset:
    """Map the two raw label values to {0, 1}; smaller raw value becomes 0.

    The mapping is recorded on the returned dataset's ``label_map``.
    """
    distinct = np.unique(dataset.y)
    if distinct.size != 2:
        raise ValidationError(
            f"label normalization needs exactly 2 distinct labels, "
            f"got {distinct.tolist()}"
        )
    lo, hi = float(distinct[0]), float(distinct[1])
    y = np.where(dataset.y == hi, 1.0, 0.0)
    return SparseDataset(
        dataset.X, y, name=dataset.name, label_map={lo: 0.0, hi: 1.0}
    )


def minibatch_indices(
    n: int, batch_size: int, seed: int, epoch: int
) -> list[np.ndarray]:
    """Seeded permutation of 0..n-1 chunked into batches.

    The permutation stream is derived from ``(seed, epoch)`` so every
    epoch reshuffles deterministically; the final short chunk is kept.
    """
    if n < 1 or batch_size < 1:
        raise ValidationError(f"need n >= 1 and batch_size >= 1, got {n}, {batch_size}")
    rng = np.random.default_rng([_seed_entropy(seed), int(epoch)])
    perm = rng.permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def default_cache_dir() -> Path:
    env = os.environ.get(CACHE_ENV_VAR)
    if env:
        return Path(env)
    return Path.home() / ".cache" / "schedlab"


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def fetch_dataset(
    name: str,
    url: str,
    sha256: str | None = None,
    cache_dir: str | Path | None = None,
    offline: bool = False,
    retries: int = 3,
    timeout: float = 30.0,
) -> Path:
    """Download a dataset file into the cache and return its local path.

    Layout: ``<cache>/<name>/<sha256-prefix>/<name>.libsvm`` plus a
    ``.meta`` text file recording url, checksum, and fetch timestamp.
    A cache hit never touches the network.  When ``sha256`` is given the
    file is verified; a mismatching download is quarantined (renamed to
    ``*.quarantine``) and rejected.  ``offline=True`` uses the cache only.
    Concurrent fetchers serialize through an exclusive lock file.
    """
    if not name or any(ch in name for ch in "/\\"):
        raise ValidationError(f"bad dataset name {name!r}")
    cache = Path(cache_dir) if cache_dir is not None else default_cache_dir()
    prefix = sha256[:12] if sha256 else "unverified"
    entry_dir = cache / name / prefix
    target = entry_dir / f"{name}.libsvm"
    meta = entry_dir / f"{name}.meta"

    if target.exists():
        if sha256 is None or _sha256_file(target) == sha256:
            return target
        target.rename(target.with_suffix(".libsvm.quarantine"))

    if offline:
        raise FetchError(
            f"dataset {name!r} not in cache at {target} and offline mode is on"
        )

    entry_dir.mkdir(parents=True, exist_ok=True)
    lock = entry_dir / f"{name}.lock"
    deadline = time.monotonic() + timeout
    while True:
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            os.close(fd)
            break
        except FileExistsError:
            if time.monotonic() > deadline:
                raise FetchError(f"timed out waiting for lock {lock}") from None
            time.sleep(0.05)
    try:
        if target.exists() and (sha256 is None or _sha256_file(target) == sha256):
            return target  # another process fetched it while we waited
        tmp = entry_dir / f"{name}.libsvm.partial"
        last_err: Exception | None = None
        for attempt in range(max(1, retries)):
            try:
                digest = hashlib.sha256()
                with urllib.request.urlopen(url, timeout=timeout) as resp, open(
                    tmp, "wb"
                ) as out:
                    for chunk in iter(lambda: resp.read(1 << 20), b""):
                        digest.update(chunk)
                        out.write(chunk)
                break
            except (urllib.error.URLError, OSError) as exc:
                last_err = exc
                if tmp.exists():
                    tmp.unlink()
                time.sleep(0.2 * (attempt + 1))
        else:
            raise FetchError(
                f"failed to fetch {url!r} after {retries} attempts: {last_err}"
            )
        actual = digest.hexdigest()
        if sha256 is not None and actual != sha256:
            quarantine = entry_dir / f"{name}.libsvm.quarantine"
            os.replace(tmp, quarantine)
            raise FetchError(
                f"checksum mismatch for {name}: expected {sha256}, got {actual}; "
                f"file quarantined at {quarantine}"
            )
        os.replace(tmp, target)
        meta.write_text(
            f"url={url}\nsha256={actual}\nfetched_at={time.strftime('%Y-%m-%dT%H:%M:%SZ', time.gmtime())}\n"
        )
        return target
    finally:
        lock.unlink(missing_ok=True)


def synthetic_blobs(
    n: int,
    n_features: int = 2,
    seed: int = 0,
    separation: float = 3.0,
    scale: float = 1.0,
    name: str | None = None,
) -> SparseDataset:
    """Two seeded Gaussian clusters with labels in {0, 1}.

    Class centers sit at +/- separation/2 along the normalized all-ones
    direction; class sizes differ by at most one.
    """
    if n < 2 or n_features < 1:
        raise ValidationError(f"need n >= 2 and n_features >= 1, got {n}, {n_features}")
    rng = np.random.default_rng([_seed_entropy(seed), 0xB10B])
    direction = np.ones(n_features) / math.sqrt(n_features)
    y = np.zeros(n)
    y[n // 2 :] = 1.0
    centers = np.where(y[:, None] > 0.5, 0.5 * separation, -0.5 * separation)
    X = centers * direction[None, :] + scale * rng.standard_normal((n, n_features))
    ds_name = name if name is not None else f"blobs-{n}x{n_features}-s{seed}"
    return SparseDataset(sparse.csr_matrix(X), y, name=ds_name)
