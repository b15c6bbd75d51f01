"""Synthetic task generators, record containers, binary/CSV ingestion,
splits, and class balancing.

Two generators make the model's mechanisms falsifiable at desk scale:

* correlation task: the two classes differ only in cross-sensor correlation
  structure appearing in the second half of each record; per-sensor
  marginals match exactly, so per-channel features carry no signal.
* long-range task: the label is decided by a brief marker in the first 1%
  of timesteps, followed by distractor noise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

TASK_KINDS = {"binary": 0, "multiclass": 1, "multilabel": 2}
_KIND_INDEX = 0     # label stored as a class index
_KIND_BITMASK = 1   # label stored as a multilabel bitmask

BSG1_MAGIC = b"BSG1"
BSG1_VERSION = 1


class ParseError(ValueError):
    """Malformed dataset file; message carries the byte offset."""


@dataclass
class SignalRecord:
    x: np.ndarray            # (N, T_max, M), zero-padded past true_length
    y: object                # int class index, or (C,) multihot array
    mask: np.ndarray         # (T_max,) bool, true on [0, true_length)
    true_length: int
    record_id: str

    def __post_init__(self):
        if self.x.ndim != 3:
            raise ValueError(f"x must be (N, T, M), got {self.x.shape}")
        t_max = self.x.shape[1]
        if not 1 <= self.true_length <= t_max:
            raise ValueError(f"true_length {self.true_length} outside [1, {t_max}]")
        expected = np.arange(t_max) < self.true_length
        if not np.array_equal(self.mask, expected):
            raise ValueError("mask must be true exactly on [0, true_length)")
        if self.true_length < t_max and np.any(self.x[:, self.true_length:] != 0):
            raise ValueError("padded region of x must be zero")


@dataclass
class Dataset:
    records: list
    task: str
    n_classes: int

    def __post_init__(self):
        if self.task not in TASK_KINDS:
            raise ValueError(f"task must be one of {sorted(TASK_KINDS)}")

    def __len__(self) -> int:
        return len(self.records)

    @property
    def n_sensors(self) -> int:
        return self.records[0].x.shape[0]

    @property
    def input_dim(self) -> int:
        return self.records[0].x.shape[2]

    @property
    def t_max(self) -> int:
        return self.records[0].x.shape[1]

    def class_indices(self) -> np.ndarray:
        """Integer labels; multilabel datasets have no single class index."""
        if self.task == "multilabel":
            raise ValueError("multilabel records have no single class index")
        return np.array([r.y for r in self.records], dtype=np.int64)

    def labels_matrix(self) -> np.ndarray:
        if self.task == "multilabel":
            return np.stack([np.asarray(r.y, dtype=np.int64) for r in self.records])
        return self.class_indices()


def collate(records, dtype=np.float64):
    """Stack records into batch arrays (x, y, mask)."""
    x = np.stack([r.x for r in records]).astype(dtype)
    mask = np.stack([r.mask for r in records]).astype(dtype)
    first = records[0]
    if np.ndim(first.y) == 0:
        y = np.array([int(r.y) for r in records], dtype=np.int64)
    else:
        y = np.stack([np.asarray(r.y, dtype=np.int64) for r in records])
    return x, y, mask


@dataclass
class DatasetSpec:
    kind: str                      # "correlation" | "longrange"
    n_sensors: int = 6
    t_len: int = 2048
    input_dim: int = 1
    n_classes: int = 2
    size: int = 100
    seed: int = 0
    class_balance: float = 0.5
    # every stream mixes a fast AR, a slower AR (fresh evidence per pooling
    # interval), and a Gaussian level held constant over each record half
    # (a persistent signature that is invisible to within-half sample
    # correlations); identical mixture in both classes keeps marginals flat
    noise_phi: float = 0.6
    slow_phi: float = 0.93
    fast_frac: float = 0.55
    slow_frac: float = 0.2
    level_frac: float = 0.25
    clique_corr: float = 0.95      # pairwise correlation inside the active clique
    clique_size: int = 0           # 0 -> max(2, n_sensors // 2)
    normalize: bool = True         # scale each record to unit global std
    marker_amplitude: float = 1.5  # longrange marker strength (0 -> null task)

    def __post_init__(self):
        if self.kind not in ("correlation", "longrange"):
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.n_classes != 2:
            raise ValueError("synthetic generators are binary (n_classes=2)")
        if not 0.0 < self.class_balance < 1.0:
            raise ValueError("class_balance must be in (0, 1)")
        if self.kind == "correlation" and self.n_sensors < 3:
            raise ValueError("correlation task needs n_sensors >= 3")
        if self.kind == "longrange" and self.t_len < 1024:
            raise ValueError("longrange task needs t_len >= 1024")

    def resolved_clique(self) -> int:
        return self.clique_size if self.clique_size else max(2, self.n_sensors // 2)


def _ar1(rng: np.random.Generator, shape, phi: float) -> np.ndarray:
    """Stationary unit-variance AR(1) noise along the last axis."""
    eps = rng.normal(size=shape)
    out = np.empty_like(eps)
    out[..., 0] = eps[..., 0]
    scale = np.sqrt(1.0 - phi * phi)
    for t in range(1, shape[-1]):
        out[..., t] = phi * out[..., t - 1] + scale * eps[..., t]
    return out




def _labels_for(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    n_pos = int(round(spec.size * spec.class_balance))
    labels = np.zeros(spec.size, dtype=np.int64)
    labels[:n_pos] = 1
    rng.shuffle(labels)
    return labels


def marker_template(length: int) -> np.ndarray:
    """Deterministic unit-RMS marker pattern (matched-filter target)."""
    t = (np.arange(length) + 0.5) / length
    raw = np.sin(2 * np.pi * 3 * t) + 0.5 * np.cos(2 * np.pi * 7 * t)
    return raw / np.sqrt(np.mean(raw * raw))


def marker_length(t_len: int) -> int:
    return max(1, t_len // 100)


def gen_correlation_task(spec: DatasetSpec) -> Dataset:
    """Class 1: a sensor clique shares a common latent (blended fast stream
    plus an identical second-half level); class 0: all sensors independent.

    Per-sensor marginals are identical across classes by construction, so
    per-channel statistics carry no signal; only the cross-sensor structure,
    appearing in the second half, separates the classes."""
    if spec.kind != "correlation":
        raise ValueError("spec.kind must be 'correlation'")
    ss = np.random.SeedSequence(spec.seed)
    label_rng = np.random.default_rng(ss.spawn(1)[0])
    labels = _labels_for(spec, label_rng)
    clique = spec.resolved_clique()
    a = np.sqrt(spec.clique_corr)
    b = np.sqrt(1.0 - spec.clique_corr)
    half = spec.t_len // 2
    w_fast = np.sqrt(spec.fast_frac)
    w_slow = np.sqrt(spec.slow_frac)
    w_level = np.sqrt(spec.level_frac)
    records = []
    for i, child in enumerate(ss.spawn(spec.size)):
        rng = np.random.default_rng(child)
        fast = _ar1(rng, (spec.n_sensors, spec.t_len), spec.noise_phi)
        fast_shared = _ar1(rng, (spec.t_len,), spec.noise_phi)
        slow = _ar1(rng, (spec.n_sensors, spec.t_len), spec.slow_phi)
        slow_shared = _ar1(rng, (spec.t_len,), spec.slow_phi)
        levels = rng.normal(size=(spec.n_sensors, 2))   # one level per half
        level_shared = rng.normal()
        if labels[i] == 1:
            fast[:clique, half:] = (a * fast_shared[half:]
                                    + b * fast[:clique, half:])
            slow[:clique, half:] = (a * slow_shared[half:]
                                    + b * slow[:clique, half:])
            levels[:clique, 1] = level_shared
        x = w_fast * fast + w_slow * slow
        x[:, :half] += w_level * levels[:, :1]
        x[:, half:] += w_level * levels[:, 1:]
        if spec.normalize:
            x /= x.std()  # a per-record scalar: correlations are unaffected
        x = np.repeat(x[:, :, None], spec.input_dim, axis=2)
        records.append(SignalRecord(x=x, y=int(labels[i]),
                                    mask=np.ones(spec.t_len, dtype=bool),
                                    true_length=spec.t_len, record_id=f"corr-{i:05d}"))
    return Dataset(records=records, task="binary", n_classes=2)


def gen_longrange_task(spec: DatasetSpec) -> Dataset:
    """Class 1 carries a short marker in the first 1% of timesteps; the rest
    of the record is distractor noise on every sensor."""
    if spec.kind != "longrange":
        raise ValueError("spec.kind must be 'longrange'")
    ss = np.random.SeedSequence(spec.seed)
    label_rng = np.random.default_rng(ss.spawn(1)[0])
    labels = _labels_for(spec, label_rng)
    m_len = marker_length(spec.t_len)
    template = marker_template(m_len)
    records = []
    for i, child in enumerate(ss.spawn(spec.size)):
        rng = np.random.default_rng(child)
        x = rng.normal(size=(spec.n_sensors, spec.t_len, spec.input_dim))
        if labels[i] == 1:
            x[:, :m_len, 0] += spec.marker_amplitude * template
        records.append(SignalRecord(x=x, y=int(labels[i]),
                                    mask=np.ones(spec.t_len, dtype=bool),
                                    true_length=spec.t_len, record_id=f"long-{i:05d}"))
    return Dataset(records=records, task="binary", n_classes=2)


def generate(spec: DatasetSpec) -> Dataset:
    return gen_correlation_task(spec) if spec.kind == "correlation" else gen_longrange_task(spec)


# -- splits and balancing ---------------------------------------------------


def stratified_split(dataset: Dataset, fractions, seed: int) -> list:
    """Split preserving per-class proportions within one record per class."""
    fractions = list(fractions)
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    if dataset.task == "multilabel":
        groups = {"all": list(range(len(dataset)))}
    else:
        labels = dataset.class_indices()
        groups = {c: list(np.flatnonzero(labels == c)) for c in np.unique(labels)}
    parts = [[] for _ in fractions]
    for _, idxs in sorted(groups.items(), key=lambda kv: str(kv[0])):
        idxs = np.array(idxs)
        rng.shuffle(idxs)
        bounds = np.floor(np.cumsum(fractions) * len(idxs) + 0.5).astype(int)
        bounds[-1] = len(idxs)
        start = 0
        for part, stop in zip(parts, bounds):
            part.extend(idxs[start:stop].tolist())
            start = stop
    out = []
    for part in parts:
        part.sort()
        out.append(Dataset(records=[dataset.records[i] for i in part],
                           task=dataset.task, n_classes=dataset.n_classes))
    return out


def undersample_majority(records: list, rng: np.random.Generator) -> list:
    """Drop majority-class records until every class matches the minority count."""
    labels = np.array([int(r.y) for r in records])
    classes, counts = np.unique(labels, return_counts=True)
    target = counts.min()
    keep = []
    for c in classes:
        idxs = np.flatnonzero(labels == c)
        rng.shuffle(idxs)
        keep.extend(idxs[:target].tolist())
    keep.sort()
    return [records[i] for i in keep]


# -- binary + CSV I/O --------------------------------------------------------


def _label_block(record: SignalRecord, task: str, n_classes: int) -> bytes:
    if task == "multilabel":
        bits = np.asarray(record.y, dtype=np.int64)
        if bits.shape != (n_classes,) or n_classes > 32:
            raise ValueError("multilabel bitmask supports up to 32 aligned classes")
        value = int(sum(int(b) << i for i, b in enumerate(bits)))
        kind = _KIND_BITMASK
    else:
        value = int(record.y)
        kind = _KIND_INDEX
    rid = record.record_id.encode("utf-8")
    return struct.pack("<IIII", kind, n_classes, value, len(rid)) + rid


def save_bsg1(dataset: Dataset, path) -> bytes:
    """magic | u32 version | u32 record count | per record:
    u32 N, T, M | label block | f32 LE values row-major (sensor, time, feature).

    T is each record's true length; padding is reconstructed at load time.
    """
    parts = [BSG1_MAGIC, struct.pack("<II", BSG1_VERSION, len(dataset.records))]
    for rec in dataset.records:
        n, _, m = rec.x.shape
        t = rec.true_length
        parts.append(struct.pack("<III", n, t, m))
        parts.append(_label_block(rec, dataset.task, dataset.n_classes))
        parts.append(rec.x[:, :t, :].astype("<f4").tobytes())
    raw = b"".join(parts)
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(raw)
    return raw


def load_bsg1(path) -> Dataset:
    """Parse a BSG1 file; errors report the byte offset and return nothing partial."""
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0

    def need(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise ParseError(f"truncated {what} at byte {off}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    if need(4, "magic") != BSG1_MAGIC:
        raise ParseError("bad magic at byte 0")
    version, count = struct.unpack("<II", need(8, "header"))
    if version != BSG1_VERSION:
        raise ParseError(f"unsupported version {version} at byte 4")
    entries = []
    task = None
    n_classes = None
    for i in range(count):
        n, t, m = struct.unpack("<III", need(12, f"record {i} shape"))
        kind, classes, value, id_len = struct.unpack("<IIII", need(16, f"record {i} label"))
        rid = need(id_len, f"record {i} id").decode("utf-8")
        values = np.frombuffer(need(4 * n * t * m, f"record {i} values"), dtype="<f4")
        rec_task = "multilabel" if kind == _KIND_BITMASK else (
            "binary" if classes == 2 else "multiclass")
        if task is None:
            task, n_classes = rec_task, classes
        elif (task, n_classes) != (rec_task, classes):
            raise ParseError(f"inconsistent label block in record {i}")
        if kind == _KIND_BITMASK:
            y = np.array([(value >> b) & 1 for b in range(classes)], dtype=np.int64)
        else:
            y = int(value)
        entries.append((rid, y, values.astype(np.float64).reshape(n, t, m)))
    if off != len(raw):
        raise ParseError(f"trailing bytes at offset {off}")
    if not entries:
        return Dataset(records=[], task="binary", n_classes=2)
    t_max = max(x.shape[1] for _, _, x in entries)
    records = []
    for rid, y, x in entries:
        t = x.shape[1]
        padded = np.zeros((x.shape[0], t_max, x.shape[2]))
        padded[:, :t] = x
        records.append(SignalRecord(x=padded, y=y, mask=np.arange(t_max) < t,
                                    true_length=t, record_id=rid))
    return Dataset(records=records, task=task, n_classes=n_classes)


def save_csv_dir(dataset: Dataset, directory) -> None:
    """One CSV per record (rows = time, cols = sensors; feature 0 only) plus
    a labels.csv manifest."""
    from pathlib import Path
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "labels.csv", "w") as fh:
        fh.write("record_id,label\n")
        for rec in dataset.records:
            label = (";".join(str(int(v)) for v in np.atleast_1d(np.asarray(rec.y)))
                     if dataset.task == "multilabel" else str(int(rec.y)))
            fh.write(f"{rec.record_id},{label}\n")
            t = rec.true_length
            np.savetxt(directory / f"{rec.record_id}.csv",
                       rec.x[:, :t, 0].T, delimiter=",", fmt="%.9g")


def load_csv_dir(directory, task: str = "binary", n_classes: int = 2) -> Dataset:
    from pathlib import Path
    directory = Path(directory)
    manifest = directory / "labels.csv"
    if not manifest.exists():
        raise ParseError(f"missing manifest {manifest}")
    rows = manifest.read_text().strip().split("\n")[1:]
    entries = []
    for row in rows:
        rid, label = row.split(",", 1)
        values = np.loadtxt(directory / f"{rid}.csv", delimiter=",", ndmin=2)
        x = values.T[:, :, None]  # (N, T, 1)
        if task == "multilabel":
            y = np.array([int(v) for v in label.split(";")], dtype=np.int64)
        else:
            y = int(label)
        entries.append((rid, y, x))
    if not entries:
        return Dataset(records=[], task=task, n_classes=n_classes)
    t_max = max(x.shape[1] for _, _, x in entries)
    records = []
    for rid, y, x in entries:
        t = x.shape[1]
        padded = np.zeros((x.shape[0], t_max, 1))
        padded[:, :t] = x
        records.append(SignalRecord(x=padded, y=y, mask=np.arange(t_max) < t,
                                    true_length=t, record_id=rid))
    return Dataset(records=records, task=task, n_classes=n_classes)
