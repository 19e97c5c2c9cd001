"""Dataset ingestion and feature preparation.

Raw per-video records hold frame-level feature vectors for the three
visual channels (face, pose, hat), each frame either a vector of the
channel's declared dimension or ``None`` when the channel was absent.
The pipeline downsamples to a target frame rate, max-pools frames into
fixed-stride volumes, attaches a likes/views popularity label, fits a
train-split label normalizer, and performs seeded dataset splits.

File formats (UTF-8 JSON lines, one video per line):

* feature file::

    {"id": str, "likes": int, "views": int, "fps": num,
     "channels": {"face": {"dim": int, "frames": [[num, ...] | null, ...]},
                  "pose": {...}, "hat": {...}}}

* pooled cache: same shape with ``"volumes"`` replacing ``"frames"``
  (absent volumes stored as zero vectors), a per-volume boolean
  ``"present"`` array per channel, and a ``"y"`` label field.

* labels file (optional): ``{"id": str, "y": num}`` lines; overrides the
  likes/views-derived label.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHANNELS = ("face", "pose", "hat")

DEFAULT_FPS = 5.0
DEFAULT_WINDOW = 11
DEFAULT_STRIDE = 4

POT_OPERATORS = ("mean", "stdev", "max", "grad_pos", "grad_neg")


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass
class RawVideoRecord:
    """One video's metadata and per-channel frame features."""

    id: str
    likes: int
    views: int
    fps: float
    dims: dict[str, int]
    frames: dict[str, list[np.ndarray | None]]
    y_override: float | None = None

    def __post_init__(self):
        if self.likes < 0:
            raise DataError(f"{self.id}: likes must be non-negative")
        if self.views < 1:
            raise DataError(f"{self.id}: views must be at least 1")
        if self.fps <= 0:
            raise DataError(f"{self.id}: fps must be positive")
        lengths = {ch: len(self.frames[ch]) for ch in CHANNELS}
        if len(set(lengths.values())) != 1:
            raise DataError(f"{self.id}: channel frame counts differ: {lengths}")
        for ch in CHANNELS:
            d = self.dims[ch]
            if d < 1:
                raise DataError(f"{self.id}: {ch} dim must be positive")
            for i, frame in enumerate(self.frames[ch]):
                if frame is not None and frame.shape != (d,):
                    raise DataError(
                        f"{self.id}: {ch} frame {i} has {frame.shape[0]} values, expected {d}"
                    )

    @property
    def n_frames(self) -> int:
        return len(self.frames[CHANNELS[0]])

    def label(self) -> float:
        """Override label when present, else the likes/views popularity."""
        if self.y_override is not None:
            return self.y_override
        return compute_popularity(self.likes, self.views)


@dataclass
class VolumeSequence:
    """Per-channel sequence of pooled feature vectors with presence flags.

    ``channels[ch]`` is a (T, d_ch) array; rows where ``present`` is False
    are zero vectors. Constructed sequences may contain all-absent volumes
    (the model skips them); ``pool_volumes`` never emits such volumes.
    """

    id: str
    channels: dict[str, np.ndarray]
    present: np.ndarray  # (T, 3) bool, columns in CHANNELS order
    label: float

    def __post_init__(self):
        t = self.present.shape[0]
        if t < 1:
            raise DataError(f"{self.id}: sequence must have at least one volume")
        if self.present.shape != (t, 3):
            raise DataError(f"{self.id}: presence array must be (T, 3)")
        for ch in CHANNELS:
            arr = self.channels[ch]
            if arr.ndim != 2 or arr.shape[0] != t:
                raise DataError(f"{self.id}: {ch} volumes must be (T, d)")

    @property
    def length(self) -> int:
        return self.present.shape[0]

    @property
    def dims(self) -> dict[str, int]:
        return {ch: self.channels[ch].shape[1] for ch in CHANNELS}


@dataclass
class LabelNormalizer:
    """Train-split label statistics: y' = (y - mean) / std (population std)."""

    mean: float
    std: float

    @classmethod
    def fit(cls, labels) -> "LabelNormalizer":
        labels = np.asarray(labels, dtype=np.float64)
        if labels.size < 2:
            raise DataError("need at least 2 labels to fit a normalizer")
        std = float(labels.std())
        if std == 0.0:
            raise DataError("constant labels: normalizer std would be zero")
        return cls(mean=float(labels.mean()), std=std)

    def apply(self, y: float) -> float:
        return (y - self.mean) / self.std

    def to_json(self) -> dict:
        return {"mean": self.mean, "std": self.std}

    @classmethod
    def from_json(cls, obj: dict) -> "LabelNormalizer":
        return cls(mean=float(obj["mean"]), std=float(obj["std"]))


@dataclass
class Dataset:
    """A list of pooled sequences plus the label normalization record."""

    sequences: list[VolumeSequence]
    normalizer: LabelNormalizer | None = None

    def __post_init__(self):
        ids = [s.id for s in self.sequences]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate sequence ids in dataset")


@dataclass
class SplitSpec:
    """Seeded 60:20:20 (by default) train/val/test split."""

    seed: int = 0
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if any(r <= 0 for r in self.ratios) or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise DataError(f"split ratios must be positive and sum to 1: {self.ratios}")


# -- loading ---------------------------------------------------------------


def _parse_record(obj: dict, where: str, dims_seen: dict[str, int]) -> RawVideoRecord:
    try:
        channels = obj["channels"]
        dims = {}
        frames = {}
        for ch in CHANNELS:
            spec = channels[ch]
            d = int(spec["dim"])
            dims[ch] = d
            frames[ch] = [
                None if f is None else np.asarray(f, dtype=np.float64)
                for f in spec["frames"]
            ]
        rec = RawVideoRecord(
            id=str(obj["id"]),
            likes=int(obj["likes"]),
            views=int(obj["views"]),
            fps=float(obj["fps"]),
            dims=dims,
            frames=frames,
        )
    except DataError as exc:
        raise DataError(f"{where}: {exc}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{where}: malformed record ({exc})") from None
    for ch, d in rec.dims.items():
        prev = dims_seen.setdefault(ch, d)
        if prev != d:
            raise DataError(f"{where}: {ch} dim {d} != {prev} declared earlier in file")
    return rec


def load_records(path) -> list[RawVideoRecord]:
    """Read and validate a feature JSONL file."""
    records = []
    dims_seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{where}: invalid JSON ({exc.msg})") from None
            records.append(_parse_record(obj, where, dims_seen))
    return records


def load_labels(path) -> dict[str, float]:
    """Read an ``{"id", "y"}`` JSONL label file."""
    labels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                labels[str(obj["id"])] = float(obj["y"])
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise DataError(f"{path}:{lineno}: malformed label line") from None
    return labels


def apply_label_overrides(records: list[RawVideoRecord], labels: dict[str, float]) -> None:
    for rec in records:
        if rec.id in labels:
            rec.y_override = labels[rec.id]


# -- frame-level transforms --------------------------------------------------


def compute_popularity(likes: int, views: int) -> float:
    """Likes over views, the raw (unnormalized) popularity score."""
    if views < 1:
        raise DataError("views must be at least 1")
    if likes < 0:
        raise DataError("likes must be non-negative")
    return likes / views


def downsample(record: RawVideoRecord, target_fps: float = DEFAULT_FPS) -> RawVideoRecord:
    """Keep frames at indices round(k * fps / target_fps); update fps."""
    if record.fps < target_fps:
        raise DataError(
            f"{record.id}: fps {record.fps} below target {target_fps}"
        )
    if record.fps == target_fps:
        return record
    ratio = record.fps / target_fps
    n = record.n_frames
    keep = []
    k = 0
    while True:
        idx = int(math.floor(k * ratio + 0.5))
        if idx >= n:
            break
        keep.append(idx)
        k += 1
    frames = {ch: [record.frames[ch][i] for i in keep] for ch in CHANNELS}
    return RawVideoRecord(
        id=record.id, likes=record.likes, views=record.views, fps=target_fps,
        dims=dict(record.dims), frames=frames, y_override=record.y_override,
    )


def volume_count(n_frames: int, window: int = DEFAULT_WINDOW,
                 stride: int = DEFAULT_STRIDE) -> int:
    """Number of full windows before any all-absent volumes are dropped."""
    if n_frames < window:
        raise DataError(f"{n_frames} frames is shorter than the {window}-frame window")
    return (n_frames - window) // stride + 1


def pool_volumes(record: RawVideoRecord, window: int = DEFAULT_WINDOW,
                 stride: int = DEFAULT_STRIDE) -> VolumeSequence:
    """Max-pool frames into overlapping volumes.

    Windows start at 0, stride, 2*stride, ... and must fit entirely;
    trailing partial windows are dropped. Within a window, each channel
    pools coordinate-wise over its present frames only; a channel absent
    for the whole window is marked absent (zero vector), and volumes with
    every channel absent are dropped from the sequence.
    """
    n = record.n_frames
    count = volume_count(n, window, stride)
    vols = {ch: [] for ch in CHANNELS}
    present_rows = []
    for v in range(count):
        start = v * stride
        row = []
        for ch in CHANNELS:
            window_frames = [
                f for f in record.frames[ch][start:start + window] if f is not None
            ]
            if window_frames:
                vols[ch].append(np.max(window_frames, axis=0))
                row.append(True)
            else:
                vols[ch].append(np.zeros(record.dims[ch]))
                row.append(False)
        present_rows.append(row)
    present = np.asarray(present_rows, dtype=bool)
    keep = present.any(axis=1)
    if not keep.any():
        raise DataError(f"{record.id}: every volume is channel-absent")
    return VolumeSequence(
        id=record.id,
        channels={ch: np.asarray(vols[ch])[keep] for ch in CHANNELS},
        present=present[keep],
        label=record.label(),
    )


# -- splitting and normalization ---------------------------------------------


def split_dataset(sequences: list, spec: SplitSpec):
    """Seeded shuffle, then floor-sized train/val slices; the rest is test."""
    n = len(sequences)
    if n < 5:
        raise DataError(f"need at least 5 items to split, got {n}")
    order = np.random.default_rng(spec.seed).permutation(n)
    # + tiny fuzz so exact-rational ratios are not floored one short
    n_train = int(math.floor(spec.ratios[0] * n + 1e-9))
    n_val = int(math.floor(spec.ratios[1] * n + 1e-9))
    train = [sequences[i] for i in order[:n_train]]
    val = [sequences[i] for i in order[n_train:n_train + n_val]]
    test = [sequences[i] for i in order[n_train + n_val:]]
    return train, val, test


def normalize_splits(train: list[VolumeSequence], val: list[VolumeSequence],
                     test: list[VolumeSequence]):
    """Fit a normalizer on train labels only and rewrite labels in every split."""
    normalizer = LabelNormalizer.fit([s.label for s in train])

    def convert(seqs):
        return [
            VolumeSequence(
                id=s.id, channels=s.channels, present=s.present,
                label=normalizer.apply(s.label),
            )
            for s in seqs
        ]

    return convert(train), convert(val), convert(test), normalizer


# -- pooled time series (PoT) video descriptor --------------------------------


@dataclass
class PotLayout:
    """Index bookkeeping for a PoT vector: dim-major, window-second, operator-last."""

    channels: tuple[str, ...]
    dims: dict[str, int]
    levels: int
    operators: tuple[str, ...] = POT_OPERATORS

    @property
    def n_windows(self) -> int:
        return 2 ** self.levels - 1

    @property
    def n_dims(self) -> int:
        return sum(self.dims[ch] for ch in self.channels)

    @property
    def length(self) -> int:
        return self.n_dims * self.n_windows * len(self.operators)

    def index(self, dim: int, window: int, operator: int) -> int:
        return (dim * self.n_windows + window) * len(self.operators) + operator


@dataclass
class PotVector:
    """Fixed-length pooled-time-series descriptor for one video."""

    id: str
    values: np.ndarray
    layout: PotLayout
    label: float

    def __post_init__(self):
        if self.values.shape != (self.layout.length,):
            raise DataError(
                f"{self.id}: PoT length {self.values.shape} != layout {self.layout.length}"
            )


def pyramid_windows(length: int, levels: int) -> list[tuple[int, int]]:
    """(start, end) pairs for every pyramid window, level-major.

    Level l splits the series into 2^l equal contiguous windows; remainder
    frames join the last window of the level.
    """
    windows = []
    for level in range(levels):
        nw = 2 ** level
        q = length // nw
        if q < 1:
            raise DataError(f"series of {length} too short for pyramid level {level}")
        for w in range(nw):
            start = w * q
            end = (w + 1) * q if w < nw - 1 else length
            windows.append((start, end))
    return windows


def _pool_window(seg: np.ndarray, grad_mode: str) -> tuple[float, float, float, float, float]:
    diffs = np.diff(seg)
    if grad_mode == "count":
        gpos = float((diffs > 0).sum())
        gneg = float((diffs < 0).sum())
    else:
        gpos = float(diffs[diffs > 0].sum())
        gneg = float(-diffs[diffs < 0].sum())
    return float(seg.mean()), float(seg.std()), float(seg.max()), gpos, gneg


def pot_features(record: RawVideoRecord, levels: int = 5,
                 channels: tuple[str, ...] = CHANNELS,
                 grad_mode: str = "sum") -> PotVector:
    """Pooled-time-series descriptor over a 5-scale temporal pyramid.

    Each feature dimension is treated as a time series of that channel's
    present frames (absent frames are skipped). Every pyramid window emits
    mean, population stdev, max, and the summed positive / absolute
    negative temporal differences (``grad_mode="count"`` counts the
    differences instead).
    """
    if grad_mode not in ("sum", "count"):
        raise DataError(f"unknown grad_mode {grad_mode!r}")
    layout = PotLayout(
        channels=tuple(channels),
        dims={ch: record.dims[ch] for ch in channels},
        levels=levels,
    )
    min_len = 2 ** (levels - 1)
    out = np.empty(layout.length)
    dim_offset = 0
    for ch in channels:
        series = np.asarray(
            [f for f in record.frames[ch] if f is not None], dtype=np.float64
        )
        if series.shape[0] < min_len:
            raise DataError(
                f"{record.id}: {ch} has {series.shape[0]} present frames, "
                f"needs at least {min_len} for {levels} pyramid levels"
            )
        windows = pyramid_windows(series.shape[0], levels)
        for d in range(record.dims[ch]):
            col = series[:, d]
            for w, (start, end) in enumerate(windows):
                vals = _pool_window(col[start:end], grad_mode)
                base = layout.index(dim_offset + d, w, 0)
                out[base:base + len(POT_OPERATORS)] = vals
        dim_offset += record.dims[ch]
    return PotVector(id=record.id, values=out, layout=layout, label=record.label())


# -- pooled-cache JSONL -------------------------------------------------------


def write_pooled(path, sequences: list[VolumeSequence],
                 meta: dict[str, dict] | None = None) -> None:
    """Write the pooled cache; ``meta`` carries per-id passthrough fields
    (likes, views, fps) so the cache keeps the feature-file shape."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            obj = dict(meta.get(seq.id, {})) if meta else {}
            obj.update({
                "id": seq.id,
                "channels": {
                    ch: {
                        "dim": seq.channels[ch].shape[1],
                        "volumes": seq.channels[ch].tolist(),
                        "present": seq.present[:, i].tolist(),
                    }
                    for i, ch in enumerate(CHANNELS)
                },
                "y": seq.label,
            })
            fh.write(json.dumps(obj) + "\n")


def read_pooled(path) -> list[VolumeSequence]:
    sequences = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                channels = {
                    ch: np.asarray(obj["channels"][ch]["volumes"], dtype=np.float64)
                    for ch in CHANNELS
                }
                present = np.stack(
                    [np.asarray(obj["channels"][ch]["present"], dtype=bool)
                     for ch in CHANNELS],
                    axis=1,
                )
                sequences.append(VolumeSequence(
                    id=str(obj["id"]), channels=channels, present=present,
                    label=float(obj["y"]),
                ))
            except DataError:
                raise
            except (json.JSONDecodeError, KeyError, TypeError, ValueError):
                raise DataError(f"{path}:{lineno}: malformed pooled record") from None
    return sequences


def write_labels(path, labels: dict[str, float]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for vid, y in labels.items():
            fh.write(json.dumps({"id": vid, "y": y}) + "\n")
