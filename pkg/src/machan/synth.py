"""Synthetic multichannel data with known channel-relevance structure.

Each video has a hidden piecewise-constant active channel (face, pose or
hat), drawn in seeded segments measured in volumes. Every channel's
frames are Gaussian noise; the active channel's frames additionally get
a random signal along a per-channel unit direction plus a constant
marker on coordinate 0, which makes the active channel identifiable from
the current frame alone. The video label is the mean readout of the
active channel's frames, so predicting it well requires following the
hidden channel.

Frames are rendered so that pooling with the configured window/stride
yields exactly ``T`` volumes per video; ``modes.jsonl`` records the
hidden per-volume channel indices for scoring attention traces. Since
likes/views carry no meaning here, the feature file stores likes=0,
views=1 placeholders and real labels ride in the labels file, which the
pipeline treats as overrides.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from machan.data import (
    CHANNELS,
    DEFAULT_STRIDE,
    DEFAULT_WINDOW,
    RawVideoRecord,
    write_labels,
)
from machan.model import AttentionTrace


class SynthError(ValueError):
    """Invalid generator configuration or inputs."""


@dataclass
class SynthConfig:
    n_videos: int = 100
    t_range: tuple[int, int] = (15, 30)          # volumes per video
    dims: tuple[int, int, int] = (8, 8, 8)
    segment_range: tuple[int, int] = (5, 20)     # volumes per mode segment
    marker: float = 1.0                          # coordinate 0 of the active channel
    noise: float = 0.1
    seed: int = 0
    window: int = DEFAULT_WINDOW
    stride: int = DEFAULT_STRIDE
    fps: float = 5.0
    # per-channel signal direction / readout; None draws seeded unit vectors
    # with coordinate 0 zeroed (keeps the marker clean) and sets w = u
    u: dict[str, np.ndarray] | None = None
    w: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        if any(d < 2 for d in self.dims):
            raise SynthError("channel dims must be at least 2")
        if self.segment_range[0] < 1 or self.segment_range[0] > self.segment_range[1]:
            raise SynthError(f"bad segment_range {self.segment_range}")
        if self.t_range[0] < 1 or self.t_range[0] > self.t_range[1]:
            raise SynthError(f"bad t_range {self.t_range}")
        if self.noise < 0:
            raise SynthError("noise must be non-negative")

    @property
    def channel_dims(self) -> dict[str, int]:
        return dict(zip(CHANNELS, self.dims))


def signal_directions(config: SynthConfig) -> tuple[dict, dict]:
    """Resolved (u, w) per channel; defaults are seeded and deterministic."""
    rng = np.random.default_rng(config.seed + 1)
    u = {}
    for ch, d in config.channel_dims.items():
        if config.u is not None:
            vec = np.asarray(config.u[ch], dtype=np.float64)
            if vec.shape != (d,):
                raise SynthError(f"u[{ch}] must have shape ({d},)")
        else:
            vec = rng.standard_normal(d)
            vec[0] = 0.0
            vec = vec / np.linalg.norm(vec)
        u[ch] = vec
    if config.w is not None:
        w = {}
        for ch, d in config.channel_dims.items():
            vec = np.asarray(config.w[ch], dtype=np.float64)
            if vec.shape != (d,):
                raise SynthError(f"w[{ch}] must have shape ({d},)")
            w[ch] = vec
    else:
        w = {ch: u[ch].copy() for ch in CHANNELS}
    return u, w


def draw_segments(rng, total: int, seg_range: tuple[int, int]) -> list[tuple[int, int]]:
    """(length, channel) segments covering ``total`` volumes.

    Consecutive segments always switch channel; the final segment is
    truncated to fit, so only it may undercut the minimum length.
    """
    segments = []
    covered = 0
    prev = -1
    while covered < total:
        length = int(rng.integers(seg_range[0], seg_range[1] + 1))
        length = min(length, total - covered)
        choices = [c for c in range(3) if c != prev]
        channel = int(choices[rng.integers(0, len(choices))])
        segments.append((length, channel))
        covered += length
        prev = channel
    return segments


def frame_volume(i: int, config: SynthConfig, n_volumes: int) -> int:
    """Volume whose window center is nearest to frame ``i``."""
    center = (config.window - 1) // 2
    v = int(math.floor((i - center) / config.stride + 0.5))
    return min(max(v, 0), n_volumes - 1)


@dataclass
class SynthVideo:
    record: RawVideoRecord
    modes: list[int]     # per volume
    label: float


def generate_videos(config: SynthConfig) -> list[SynthVideo]:
    """Deterministically render every video from the config seed."""
    u, w = signal_directions(config)
    rng = np.random.default_rng(config.seed)
    dims = config.channel_dims
    videos = []
    for vi in range(config.n_videos):
        t = int(rng.integers(config.t_range[0], config.t_range[1] + 1))
        segments = draw_segments(rng, t, config.segment_range)
        modes = [ch for length, ch in segments for _ in range(length)]
        n_frames = config.window + config.stride * (t - 1)
        frames = {ch: [] for ch in CHANNELS}
        readouts = []
        for i in range(n_frames):
            active = CHANNELS[modes[frame_volume(i, config, t)]]
            z = rng.standard_normal()
            for ch in CHANNELS:
                vec = config.noise * rng.standard_normal(dims[ch])
                if ch == active:
                    vec = vec + z * u[ch]
                    vec[0] += config.marker
                frames[ch].append(vec)
            readouts.append(frames[active][-1] @ w[active])
        label = float(np.mean(readouts))
        videos.append(SynthVideo(
            record=RawVideoRecord(
                id=f"synth{vi:05d}", likes=0, views=1, fps=config.fps,
                dims=dict(dims), frames=frames,
            ),
            modes=modes,
            label=label,
        ))
    return videos


def oracle_label(video: SynthVideo, config: SynthConfig) -> float:
    """Recompute the label by direct summation, independent of the generator.

    Walks the emitted frames with plain Python arithmetic, re-deriving each
    frame's active channel from the per-volume mode sequence.
    """
    u, w = signal_directions(config)
    t = len(video.modes)
    n_frames = video.record.n_frames
    terms = []
    for i in range(n_frames):
        active = CHANNELS[video.modes[frame_volume(i, config, t)]]
        frame = video.record.frames[active][i]
        terms.append(math.fsum(float(a) * float(b) for a, b in zip(frame, w[active])))
    return math.fsum(terms) / n_frames


def generate(config: SynthConfig, out_dir) -> dict[str, Path]:
    """Write features.jsonl, labels.jsonl, and modes.jsonl under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    videos = generate_videos(config)
    paths = {
        "features": out_dir / "features.jsonl",
        "labels": out_dir / "labels.jsonl",
        "modes": out_dir / "modes.jsonl",
    }
    with open(paths["features"], "w", encoding="utf-8") as fh:
        for video in videos:
            rec = video.record
            obj = {
                "id": rec.id, "likes": rec.likes, "views": rec.views, "fps": rec.fps,
                "channels": {
                    ch: {
                        "dim": rec.dims[ch],
                        "frames": [f.tolist() for f in rec.frames[ch]],
                    }
                    for ch in CHANNELS
                },
            }
            fh.write(json.dumps(obj) + "\n")
    write_labels(paths["labels"], {v.record.id: v.label for v in videos})
    with open(paths["modes"], "w", encoding="utf-8") as fh:
        for video in videos:
            fh.write(json.dumps({"id": video.record.id, "modes": video.modes}) + "\n")
    return paths


def load_modes(path) -> dict[str, list[int]]:
    modes = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            modes[str(obj["id"])] = [int(m) for m in obj["modes"]]
    return modes


def score_attention(trace: AttentionTrace, modes: list[int]) -> float:
    """Fraction of non-dropped timesteps whose selected channel is the mode."""
    if len(trace.steps) != len(modes):
        raise SynthError(
            f"trace has {len(trace.steps)} steps but mode sequence has {len(modes)}"
        )
    live = [s for s in trace.steps if not s.dropped]
    if not live:
        raise SynthError("every timestep is dropped; attention accuracy undefined")
    hits = sum(1 for s in live if s.selected == modes[s.t])
    return hits / len(live)
