"""Branching-walker clips: a Gaussian blob following piecewise-constant moves.

Each clip is a sequence of action segments whose lengths are drawn uniformly
from ``segment_length``; at every segment end a different action is drawn
uniformly.  Frames are what a model sees; positions and labels are kept as
ground truth for the analytic action oracle.

By default the grid is a torus (``boundary="wrap"``) so that a move can be
sustained for longer than the grid is wide.  ``boundary="reflect"`` bounces
off the walls and relabels the bounce as the opposite action.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, EmptyFrame

STILL = -1

CARDINAL_ACTIONS = (
    ("up", (-1.0, 0.0)),
    ("down", (1.0, 0.0)),
    ("left", (0.0, -1.0)),
    ("right", (0.0, 1.0)),
)

DIAGONAL_ACTIONS = CARDINAL_ACTIONS + (
    ("up_left", (-0.7071067811865476, -0.7071067811865476)),
    ("up_right", (-0.7071067811865476, 0.7071067811865476)),
    ("down_left", (0.7071067811865476, -0.7071067811865476)),
    ("down_right", (0.7071067811865476, 0.7071067811865476)),
)


@dataclass(frozen=True)
class WalkerConfig:
    height: int = 16
    width: int = 16
    actions: tuple = CARDINAL_ACTIONS
    segment_length: tuple = (8, 16)
    blob_sigma: float = 1.0
    clip_length: int = 45
    speed: float = 1.0
    boundary: str = "wrap"

    def __post_init__(self):
        object.__setattr__(self, "actions", tuple((str(n), tuple(float(c) for c in v))
                                                  for n, v in self.actions))
        object.__setattr__(self, "segment_length", tuple(int(s) for s in self.segment_length))
        if len(self.actions) < 2:
            raise ValueError("need at least two actions")
        lo, hi = self.segment_length
        if lo < 2 or hi < lo:
            raise ValueError(f"invalid segment_length {self.segment_length}")
        if self.blob_sigma <= 0:
            raise ValueError("blob_sigma must be positive")
        if self.height < 2 or self.width < 2 or self.clip_length < 1:
            raise ValueError("grid and clip must be non-empty")
        if self.boundary not in ("wrap", "reflect"):
            raise ValueError(f"unknown boundary {self.boundary!r}")

    @property
    def num_actions(self) -> int:
        return len(self.actions)

    @property
    def action_names(self) -> list[str]:
        return [n for n, _ in self.actions]

    @property
    def action_vectors(self) -> np.ndarray:
        return np.array([v for _, v in self.actions], dtype=np.float64)

    @property
    def period(self):
        return (self.height, self.width) if self.boundary == "wrap" else None

    @classmethod
    def stress(cls, **kw) -> "WalkerConfig":
        """Eight headings including diagonals; speed 1.5 px/frame unless overridden."""
        kw.setdefault("actions", DIAGONAL_ACTIONS)
        kw.setdefault("speed", 1.5)
        return cls(**kw)


@dataclass
class LabeledClip:
    frames: np.ndarray                 # (T, H, W) in [0, 1]
    positions: np.ndarray              # (T, 2) row/col
    labels: np.ndarray                 # (T,) action executed from frame t to t+1
    segment_starts: list = field(default_factory=list)

    def __post_init__(self):
        if not (len(self.frames) == len(self.positions) == len(self.labels)):
            raise ValueError("frames, positions and labels must have equal length")

    def __len__(self):
        return len(self.labels)

    @property
    def boundaries(self) -> np.ndarray:
        """Frames whose next move differs from the previous one (branch points)."""
        lab = np.asarray(self.labels)
        return np.flatnonzero(lab[1:] != lab[:-1]) + 1


def _opposite(cfg: WalkerConfig, action: int) -> int:
    vecs = cfg.action_vectors
    hits = np.flatnonzero(np.all(np.isclose(vecs, -vecs[action]), axis=1))
    return int(hits[0]) if len(hits) else action


def _reflect(x: float, upper: float) -> tuple[float, bool]:
    bounced = False
    while x < 0.0 or x > upper:
        x = -x if x < 0.0 else 2.0 * upper - x
        bounced = True
    return x, bounced


def generate_episode(cfg: WalkerConfig, seed: int) -> LabeledClip:
    rng = np.random.default_rng(seed)
    H, W, K = cfg.height, cfg.width, cfg.num_actions
    lo, hi = cfg.segment_length
    vecs = cfg.action_vectors * cfg.speed
    if cfg.boundary == "wrap":
        pos = rng.uniform(0.0, 1.0, size=2) * (H, W)
    else:
        pos = rng.uniform(0.0, 1.0, size=2) * (H - 1, W - 1)
    action = int(rng.integers(K))
    remaining = int(rng.integers(lo, hi + 1))

    T = cfg.clip_length
    positions = np.empty((T, 2))
    labels = np.empty(T, dtype=np.int64)
    starts = []
    for t in range(T):
        positions[t] = pos
        labels[t] = action
        nxt = pos + vecs[action]
        if cfg.boundary == "wrap":
            nxt = np.mod(nxt, (H, W))
        else:
            r, br = _reflect(nxt[0], H - 1)
            c, bc = _reflect(nxt[1], W - 1)
            nxt = np.array([r, c])
            if br or bc:
                action = _opposite(cfg, action)
        pos = nxt
        remaining -= 1
        if remaining == 0:
            others = [a for a in range(K) if a != action]
            action = others[int(rng.integers(K - 1))]
            remaining = int(rng.integers(lo, hi + 1))
            starts.append(t + 1)
    starts = [s for s in starts if s < T]
    frames = render_frames(positions, cfg)
    return LabeledClip(frames, positions, labels, starts)


def render_frames(positions, cfg: WalkerConfig) -> np.ndarray:
    positions = np.atleast_2d(np.asarray(positions, dtype=np.float64))
    rows = np.arange(cfg.height, dtype=np.float64)
    cols = np.arange(cfg.width, dtype=np.float64)
    dr = rows[None, :] - positions[:, :1]
    dc = cols[None, :] - positions[:, 1:2]
    if cfg.boundary == "wrap":
        dr = dr - cfg.height * np.round(dr / cfg.height)
        dc = dc - cfg.width * np.round(dc / cfg.width)
    two_s2 = 2.0 * cfg.blob_sigma ** 2
    frames = np.exp(-(dr[:, :, None] ** 2 + dc[:, None, :] ** 2) / two_s2)
    return np.clip(frames, 0.0, 1.0)


def render_frame(position, cfg: WalkerConfig) -> np.ndarray:
    return render_frames(position, cfg)[0]


def _displacements(positions: np.ndarray, period) -> np.ndarray:
    d = np.diff(positions, axis=0)
    if period is not None:
        period = np.asarray(period, dtype=np.float64)
        d = d - period * np.round(d / period)
    return d


def oracle_classify(positions, actions=CARDINAL_ACTIONS, period=None) -> int:
    """Action whose heading best matches the mean frame-to-frame displacement.

    Returns :data:`STILL` when the window does not move (total displacement
    below 1e-9).  Ties go to the lowest action id.
    """
    positions = np.asarray(positions, dtype=np.float64)
    if len(positions) < 2:
        raise ValueError("need at least two positions")
    disp = _displacements(positions, period)
    total = disp.sum(0)
    if np.linalg.norm(total) < 1e-9:
        return STILL
    mean = total / len(disp)
    vecs = np.array([v for _, v in actions], dtype=np.float64)
    units = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
    return int(np.argmax(units @ mean))


def frame_centroid(frame, period=None) -> np.ndarray:
    """Intensity centroid; circular mean per axis on a torus."""
    frame = np.asarray(frame, dtype=np.float64)
    total = frame.sum()
    if total < 1e-6:
        raise EmptyFrame(f"frame intensity {total:.3g} is too low to locate the blob")
    H, W = frame.shape
    wr, wc = frame.sum(1), frame.sum(0)
    if period is None:
        return np.array([wr @ np.arange(H), wc @ np.arange(W)]) / total
    out = []
    for weights, n in ((wr, H), (wc, W)):
        ang = 2.0 * np.pi * np.arange(n) / n
        a = np.arctan2(weights @ np.sin(ang), weights @ np.cos(ang))
        out.append(np.mod(a * n / (2.0 * np.pi), n))
    return np.array(out)


def classify_frames(frames, cfg: WalkerConfig) -> int:
    frames = np.asarray(frames)
    if len(frames) < 2:
        raise ValueError("need at least two frames")
    period = cfg.period
    centroids = np.array([frame_centroid(f, period) for f in frames])
    return oracle_classify(centroids, cfg.actions, period)


# -- serialization -----------------------------------------------------------

def write_pgm(path, frame) -> None:
    _atomic_write_bytes(path, _pgm_bytes(frame))


def _pgm_bytes(frame) -> bytes:
    frame = np.asarray(frame, dtype=np.float64)
    H, W = frame.shape
    data = np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)
    return f"P5\n{W} {H}\n255\n".encode("ascii") + data.tobytes()


def write_pgm_stream(path, frames) -> None:
    """Several frames as concatenated P5 images in one file."""
    _atomic_write_bytes(path, b"".join(_pgm_bytes(f) for f in frames))


def read_pgm_stream(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    frames, i = [], 0
    while i < len(raw) and not raw[i:].isspace():
        frame, i = _parse_pgm(raw, i, path)
        frames.append(frame)
    if not frames:
        raise DataError(f"{path}: no images")
    return np.stack(frames)


def read_pgm(path) -> np.ndarray:
    return _parse_pgm(Path(path).read_bytes(), 0, path)[0]


def _parse_pgm(raw: bytes, i: int, path) -> tuple[np.ndarray, int]:
    tokens = []
    while len(tokens) < 4:
        if i >= len(raw):
            raise DataError(f"{path}: truncated header")
        while raw[i:i + 1].isspace():
            i += 1
        if raw[i:i + 1] == b"#":
            while raw[i:i + 1] not in (b"\n", b""):
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j:j + 1].isspace():
            j += 1
        tokens.append(raw[i:j].decode("ascii"))
        i = j
    i += 1
    try:
        magic, W, H, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise DataError(f"{path}: malformed header {tokens}") from None
    if magic != "P5" or maxval != 255:
        raise DataError(f"{path}: expected an 8-bit P5 graymap")
    data = np.frombuffer(raw[i:i + W * H], dtype=np.uint8)
    if data.size != W * H:
        raise DataError(f"{path}: truncated pixel data")
    return data.reshape(H, W).astype(np.float64) / 255.0, i + W * H


def _atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def save_episode(clip: LabeledClip, directory, cfg: WalkerConfig) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(clip.frames):
        write_pgm(directory / f"frame_{t:04d}.pgm", frame)
    names = cfg.action_names
    lines = ["frame,row,col,action"]
    for t, ((r, c), a) in enumerate(zip(clip.positions, clip.labels)):
        lines.append(f"{t},{float(r)!r},{float(c)!r},{names[int(a)]}")
    _atomic_write_bytes(directory / "labels.csv", ("\n".join(lines) + "\n").encode("ascii"))


def load_episode(directory, cfg: WalkerConfig) -> LabeledClip:
    directory = Path(directory)
    label_path = directory / "labels.csv"
    if not label_path.exists():
        raise DataError(f"missing {label_path}")
    index = {n: i for i, n in enumerate(cfg.action_names)}
    positions, labels = [], []
    with open(label_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["frame", "row", "col", "action"]:
            raise DataError(f"{label_path}: unexpected header {reader.fieldnames}")
        for row in reader:
            try:
                positions.append((float(row["row"]), float(row["col"])))
            except (TypeError, ValueError):
                raise DataError(f"{label_path}: bad position in row {row}") from None
            try:
                labels.append(index[row["action"]])
            except KeyError:
                raise DataError(f"{label_path}: unknown action {row['action']!r}") from None
    frames = np.stack([read_pgm(directory / f"frame_{t:04d}.pgm") for t in range(len(labels))])
    labels = np.asarray(labels, dtype=np.int64)
    starts = list(np.flatnonzero(labels[1:] != labels[:-1]) + 1)
    return LabeledClip(frames, np.asarray(positions), labels, starts)
