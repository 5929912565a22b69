"""Video sequences: synthetic moving shapes, frame-directory ingestion, PNM I/O."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .exceptions import ContractError, IngestionError, PNMParseError
from .nn import make_rng

__all__ = [
    "SequenceSet",
    "PRNG_ALGORITHM",
    "gen_moving_shapes",
    "read_pnm",
    "write_pnm",
    "load_frame_dir",
    "load_dataset",
    "write_frame_dir",
    "center_crop",
    "resize_nearest",
    "window_count",
    "frame_variation",
]

PRNG_ALGORITHM = "philox4x64-10/numpy-SeedSequence"
FRAME_EXTENSIONS = (".pgm", ".ppm", ".pnm")


@dataclass
class SequenceSet:
    """Equal-shaped sequences stored as one (N, T, C, H, W) float32 array in [0, 1]."""

    sequences: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        seqs = np.asarray(self.sequences, dtype=np.float32)
        if seqs.ndim != 5:
            raise ContractError(f"sequences must be (N, T, C, H, W), got shape {seqs.shape}")
        if seqs.size and (seqs.min() < 0 or seqs.max() > 1):
            raise ContractError("sequence values must lie in [0, 1]")
        self.sequences = seqs

    def __len__(self):
        return self.sequences.shape[0]

    def __getitem__(self, idx):
        return self.sequences[idx]

    @property
    def seq_len(self) -> int:
        return self.sequences.shape[1]

    @property
    def frame_shape(self) -> Tuple[int, int, int]:
        return tuple(self.sequences.shape[2:])

    def split(self, n_first: int) -> Tuple["SequenceSet", "SequenceSet"]:
        return (SequenceSet(self.sequences[:n_first], dict(self.meta, split="head")),
                SequenceSet(self.sequences[n_first:], dict(self.meta, split="tail")))

    def batches(self, batch_size: int, order: Optional[np.ndarray] = None) -> Iterator[np.ndarray]:
        """Yield (T, B, C, H, W) batches; the last one may be smaller."""
        idx = np.arange(len(self)) if order is None else order
        for start in range(0, len(idx), batch_size):
            yield np.ascontiguousarray(self.sequences[idx[start:start + batch_size]].transpose(1, 0, 2, 3, 4))


# ---------------------------------------------------------------------------
# synthetic data


def _render(kind: str, top: int, left: int, extent: int, H: int, W: int, antialias: int) -> np.ndarray:
    s = antialias
    ys = (np.arange(H * s) + 0.5) / s
    xs = (np.arange(W * s) + 0.5) / s
    if kind == "rect":
        mask = ((ys >= top) & (ys < top + extent))[:, None] & ((xs >= left) & (xs < left + extent))[None, :]
    else:
        r = extent / 2.0
        cy, cx = top + r, left + r
        mask = (ys[:, None] - cy) ** 2 + (xs[None, :] - cx) ** 2 <= r * r
    img = mask.astype(np.float32)
    if s > 1:
        img = img.reshape(H, s, W, s).mean(axis=(1, 3))
    return img


def _bounce(pos: int, vel: int, limit: int) -> Tuple[int, int]:
    pos += vel
    if pos < 0:
        pos, vel = -pos, -vel
    elif pos > limit:
        pos, vel = 2 * limit - pos, -vel
    return pos, vel


def gen_moving_shapes(seed: int, count: int, T: int, size: Tuple[int, int] = (32, 32),
                      num_shapes: int = 1, speed_range: Tuple[int, int] = (1, 2),
                      shape_size: Tuple[int, int] = (6, 10), kinds: Sequence[str] = ("rect", "disc"),
                      channels: int = 1, antialias: int = 1) -> SequenceSet:
    """Rectangles and discs translating at constant integer velocity and
    reflecting off the borders.

    Each velocity component has magnitude drawn from ``speed_range`` and a
    random sign. Background is 0 and shapes are 1 (fractional along edges
    when ``antialias > 1`` supersamples).
    """
    H, W = size
    lo, hi = speed_range
    smin, smax = shape_size
    if count < 0 or T < 1 or num_shapes < 0:
        raise ContractError("count, T and num_shapes must be non-negative (T >= 1)")
    if lo < 0 or hi < lo:
        raise ContractError(f"invalid speed_range {speed_range}")
    if smin < 1 or smax < smin or smax > min(H, W):
        raise ContractError(f"shapes of size {shape_size} do not fit a {H}x{W} frame")
    if hi > min(H, W) - smax:
        raise ContractError(f"speed {hi} too large for shapes of size {smax} in a {H}x{W} frame")
    for k in kinds:
        if k not in ("rect", "disc"):
            raise ContractError(f"unknown shape kind {k!r}")

    out = np.zeros((count, T, channels, H, W), dtype=np.float32)
    for n in range(count):
        rng = make_rng(seed, n)
        for _ in range(num_shapes):
            kind = kinds[int(rng.integers(len(kinds)))]
            extent = int(rng.integers(smin, smax + 1))
            ly, lx = H - extent, W - extent
            y, x = int(rng.integers(0, ly + 1)), int(rng.integers(0, lx + 1))
            vy = int(rng.integers(lo, hi + 1)) * (1 if rng.random() < 0.5 else -1)
            vx = int(rng.integers(lo, hi + 1)) * (1 if rng.random() < 0.5 else -1)
            for t in range(T):
                img = _render(kind, y, x, extent, H, W, antialias)
                np.maximum(out[n, t], img[None], out=out[n, t])
                y, vy = _bounce(y, vy, ly)
                x, vx = _bounce(x, vx, lx)
    meta = {
        "source": "moving_shapes",
        "seed": int(seed),
        "prng": PRNG_ALGORITHM,
        "count": count,
        "T": T,
        "size": [H, W],
        "num_shapes": num_shapes,
        "speed_range": [lo, hi],
        "shape_size": [smin, smax],
        "kinds": list(kinds),
        "channels": channels,
        "antialias": antialias,
    }
    return SequenceSet(out, meta)


# ---------------------------------------------------------------------------
# PNM


def _skip_ws_and_comments(buf: bytes, pos: int) -> int:
    while pos < len(buf):
        c = buf[pos:pos + 1]
        if c == b"#":
            nl = buf.find(b"\n", pos)
            pos = len(buf) if nl < 0 else nl + 1
        elif c.isspace():
            pos += 1
        else:
            break
    return pos


def _read_int(buf: bytes, pos: int, what: str) -> Tuple[int, int]:
    pos = _skip_ws_and_comments(buf, pos)
    start = pos
    while pos < len(buf) and buf[pos:pos + 1].isdigit():
        pos += 1
    if pos == start:
        raise PNMParseError(f"expected {what}", start)
    return int(buf[start:pos]), pos


def parse_pnm(buf: bytes) -> np.ndarray:
    """Decode binary P5/P6 bytes into a (C, H, W) float32 array in [0, 1]."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise PNMParseError(f"unsupported magic {magic!r}, expected P5 or P6", 0)
    channels = 1 if magic == b"P5" else 3
    width, pos = _read_int(buf, 2, "width")
    height, pos = _read_int(buf, pos, "height")
    maxval_pos = _skip_ws_and_comments(buf, pos)
    maxval, pos = _read_int(buf, pos, "maxval")
    if maxval != 255:
        raise PNMParseError(f"maxval {maxval} not supported (only 255)", maxval_pos)
    if width < 1 or height < 1:
        raise PNMParseError(f"invalid dimensions {width}x{height}", 2)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PNMParseError("expected single whitespace after maxval", pos)
    pos += 1
    n = width * height * channels
    if len(buf) - pos < n:
        raise PNMParseError(f"pixel data truncated: need {n} bytes, have {len(buf) - pos}", pos)
    px = np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos)
    img = px.reshape(height, width, channels).transpose(2, 0, 1)
    return img.astype(np.float32) / 255.0


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return parse_pnm(f.read())


def quantize(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(frame, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pnm(path, frame: np.ndarray) -> None:
    """Write a (C, H, W) frame in [0, 1] as P5 (C=1) or P6 (C=3)."""
    frame = np.asarray(frame)
    if frame.ndim == 2:
        frame = frame[None]
    if frame.ndim != 3 or frame.shape[0] not in (1, 3):
        raise ContractError(f"frame must be (1|3, H, W), got shape {frame.shape}")
    C, H, W = frame.shape
    magic = b"P5" if C == 1 else b"P6"
    header = magic + f"\n{W} {H}\n255\n".encode()
    payload = quantize(frame).transpose(1, 2, 0).tobytes()
    with open(path, "wb") as f:
        f.write(header + payload)


def write_frame_dir(path, frames: np.ndarray) -> List[Path]:
    """Write (T, C, H, W) frames as frame_%06d.pgm/ppm; returns the paths."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    out = []
    for t, frame in enumerate(frames):
        ext = "pgm" if frame.shape[0] == 1 else "ppm"
        p = path / f"frame_{t:06d}.{ext}"
        write_pnm(p, frame)
        out.append(p)
    return out


# ---------------------------------------------------------------------------
# ingestion


def center_crop(frame: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    _, H, W = frame.shape
    h, w = size
    if h > H or w > W:
        raise ContractError(f"crop {size} larger than frame {H}x{W}")
    top, left = (H - h) // 2, (W - w) // 2
    return frame[:, top:top + h, left:left + w]


def resize_nearest(frame: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    _, H, W = frame.shape
    h, w = size
    rows = np.minimum((np.arange(h) * H) // h, H - 1)
    cols = np.minimum((np.arange(w) * W) // w, W - 1)
    return frame[:, rows][:, :, cols]


def window_count(n_frames: int, seq_len: int, stride: int) -> int:
    if n_frames < seq_len:
        return 0
    return (n_frames - seq_len) // stride + 1


def _frame_files(path: Path) -> List[Path]:
    return sorted(p for p in path.iterdir() if p.is_file() and p.suffix.lower() in FRAME_EXTENSIONS)


def read_frames(path, center_crop_size=None, resize=None) -> np.ndarray:
    """All frames of one directory as (N, C, H, W), after crop and resize."""
    path = Path(path)
    if not path.is_dir():
        raise IngestionError(f"{path} is not a directory")
    files = _frame_files(path)
    if not files:
        raise IngestionError(f"no .pgm/.ppm frames in {path}")
    frames, bad = [], []
    shape = None
    for f in files:
        try:
            img = read_pnm(f)
        except (OSError, PNMParseError) as exc:
            bad.append(f"{f.name} ({exc})")
            continue
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            bad.append(f"{f.name} (shape {img.shape}, expected {shape})")
            continue
        if center_crop_size is not None:
            img = center_crop(img, center_crop_size)
        if resize is not None:
            img = resize_nearest(img, resize)
        frames.append(img)
    if bad:
        raise IngestionError(f"could not ingest {len(bad)} frame file(s) in {path}", bad)
    return np.stack(frames).astype(np.float32)


def load_frame_dir(path, center_crop=None, resize=None, stride: Optional[int] = None,
                   seq_len: int = 10) -> SequenceSet:
    """Window one directory of lexicographically ordered frames into sequences."""
    if seq_len < 1:
        raise ContractError("seq_len must be >= 1")
    stride = seq_len if stride is None else stride
    if stride < 1:
        raise ContractError("stride must be >= 1")
    frames = read_frames(path, center_crop, resize)
    n = window_count(len(frames), seq_len, stride)
    seqs = np.stack([frames[i * stride:i * stride + seq_len] for i in range(n)]) if n else \
        np.zeros((0, seq_len) + frames.shape[1:], dtype=np.float32)
    meta = {"source": "frame_dir", "path": str(path), "frames": len(frames), "seq_len": seq_len,
            "stride": stride, "center_crop": list(center_crop) if center_crop else None,
            "resize": list(resize) if resize else None}
    return SequenceSet(seqs, meta)


def load_dataset(root, center_crop=None, resize=None, stride: Optional[int] = None,
                 seq_len: int = 10) -> SequenceSet:
    """Load a directory of videos (one subdirectory each), or a single video directory."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"{root} is not a directory")
    videos = sorted(p for p in root.iterdir() if p.is_dir())
    if not videos:
        return load_frame_dir(root, center_crop, resize, stride, seq_len)
    parts = [load_frame_dir(v, center_crop, resize, stride, seq_len) for v in videos]
    shapes = {p.sequences.shape[2:] for p in parts if len(p)}
    if len(shapes) > 1:
        raise IngestionError("videos have different frame shapes; pass resize", [str(v) for v in videos])
    seqs = np.concatenate([p.sequences for p in parts])
    meta = {"source": "dataset", "path": str(root), "videos": [v.name for v in videos],
            "seq_len": seq_len, "stride": stride or seq_len,
            "center_crop": list(center_crop) if center_crop else None,
            "resize": list(resize) if resize else None}
    return SequenceSet(seqs, meta)


def frame_variation(seq: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Rectified brightening and darkening between consecutive frames."""
    seq = np.asarray(seq)
    if seq.shape[0] < 2:
        raise ContractError("frame_variation needs at least two frames")
    diff = seq[1:] - seq[:-1]
    return np.maximum(diff, 0), np.maximum(-diff, 0)
