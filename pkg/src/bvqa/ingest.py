"""Dataset plumbing: manifests, frame loading, splits, synthetic clips.

A dataset is a tab-separated manifest listing one video per row:

    id<TAB>source<TAB>mos<TAB>lo<TAB>hi<TAB>tag

where source is a frames directory or a .bvqf feature file (relative paths
resolve against the manifest's own directory), mos is the subjective score,
[lo, hi] is the rating scale it lives on, and tag names the dataset for
score calibration. Lines starting with # are comments. Every row in one
manifest must declare the same scale; mixing scales is how cross-dataset
comparisons silently go wrong, so it is rejected outright.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError, ManifestError

_HEADER = ("id", "source", "mos", "lo", "hi", "tag")


@dataclass(frozen=True)
class VideoRecord:
    video_id: str
    source: str
    mos: float
    scale_lo: float
    scale_hi: float
    tag: str


def load_manifest(path) -> list[VideoRecord]:
    path = os.fspath(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    base = os.path.dirname(os.path.abspath(path))
    records = []
    seen = set()
    scale = None
    for lineno, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cells = line.split("\t")
        if tuple(cells) == _HEADER:
            continue
        if len(cells) != 6:
            raise ManifestError(f"{path}:{lineno}: expected 6 tab-separated "
                                f"columns, got {len(cells)}")
        vid, source, mos_s, lo_s, hi_s, tag = (c.strip() for c in cells)
        if not vid:
            raise ManifestError(f"{path}:{lineno}: empty video id")
        if vid in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate video id {vid!r}")
        seen.add(vid)
        try:
            mos, lo, hi = float(mos_s), float(lo_s), float(hi_s)
        except ValueError as exc:
            raise ManifestError(f"{path}:{lineno}: non-numeric score field: {exc}") from exc
        if not (np.isfinite(mos) and np.isfinite(lo) and np.isfinite(hi)):
            raise ManifestError(f"{path}:{lineno}: non-finite score field")
        if lo >= hi:
            raise ManifestError(f"{path}:{lineno}: scale lo {lo} must be below hi {hi}")
        if not lo <= mos <= hi:
            raise ManifestError(f"{path}:{lineno}: mos {mos} outside scale [{lo}, {hi}]")
        if scale is None:
            scale = (lo, hi)
        elif scale != (lo, hi):
            raise ManifestError(f"{path}:{lineno}: scale [{lo}, {hi}] differs from "
                                f"[{scale[0]}, {scale[1]}] used earlier in the manifest")
        if not os.path.isabs(source):
            source = os.path.normpath(os.path.join(base, source))
        records.append(VideoRecord(vid, source, mos, lo, hi, tag))
    if not records:
        raise ManifestError(f"{path}: no video rows")
    return records


def save_manifest(records, path) -> None:
    path = os.fspath(path)
    if not records:
        raise ManifestError("save_manifest: no records")
    base = os.path.dirname(os.path.abspath(path))
    rows = ["\t".join(_HEADER)]
    for r in records:
        source = r.source
        if os.path.isabs(source):
            try:
                source = os.path.relpath(source, base)
            except ValueError:
                pass  # different drive; keep absolute
        rows.append(f"{r.video_id}\t{source}\t{r.mos!r}\t{r.scale_lo!r}"
                    f"\t{r.scale_hi!r}\t{r.tag}")
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
    os.replace(tmp, path)


def split_dataset(records, n_folds: int = 1, train_frac: float = 0.8,
                  seed: int = 0) -> list[tuple[list[VideoRecord], list[VideoRecord]]]:
    """Random train/test splits, one per fold, each from its own child seed.

    Fold i depends only on (seed, i), never on n_folds, so growing the fold
    count keeps earlier folds identical.
    """
    records = list(records)
    n = len(records)
    if n_folds < 1:
        raise ConfigError(f"split_dataset: n_folds must be >= 1, got {n_folds}")
    if not 0.0 < train_frac < 1.0:
        raise ConfigError(f"split_dataset: train_frac must be in (0, 1), got {train_frac}")
    n_train = round(train_frac * n)
    if n_train < 1 or n_train >= n:
        raise DataError(f"split_dataset: {n} videos at train_frac={train_frac} "
                        f"leaves an empty side")
    folds = []
    for i in range(n_folds):
        rng = np.random.default_rng([seed, i])
        perm = rng.permutation(n)
        train = [records[j] for j in perm[:n_train]]
        test = [records[j] for j in perm[n_train:]]
        folds.append((train, test))
    return folds


# ---------------------------------------------------------------------------
# frame loading


def _frame_key(name: str):
    stem = os.path.splitext(name)[0]
    m = re.fullmatch(r"\D*?(\d+)", stem)
    return (0, int(m.group(1)), name) if m else (1, 0, name)


def load_frame_sequence(directory, frame_stride: int = 1) -> np.ndarray:
    """Read a directory of numbered PNG frames into a (T, H, W, 3) uint8 array."""
    directory = os.fspath(directory)
    if frame_stride < 1:
        raise ConfigError(f"frame_stride must be >= 1, got {frame_stride}")
    if not os.path.isdir(directory):
        raise DataError(f"load_frame_sequence: {directory} is not a directory")
    names = sorted((n for n in os.listdir(directory)
                    if n.lower().endswith((".png", ".jpg", ".jpeg"))), key=_frame_key)
    names = names[::frame_stride]
    if not names:
        raise DataError(f"load_frame_sequence: no frames in {directory}")
    frames = []
    shape = None
    for name in names:
        full = os.path.join(directory, name)
        try:
            with Image.open(full) as img:
                if img.mode in ("P", "RGBA"):
                    img = img.convert("RGB")
                if img.mode != "RGB":
                    raise DataError(f"load_frame_sequence: {full}: expected a color "
                                    f"frame, got mode {img.mode}")
                arr = np.asarray(img, dtype=np.uint8)
        except (OSError, SyntaxError) as exc:
            raise DataError(f"load_frame_sequence: {full}: unreadable frame: {exc}") from exc
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise DataError(f"load_frame_sequence: {full}: frame size {arr.shape} "
                            f"differs from {shape}")
        frames.append(arr)
    return np.stack(frames)


def resolve_feature_path(record: VideoRecord, features_dir) -> str:
    """Where a record's feature file lives: explicit .bvqf source wins."""
    if record.source.endswith(".bvqf"):
        return record.source
    return os.path.join(os.fspath(features_dir), f"{record.video_id}.bvqf")


# ---------------------------------------------------------------------------
# synthetic clips


def _base_texture(rng: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Smooth colored texture with fine detail, float64 in roughly [0, 255]."""
    ch, cw = height // 16 + 2, width // 16 + 2
    coarse = rng.uniform(0.0, 255.0, size=(ch, cw, 3))
    field = ndimage.zoom(coarse, (height / ch, width / cw, 1.0), order=1)
    field = field[:height, :width]
    detail = rng.uniform(-20.0, 20.0, size=(height, width, 1))
    return field + detail


def degrade_frame(frame: np.ndarray, level: float,
                  rng: np.random.Generator) -> np.ndarray:
    """Blur plus noise, both growing with level in [0, 1]. level 0 is clean."""
    out = frame.astype(np.float64)
    if level > 0.0:
        out = ndimage.gaussian_filter(out, sigma=(3.0 * level, 3.0 * level, 0.0))
        out = out + rng.uniform(-40.0 * level, 40.0 * level, size=out.shape)
    return np.clip(out, 0.0, 255.0).astype(np.uint8)


def mos_for_level(level: float) -> float:
    return 5.0 - 4.0 * level


def synth_dataset(out_dir, n_videos: int = 8, n_frames: int = 6,
                  height: int = 224, width: int = 224, seed: int = 0,
                  levels=None, tag: str = "synthetic") -> list[VideoRecord]:
    """Generate degraded clips with known quality and write a manifest.

    Each video gets its own texture; frames drift by a horizontal roll so
    the clip is not static. Quality levels default to an even spread over
    [0, 1] (worst mos 1, best mos 5); an explicit level list is cycled
    across videos. Fully deterministic in the seed.
    """
    if n_videos < 1:
        raise ConfigError(f"synth_dataset: n_videos must be >= 1, got {n_videos}")
    if n_frames < 1:
        raise ConfigError(f"synth_dataset: n_frames must be >= 1, got {n_frames}")
    if levels is None:
        levels = [0.0] if n_videos == 1 else list(np.linspace(0.0, 1.0, n_videos))
    levels = [float(v) for v in levels]
    for v in levels:
        if not 0.0 <= v <= 1.0:
            raise ConfigError(f"synth_dataset: level {v} outside [0, 1]")
    out_dir = os.path.abspath(os.fspath(out_dir))
    os.makedirs(out_dir, exist_ok=True)
    records = []
    for i in range(n_videos):
        level = levels[i % len(levels)]
        rng = np.random.default_rng([seed, i])
        base = _base_texture(rng, height, width)
        vid = f"synth{i:03d}"
        frame_dir = os.path.join(out_dir, vid)
        os.makedirs(frame_dir, exist_ok=True)
        for t in range(n_frames):
            clean = np.roll(base, shift=3 * t, axis=1)
            frame = degrade_frame(clean, level, rng)
            Image.fromarray(frame).save(os.path.join(frame_dir, f"{t:06d}.png"))
        records.append(VideoRecord(vid, frame_dir, mos_for_level(level), 1.0, 5.0, tag))
    save_manifest(records, os.path.join(out_dir, "manifest.tsv"))
    return records


def with_feature_sources(records, features_dir) -> list[VideoRecord]:
    """Copies of records whose sources point at their feature files."""
    return [replace(r, source=resolve_feature_path(r, features_dir)) for r in records]
