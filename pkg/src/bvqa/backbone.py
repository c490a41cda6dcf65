"""Frozen patch feature extraction and the feature file format.

Features are per-patch vectors; a video becomes a (T, N, d) float32 tensor
for T frames and N patches per frame. Two extractor kinds exist:

  tiny-builtin  a fixed random-weight 3-layer strided convolution with
                global average pooling. Weights derive from the extractor
                seed and never train; it is a stand-in that exercises the
                full pipeline at desk scale.
  precomputed   vectors produced elsewhere (for example global-average
                -pooled activations of a large pretrained CNN, typically
                d=2048) and stored in feature files. The pipeline does not
                care which network or layer produced them; d is whatever
                the file header declares.

Feature file layout (little-endian): magic "BVQF", format version u32,
then T, N, d as u32, then T*N*d float32 values in row-major order, then a
64-bit payload checksum (blake2b digest of the raw payload bytes).
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FeatureFileError, ShapeError
from .patcher import DEFAULT_PATCH, DEFAULT_STRIDE, PatchGrid, extract_patches

MAGIC = b"BVQF"
FORMAT_VERSION = 1

EXTRACTOR_KINDS = ("tiny-builtin", "precomputed")


@dataclass(frozen=True)
class ExtractorSpec:
    kind: str = "tiny-builtin"
    dim: int = 64
    seed: int = 0


@dataclass
class FeatureTensor:
    """(T, N, d) float32 feature stack plus optional placement metadata."""

    data: np.ndarray
    grid: PatchGrid | None = field(default=None, compare=False)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ShapeError(f"FeatureTensor: expected (T, N, d), got {self.data.shape}")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_patches(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


# layer schedule (kernel, stride, channels); kernels are clamped to the
# current spatial size so any patch size >= 1 flows through
_LAYERS = ((7, 4, 8), (5, 3, 16), (3, 2, None))


class TinyExtractor:
    """Fixed random strided CNN + global average pooling. Never trains."""

    def __init__(self, dim: int, seed: int = 0):
        if dim < 1:
            raise ConfigError(f"TinyExtractor: feature dimension must be >= 1, got {dim}")
        self.dim = dim
        self.seed = seed
        rng = np.random.default_rng([seed, 0xB0B])
        self.weights = []
        c_in = 3
        for k, stride, c_out in _LAYERS:
            c_out = dim if c_out is None else c_out
            w = rng.normal(0.0, np.sqrt(2.0 / (k * k * c_in)), size=(k, k, c_in, c_out))
            b = rng.uniform(-0.1, 0.1, size=c_out)
            self.weights.append((w, b, stride))
            c_in = c_out

    def weights_checksum(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for w, b, _ in self.weights:
            h.update(w.tobytes())
            h.update(b.tobytes())
        return h.hexdigest()

    def features_for_patch(self, patch: np.ndarray) -> np.ndarray:
        """One (P, P, 3) patch -> (dim,) float64 vector."""
        if patch.ndim != 3 or patch.shape[2] != 3:
            raise ShapeError(f"TinyExtractor: expected (P, P, 3) patch, got {patch.shape}")
        if np.issubdtype(patch.dtype, np.integer):
            x = patch.astype(np.float64) / 255.0 - 0.5
        else:
            x = patch.astype(np.float64) - 0.5
        for w, b, stride in self.weights:
            k = min(w.shape[0], x.shape[0], x.shape[1])
            wk = w[:k, :k]
            win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(0, 1))
            win = win[::stride, ::stride]
            x = np.tensordot(win, wk, axes=([3, 4, 2], [0, 1, 2])) + b
            x = np.maximum(x, 0.0)
        return x.mean(axis=(0, 1))


def extract_features(frames: np.ndarray, spec: ExtractorSpec,
                     patch: int = DEFAULT_PATCH,
                     stride: int = DEFAULT_STRIDE) -> FeatureTensor:
    """Patch every frame and run the builtin extractor over each patch.

    frames: (T, H, W, 3) array. Deterministic for a fixed spec seed; the
    extractor is constructed fresh from the seed on every call, so nothing
    can drift between runs.
    """
    if spec.kind == "precomputed":
        raise ConfigError("extract_features: precomputed features are loaded "
                          "from files, not extracted")
    if spec.kind != "tiny-builtin":
        raise ConfigError(f"extract_features: unknown extractor kind {spec.kind!r}")
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[3] != 3:
        raise ShapeError(f"extract_features: expected (T, H, W, 3), got {frames.shape}")
    if frames.shape[0] < 1:
        raise ShapeError("extract_features: no frames")
    extractor = TinyExtractor(spec.dim, spec.seed)
    rows = []
    grid = None
    for frame in frames:
        patches, grid = extract_patches(frame, patch=patch, stride=stride)
        rows.append([extractor.features_for_patch(p) for p in patches])
    data = np.asarray(rows, dtype=np.float32)
    if not np.isfinite(data).all():
        raise FeatureFileError("extract_features: non-finite feature values")
    return FeatureTensor(data=data, grid=grid)


# ---------------------------------------------------------------------------
# file IO


def _payload_checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def save_features(tensor: FeatureTensor, path, overwrite: bool = False) -> None:
    """Write a feature file atomically (temp file then rename)."""
    path = os.fspath(path)
    if not path:
        raise FeatureFileError("save_features: empty path")
    if os.path.exists(path) and not overwrite:
        raise FeatureFileError(f"save_features: {path} exists (pass overwrite=True)")
    t, n, d = tensor.data.shape
    payload = np.ascontiguousarray(tensor.data, dtype="<f4").tobytes()
    blob = (MAGIC + struct.pack("<IIII", FORMAT_VERSION, t, n, d)
            + payload + struct.pack("<Q", _payload_checksum(payload)))
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_features(path) -> FeatureTensor:
    path = os.fspath(path)
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise FeatureFileError(f"load_features: cannot read {path}: {exc}") from exc
    head = struct.calcsize("<IIII") + len(MAGIC)
    if len(blob) < head + 8:
        raise FeatureFileError(f"load_features: {path}: truncated header")
    if blob[:4] != MAGIC:
        raise FeatureFileError(f"load_features: {path}: not a feature file (bad magic)")
    version, t, n, d = struct.unpack("<IIII", blob[4:head])
    if version != FORMAT_VERSION:
        raise FeatureFileError(f"load_features: {path}: unsupported format version "
                               f"{version} (expected {FORMAT_VERSION})")
    if t < 1 or n < 1 or d < 1:
        raise FeatureFileError(f"load_features: {path}: bad dimensions T={t} N={n} d={d}")
    expect = t * n * d * 4
    payload = blob[head:head + expect]
    if len(payload) != expect or len(blob) != head + expect + 8:
        raise FeatureFileError(f"load_features: {path}: truncated or oversized payload")
    (stored,) = struct.unpack("<Q", blob[head + expect:])
    if stored != _payload_checksum(payload):
        raise FeatureFileError(f"load_features: {path}: checksum mismatch")
    data = np.frombuffer(payload, dtype="<f4").reshape(t, n, d)
    data = data.astype(np.float32)  # native order, writable copy
    if not np.isfinite(data).all():
        raise FeatureFileError(f"load_features: {path}: non-finite values")
    return FeatureTensor(data=data)
