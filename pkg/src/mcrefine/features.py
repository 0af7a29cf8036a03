"""Feature pyramids and the candidate scoring functions.

The built-in extractor turns an RGB image into a hierarchy of dense feature
volumes: level l is the image blurred with sigma = 2^(l-1), downsampled by
2^l, and expanded to {intensity, x-gradient, y-gradient, gradient magnitude}
per color channel (12 channels). Deeper levels have a larger receptive field
and tolerate bigger pose offsets; shallow levels discriminate fine ones.

Four scores compare a query against a rendered candidate (lower is better):
dense normalized per-pixel comparison, exhaustive keypoint matching,
window-constrained (patch-wise) keypoint matching, and implicit matching of
per-channel activation maxima.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import cv2
import numpy as np

cv2.setNumThreads(0)  # images here are tiny; keep scoring single-threaded per call

_TINY = 1e-12


class FeatureFormatError(ValueError):
    """Feature tensor file is malformed."""


@dataclass(frozen=True)
class PyramidConfig:
    """Built-in extractor settings: pyramid depth and channel set."""

    n_levels: int = 3
    channels: str = "grad"  # "grad": intensity+gradients (12ch); "intensity": RGB only

    def __post_init__(self):
        if self.n_levels < 1:
            raise ValueError("pyramid needs at least one level")
        if self.channels not in ("grad", "intensity"):
            raise ValueError(f"unknown channel spec '{self.channels}'")


@dataclass(frozen=True)
class FeaturePyramid:
    """Ordered feature volumes (C,H,W), spatial dims strictly decreasing."""

    levels: tuple[np.ndarray, ...]
    provenance: str = "builtin"

    def __post_init__(self):
        if not self.levels:
            raise ValueError("pyramid must have at least one level")
        object.__setattr__(self, "levels", tuple(self.levels))
        prev = None
        for i, vol in enumerate(self.levels):
            if vol.ndim != 3 or vol.shape[0] < 1:
                raise ValueError(f"level {i + 1} must be a (C,H,W) volume")
            if not np.all(np.isfinite(vol)):
                raise ValueError(f"level {i + 1} contains non-finite values")
            if prev is not None and not (vol.shape[1] < prev[0] and vol.shape[2] < prev[1]):
                raise ValueError("spatial dimensions must strictly decrease with level")
            prev = (vol.shape[1], vol.shape[2])

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def level(self, l: int) -> np.ndarray:
        """1-based level accessor (level 1 = finest)."""
        if not 1 <= l <= len(self.levels):
            raise ValueError(f"level {l} out of range 1..{len(self.levels)}")
        return self.levels[l - 1]


def _check_image(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an (H,W,3) image")
    if img.shape[0] < 32 or img.shape[1] < 32:
        raise ValueError("image must be at least 32x32")
    return img


def extract_level(image: np.ndarray, config: PyramidConfig, level: int) -> np.ndarray:
    """Compute one pyramid level; levels are independent of each other."""
    img = _check_image(image)
    h = img.shape[0] >> level
    w = img.shape[1] >> level
    if h < 4 or w < 4:
        raise ValueError(f"image too small for {level} pyramid levels")
    sigma = 2.0 ** (level - 1)
    blurred = cv2.GaussianBlur(img, (0, 0), sigmaX=sigma, sigmaY=sigma)
    small = cv2.resize(blurred, (w, h), interpolation=cv2.INTER_AREA)
    if config.channels == "intensity":
        return np.ascontiguousarray(small.transpose(2, 0, 1))
    gy = np.gradient(small, axis=0)
    gx = np.gradient(small, axis=1)
    chans = np.empty((12, h, w), dtype=np.float32)
    chans[0::4] = small.transpose(2, 0, 1)
    chans[1::4] = gx.transpose(2, 0, 1)
    chans[2::4] = gy.transpose(2, 0, 1)
    chans[3::4] = np.hypot(gx, gy).transpose(2, 0, 1)
    return chans


def extract_pyramid(image: np.ndarray, config: PyramidConfig = PyramidConfig()) -> FeaturePyramid:
    """Build all levels of the built-in pyramid for an RGB image in [0,1]."""
    img = _check_image(image)
    for l in range(1, config.n_levels + 1):
        if (img.shape[0] >> l) < 4 or (img.shape[1] >> l) < 4:
            raise ValueError(f"image {img.shape[0]}x{img.shape[1]} too small for {config.n_levels} levels")
    return FeaturePyramid(tuple(extract_level(img, config, l) for l in range(1, config.n_levels + 1)))


def dense_volume_score(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared distance between per-pixel L2-normalized channel vectors.

    Pixels whose channel vector has (near) zero norm in exactly one volume
    count as the maximum distance 4; zero in both counts as 0, so identical
    inputs always score 0. Result is symmetric and lies in [0, 4].
    """
    if a.shape != b.shape:
        raise ValueError(f"volume shapes differ: {a.shape} vs {b.shape}")
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    na = np.sqrt(np.einsum("chw,chw->hw", a, a))
    nb = np.sqrt(np.einsum("chw,chw->hw", b, b))
    tiny_a = na < _TINY
    tiny_b = nb < _TINY
    na_safe = np.where(tiny_a, np.float32(1.0), na)
    nb_safe = np.where(tiny_b, np.float32(1.0), nb)
    diff = a / na_safe[None] - b / nb_safe[None]
    d = np.einsum("chw,chw->hw", diff, diff)
    d = np.where(tiny_a ^ tiny_b, np.float32(4.0), d)
    d = np.where(tiny_a & tiny_b, np.float32(0.0), d)
    return float(min(d.mean(dtype=np.float64), 4.0))


def dense_score(query: FeaturePyramid, candidate: FeaturePyramid, level: int) -> float:
    """Dense normalized comparison at one pyramid level (lower is better)."""
    return dense_volume_score(query.level(level), candidate.level(level))


# --------------------------------------------------------------------------
# Sparse keypoint scoring
# --------------------------------------------------------------------------

_PATCH = 8  # descriptor patch side; keypoints closer than half a patch to the border are dropped


@dataclass(frozen=True)
class KeypointSet:
    """Harris corners with unit-norm patch descriptors, plus the image size."""

    keypoints: np.ndarray  # (K,2) float64 (x, y) pixels
    descriptors: np.ndarray  # (K,D) float64, unit rows
    width: int
    height: int

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 2)
        de = np.asarray(self.descriptors, dtype=np.float64)
        if len(kp) != len(de):
            raise ValueError("keypoints and descriptors must have equal length")
        if len(kp):
            if kp[:, 0].min() < 0 or kp[:, 0].max() >= self.width or kp[:, 1].min() < 0 or kp[:, 1].max() >= self.height:
                raise ValueError("keypoints must lie inside the image")
            norms = np.linalg.norm(de, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ValueError("descriptors must be unit norm")
        object.__setattr__(self, "keypoints", kp)
        object.__setattr__(self, "descriptors", de)

    def __len__(self) -> int:
        return len(self.keypoints)

    @property
    def diagonal_sq(self) -> float:
        return float(self.width**2 + self.height**2)


def detect_keypoints(image: np.ndarray, max_keypoints: int = 512) -> KeypointSet:
    """Top Harris corners with 8x8 mean-removed, L2-normalized patch descriptors.

    Deterministic: ties in response break by row-major position. A structure-
    free image yields an empty set.
    """
    img = _check_image(image)
    h, w = img.shape[:2]
    gray = img.mean(axis=2)
    gx = cv2.Sobel(gray, cv2.CV_32F, 1, 0, ksize=3)
    gy = cv2.Sobel(gray, cv2.CV_32F, 0, 1, ksize=3)
    a = cv2.GaussianBlur(gx * gx, (0, 0), 1.5)
    b = cv2.GaussianBlur(gy * gy, (0, 0), 1.5)
    c = cv2.GaussianBlur(gx * gy, (0, 0), 1.5)
    resp = (a * b - c * c) - 0.05 * (a + b) ** 2
    rmax = float(resp.max(initial=0.0))
    if rmax <= 0.0:
        return KeypointSet(np.zeros((0, 2)), np.zeros((0, _PATCH * _PATCH)), w, h)
    peak = cv2.dilate(resp, np.ones((3, 3), dtype=np.uint8))
    half = _PATCH // 2
    mask = (resp >= peak) & (resp > 1e-6 * rmax)
    mask[:half, :] = False
    mask[-half:, :] = False
    mask[:, :half] = False
    mask[:, -half:] = False
    ys, xs = np.nonzero(mask)
    if len(ys) == 0:
        return KeypointSet(np.zeros((0, 2)), np.zeros((0, _PATCH * _PATCH)), w, h)
    order = np.lexsort((xs, ys, -resp[ys, xs]))[:max_keypoints]
    pts = []
    descs = []
    for i in order:
        y, x = int(ys[i]), int(xs[i])
        patch = gray[y - half : y + half, x - half : x + half].astype(np.float64).ravel()
        patch -= patch.mean()
        n = float(np.linalg.norm(patch))
        if n < 1e-9:  # flat patch: not a usable corner
            continue
        pts.append((float(x), float(y)))
        descs.append(patch / n)
    if not pts:
        return KeypointSet(np.zeros((0, 2)), np.zeros((0, _PATCH * _PATCH)), w, h)
    return KeypointSet(np.array(pts), np.array(descs), w, h)


def _match_score(query: KeypointSet, cand: KeypointSet, window: float | None) -> float:
    sentinel = max(query.diagonal_sq, cand.diagonal_sq)
    if len(query) == 0 or len(cand) == 0:
        return sentinel
    dq = query.descriptors
    dt = cand.descriptors
    desc_d = np.maximum(
        (dq * dq).sum(axis=1)[:, None] + (dt * dt).sum(axis=1)[None, :] - 2.0 * (dq @ dt.T), 0.0
    )
    diff = query.keypoints[:, None, :] - cand.keypoints[None, :, :]
    spatial_d = np.einsum("ijk,ijk->ij", diff, diff)
    if window is not None:
        desc_d = np.where(spatial_d > window * window, np.inf, desc_d)
    nn_q = desc_d.argmin(axis=1)
    nn_t = desc_d.argmin(axis=0)
    rows = np.arange(len(query))
    mutual = (nn_t[nn_q] == rows) & np.isfinite(desc_d[rows, nn_q])
    if not np.any(mutual):
        return sentinel
    return float(spatial_d[rows[mutual], nn_q[mutual]].mean())


def match_score_exhaustive(query: KeypointSet, cand: KeypointSet) -> float:
    """Mean squared pixel displacement over mutual nearest-neighbor matches.

    No matches (or an empty side) scores the squared image diagonal so that
    evidence-free candidates rank below any matched one.
    """
    return _match_score(query, cand, None)


def match_score_patchwise(query: KeypointSet, cand: KeypointSet, window: float) -> float:
    """As exhaustive matching, but pairs farther than `window` pixels apart are inadmissible."""
    if window <= 0:
        raise ValueError("window must be positive")
    return _match_score(query, cand, window)


def implicit_volume_score(a: np.ndarray, b: np.ndarray, smooth_window: int) -> float:
    """Mean squared displacement between per-channel argmax locations.

    Channel maps are Gaussian-smoothed over `smooth_window` (odd) pixels
    first; argmax ties break at the first position in row-major order.
    """
    if smooth_window < 1 or smooth_window % 2 == 0:
        raise ValueError("smooth_window must be odd and >= 1")
    if a.shape != b.shape:
        raise ValueError(f"volume shapes differ: {a.shape} vs {b.shape}")
    n_ch, h, w = a.shape
    total = 0.0
    for ch in range(n_ch):
        sa = cv2.GaussianBlur(a[ch], (smooth_window, smooth_window), 0)
        sb = cv2.GaussianBlur(b[ch], (smooth_window, smooth_window), 0)
        ia = int(np.argmax(sa))
        ib = int(np.argmax(sb))
        ya, xa = divmod(ia, w)
        yb, xb = divmod(ib, w)
        total += float((ya - yb) ** 2 + (xa - xb) ** 2)
    return total / n_ch


def implicit_match_score(query: FeaturePyramid, candidate: FeaturePyramid, level: int, smooth_window: int = 5) -> float:
    """Implicit matching of channel activation maxima at one pyramid level."""
    return implicit_volume_score(query.level(level), candidate.level(level), smooth_window)


# --------------------------------------------------------------------------
# Feature tensor file: magic FPYR, u32 version=1, u32 L, then per level
# u32 C,H,W followed by C*H*W little-endian float32 in channel-major order.
# --------------------------------------------------------------------------

_MAGIC = b"FPYR"
_VERSION = 1


def save_features(pyramid: FeaturePyramid, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, pyramid.n_levels))
        for vol in pyramid.levels:
            c, h, w = vol.shape
            fh.write(struct.pack("<III", c, h, w))
            fh.write(np.ascontiguousarray(vol, dtype="<f4").tobytes())


def load_external_features(path) -> FeaturePyramid:
    """Read a feature tensor file; validates header, sizes, and finiteness."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise FeatureFormatError(f"{path}: bad magic {data[:4]!r}, expected {_MAGIC!r}")
    if len(data) < 12:
        raise FeatureFormatError(f"{path}: truncated header")
    version, n_levels = struct.unpack_from("<II", data, 4)
    if version != _VERSION:
        raise FeatureFormatError(f"{path}: unsupported version {version}")
    if n_levels < 1:
        raise FeatureFormatError(f"{path}: level count must be >= 1")
    offset = 12
    levels = []
    for l in range(n_levels):
        if offset + 12 > len(data):
            raise FeatureFormatError(f"{path}: truncated at level {l + 1} header")
        c, h, w = struct.unpack_from("<III", data, offset)
        offset += 12
        need = c * h * w * 4
        have = len(data) - offset
        if have < need:
            raise FeatureFormatError(f"{path}: level {l + 1} expected {need} data bytes, got {have}")
        vol = np.frombuffer(data, dtype="<f4", count=c * h * w, offset=offset).reshape(c, h, w)
        offset += need
        levels.append(vol.copy())
    if offset != len(data):
        raise FeatureFormatError(f"{path}: {len(data) - offset} trailing bytes after last level")
    try:
        return FeaturePyramid(tuple(levels), provenance="external")
    except ValueError as exc:
        raise FeatureFormatError(f"{path}: {exc}") from exc
