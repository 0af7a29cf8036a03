"""Renderable scenes and a deterministic software rasterizer.

A Scene is an immutable triangle soup with optional per-vertex colors and an
optional texture with per-vertex UVs. `render` produces an RGB image plus a
depth map from any pose in one of three shading domains (textured, vertex
color, depth-shaded raw geometry). Rendering is a pure function: identical
inputs give bit-identical output, and concurrent renders of a shared Scene
are safe.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import _raster
from .geometry import Intrinsics, Pose, look_at


class MeshFormatError(ValueError):
    """Mesh file violates the supported OBJ subset."""


class ShadingMode(enum.Enum):
    TEXTURED = "textured"
    VERTEX_COLOR = "colored"
    RAW_GEOMETRY = "raw"

    @staticmethod
    def parse(name: str) -> "ShadingMode":
        for mode in ShadingMode:
            if mode.value == name:
                return mode
        valid = ", ".join(m.value for m in ShadingMode)
        raise ValueError(f"unknown shading mode '{name}' (valid: {valid})")


@dataclass(frozen=True)
class Scene:
    """Triangle mesh in world meters. Treat as immutable after construction."""

    vertices: np.ndarray  # (N,3) float64
    triangles: np.ndarray  # (M,3) int64
    colors: np.ndarray | None = None  # (N,3) floats in [0,1]
    uvs: np.ndarray | None = None  # (N,2) floats, present iff texture is
    texture: np.ndarray | None = None  # (TH,TW,3) float32 in [0,1]
    bbox_min: np.ndarray = field(init=False)
    bbox_max: np.ndarray = field(init=False)

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3))
        t = np.ascontiguousarray(np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3))
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if (self.uvs is None) != (self.texture is None):
            raise ValueError("UV coordinates and texture must be given together")
        if self.colors is not None:
            c = np.ascontiguousarray(np.asarray(self.colors, dtype=np.float64).reshape(-1, 3))
            if len(c) != len(v):
                raise ValueError("per-vertex colors must match vertex count")
            object.__setattr__(self, "colors", np.clip(c, 0.0, 1.0))
        if self.uvs is not None:
            uv = np.ascontiguousarray(np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2))
            if len(uv) != len(v):
                raise ValueError("per-vertex UVs must match vertex count")
            object.__setattr__(self, "uvs", uv)
            tex = np.ascontiguousarray(np.asarray(self.texture, dtype=np.float32))
            if tex.ndim != 3 or tex.shape[2] != 3:
                raise ValueError("texture must be an (H,W,3) array")
            object.__setattr__(self, "texture", tex)
        if len(v):
            object.__setattr__(self, "bbox_min", v.min(axis=0))
            object.__setattr__(self, "bbox_max", v.max(axis=0))
        else:
            object.__setattr__(self, "bbox_min", np.zeros(3))
            object.__setattr__(self, "bbox_max", np.zeros(3))

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.bbox_max - self.bbox_min))

    @property
    def n_triangles(self) -> int:
        return int(self.triangles.shape[0])


@dataclass(frozen=True)
class RenderedView:
    """RGB image in [0,1] plus per-pixel camera-space depth (+inf = background)."""

    image: np.ndarray  # (H,W,3) float32
    depth: np.ndarray  # (H,W) float64
    pose: Pose

    @property
    def resolution(self) -> tuple[int, int]:
        return (int(self.image.shape[0]), int(self.image.shape[1]))


_DUMMY_TEXTURE = np.zeros((1, 1, 3), dtype=np.float32)


def render(scene: Scene, pose: Pose, intr: Intrinsics, mode: ShadingMode = ShadingMode.TEXTURED) -> RenderedView:
    """Z-buffered perspective rasterization of the scene from `pose`.

    Pixels hitting no surface stay background black with +inf depth. A camera
    inside or facing away from the geometry is not an error: it simply sees
    less. Output dimensions equal the intrinsics dimensions.
    """
    if intr.width < 16 or intr.height < 16:
        raise ValueError("render resolution must be at least 16x16")
    if mode == ShadingMode.TEXTURED:
        if scene.texture is None:
            raise ValueError("textured shading requires a scene with texture and UVs")
        attrs = np.zeros((len(scene.vertices), 3), dtype=np.float64)
        attrs[:, :2] = scene.uvs
        texture = scene.texture
        shade = _raster.SHADE_TEXTURED
    elif mode == ShadingMode.VERTEX_COLOR:
        if scene.colors is None:
            raise ValueError("vertex-color shading requires per-vertex colors")
        attrs = np.ascontiguousarray(scene.colors)
        texture = _DUMMY_TEXTURE
        shade = _raster.SHADE_VERTEX_COLOR
    else:
        attrs = np.zeros((len(scene.vertices), 3), dtype=np.float64)
        texture = _DUMMY_TEXTURE
        shade = _raster.SHADE_RAW

    R = pose.rotation()
    cam_pts = np.ascontiguousarray((scene.vertices - pose.center) @ R.T)
    image = np.zeros((intr.height, intr.width, 3), dtype=np.float32)
    depth = np.full((intr.height, intr.width), np.inf, dtype=np.float64)
    diag = scene.diagonal
    if diag <= 0.0:
        diag = 1.0
    if scene.n_triangles:
        _raster.rasterize(
            cam_pts, scene.triangles, attrs, shade, texture, diag,
            float(intr.fx), float(intr.fy), float(intr.cx), float(intr.cy), image, depth,
        )
    return RenderedView(image, depth, pose)


# --------------------------------------------------------------------------
# OBJ subset I/O
#
# Supported: `v x y z [r g b]`, `vt u v`, `f a b c` / `f a/b ...` (triangles
# only). Faces with a normal index (`a/b/c`) have the normal ignored. Any
# other directive is skipped with a warning. Indices are 1-based.
# --------------------------------------------------------------------------


def load_mesh(path, texture_path=None) -> Scene:
    """Parse the OBJ subset at `path`; `texture_path` supplies the texture image."""
    positions: list[list[float]] = []
    colors: list[list[float]] = []
    uvs: list[list[float]] = []
    faces: list[tuple[int, ...]] = []  # flat (v,vt) pairs per corner, vt may be -1
    skipped: set[str] = set()

    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            key = parts[0]
            if key == "v":
                vals = _parse_floats(parts[1:], path, lineno)
                if len(vals) == 3:
                    positions.append(vals)
                    colors.append([])
                elif len(vals) == 6:
                    positions.append(vals[:3])
                    colors.append(vals[3:])
                else:
                    raise MeshFormatError(f"{path}:{lineno}: vertex needs 3 or 6 floats, got {len(vals)}")
            elif key == "vt":
                vals = _parse_floats(parts[1:], path, lineno)
                if len(vals) < 2:
                    raise MeshFormatError(f"{path}:{lineno}: texture coordinate needs 2 floats")
                uvs.append(vals[:2])
            elif key == "f":
                corners = parts[1:]
                if len(corners) != 3:
                    raise MeshFormatError(
                        f"{path}:{lineno}: only triangles are supported, face has {len(corners)} corners"
                    )
                face: list[int] = []
                for token in corners:
                    fields = token.split("/")
                    vi = _parse_index(fields[0], len(positions), "vertex", path, lineno)
                    ti = -1
                    if len(fields) >= 2 and fields[1]:
                        ti = _parse_index(fields[1], len(uvs), "texture coordinate", path, lineno)
                    face.extend((vi, ti))
                faces.append(tuple(face))
            else:
                if key not in skipped:
                    skipped.add(key)
                    warnings.warn(f"{path}:{lineno}: skipping unsupported directive '{key}'")

    has_colors = any(c for c in colors)
    if has_colors and not all(c for c in colors):
        raise MeshFormatError(f"{path}: some vertices have colors and some do not")

    uses_uv = any(f[1] >= 0 or f[3] >= 0 or f[5] >= 0 for f in faces)
    texture = None
    if texture_path is not None:
        if not uses_uv:
            raise MeshFormatError(f"{path}: texture given but no face has texture coordinates")
        if any(min(f[1], f[3], f[5]) < 0 for f in faces):
            raise MeshFormatError(f"{path}: texture given but some faces lack texture coordinates")
        texture = read_image(texture_path)
    elif uses_uv:
        warnings.warn(f"{path}: texture coordinates present but no texture given; ignoring them")
        uses_uv = False

    if not uses_uv:
        verts = np.array(positions, dtype=np.float64).reshape(-1, 3)
        cols = np.array(colors, dtype=np.float64) if has_colors else None
        tris = np.array([[f[0], f[2], f[4]] for f in faces], dtype=np.int64).reshape(-1, 3)
        return Scene(verts, tris, colors=cols)

    # split vertices so UVs become per-vertex
    remap: dict[tuple[int, int], int] = {}
    out_pos: list[list[float]] = []
    out_col: list[list[float]] = []
    out_uv: list[list[float]] = []
    tris = []
    for f in faces:
        idx = []
        for c in range(3):
            key2 = (f[2 * c], f[2 * c + 1])
            if key2 not in remap:
                remap[key2] = len(out_pos)
                out_pos.append(positions[key2[0]])
                out_col.append(colors[key2[0]])
                out_uv.append(uvs[key2[1]])
            idx.append(remap[key2])
        tris.append(idx)
    cols = np.array(out_col, dtype=np.float64) if has_colors else None
    return Scene(
        np.array(out_pos, dtype=np.float64).reshape(-1, 3),
        np.array(tris, dtype=np.int64).reshape(-1, 3),
        colors=cols,
        uvs=np.array(out_uv, dtype=np.float64).reshape(-1, 2),
        texture=read_image(texture_path),
    )


def _parse_floats(tokens, path, lineno) -> list[float]:
    try:
        return [float(t) for t in tokens]
    except ValueError as exc:
        raise MeshFormatError(f"{path}:{lineno}: non-numeric value") from exc


def _parse_index(token, count, what, path, lineno) -> int:
    try:
        idx = int(token)
    except ValueError as exc:
        raise MeshFormatError(f"{path}:{lineno}: non-integer {what} index '{token}'") from exc
    if idx <= 0:
        raise MeshFormatError(f"{path}:{lineno}: {what} indices are 1-based, got {idx}")
    if idx > count:
        raise MeshFormatError(f"{path}:{lineno}: {what} index {idx} out of range (have {count})")
    return idx - 1


def save_mesh(scene: Scene, path, texture_path=None) -> None:
    """Write the scene in the supported OBJ subset (texture saved separately)."""
    if scene.texture is not None and texture_path is None:
        raise ValueError("scene has a texture: pass texture_path to save it")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# triangle mesh\n")
        for i, v in enumerate(scene.vertices):
            line = f"v {v[0]!r} {v[1]!r} {v[2]!r}"
            if scene.colors is not None:
                c = scene.colors[i]
                line += f" {c[0]!r} {c[1]!r} {c[2]!r}"
            fh.write(line + "\n")
        if scene.uvs is not None:
            for uv in scene.uvs:
                fh.write(f"vt {uv[0]!r} {uv[1]!r}\n")
            for t in scene.triangles:
                fh.write(f"f {t[0] + 1}/{t[0] + 1} {t[1] + 1}/{t[1] + 1} {t[2] + 1}/{t[2] + 1}\n")
        else:
            for t in scene.triangles:
                fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
    if scene.texture is not None:
        write_image(texture_path, scene.texture)


# --------------------------------------------------------------------------
# Synthetic desk-scale scenes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneSpec:
    """Deterministic recipe for a textured room with boxes."""

    seed: int = 0
    room: tuple[float, float, float] = (10.0, 3.0, 10.0)  # x, y (up), z extents
    n_objects: int = 12
    texture_size: int = 256


class _SceneBuilder:
    def __init__(self, rng: np.random.Generator, texture: np.ndarray, tile_grid: int):
        self.rng = rng
        self.texture = texture
        self.tile_grid = tile_grid
        self.pos: list[np.ndarray] = []
        self.col: list[np.ndarray] = []
        self.uv: list[np.ndarray] = []
        self.tris: list[list[int]] = []

    def quad(self, p00, p10, p11, p01):
        """Add a quad (two triangles) with a random texture tile + face color."""
        g = self.tile_grid
        tile = self.rng.integers(0, g * g)
        tu0 = (tile % g) / g
        tv0 = (tile // g) / g
        inset = 0.02 / g
        u0, u1 = tu0 + inset, tu0 + 1.0 / g - inset
        v0, v1 = tv0 + inset, tv0 + 1.0 / g - inset
        base = self.rng.uniform(0.25, 0.95, size=3)
        jitter = self.rng.uniform(-0.08, 0.08, size=(4, 3))
        start = len(self.pos)
        corners = [np.asarray(p, dtype=np.float64) for p in (p00, p10, p11, p01)]
        uvs = [(u0, v0), (u1, v0), (u1, v1), (u0, v1)]
        for k in range(4):
            self.pos.append(corners[k])
            self.col.append(np.clip(base + jitter[k], 0.05, 1.0))
            self.uv.append(np.array(uvs[k], dtype=np.float64))
        self.tris.append([start, start + 1, start + 2])
        self.tris.append([start, start + 2, start + 3])

    def box(self, lo, hi):
        x0, y0, z0 = lo
        x1, y1, z1 = hi
        self.quad((x0, y0, z0), (x1, y0, z0), (x1, y1, z0), (x0, y1, z0))  # -z face
        self.quad((x0, y0, z1), (x1, y0, z1), (x1, y1, z1), (x0, y1, z1))  # +z face
        self.quad((x0, y0, z0), (x0, y0, z1), (x0, y1, z1), (x0, y1, z0))  # -x face
        self.quad((x1, y0, z0), (x1, y0, z1), (x1, y1, z1), (x1, y1, z0))  # +x face
        self.quad((x0, y0, z0), (x1, y0, z0), (x1, y0, z1), (x0, y0, z1))  # bottom
        self.quad((x0, y1, z0), (x1, y1, z0), (x1, y1, z1), (x0, y1, z1))  # top

    def build(self) -> Scene:
        return Scene(
            np.array(self.pos, dtype=np.float64),
            np.array(self.tris, dtype=np.int64),
            colors=np.array(self.col, dtype=np.float64),
            uvs=np.array(self.uv, dtype=np.float64),
            texture=self.texture,
        )


def _make_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Blocky color noise modulated by a checker pattern, values in (0,1]."""
    cell = 8
    n = max(size // cell, 1)
    base = rng.uniform(0.15, 1.0, size=(n, n, 3))
    tex = np.repeat(np.repeat(base, cell, axis=0), cell, axis=1)[:size, :size]
    ii, jj = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    checker = ((ii // 16 + jj // 16) % 2).astype(np.float64)
    tex = tex * (0.55 + 0.45 * checker[..., None])
    return np.clip(tex, 0.02, 1.0).astype(np.float32)


def make_synthetic_scene(spec: SceneSpec) -> Scene:
    """Deterministic textured room with boxes on the floor, fully set by the seed.

    Boxes keep clear of the room center so interior viewpoints do not start
    inside geometry.
    """
    rx, ry, rz = spec.room
    if rx <= 0 or ry <= 0 or rz <= 0:
        raise ValueError("room dimensions must be positive")
    rng = np.random.default_rng(spec.seed)
    builder = _SceneBuilder(rng, _make_texture(rng, spec.texture_size), tile_grid=4)

    builder.quad((0, 0, 0), (rx, 0, 0), (rx, 0, rz), (0, 0, rz))  # floor
    builder.quad((0, ry, 0), (rx, ry, 0), (rx, ry, rz), (0, ry, rz))  # ceiling
    builder.quad((0, 0, 0), (rx, 0, 0), (rx, ry, 0), (0, ry, 0))  # z=0 wall
    builder.quad((0, 0, rz), (rx, 0, rz), (rx, ry, rz), (0, ry, rz))  # z=rz wall
    builder.quad((0, 0, 0), (0, 0, rz), (0, ry, rz), (0, ry, 0))  # x=0 wall
    builder.quad((rx, 0, 0), (rx, 0, rz), (rx, ry, rz), (rx, ry, 0))  # x=rx wall

    horiz = min(rx, rz)
    clear_radius = 0.40 * horiz
    center = np.array([rx / 2.0, 0.0, rz / 2.0])
    for _ in range(spec.n_objects):
        placed = False
        for _attempt in range(100):
            sx = rng.uniform(0.05, 0.15) * horiz
            sz = rng.uniform(0.05, 0.15) * horiz
            sy = rng.uniform(0.15, 0.6) * ry
            margin = 0.03 * horiz
            cx = rng.uniform(sx / 2 + margin, rx - sx / 2 - margin)
            cz = rng.uniform(sz / 2 + margin, rz - sz / 2 - margin)
            d = math.hypot(cx - center[0], cz - center[2])
            if d > clear_radius + 0.5 * math.hypot(sx, sz):
                builder.box((cx - sx / 2, 0.0, cz - sz / 2), (cx + sx / 2, sy, cz + sz / 2))
                placed = True
                break
        if not placed:  # crowded room: shrink and drop at the wall-side fallback spot
            builder.box(
                (0.03 * rx, 0.0, 0.03 * rz),
                (0.08 * rx, 0.3 * ry, 0.08 * rz),
            )
    return builder.build()


def ring_viewpoints(scene: Scene, n: int) -> list[Pose]:
    """Deterministic interior camera poses looking outward at the walls."""
    if n < 1:
        raise ValueError("need at least one viewpoint")
    lo, hi = scene.bbox_min, scene.bbox_max
    ext = hi - lo
    center = (lo + hi) / 2.0
    radius = 0.25 * min(ext[0], ext[2])
    cam_h = lo[1] + 0.45 * ext[1]
    poses = []
    for i in range(n):
        ang = 2.0 * math.pi * i / n
        d = np.array([math.cos(ang), 0.0, math.sin(ang)])
        pos = center + radius * d
        pos[1] = cam_h
        target = center + 0.45 * min(ext[0], ext[2]) * d
        target[1] = cam_h - 0.12 * ext[1]
        poses.append(look_at(pos, target))
    return poses


# --------------------------------------------------------------------------
# Image I/O: PNG (via Pillow) and binary PPM (P6)
# --------------------------------------------------------------------------


def write_image(path, image: np.ndarray) -> None:
    """Write a float [0,1] RGB image as 8-bit PNG or binary PPM by extension."""
    arr = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    u8 = np.round(arr * 255.0).astype(np.uint8)
    path = str(path)
    if path.lower().endswith(".ppm"):
        h, w = u8.shape[:2]
        with open(path, "wb") as fh:
            fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
            fh.write(u8.tobytes())
    else:
        Image.fromarray(u8, mode="RGB").save(path, format="PNG")


def read_image(path) -> np.ndarray:
    """Read PNG/PPM into a float32 RGB array in [0,1]."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0
