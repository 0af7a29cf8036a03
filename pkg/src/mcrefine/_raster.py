"""Scanline triangle rasterization kernel (numba-compiled).

Input geometry is already in camera space (x right, y down, z forward).
Triangles are clipped against the near plane, projected through the pinhole
model, and filled with a z-buffer using perspective-correct barycentric
attribute interpolation. Loop order over triangles and pixels is fixed and
depth ties keep the first-drawn surface, so output is bit-deterministic.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

Z_NEAR = 0.01

SHADE_RAW = 0
SHADE_VERTEX_COLOR = 1
SHADE_TEXTURED = 2


@njit(cache=True, nogil=True)
def rasterize(cam_pts, tris, attrs, shade_mode, texture, diag, fx, fy, cx, cy, image, depth):
    """Fill `image` (H,W,3 float32) and `depth` (H,W float64, +inf background).

    attrs: per-vertex attribute rows, 3 wide (UV in cols 0..1 for textured,
    RGB for vertex color, ignored for raw shading). `diag` scales the
    depth-to-gray mapping of raw shading.
    """
    H = image.shape[0]
    W = image.shape[1]
    th = texture.shape[0]
    tw = texture.shape[1]

    poly_p = np.empty((4, 3), dtype=np.float64)
    poly_a = np.empty((4, 3), dtype=np.float64)
    sx = np.empty(4, dtype=np.float64)
    sy = np.empty(4, dtype=np.float64)

    for t in range(tris.shape[0]):
        # clip against z = Z_NEAR (Sutherland-Hodgman, one plane -> <= 4 verts)
        cnt = 0
        for e in range(3):
            i0 = tris[t, e]
            i1 = tris[t, (e + 1) % 3]
            z0 = cam_pts[i0, 2]
            z1 = cam_pts[i1, 2]
            in0 = z0 >= Z_NEAR
            in1 = z1 >= Z_NEAR
            if in0:
                for k in range(3):
                    poly_p[cnt, k] = cam_pts[i0, k]
                    poly_a[cnt, k] = attrs[i0, k]
                cnt += 1
            if in0 != in1:
                s = (Z_NEAR - z0) / (z1 - z0)
                for k in range(3):
                    poly_p[cnt, k] = cam_pts[i0, k] + s * (cam_pts[i1, k] - cam_pts[i0, k])
                    poly_a[cnt, k] = attrs[i0, k] + s * (attrs[i1, k] - attrs[i0, k])
                cnt += 1
        if cnt < 3:
            continue

        for v in range(cnt):
            z = poly_p[v, 2]
            sx[v] = fx * poly_p[v, 0] / z + cx
            sy[v] = fy * poly_p[v, 1] / z + cy

        # fan triangulation of the clipped polygon
        for f in range(1, cnt - 1):
            x0 = sx[0]
            y0 = sy[0]
            x1 = sx[f]
            y1 = sy[f]
            x2 = sx[f + 1]
            y2 = sy[f + 1]
            z0 = poly_p[0, 2]
            z1 = poly_p[f, 2]
            z2 = poly_p[f + 1, 2]

            area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
            if abs(area) < 1e-12:
                continue
            inv_area = 1.0 / area

            xmin = min(x0, min(x1, x2))
            xmax = max(x0, max(x1, x2))
            ymin = min(y0, min(y1, y2))
            ymax = max(y0, max(y1, y2))
            px0 = int(math.floor(xmin - 0.5))
            px1 = int(math.ceil(xmax - 0.5))
            py0 = int(math.floor(ymin - 0.5))
            py1 = int(math.ceil(ymax - 0.5))
            if px0 < 0:
                px0 = 0
            if py0 < 0:
                py0 = 0
            if px1 > W - 1:
                px1 = W - 1
            if py1 > H - 1:
                py1 = H - 1

            for py in range(py0, py1 + 1):
                qy = py + 0.5
                for px in range(px0, px1 + 1):
                    qx = px + 0.5
                    w0 = ((x1 - qx) * (y2 - qy) - (x2 - qx) * (y1 - qy)) * inv_area
                    if w0 < 0.0:
                        continue
                    w1 = ((x2 - qx) * (y0 - qy) - (x0 - qx) * (y2 - qy)) * inv_area
                    if w1 < 0.0:
                        continue
                    w2 = 1.0 - w0 - w1
                    if w2 < 0.0:
                        continue
                    izs0 = w0 / z0
                    izs1 = w1 / z1
                    izs2 = w2 / z2
                    z = 1.0 / (izs0 + izs1 + izs2)
                    if z >= depth[py, px]:
                        continue
                    depth[py, px] = z
                    if shade_mode == SHADE_RAW:
                        g = np.float32(1.0 / (1.0 + z / diag))
                        image[py, px, 0] = g
                        image[py, px, 1] = g
                        image[py, px, 2] = g
                    elif shade_mode == SHADE_VERTEX_COLOR:
                        for k in range(3):
                            c = z * (izs0 * poly_a[0, k] + izs1 * poly_a[f, k] + izs2 * poly_a[f + 1, k])
                            if c < 0.0:
                                c = 0.0
                            elif c > 1.0:
                                c = 1.0
                            image[py, px, k] = np.float32(c)
                    else:
                        u = z * (izs0 * poly_a[0, 0] + izs1 * poly_a[f, 0] + izs2 * poly_a[f + 1, 0])
                        v = z * (izs0 * poly_a[0, 1] + izs1 * poly_a[f, 1] + izs2 * poly_a[f + 1, 1])
                        tx = int(u * tw)
                        ty = int((1.0 - v) * th)
                        if tx < 0:
                            tx = 0
                        elif tx > tw - 1:
                            tx = tw - 1
                        if ty < 0:
                            ty = 0
                        elif ty > th - 1:
                            ty = th - 1
                        image[py, px, 0] = texture[ty, tx, 0]
                        image[py, px, 1] = texture[ty, tx, 1]
                        image[py, px, 2] = texture[ty, tx, 2]
