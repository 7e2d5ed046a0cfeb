"""Egocentric depth + segmentation by voxel ray casting.

The world is a stack of unit voxels indexed (row, col, z). The camera sits
at the centre of the agent's cell at ``eye_height`` and looks along one of
four headings, tilted by ``pitch * pitch_step_deg``.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

WALL_ID = -1
EMPTY = 0


@dataclass(frozen=True)
class CameraConfig:
    rows: int = 24
    cols: int = 32
    hfov_deg: float = 90.0
    vfov_deg: float = 60.0
    pitch_step_deg: float = 30.0
    eye_height: float = 1.5
    view_distance: float = 8.0


@lru_cache(maxsize=64)
def ray_directions(heading, pitch, camera=CameraConfig()):
    """Unit ray per pixel, shape (rows*cols, 3), components (drow, dcol, dh)."""
    from .scene import HEADINGS

    fr, fc = HEADINGS[heading]
    rr, rc = fc, -fr  # right-hand vector
    j = (np.arange(camera.cols) + 0.5) / camera.cols - 0.5
    i = 0.5 - (np.arange(camera.rows) + 0.5) / camera.rows
    yaw = np.deg2rad(j * camera.hfov_deg)[None, :]
    el = np.deg2rad(i * camera.vfov_deg + pitch * camera.pitch_step_deg)[:, None]
    horiz = np.cos(el)
    fwd = horiz * np.cos(yaw)
    right = horiz * np.sin(yaw)
    d = np.empty((camera.rows, camera.cols, 3))
    d[..., 0] = fwd * fr + right * rr
    d[..., 1] = fwd * fc + right * rc
    d[..., 2] = np.sin(el) * np.ones_like(yaw)
    d = d.reshape(-1, 3)
    d.setflags(write=False)
    return d


def camera_origin(row, col, camera=CameraConfig()):
    return np.array([row + 0.5, col + 0.5, camera.eye_height])


def cast(vox, origin, dirs, max_dist):
    """Amanatides-Woo traversal for every ray at once.

    Returns ``(depth, hit)``: depth is the ray length to the first occupied
    voxel face (or the floor plane), ``inf`` when nothing is hit within
    ``max_dist``; hit holds the voxel value (object id, WALL_ID) or 0.
    """
    H, W, Z = vox.shape
    P = len(dirs)
    o = np.asarray(origin, dtype=float)
    base = np.floor(o)
    v = np.tile(base.astype(np.int64), (P, 1))
    step = np.sign(dirs).astype(np.int64)
    with np.errstate(divide="ignore"):
        tdelta = np.where(dirs != 0, 1.0 / np.abs(dirs), np.inf)
    frac = o - base
    tmax = np.where(dirs > 0, (1.0 - frac) * tdelta, np.where(dirs < 0, frac * tdelta, np.inf))
    depth = np.full(P, np.inf)
    hit = np.zeros(P, dtype=np.int64)
    active = np.arange(P)
    ar = np.arange(P)
    for _ in range(4 * (H + W + Z)):
        if active.size == 0:
            break
        tm = tmax[active]
        ax = np.argmin(tm, axis=1)
        k = ar[: active.size]
        t = tm[k, ax]
        keep = t <= max_dist
        active, ax, t = active[keep], ax[keep], t[keep]
        k = ar[: active.size]
        v[active, ax] += step[active, ax]
        tmax[active, ax] += tdelta[active, ax]
        vr, vc, vz = v[active, 0], v[active, 1], v[active, 2]
        floor = vz < 0
        depth[active[floor]] = t[floor]
        gone = floor | (vz >= Z) | (vr < 0) | (vr >= H) | (vc < 0) | (vc >= W)
        inside = ~gone
        vals = np.zeros(active.size, dtype=np.int64)
        vals[inside] = vox[vr[inside], vc[inside], vz[inside]]
        struck = vals != EMPTY
        depth[active[struck]] = t[struck]
        hit[active[struck]] = vals[struck]
        active = active[~(gone | struck)]
    return depth, hit


def back_project(origin, dirs, depth, eps=1e-6):
    """3-D points for finite-depth pixels; surface hits are nudged ``eps`` inward."""
    return origin[None, :] + (depth + eps)[:, None] * dirs
