"""Multi-layered instance map built from egocentric depth + segmentation.

The dense grid has one layer per (category, height slice); every non-zero
cell holds an instance id. The registry keeps one footprint per instance
and is the authority the grid is rendered from.
"""

from dataclasses import dataclass, field

import numpy as np

from . import catalog
from .catalog import CATEGORY_INDEX
from .sim.render import CameraConfig, back_project, camera_origin, ray_directions
from .sim.world import category_name


class UnknownInstance(KeyError):
    pass


@dataclass(frozen=True)
class ProjectedMask:
    category: str
    z: int
    cells: frozenset
    source_id: int = field(default=None, compare=False)

    def __post_init__(self):
        if not self.cells:
            raise ValueError("empty mask")


@dataclass
class Instance:
    id: int
    category: str
    z: int
    footprint: set = field(default_factory=set)
    last_seen: int = -1
    object_ids: set = field(default_factory=set)

    def centroid(self):
        cells = sorted(self.footprint)
        m = np.mean(cells, axis=0)
        return min(cells, key=lambda rc: ((rc[0] - m[0]) ** 2 + (rc[1] - m[1]) ** 2, rc))


def project(obs, camera=CameraConfig(), grid_shape=None, height_levels=3, slice_height=1.0):
    """Top-down footprints of every segment, split by height slice."""
    pose = obs.pose
    mask = obs.seg_mask.reshape(-1)
    depth = obs.depth.reshape(-1)
    sel = (mask > 0) & np.isfinite(depth)
    if not sel.any():
        return []
    dirs = ray_directions(pose.heading, pose.pitch, camera)[sel]
    pts = back_project(camera_origin(pose.row, pose.col, camera), dirs, depth[sel])
    rows = np.floor(pts[:, 0]).astype(int)
    cols = np.floor(pts[:, 1]).astype(int)
    zs = np.floor(pts[:, 2] / slice_height).astype(int)
    keep = (zs >= 0) & (zs < height_levels)
    if grid_shape is not None:
        H, W = grid_shape
        keep &= (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W)
    seg = mask[sel][keep]
    cats = obs.seg_category.reshape(-1)[sel][keep]
    rows, cols, zs = rows[keep], cols[keep], zs[keep]
    groups = {}
    for s, c, r, cc, z in zip(seg.tolist(), cats.tolist(), rows.tolist(), cols.tolist(), zs.tolist()):
        groups.setdefault((s, z), (c, set()))[1].add((r, cc))
    ids = obs.seg_ids
    return [ProjectedMask(category_name(c), z, frozenset(cells),
                          ids[s - 1] if s - 1 < len(ids) else None)
            for (s, z), (c, cells) in sorted(groups.items())]


def iou(a, b):
    a, b = set(a), set(b)
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def assign_instance_id(mask, registry, theta, next_id):
    """Match ``mask`` against the instances of its (category, z) slice.

    ``registry`` maps id -> footprint for that slice only. Returns
    ``(id, is_new)``: the best-overlapping existing id when its IoU strictly
    exceeds ``theta`` (ties to the smallest id), else ``next_id``.
    """
    best_id, best = None, 0.0
    for iid in sorted(registry):
        score = iou(mask.cells, registry[iid])
        if score > best:
            best_id, best = iid, score
    if best_id is not None and best > theta:
        return best_id, False
    return next_id, True


class InstanceMap:
    def __init__(self, grid_shape, height_levels=3, theta=0.3, camera=CameraConfig(),
                 slice_height=1.0):
        if not 0 < theta < 1:
            raise ValueError("theta must lie in (0, 1)")
        self.grid_shape = tuple(grid_shape)
        self.height_levels = height_levels
        self.theta = theta
        self.camera = camera
        self.slice_height = slice_height
        H, W = self.grid_shape
        self.grid = np.zeros((len(catalog.CATEGORIES) + 1, H, W, height_levels), dtype=np.int32)
        self.instances = {}
        self.slices = {}  # (category, z) -> set of ids
        self.n = 0
        self.occupied = np.zeros((H, W), dtype=bool)
        self.explored = np.zeros((H, W), dtype=bool)
        self.collisions = np.zeros((H, W), dtype=bool)
        self.visited = set()

    # ------------------------------------------------------------------
    def slice_registry(self, category, z):
        return {i: self.instances[i].footprint for i in sorted(self.slices.get((category, z), ()))}

    def update(self, obs):
        masks = project(obs, self.camera, self.grid_shape, self.height_levels, self.slice_height)
        self._free_space(obs)
        if not masks:
            return self
        # every mask is scored against the registry as it stood before this frame
        frozen = {}
        plans = []
        for m in masks:
            if m.category == catalog.WALL:
                for r, c in m.cells:
                    self.occupied[r, c] = True
                continue
            key = (m.category, m.z)
            if key not in frozen:
                frozen[key] = self.slice_registry(*key)
            iid, new = assign_instance_id(m, frozen[key], self.theta, self.n + 1)
            if new:
                self.n += 1
            plans.append((m, iid, new))
        for m, iid, new in plans:
            self._merge(m, iid, new, obs.step_index)
            for r, c in m.cells:
                self.occupied[r, c] = True
        return self

    def _free_space(self, obs):
        pose = obs.pose
        self.explored[pose.row, pose.col] = True
        depth = obs.depth.reshape(-1)
        sel = (obs.seg_category.reshape(-1) == 0) & np.isfinite(depth)
        if not sel.any():
            return
        dirs = ray_directions(pose.heading, pose.pitch, self.camera)[sel]
        pts = back_project(camera_origin(pose.row, pose.col, self.camera), dirs, depth[sel])
        floor = pts[:, 2] < 0.5 * self.slice_height
        H, W = self.grid_shape
        r = np.floor(pts[floor, 0]).astype(int)
        c = np.floor(pts[floor, 1]).astype(int)
        ok = (r >= 0) & (r < H) & (c >= 0) & (c < W)
        self.explored[r[ok], c[ok]] = True

    def _merge(self, mask, iid, new, step):
        key = (mask.category, mask.z)
        ci = CATEGORY_INDEX[mask.category]
        if new:
            self.instances[iid] = Instance(iid, mask.category, mask.z)
            self.slices.setdefault(key, set()).add(iid)
        inst = self.instances[iid]
        # canonical form: a cell belongs to the last instance written there
        for other in sorted(self.slices[key] - {iid}):
            o = self.instances[other]
            if o.footprint & mask.cells:
                o.footprint -= mask.cells
                if not o.footprint:
                    self.slices[key].discard(other)
                    del self.instances[other]
                    self.visited.discard(other)
        inst.footprint |= mask.cells
        inst.last_seen = step
        if mask.source_id is not None:
            inst.object_ids.add(mask.source_id)
        for r, c in mask.cells:
            self.grid[ci, r, c, mask.z] = iid

    def mark_collision(self, cell):
        self.collisions[cell] = True

    def blocked(self):
        return self.occupied | self.collisions

    # ------------------------------------------------------------------
    def has_category(self, category):
        return any(i.category == category for i in self.instances.values())

    def categories(self):
        return {i.category for i in self.instances.values()}

    def instance_distance(self, field, iid):
        """Geodesic steps from the field's source to stand next to the instance."""
        H, W = self.grid_shape
        best = np.inf
        for r, c in self.instances[iid].footprint:
            for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
                rr, cc = r + dr, c + dc
                if 0 <= rr < H and 0 <= cc < W:
                    best = min(best, field[rr, cc] + 1)
            best = min(best, field[r, c])
        return best

    def query_instances(self, category, agent_cell, only_unvisited=False):
        """Instances of ``category`` as ``(id, centroid, z)``, nearest first by
        geodesic distance over the map's occupancy."""
        from .navigation import distance_field

        catalog.check_category(category)
        ids = [i for i, inst in self.instances.items() if inst.category == category
               and not (only_unvisited and i in self.visited)]
        if not ids:
            return []
        blocked = self.blocked().copy()
        blocked[agent_cell] = False
        field = distance_field(blocked, [agent_cell])
        scored = sorted((self.instance_distance(field, i), i) for i in ids)
        return [(i, self.instances[i].centroid(), self.instances[i].z) for _, i in scored]

    def mark_visited(self, iid):
        if iid not in self.instances:
            raise UnknownInstance(iid)
        self.visited.add(iid)
        return self

    def column(self, iid):
        """Ids of the same category whose footprints overlap ``iid`` at any height."""
        inst = self.instances[iid]
        return sorted(i for i, o in self.instances.items()
                      if o.category == inst.category and o.footprint & inst.footprint)

    # ------------------------------------------------------------------
    def to_dict(self):
        return {
            "schema_version": 1,
            "grid_shape": list(self.grid_shape),
            "height_levels": self.height_levels,
            "theta": self.theta,
            "n": self.n,
            "instances": [
                {"id": i.id, "category": i.category, "z": i.z,
                 "footprint": sorted(list(c) for c in i.footprint), "last_seen": i.last_seen,
                 "object_ids": sorted(i.object_ids)}
                for _, i in sorted(self.instances.items())
            ],
            "visited": sorted(self.visited),
            "occupied": np.argwhere(self.occupied).tolist(),
            "explored": np.argwhere(self.explored).tolist(),
            "collisions": np.argwhere(self.collisions).tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        m = cls(d["grid_shape"], d["height_levels"], d["theta"])
        m.n = d["n"]
        for e in d["instances"]:
            inst = Instance(e["id"], e["category"], e["z"], {tuple(c) for c in e["footprint"]},
                            e["last_seen"], set(e.get("object_ids", ())))
            m.instances[inst.id] = inst
            m.slices.setdefault((inst.category, inst.z), set()).add(inst.id)
            ci = CATEGORY_INDEX[inst.category]
            for r, c in inst.footprint:
                m.grid[ci, r, c, inst.z] = inst.id
        m.visited = set(d["visited"])
        for name in ("occupied", "explored", "collisions"):
            arr = getattr(m, name)
            for r, c in d[name]:
                arr[r, c] = True
        return m
