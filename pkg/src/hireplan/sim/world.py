"""Deterministic household simulator: observation rendering and action execution."""

import copy
import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .. import catalog
from ..catalog import APPLIANCE_FOR, CATEGORY_INDEX, FURNITURE, SLICED
from .render import WALL_ID, CameraConfig, camera_origin, cast, ray_directions
from .scene import HEADINGS, make_small

NAV_KINDS = ("MoveAhead", "RotateLeft", "RotateRight", "LookUp", "LookDown")
INTERACTION_KINDS = ("PickUp", "Put", "Open", "Close", "ToggleOn", "ToggleOff",
                     "Clean", "Heat", "Cool", "Slice")
FAILURE_REASONS = ("TooFar", "Blocked", "NotVisible", "ReceptacleClosed", "WrongPitch",
                   "HandsFull", "HandsEmpty", "InvalidTarget")


@dataclass(frozen=True)
class Action:
    kind: str
    target: object = None  # object id or category name

    def __post_init__(self):
        if self.kind in NAV_KINDS:
            if self.target is not None:
                raise ValueError(f"{self.kind} takes no target")
        elif self.kind in INTERACTION_KINDS:
            if self.target is None:
                raise ValueError(f"{self.kind} needs a target")
        else:
            raise ValueError(f"unknown action kind {self.kind!r}")

    def __str__(self):
        return self.kind if self.target is None else f"{self.kind}({self.target})"

    @classmethod
    def parse(cls, text):
        """Inverse of ``str``: ``"Open(14)"`` targets id 14, ``"Put(Sink)"`` a category."""
        if "(" not in text:
            return cls(text)
        kind, arg = text[:-1].split("(", 1)
        return cls(kind, int(arg) if arg.lstrip("-").isdigit() else arg)


@dataclass
class ActionOutcome:
    success: bool
    failure_reason: str = None
    state_changed: bool = False

    def __post_init__(self):
        if self.success == (self.failure_reason is not None):
            raise ValueError("success must coincide with an absent failure_reason")


@dataclass
class AgentState:
    row: int
    col: int
    heading: int
    pitch: int = 0
    holding: int = None

    @property
    def cell(self):
        return (self.row, self.col)


@dataclass(frozen=True)
class SimConfig:
    interaction_range: float = 2.0
    camera: CameraConfig = CameraConfig()
    max_pitch: int = 1


@dataclass(frozen=True)
class NoiseConfig:
    depth_sigma: float = 0.0
    mask_dropout: float = 0.0


@dataclass
class Observation:
    depth: np.ndarray  # (rows, cols) ray length in cells, inf where nothing is hit
    seg_category: np.ndarray  # (rows, cols) category index, 0 = none
    seg_mask: np.ndarray  # (rows, cols) per-frame segment id, 0 = none
    detected: frozenset  # {(object id, category)}
    pose: AgentState
    step_index: int
    holding_category: str = None
    seg_ids: tuple = ()  # seg_ids[k - 1] is the object id behind segment k (WALL_ID for walls)

    @property
    def categories(self):
        return {c for _, c in self.detected}


_CATEGORY_BY_INDEX = {v: k for k, v in CATEGORY_INDEX.items()}


def category_name(index):
    return _CATEGORY_BY_INDEX.get(int(index))


def _fail(reason):
    return ActionOutcome(False, reason, False)


_OK = ActionOutcome(True, None, True)
_NOOP = ActionOutcome(True, None, False)


class Simulator:
    """Single-episode world. ``step`` mutates the world in place; failed
    actions never change it."""

    def __init__(self, scene, config=None, noise=None, seed=0):
        self.scene = copy.deepcopy(scene)
        self.config = config or SimConfig()
        self.noise = noise or NoiseConfig()
        r, c, h = scene.agent_start
        self.agent = AgentState(int(r), int(c), int(h))
        self.rng = np.random.default_rng(seed)
        self.step_count = 0
        self._version = 0
        self._vox = None
        self._render_cache = {}
        self._blocked = self.scene.blocked()

    # ------------------------------------------------------------------
    # geometry
    # ------------------------------------------------------------------
    def voxels(self):
        if self._vox is not None:
            return self._vox
        s = self.scene
        H, W = s.grid_size
        vox = np.zeros((H, W, s.height_levels), dtype=np.int64)
        vox[s.walls] = WALL_ID
        for o in s.objects.values():
            if o.pickupable:
                continue
            for r, c in o.cells:
                for z in FURNITURE[o.kind].body_levels:
                    vox[r, c, z] = o.id
        for oid in sorted(s.containment, reverse=True):
            rid, slot = s.containment[oid]
            recep = s.objects[rid]
            if recep.openable and not recep.open:
                continue
            r, c, z = recep.slots[slot]
            vox[r, c, z] = oid  # smallest id wins when slices share a slot
        self._vox = vox
        return vox

    def _changed(self):
        self._version += 1
        self._vox = None
        self._render_cache = {}  # rebinding keeps caches shared with clones intact

    def render(self, agent=None):
        """Noise-free (depth, hit ids) for the given or current pose."""
        a = agent or self.agent
        key = (a.row, a.col, a.heading, a.pitch)
        if key not in self._render_cache:
            cam = self.config.camera
            dirs = ray_directions(a.heading, a.pitch, cam)
            self._render_cache[key] = cast(self.voxels(), camera_origin(a.row, a.col, cam),
                                           dirs, cam.view_distance)
        return self._render_cache[key]

    def visible_ids(self, agent=None):
        _, hit = self.render(agent)
        return {int(i) for i in np.unique(hit) if i > 0}

    def traversable(self, r, c):
        H, W = self._blocked.shape
        return 0 <= r < H and 0 <= c < W and not self._blocked[r, c]

    def planar_distance(self, obj_id, agent=None):
        a = agent or self.agent
        o = self.scene.objects[obj_id]
        if o.pickupable:
            loc = self.scene.location(obj_id)
            cells = [] if loc is None else [loc[:2]]
        else:
            cells = o.cells
        if not cells:
            return np.inf
        return min(np.hypot(r - a.row, c - a.col) for r, c in cells)

    def target_levels(self, obj_id, kind):
        o = self.scene.objects[obj_id]
        if o.pickupable:
            loc = self.scene.location(obj_id)
            return () if loc is None else (loc[2],)
        if kind in ("Open", "Close"):
            return FURNITURE[o.kind].body_levels
        return o.levels

    # ------------------------------------------------------------------
    # observation
    # ------------------------------------------------------------------
    def observe(self):
        cam = self.config.camera
        depth, hit = self.render()
        depth = depth.copy()
        hit = hit.copy()
        p = self.noise.mask_dropout
        if p > 0:
            for oid in sorted(int(i) for i in np.unique(hit) if i > 0):
                if self.rng.random() < p:
                    hit[hit == oid] = 0
        if self.noise.depth_sigma > 0:
            noise = self.rng.standard_normal(depth.shape)
            finite = np.isfinite(depth)
            depth[finite] *= 1.0 + self.noise.depth_sigma * noise[finite]
        seg_cat = np.zeros(hit.shape, dtype=np.int64)
        seg_mask = np.zeros(hit.shape, dtype=np.int64)
        ids, first = np.unique(hit, return_index=True)
        order = [int(i) for _, i in sorted(zip(first, ids)) if i != 0]
        for local, oid in enumerate(order, start=1):
            cat = catalog.WALL if oid == WALL_ID else self.scene.objects[oid].category
            sel = hit == oid
            seg_cat[sel] = CATEGORY_INDEX[cat]
            seg_mask[sel] = local
        detected = frozenset((oid, self.scene.objects[oid].category) for oid in order if oid > 0)
        shape = (cam.rows, cam.cols)
        held = self.agent.holding
        return Observation(
            depth=depth.reshape(shape), seg_category=seg_cat.reshape(shape),
            seg_mask=seg_mask.reshape(shape), detected=detected,
            pose=replace(self.agent), step_index=self.step_count,
            holding_category=None if held is None else self.scene.objects[held].category,
            seg_ids=tuple(order),
        )

    # ------------------------------------------------------------------
    # actions
    # ------------------------------------------------------------------
    def step(self, action):
        outcome = self._execute(action)
        self.step_count += 1
        return outcome

    def check(self, action):
        """Failure reason ``action`` would meet right now, or None; no side effects."""
        clone = self.clone()
        clone._render_cache = self._render_cache
        out = clone._execute(action)
        return out.failure_reason

    def _execute(self, a):
        k = a.kind
        ag = self.agent
        if k == "MoveAhead":
            dr, dc = HEADINGS[ag.heading]
            if not self.traversable(ag.row + dr, ag.col + dc):
                return _fail("Blocked")
            ag.row += dr
            ag.col += dc
            return _OK
        if k in ("RotateLeft", "RotateRight"):
            ag.heading = (ag.heading + (1 if k == "RotateRight" else 3)) % 4
            return _OK
        if k in ("LookUp", "LookDown"):
            new = ag.pitch + (1 if k == "LookUp" else -1)
            if abs(new) > self.config.max_pitch:
                return _fail("Blocked")
            ag.pitch = new
            return _OK
        handler = getattr(self, "_do_" + k.lower())
        return handler(a)

    # -- target resolution ---------------------------------------------
    def _candidates(self, target, pred):
        s = self.scene
        if isinstance(target, (int, np.integer)):
            o = s.objects.get(int(target))
            return None if o is None or not pred(o) else [o.id]
        if target not in CATEGORY_INDEX:
            return None
        ids = [i for i in s.instances(target) if pred(s.objects[i])]
        return ids or None

    def _visible(self, oid, visible):
        if oid in visible:
            return True
        o = self.scene.objects[oid]
        if o.is_receptacle:
            return any(self.scene.containment[c][0] == oid and c in visible
                       for c in self.scene.containment)
        return False

    def _pick(self, ids, kind, extra=None, prefer=None):
        """First candidate (nearest first) passing every check; otherwise the
        failure reason of the nearest visible one."""
        visible = self.visible_ids()
        R = self.config.interaction_range
        vis = [i for i in ids if self._visible(i, visible)]
        if not vis:
            hidden_near = [i for i in ids if self.scene.objects[i].pickupable
                           and self.scene.hidden(i) and self.planar_distance(i) <= R]
            return None, ("ReceptacleClosed" if hidden_near else "NotVisible")
        vis.sort(key=lambda i: (self.planar_distance(i), i))
        if prefer is not None:
            vis.sort(key=lambda i: not prefer(self.scene.objects[i]))
        first_reason = None
        for i in vis:
            reason = None
            if self.planar_distance(i) > R:
                reason = "TooFar"
            elif self.agent.pitch + 1 not in self.target_levels(i, kind):
                reason = "WrongPitch"
            elif extra is not None:
                reason = extra(self.scene.objects[i])
            if reason is None:
                return i, None
            first_reason = first_reason or reason
        return None, first_reason

    # -- handlers ------------------------------------------------------
    def _do_pickup(self, a):
        ids = self._candidates(a.target, lambda o: o.pickupable and o.id in self.scene.containment)
        if ids is None:
            return _fail("InvalidTarget")
        if self.agent.holding is not None:
            return _fail("HandsFull")
        oid, reason = self._pick(ids, "PickUp")
        if reason:
            return _fail(reason)
        del self.scene.containment[oid]
        self.agent.holding = oid
        self._changed()
        return _OK

    def _do_put(self, a):
        ids = self._candidates(a.target, lambda o: o.is_receptacle)
        if ids is None:
            return _fail("InvalidTarget")
        if self.agent.holding is None:
            return _fail("HandsEmpty")

        def extra(o):
            if o.openable and not o.open:
                return "ReceptacleClosed"
            if not self.scene.free_slots(o.id):
                return "InvalidTarget"
            return None

        rid, reason = self._pick(ids, "Put", extra,
                                 prefer=lambda o: (not o.openable or o.open) and bool(self.scene.free_slots(o.id)))
        if reason:
            return _fail(reason)
        recep = self.scene.objects[rid]
        free = self.scene.free_slots(rid)
        want = self.agent.pitch + 1
        free.sort(key=lambda s: (recep.slots[s][2] != want, s))
        self.scene.containment[self.agent.holding] = (rid, free[0])
        self.agent.holding = None
        self._changed()
        return _OK

    def _toggle_open(self, a, value):
        ids = self._candidates(a.target, lambda o: o.openable)
        if ids is None:
            return _fail("InvalidTarget")
        oid, reason = self._pick(ids, "Open", prefer=lambda o: o.open != value)
        if reason:
            return _fail(reason)
        o = self.scene.objects[oid]
        if o.open == value:
            return _NOOP
        o.open = value
        self._changed()
        return _OK

    def _do_open(self, a):
        return self._toggle_open(a, True)

    def _do_close(self, a):
        return self._toggle_open(a, False)

    def _switch(self, a, value):
        ids = self._candidates(a.target, lambda o: o.toggleable)
        if ids is None:
            return _fail("InvalidTarget")
        oid, reason = self._pick(ids, "Toggle", prefer=lambda o: o.is_on != value)
        if reason:
            return _fail(reason)
        o = self.scene.objects[oid]
        if o.is_on == value:
            return _NOOP
        o.is_on = value
        self._changed()
        return _OK

    def _do_toggleon(self, a):
        return self._switch(a, True)

    def _do_toggleoff(self, a):
        return self._switch(a, False)

    def _held_matches(self, target, flag):
        held = self.agent.holding
        if held is None:
            return "HandsEmpty"
        o = self.scene.objects[held]
        if isinstance(target, (int, np.integer)):
            ok = int(target) == held
        else:
            ok = target == o.category
        if not ok or not getattr(o, flag):
            return "InvalidTarget"
        return None

    def _treat(self, a, verb, flag, attr):
        if not isinstance(a.target, (int, np.integer)) and a.target not in CATEGORY_INDEX:
            return _fail("InvalidTarget")
        reason = self._held_matches(a.target, flag)
        if reason:
            return _fail(reason)
        appliance = APPLIANCE_FOR[verb]
        ids = self.scene.instances(appliance)
        if not ids:
            return _fail("NotVisible")

        def extra(o):
            if o.openable and not o.open:
                return "ReceptacleClosed"
            return None

        _, reason = self._pick(ids, verb, extra, prefer=lambda o: not o.openable or o.open)
        if reason:
            return _fail(reason)
        o = self.scene.objects[self.agent.holding]
        if getattr(o, attr):
            return _NOOP
        setattr(o, attr, True)
        return _OK

    def _do_clean(self, a):
        return self._treat(a, "Clean", "cleanable", "clean")

    def _do_heat(self, a):
        return self._treat(a, "Heat", "heatable", "hot")

    def _do_cool(self, a):
        return self._treat(a, "Cool", "coolable", "cold")

    def _do_slice(self, a):
        ids = self._candidates(a.target, lambda o: o.sliceable and o.id in self.scene.containment)
        if ids is None:
            return _fail("InvalidTarget")
        held = self.agent.holding
        if held is None:
            return _fail("HandsEmpty")
        if self.scene.objects[held].category != "Knife":
            return _fail("InvalidTarget")
        oid, reason = self._pick(ids, "Slice")
        if reason:
            return _fail(reason)
        s = self.scene
        where = s.containment.pop(oid)
        cat = s.objects.pop(oid).category
        for _ in range(2):
            nid = s.next_id
            s.next_id += 1
            s.objects[nid] = make_small(nid, SLICED[cat])
            s.containment[nid] = where
        self._changed()
        return _OK

    # ------------------------------------------------------------------
    # goals and bookkeeping
    # ------------------------------------------------------------------
    def goal_satisfied(self, task):
        per = [self._holds(p) for p in task.goal_conditions]
        return all(per), per

    def _holds(self, p):
        s = self.scene
        objs = [o for o in s.objects.values() if o.category == p.category]
        if p.kind == "InReceptacle":
            n = sum(1 for o in objs if o.id in s.containment
                    and s.objects[s.containment[o.id][0]].category == p.receptacle)
            return n >= p.count
        if p.kind == "IsClean":
            return any(o.clean for o in objs)
        if p.kind == "IsHot":
            return any(o.hot for o in objs)
        if p.kind == "IsCold":
            return any(o.cold for o in objs)
        if p.kind == "Holding":
            return any(o.id == self.agent.holding for o in objs)
        if p.kind == "IsOn":
            return any(o.is_on for o in objs)
        if p.kind == "ClosedWithin":
            for o in objs:
                if o.id in s.containment:
                    r = s.objects[s.containment[o.id][0]]
                    if r.category == p.receptacle and r.openable and not r.open:
                        return True
            return False
        raise ValueError(f"unknown predicate {p.kind}")

    def clone(self):
        new = copy.copy(self)
        new.scene = copy.deepcopy(self.scene)
        new.agent = replace(self.agent)
        new.rng = copy.deepcopy(self.rng)
        new._render_cache = dict(self._render_cache)
        return new

    def state_dict(self):
        return {"scene": self.scene.to_dict(), "agent": vars(self.agent).copy()}

    def state_hash(self):
        import json
        blob = json.dumps(self.state_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()
