"""Privileged reference policies: expert path length and plan feasibility.

Both know every object location and search over agent poses
(cell, heading, pitch) for the first pose from which an action succeeds.
"""

import itertools
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from . import catalog
from .catalog import APPLIANCE_FOR
from .sim.scene import HEADINGS
from .sim.world import Action, SimConfig, Simulator

_NAV = ("MoveAhead", "RotateLeft", "RotateRight", "LookUp", "LookDown")
_BLOCKING = ("ReceptacleClosed", "HandsEmpty", "HandsFull", "InvalidTarget")


class Incompletable(RuntimeError):
    pass


def _move(sim, state, kind):
    r, c, h, p = state
    if kind == "MoveAhead":
        dr, dc = HEADINGS[h]
        return (r + dr, c + dc, h, p) if sim.traversable(r + dr, c + dc) else None
    if kind == "RotateLeft":
        return (r, c, (h + 3) % 4, p)
    if kind == "RotateRight":
        return (r, c, (h + 1) % 4, p)
    q = p + (1 if kind == "LookUp" else -1)
    return (r, c, h, q) if abs(q) <= sim.config.max_pitch else None


def _objects_for(sim, target, kind):
    s = sim.scene
    if kind in APPLIANCE_FOR:
        return s.instances(APPLIANCE_FOR[kind])
    if isinstance(target, (int, np.integer)):
        return [int(target)] if int(target) in s.objects else []
    return s.instances(target) if target in catalog.CATEGORY_INDEX else []


def _near(sim, ids, kind, radius):
    """Pose filter: cell within range of some candidate and pitch at one of its levels."""
    cells = {}
    for oid in ids:
        o = sim.scene.objects[oid]
        if o.pickupable:
            loc = sim.scene.location(oid)
            if loc is None:
                continue
            fp, levels = [loc[:2]], {loc[2]}
        else:
            fp, levels = o.cells, set(sim.target_levels(oid, kind))
        for r, c in fp:
            cells.setdefault((r, c), set()).update(levels)

    def ok(state):
        r, c, _, p = state
        return any(np.hypot(r - a, c - b) <= radius and p + 1 in lv
                   for (a, b), lv in cells.items())
    return ok


def reach(sim, goal, near):
    """Shortest navigation sequence to a pose where ``goal(probe)`` is None.

    Returns ``(kinds, None)`` on success, ``(None, reason)`` otherwise.
    """
    a = sim.agent
    start = (a.row, a.col, a.heading, a.pitch)
    probe = sim.clone()
    probe._render_cache = sim._render_cache
    seen = {start: None}
    dq = deque([start])
    reasons = []
    while dq:
        st = dq.popleft()
        if near(st):
            probe.agent = replace(a, row=st[0], col=st[1], heading=st[2], pitch=st[3])
            reason = goal(probe)
            if reason is None:
                path = []
                while seen[st] is not None:
                    st, kind = seen[st]
                    path.append(kind)
                return path[::-1], None
            reasons.append(reason)
        for kind in _NAV:
            nxt = _move(sim, st, kind)
            if nxt is not None and nxt not in seen:
                seen[nxt] = (st, kind)
                dq.append(nxt)
    blocking = [r for r in reasons if r in _BLOCKING]
    if blocking:
        return None, blocking[0]
    return None, reasons[0] if reasons else "NotVisible"


def _run(sim, action):
    """Walk to the nearest pose where ``action`` succeeds and execute it."""
    ids = _objects_for(sim, action.target, action.kind)
    if not ids:
        return None, "InvalidTarget"
    near = _near(sim, ids, action.kind, sim.config.interaction_range)
    path, reason = reach(sim, lambda probe: probe.check(action), near)
    if path is None:
        return None, reason
    for kind in path:
        sim.step(Action(kind))
    out = sim.step(action)
    assert out.success, (action, out)
    return len(path) + 1, None


def _see(sim, category):
    """Walk until some instance of ``category`` is in view and within range."""
    ids = _objects_for(sim, category, "GoTo")
    if not ids:
        return None, "InvalidTarget"
    R = sim.config.interaction_range

    def goal(probe):
        vis = probe.visible_ids()
        for oid in ids:
            if probe._visible(oid, vis) and probe.planar_distance(oid) <= R:
                return None
        return "NotVisible"

    def near(state):
        r, c = state[:2]
        for oid in ids:
            o = sim.scene.objects[oid]
            loc = sim.scene.location(oid) if o.pickupable else None
            fp = [loc[:2]] if loc else o.cells
            if any(np.hypot(r - a, c - b) <= R for a, b in fp):
                return True
        return False

    path, reason = reach(sim, goal, near)
    if path is None:
        return None, reason
    for kind in path:
        sim.step(Action(kind))
    return len(path), None


# ----------------------------------------------------------------------
# expert length
# ----------------------------------------------------------------------

def _fetch(sim, oid):
    acts = []
    for anc in reversed(sim.scene.ancestors(oid)):
        o = sim.scene.objects[anc]
        if o.openable and not o.open:
            acts.append(Action("Open", anc))
    return acts + [Action("PickUp", oid)]


def _open_then(sim, oid, action):
    o = sim.scene.objects[oid]
    return ([Action("Open", oid)] if o.openable and not o.open else []) + [action]


def _script(sim, task, xs, ys):
    """Lazily produced privileged action list for one instance assignment
    (object ``xs[i]`` goes to receptacle ``ys[i]``)."""
    t = task.task_type
    for x, y in zip(xs, ys):
        yield from _fetch(sim, x)
        if t in ("CleanAndPlace", "HeatAndPlace", "CoolAndPlace"):
            verb = t[: -len("AndPlace")]
            app = sim.scene.instances(APPLIANCE_FOR[verb])[0]
            yield from _open_then(sim, app, Action(verb, x))
        if t == "ExamineInLight":
            yield Action("ToggleOn", y)
            return
        yield from _open_then(sim, y, Action("Put", y))
        if t == "PlaceInReceptacle":
            yield Action("Close", y)


def expert_length(scene, task, config=None):
    """Fewest steps over instance assignments for the privileged scripted policy."""
    config = config or SimConfig()
    base = Simulator(scene, config)
    xs_all = scene.instances(task.target_category)
    ys = scene.instances(task.receptacle_category)
    n = 2 if task.task_type == "PickTwoAndPlace" else 1
    best = None
    for xs in itertools.permutations(xs_all, n):
        for yy in itertools.product(ys, repeat=n):
            sim = base.clone()
            total = 0
            for act in _script(sim, task, xs, yy):
                steps, _ = _run(sim, act)
                if steps is None:
                    total = None
                    break
                total += steps
                if best is not None and total >= best:
                    break
            if total is not None and sim.goal_satisfied(task)[0]:
                best = total if best is None else min(best, total)
    if best is None:
        raise Incompletable(f"{task.task_type}({task.target_category}, {task.receptacle_category})")
    return best


# ----------------------------------------------------------------------
# category-level plan simulation
# ----------------------------------------------------------------------

@dataclass
class PlanResult:
    success: bool
    steps: int
    failed_index: int = None
    reason: str = None


def _open_choice(sim, category, plan, start):
    """Privileged pick for an Open sub-goal, decided by the next step that needs
    it: the closed instance holding the object to pick up, or a closed instance
    with room for a Put. Falls back to the category."""
    s = sim.scene
    closed = [i for i in s.instances(category) if not s.objects[i].open]
    for verb, obj, rec in plan[start:]:
        if verb == "PickUp" and obj in catalog.CATEGORY_INDEX:
            for oid in s.instances(obj):
                for anc in s.ancestors(oid):
                    if anc in closed:
                        return anc
        if verb == "Put" and rec == category:
            roomy = [i for i in closed if s.free_slots(i)]
            if roomy:
                return roomy[0]
            break
    return category


def simulate_plan(scene, task, plan, config=None):
    """Execute sub-goal keys with privileged navigation; report the first failure."""
    sim = Simulator(scene, config or SimConfig())
    keys = [g.key if hasattr(g, "key") else tuple(g) for g in plan]
    keys = [tuple(k) + (None,) * (3 - len(k)) for k in keys]
    total = 0
    for i, (verb, obj, rec) in enumerate(keys):
        cat = rec if verb == "Put" else obj
        if cat not in catalog.CATEGORY_INDEX:
            return PlanResult(False, total, i, "InvalidTarget")
        if verb == "GoTo":
            steps, reason = _see(sim, obj)
        else:
            target = _open_choice(sim, obj, keys, i + 1) if verb == "Open" else cat
            steps, reason = _run(sim, Action(verb, target))
        if steps is None:
            return PlanResult(False, total, i, reason)
        total += steps
    ok = sim.goal_satisfied(task)[0]
    return PlanResult(ok, total, None if ok else len(keys), None if ok else "GoalUnmet")
