"""Scene data model, procedural generation and task sampling."""

import json
import random
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import catalog
from ..catalog import FURNITURE, FURNITURE_CATEGORY, OPENABLE, SMALL

SCHEMA_VERSION = 1

TASK_TYPES = (
    "PickAndPlace",
    "PickTwoAndPlace",
    "CleanAndPlace",
    "HeatAndPlace",
    "CoolAndPlace",
    "ExamineInLight",
    "PlaceInReceptacle",
)

HEADINGS = ((-1, 0), (0, 1), (1, 0), (0, -1))  # N, E, S, W as (drow, dcol)


class ProfileInfeasible(ValueError):
    pass


class UnknownTaskType(ValueError):
    pass


@dataclass
class ObjectInstance:
    id: int
    category: str
    kind: str
    cells: list
    levels: tuple = ()
    slots: list = field(default_factory=list)  # [(row, col, z)] for receptacles
    openable: bool = False
    open: bool = False
    pickupable: bool = False
    toggleable: bool = False
    is_on: bool = False
    sliceable: bool = False
    cleanable: bool = False
    heatable: bool = False
    coolable: bool = False
    clean: bool = False
    hot: bool = False
    cold: bool = False

    @property
    def is_receptacle(self):
        return bool(self.slots)


@dataclass
class SceneProfile:
    grid: tuple = (12, 12)
    rooms: int = 2
    small_range: tuple = (5, 8)
    occlusion_rate: float = 0.5
    height_levels: int = 3
    furniture: dict = field(default_factory=lambda: {
        "Cabinet": 2, "UpperCabinet": 2, "Drawer": 2, "Fridge": 1, "Microwave": 1,
        "Sink": 1, "CounterTop": 2, "DiningTable": 1, "Desk": 1, "Sofa": 1,
        "Shelf": 1, "GarbageCan": 1, "FloorLamp": 1,
    })

    def __post_init__(self):
        if not 0.0 <= self.occlusion_rate <= 1.0:
            raise ValueError(f"occlusion_rate must lie in [0, 1], got {self.occlusion_rate}")
        lo, hi = self.small_range
        if not 0 <= lo <= hi:
            raise ValueError(f"small_range must satisfy 0 <= lo <= hi, got {self.small_range}")
        if self.rooms < 1 or self.height_levels < 1:
            raise ValueError("rooms and height_levels must be positive")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("grid", "small_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Scene:
    seed: int
    grid_size: tuple
    walls: np.ndarray  # bool (H, W)
    objects: dict  # id -> ObjectInstance
    containment: dict  # small id -> (receptacle id, slot index)
    height_levels: int
    agent_start: tuple  # (row, col, heading)
    next_id: int = 1

    # -- geometry -------------------------------------------------------
    def blocked(self):
        """Cells an agent cannot stand on: walls and furniture footprints."""
        b = self.walls.copy()
        for o in self.objects.values():
            if not o.pickupable:
                for r, c in o.cells:
                    b[r, c] = True
        return b

    def slot_contents(self, recep_id, slot_index):
        return sorted(i for i, (rid, s) in self.containment.items()
                      if rid == recep_id and s == slot_index)

    def free_slots(self, recep_id):
        o = self.objects[recep_id]
        used = {s for rid, s in self.containment.values() if rid == recep_id}
        return [i for i in range(len(o.slots)) if i not in used]

    def location(self, obj_id):
        """(row, col, z) of a placed small object, None when held."""
        if obj_id not in self.containment:
            return None
        rid, s = self.containment[obj_id]
        return self.objects[rid].slots[s]

    def ancestors(self, obj_id):
        out = []
        cur = obj_id
        while cur in self.containment:
            cur = self.containment[cur][0]
            out.append(cur)
        return out

    def hidden(self, obj_id):
        """True when some enclosing receptacle is closed."""
        return any(self.objects[a].openable and not self.objects[a].open
                   for a in self.ancestors(obj_id))

    def instances(self, category):
        return sorted(i for i, o in self.objects.items() if o.category == category)

    # -- serialization --------------------------------------------------
    def to_dict(self):
        return {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "grid_size": list(self.grid_size),
            "walls": self.walls.astype(int).tolist(),
            "objects": [_obj_to_dict(o) for _, o in sorted(self.objects.items())],
            "containment": [[k, v[0], v[1]] for k, v in sorted(self.containment.items())],
            "height_levels": self.height_levels,
            "agent_start": list(self.agent_start),
            "next_id": self.next_id,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported scene schema {d.get('schema_version')!r}")
        objects = {}
        for od in d["objects"]:
            od = dict(od)
            od["cells"] = [tuple(c) for c in od["cells"]]
            od["levels"] = tuple(od["levels"])
            od["slots"] = [tuple(s) for s in od["slots"]]
            objects[od["id"]] = ObjectInstance(**od)
        return cls(
            seed=d["seed"],
            grid_size=tuple(d["grid_size"]),
            walls=np.array(d["walls"], dtype=bool),
            objects=objects,
            containment={k: (r, s) for k, r, s in d["containment"]},
            height_levels=d["height_levels"],
            agent_start=tuple(d["agent_start"]),
            next_id=d["next_id"],
        )

    def dumps(self):
        return json.dumps(self.to_dict(), sort_keys=True)


def _obj_to_dict(o):
    d = asdict(o)
    d["cells"] = [list(c) for c in o.cells]
    d["levels"] = list(o.levels)
    d["slots"] = [list(s) for s in o.slots]
    return d


# ----------------------------------------------------------------------
# tasks
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class Predicate:
    kind: str  # InReceptacle | IsClean | IsHot | IsCold | Holding | IsOn | ClosedWithin
    category: str
    receptacle: str = None
    count: int = 1


@dataclass
class TaskSpec:
    task_type: str
    target_category: str
    receptacle_category: str
    instruction_text: str
    goal_conditions: list
    step_by_step: list = None
    # categories as the instruction names them; may be a synonym or a
    # non-catalog word that the planner copies verbatim
    mentioned_target: str = None
    mentioned_receptacle: str = None

    def __post_init__(self):
        if self.task_type not in TASK_TYPES:
            raise UnknownTaskType(self.task_type)
        if not self.goal_conditions:
            raise ValueError("goal_conditions must be non-empty")
        for p in self.goal_conditions:
            catalog.check_category(p.category)
            if p.receptacle:
                catalog.check_category(p.receptacle)
        self.mentioned_target = self.mentioned_target or self.target_category
        self.mentioned_receptacle = self.mentioned_receptacle or self.receptacle_category

    def to_dict(self):
        d = asdict(self)
        d["goal_conditions"] = [asdict(p) for p in self.goal_conditions]
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.pop("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ValueError("unsupported task schema")
        d["goal_conditions"] = [Predicate(**p) for p in d["goal_conditions"]]
        return cls(**d)


def goal_conditions_for(task_type, target, receptacle):
    if task_type == "PickAndPlace":
        return [Predicate("InReceptacle", target, receptacle)]
    if task_type == "PickTwoAndPlace":
        return [Predicate("InReceptacle", target, receptacle, 1),
                Predicate("InReceptacle", target, receptacle, 2)]
    if task_type == "CleanAndPlace":
        return [Predicate("IsClean", target), Predicate("InReceptacle", target, receptacle)]
    if task_type == "HeatAndPlace":
        return [Predicate("IsHot", target), Predicate("InReceptacle", target, receptacle)]
    if task_type == "CoolAndPlace":
        return [Predicate("IsCold", target), Predicate("InReceptacle", target, receptacle)]
    if task_type == "ExamineInLight":
        return [Predicate("Holding", target), Predicate("IsOn", receptacle)]
    if task_type == "PlaceInReceptacle":
        return [Predicate("InReceptacle", target, receptacle),
                Predicate("ClosedWithin", target, receptacle)]
    raise UnknownTaskType(task_type)


def _words(category):
    return " ".join(sorted(catalog.tokens(category), key=category.lower().find))


_INSTRUCTIONS = {
    "PickAndPlace": ("Put a {t} {prep} the {r}.",
                     ["Go to the {t}.", "Pick up the {t}.", "Go to the {r}.", "Put the {t} {prep} the {r}."]),
    "PickTwoAndPlace": ("Put two {t}s {prep} the {r}.",
                        ["Find a {t}.", "Pick it up.", "Put it {prep} the {r}.", "Find another {t}.",
                         "Pick it up.", "Put it {prep} the {r}."]),
    "CleanAndPlace": ("Clean the {t} and put it {prep} the {r}.",
                      ["Pick up the {t}.", "Rinse the {t} in the sink.", "Put it {prep} the {r}."]),
    "HeatAndPlace": ("Heat a {t} and put it {prep} the {r}.",
                     ["Pick up the {t}.", "Heat it in the microwave.", "Put it {prep} the {r}."]),
    "CoolAndPlace": ("Chill a {t} and put it {prep} the {r}.",
                     ["Pick up the {t}.", "Cool it in the fridge.", "Put it {prep} the {r}."]),
    "ExamineInLight": ("Examine the {t} under the {r}.",
                       ["Pick up the {t}.", "Walk to the {r}.", "Turn on the {r}."]),
    "PlaceInReceptacle": ("Put the {t} away in the {r} and shut it.",
                          ["Pick up the {t}.", "Go to the {r}.", "Put the {t} inside.", "Close the {r}."]),
}


def render_instruction(task_type, target_word, recep_word, openable):
    text, steps = _INSTRUCTIONS[task_type]
    prep = "in" if openable else "on"
    fmt = dict(t=_words(target_word), r=_words(recep_word), prep=prep)
    return text.format(**fmt), [s.format(**fmt) for s in steps]


# ----------------------------------------------------------------------
# generation
# ----------------------------------------------------------------------

def _connected(free, start):
    H, W = free.shape
    seen = np.zeros_like(free)
    dq = deque([start])
    seen[start] = True
    while dq:
        r, c = dq.popleft()
        for dr, dc in HEADINGS:
            rr, cc = r + dr, c + dc
            if 0 <= rr < H and 0 <= cc < W and free[rr, cc] and not seen[rr, cc]:
                seen[rr, cc] = True
                dq.append((rr, cc))
    return seen


def _layout_ok(blocked, pieces):
    free = ~blocked
    cells = list(zip(*np.nonzero(free)))
    if not cells:
        return False
    reach = _connected(free, cells[0])
    if reach.sum() != free.sum():
        return False
    H, W = blocked.shape
    for piece in pieces:
        if not any(0 <= r + dr < H and 0 <= c + dc < W and free[r + dr, c + dc]
                   for r, c in piece for dr, dc in HEADINGS):
            return False
    return True


def _walls(rng, profile):
    H, W = profile.grid
    walls = np.zeros((H, W), dtype=bool)
    walls[0, :] = walls[-1, :] = walls[:, 0] = walls[:, -1] = True
    doors = []
    if profile.rooms >= 2:
        col = W // 2
        walls[1:H - 1, col] = True
        r = rng.randrange(2, H - 4)
        walls[r:r + 2, col] = False
        doors = [(r, col), (r + 1, col)]
    if profile.rooms > 2:
        row = H // 2
        walls[row, 1:W // 2] = True
        c = rng.randrange(2, W // 2 - 3)
        walls[row, c:c + 2] = False
        doors += [(row, c), (row, c + 1)]
    return walls, doors


def _placements(walls, occupied, doors, length):
    H, W = walls.shape
    near_door = {(r + dr, c + dc) for r, c in doors for dr in (-1, 0, 1) for dc in (-1, 0, 1)}

    def wall_sides(r, c):
        return {(dr, dc) for dr, dc in HEADINGS if walls[r + dr, c + dc]}

    ok = {}
    for r in range(1, H - 1):
        for c in range(1, W - 1):
            if walls[r, c] or occupied[r, c] or (r, c) in near_door:
                continue
            sides = wall_sides(r, c)
            if len(sides) == 1:
                ok[(r, c)] = sides
    out = []
    for (r, c), sides in sorted(ok.items()):
        if length == 1:
            out.append([(r, c)])
            continue
        (dr, dc), = sides
        along = (dc, dr)  # perpendicular to the wall normal
        nxt = (r + along[0], c + along[1])
        if nxt in ok and ok[nxt] == sides:
            out.append([(r, c), nxt])
    return out


def _make_furniture(oid, kind, cells):
    spec = FURNITURE[kind]
    category = FURNITURE_CATEGORY.get(kind, kind)
    slots = [(r, c, z) for r, c in cells for z in spec.slot_levels]
    return ObjectInstance(
        id=oid, category=category, kind=kind, cells=list(cells),
        levels=tuple(sorted(set(spec.body_levels) | set(spec.slot_levels))),
        slots=slots, openable=spec.openable, toggleable=spec.toggleable,
    )


def make_small(oid, category):
    fl = catalog.flags(category)
    return ObjectInstance(
        id=oid, category=category, kind=category, cells=[], pickupable=True,
        sliceable="sliceable" in fl, cleanable="cleanable" in fl,
        heatable="heatable" in fl, coolable="coolable" in fl,
    )


def _hosts(category, openable):
    return [(h, w) for h, w in catalog.cooccurrence()[category] if (h in OPENABLE) == openable]


def _weighted(rng, items):
    total = sum(w for _, w in items)
    x = rng.random() * total
    for item, w in items:
        x -= w
        if x < 0:
            return item
    return items[-1][0]


def generate_scene(seed, profile=None, required=(), exclude=()):
    """Build a scene deterministically from ``(seed, profile)``.

    ``required`` lists ``(category, hidden)`` pairs that must be placed
    (``hidden`` True/False forces the placement, None defers to the
    occlusion rate). ``exclude`` names categories that distractors must avoid.
    """
    profile = profile or SceneProfile()
    rng = random.Random(seed)
    if profile.height_levels < 3:
        raise ProfileInfeasible("furniture geometry needs at least 3 height levels")
    for attempt in range(60):
        scene = _try_layout(rng, seed, profile)
        if scene is not None:
            break
    else:
        raise ProfileInfeasible("could not lay out furniture")
    _place_small(rng, scene, profile, list(required), set(exclude))
    return scene


def _try_layout(rng, seed, profile):
    walls, doors = _walls(rng, profile)
    blocked = walls.copy()
    objects = {}
    pieces = []
    kinds = []
    for kind in sorted(profile.furniture):
        kinds += [kind] * profile.furniture[kind]
    rng.shuffle(kinds)
    kinds.sort(key=lambda k: -FURNITURE[k].length)
    oid = 1
    for kind in kinds:
        cands = _placements(walls, blocked, doors, FURNITURE[kind].length)
        rng.shuffle(cands)
        for cells in cands:
            trial = blocked.copy()
            for rc in cells:
                trial[rc] = True
            if _layout_ok(trial, pieces + [cells]):
                break
        else:
            return None
        blocked = trial
        pieces.append(cells)
        objects[oid] = _make_furniture(oid, kind, cells)
        oid += 1
    free = list(zip(*np.nonzero(~blocked)))
    r, c = free[rng.randrange(len(free))]
    return Scene(
        seed=seed, grid_size=tuple(profile.grid), walls=walls, objects=objects,
        containment={}, height_levels=profile.height_levels,
        agent_start=(int(r), int(c), rng.randrange(4)), next_id=oid,
    )


def _place_small(rng, scene, profile, required, exclude):
    lo, hi = profile.small_range
    n_total = max(rng.randint(lo, hi), len(required))
    entries = [(cat, hid) for cat, hid in required]
    entries += [(None, None)] * (n_total - len(required))
    undecided = [i for i, (_, h) in enumerate(entries) if h is None]
    n_hidden = int(round(profile.occlusion_rate * len(undecided)))
    hidden_idx = set(rng.sample(undecided, n_hidden))
    for i, (cat, hid) in enumerate(entries):
        if hid is None:
            entries[i] = (cat, i in hidden_idx)

    placeable = sorted(c for c in SMALL if c not in exclude)
    for cat, hid in entries:
        if cat is not None:
            _place_one(rng, scene, cat, hid)
            continue
        choices = [c for c in placeable if _hosts(c, hid)]
        rng.shuffle(choices)
        for cat in choices:
            if _has_room(scene, cat, hid):
                _place_one(rng, scene, cat, hid)
                break


def _has_room(scene, category, hidden):
    return any(scene.free_slots(i) for h, _ in _hosts(category, hidden)
               for i in scene.instances(h))


def _place_one(rng, scene, category, hidden):
    hosts = _hosts(category, hidden)
    if not hosts:
        raise ProfileInfeasible(f"{category} has no {'openable' if hidden else 'open'} host")
    hosts = list(hosts)
    while hosts:
        host = _weighted(rng, hosts)
        insts = [i for i in scene.instances(host) if scene.free_slots(i)]
        if insts:
            rid = insts[rng.randrange(len(insts))]
            slots = scene.free_slots(rid)
            slot = slots[rng.randrange(len(slots))]
            oid = scene.next_id
            scene.next_id += 1
            scene.objects[oid] = make_small(oid, category)
            scene.containment[oid] = (rid, slot)
            return oid
        hosts = [(h, w) for h, w in hosts if h != host]
    raise ProfileInfeasible(f"no free receptacle slot for {category}")


# ----------------------------------------------------------------------
# episodes
# ----------------------------------------------------------------------

_DESTINATIONS = {
    False: ("CounterTop", "DiningTable", "Desk", "Sofa", "Shelf", "GarbageCan", "Sink"),
    True: ("Cabinet", "Drawer", "Fridge", "Microwave"),
}


def _target_choices(task_type):
    need = {"CleanAndPlace": "cleanable", "HeatAndPlace": "heatable",
            "CoolAndPlace": "coolable"}.get(task_type)
    return sorted(c for c, fl in SMALL.items() if need is None or need in fl)


def make_episode(seed, profile=None, task_type=None, openable_destination=None,
                 alias=False, target_hidden=None, receptacle_alias=False,
                 destination_not_host=False, target_category=None):
    """Sample a task and generate a scene that can complete it.

    ``alias`` makes the instruction name the target by a synonym that is
    absent from the scene (e.g. "cup" for a Mug). ``receptacle_alias`` names
    the destination by an out-of-catalog synonym ("Refrigerator") when one
    exists. ``destination_not_host`` keeps the destination out of the target's
    host list, so opening it never reveals the target by accident.
    """
    profile = profile or SceneProfile()
    rng = random.Random(f"episode-{seed}")
    task_type = task_type or TASK_TYPES[rng.randrange(len(TASK_TYPES))]
    if task_type not in TASK_TYPES:
        raise UnknownTaskType(task_type)

    targets = _target_choices(task_type)
    if alias:
        syn = catalog.synonyms()
        targets = [t for t in targets if any(s in catalog.CATEGORY_INDEX for s in syn.get(t, ()))]
    if target_hidden:
        targets = [t for t in targets if _hosts(t, True)]
    elif target_hidden is False:
        targets = [t for t in targets if _hosts(t, False)]
    target = targets[rng.randrange(len(targets))]
    if target_category is not None:
        if target_category not in targets:
            raise ProfileInfeasible(f"{target_category} cannot be the target of {task_type}")
        target = target_category

    table = catalog.cooccurrence().get(target, ())
    hosts = {h for h, _ in table} if destination_not_host else set()
    if len(table) == 1:  # the only host already holds the target
        hosts.add(table[0][0])
    if task_type == "ExamineInLight":
        recep = "FloorLamp"
    elif task_type == "PlaceInReceptacle":
        opts = [d for d in _DESTINATIONS[True] if d not in hosts]
        recep = opts[rng.randrange(len(opts))]
    else:
        want_open = openable_destination
        if want_open is None:
            want_open = rng.random() < 0.3
        opts = [d for d in _DESTINATIONS[want_open] if d not in hosts]
        if task_type == "PickTwoAndPlace":
            opts = [d for d in opts if d not in ("GarbageCan", "Sink", "Microwave")]
        if not opts:
            raise ProfileInfeasible(f"no destination for {target} outside its hosts")
        recep = opts[rng.randrange(len(opts))]

    mentioned = target
    exclude = {target}
    if alias:
        aliases = sorted(s for s in catalog.synonyms()[target] if s in catalog.CATEGORY_INDEX)
        mentioned = aliases[rng.randrange(len(aliases))]
        exclude.add(mentioned)
    mentioned_recep = recep
    if receptacle_alias:
        outside = sorted(s for s in catalog.synonyms().get(recep, ()) if s not in catalog.CATEGORY_INDEX)
        if outside:
            mentioned_recep = outside[rng.randrange(len(outside))]
    n_copies = 2 if task_type == "PickTwoAndPlace" else 1
    required = [(target, target_hidden)] * n_copies

    for _ in range(50):
        try:
            scene = generate_scene(rng.randrange(2 ** 31), profile, required=required, exclude=exclude)
        except ProfileInfeasible:
            continue
        if _episode_ok(scene, target, recep, n_copies):
            break
    else:
        raise ProfileInfeasible(f"no completable scene for {task_type}({target}, {recep})")
    text, steps = render_instruction(task_type, mentioned, mentioned_recep, recep in OPENABLE)
    task = TaskSpec(
        task_type=task_type, target_category=target, receptacle_category=recep,
        instruction_text=text, step_by_step=steps,
        goal_conditions=goal_conditions_for(task_type, target, recep),
        mentioned_target=mentioned, mentioned_receptacle=mentioned_recep,
    )
    return scene, task


def _episode_ok(scene, target, recep, n_copies):
    if recep == "FloorLamp":
        return bool(scene.instances(recep))
    free = sum(len(scene.free_slots(i)) for i in scene.instances(recep))
    if free < n_copies:
        return False
    # goals must start unsatisfied
    return not any(scene.objects[a].category == recep
                   for oid in scene.instances(target) for a in scene.ancestors(oid))
