"""Episode controller tying auditing, search, navigation and correction together."""

import hashlib
import json
import math
import random
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import catalog
from .catalog import APPLIANCE_FOR, OPENABLE
from .correction import KEEP, CorrectionRecord, RuleCorrector, correct, extract_features, relabel
from .mapping import InstanceMap
from .navigation import ARRIVED, Unreachable, cells_within, distance_field, next_nav_action
from .planning import (
    LLMAuditor, RuleAuditor, StepBudget, SubGoalProgress, active_index, apply_revision,
    build_audit_request, plan_subgoals, record_trigger, should_trigger_audit,
)
from .search import (
    LLMHostPredictor, RuleHostPredictor, SearchDirective, frontier_cells, heatmap_search_stub,
    search_step, start_search,
)
from .sim.scene import HEADINGS
from .sim.world import INTERACTION_KINDS, Action, NoiseConfig, SimConfig, Simulator

RECORD_VERSION = 1


class ConfigInvalid(ValueError):
    pass


@dataclass(frozen=True)
class EpisodeConfig:
    max_steps: int = 300
    theta: float = 0.3
    interaction_range: float = 2.0
    budgets: StepBudget = StepBudget()
    high_level_on: bool = True
    mid_level_on: bool = True
    low_level_on: bool = True
    auditor_backend: str = "rule"  # rule | llm
    host_backend: str = "rule"  # rule | llm
    seed: int = 0
    failure_cutoff: int = 10
    per_instance_cap: int = 40
    close_after_open: bool = False
    noise: NoiseConfig = NoiseConfig()
    perturb_rate: float = 0.0  # dataset collection only

    def __post_init__(self):
        if self.max_steps <= 0:
            raise ConfigInvalid("max_steps must be positive")
        if not 0 < self.theta < 1:
            raise ConfigInvalid("theta must lie in (0, 1)")
        if self.interaction_range <= 0:
            raise ConfigInvalid("interaction_range must be positive")
        if min(self.budgets.nav, self.budgets.interact) <= 0:
            raise ConfigInvalid("budgets must be positive")
        if self.auditor_backend not in ("rule", "llm") or self.host_backend not in ("rule", "llm"):
            raise ConfigInvalid("backends are 'rule' or 'llm'")
        if self.failure_cutoff <= 0 or self.per_instance_cap <= 0:
            raise ConfigInvalid("cutoffs must be positive")
        if not 0 <= self.perturb_rate <= 1:
            raise ConfigInvalid("perturb_rate must lie in [0, 1]")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "budgets" in d and isinstance(d["budgets"], dict):
            d["budgets"] = StepBudget(**d["budgets"])
        if "noise" in d and isinstance(d["noise"], dict):
            d["noise"] = NoiseConfig(**d["noise"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigInvalid(f"unknown config keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigInvalid(str(exc)) from None


LEVELS = {"high": "high_level_on", "mid": "mid_level_on", "low": "low_level_on"}


def ablate(config, level):
    if level not in LEVELS:
        raise ValueError(f"level must be one of {sorted(LEVELS)}")
    return replace(config, **{LEVELS[level]: False})


# ----------------------------------------------------------------------
# records
# ----------------------------------------------------------------------

@dataclass
class EpisodeRecord:
    episode_id: str
    events: list = field(default_factory=list)

    def log(self, event, **payload):
        self.events.append({"event": event, **payload})

    def of(self, kind):
        return [e for e in self.events if e["event"] == kind]

    @property
    def steps(self):
        return self.of("step")

    @property
    def audits(self):
        return self.of("audit")

    @property
    def summary(self):
        ends = self.of("end")
        return ends[-1] if ends else None

    def to_jsonl(self):
        return "".join(json.dumps(e, sort_keys=True, default=_json_default) + "\n"
                       for e in self.events)

    def digest(self):
        return hashlib.sha256(self.to_jsonl().encode()).hexdigest()

    def write(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def read(cls, path):
        with open(path) as fh:
            events = [json.loads(x) for x in fh if x.strip()]
        head = events[0] if events else {}
        return cls(head.get("episode_id", ""), events)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(type(o))


# ----------------------------------------------------------------------
# controller
# ----------------------------------------------------------------------

def _heading_towards(pose, cell):
    """Heading closest in bearing to ``cell``; diagonal ties keep the current one."""
    dr, dc = cell[0] - pose.row, cell[1] - pose.col
    if dr == 0 and dc == 0:
        return pose.heading

    def angle(h):
        hr, hc = HEADINGS[h]
        return round(math.acos((hr * dr + hc * dc) / math.hypot(dr, dc)), 9)
    return min(range(4), key=lambda h: (angle(h), h != pose.heading, h))


def _turn(pose, heading):
    diff = (heading - pose.heading) % 4
    return "RotateLeft" if diff == 3 else "RotateRight"


def _pitch_step(pose, want):
    return "LookUp" if want > pose.pitch else "LookDown"


class Agent:
    def __init__(self, scene, task, config=None, episode_id="episode", corrector=None,
                 llm_client=None, dataset=None, keep_states=False):
        self.cfg = config or EpisodeConfig()
        self.task = task
        self.episode_id = episode_id
        self.sim = Simulator(scene, SimConfig(interaction_range=self.cfg.interaction_range),
                             self.cfg.noise, self.cfg.seed)
        self.camera = self.sim.config.camera
        self.R = self.cfg.interaction_range
        self.map = InstanceMap(scene.grid_size, scene.height_levels, self.cfg.theta, self.camera)
        self.corrector = corrector or RuleCorrector(self.R)
        rule_auditor = RuleAuditor(self.cfg.close_after_open)
        if self.cfg.auditor_backend == "llm" and llm_client is not None:
            self.auditor = LLMAuditor(llm_client, rule_auditor)
        else:
            self.auditor = rule_auditor
        if self.cfg.host_backend == "llm" and llm_client is not None:
            self.predictor = LLMHostPredictor(llm_client)
        else:
            self.predictor = RuleHostPredictor()
        self.rng = random.Random(f"perturb-{self.cfg.seed}")
        self.dataset = dataset
        self.keep_states = keep_states
        self.record = EpisodeRecord(episode_id)
        self.plan = plan_subgoals(task)
        self.progress = SubGoalProgress()
        self.detected = set()
        self.delivered = set()  # object ids this agent has already placed
        self.opened = set()  # object ids this agent has opened
        self.opened_order = []  # (object id, category) in opening order
        self.excluded = set()  # map instances that proved useless as goals
        self.bad_views = {}  # map instance -> cells from which it could not be seen
        self.search = None
        self.heat_goals = set()
        self.tried_frontiers = set()
        self.scan_left = 0
        self.inspect = None
        self.consecutive_failures = 0
        self.corrections = 0
        self.obs = None
        self.last = (None, None)
        self.last_planned = None
        self.deferrals = 0
        self.full = set()  # map instances that refused a Put for lack of room
        self.failure = None  # interaction failure awaiting a recovery audit
        self.recoveries = {}  # active index -> recovery audits fired
        self._last_directive = None

    # -- observation ---------------------------------------------------
    def _observe(self):
        self.obs = self.sim.observe()
        self.map.update(self.obs)
        self.detected |= self.obs.categories

    # -- main loop -----------------------------------------------------
    def run(self):
        cfg = self.cfg
        self.record.log("header", version=RECORD_VERSION, episode_id=self.episode_id,
                        scene_seed=self.sim.scene.seed, scene=self.sim.scene.to_dict(),
                        task=self.task.to_dict(),
                        config=cfg.to_dict(), plan=[g.to_dict() for g in self.plan])
        self._observe()
        for _ in range(4):
            self._execute(Action("RotateRight"), source="scan")
        if cfg.high_level_on:
            self._audit("pre")
        self._activate_next(0)
        termination = "max_steps"
        idle = 0
        while self.sim.step_count < cfg.max_steps:
            if self.consecutive_failures >= cfg.failure_cutoff:
                termination = "failure_cutoff"
                break
            idx = active_index(self.plan)
            if idx is None:
                termination = "plan_done"
                break
            if cfg.high_level_on and self.failure is not None:
                self._audit("failure", self.failure)
                self.failure = None
                continue
            if cfg.high_level_on and should_trigger_audit(self.progress, cfg.budgets):
                record_trigger(self.progress, cfg.budgets)
                self._audit("disambiguate")
                continue
            goal = self.plan[idx]
            planned = self._undo_guard(self._behave(goal))
            if planned is None:
                idle += 1
                if idle > 50:  # guard against a behaviour that never commits to an action
                    termination = "stalled"
                    break
                continue
            idle = 0
            self._execute(planned, source=goal.verb)
        done, per = self.sim.goal_satisfied(self.task)
        self.record.log("end", termination=termination, success=bool(done),
                        goal_conditions=[bool(x) for x in per], path_len=self.sim.step_count,
                        audits_fired=self.progress.audits_fired,
                        corrections_applied=self.corrections,
                        plan=[g.to_dict() for g in self.plan])
        return self.record

    def _undo_guard(self, planned):
        """Do not rotate straight back after the corrector turned us away from
        an interaction; retry the interaction instead (a few times at most)."""
        executed, _ = self.last
        prev = self.last_planned
        opposite = {"RotateLeft": "RotateRight", "RotateRight": "RotateLeft"}
        if (planned is not None and prev is not None and executed is not None
                and prev.kind in INTERACTION_KINDS and executed != prev
                and opposite.get(executed.kind) == planned.kind and self.deferrals < 4):
            self.deferrals += 1
            return prev
        if planned is not None and planned.kind not in ("RotateLeft", "RotateRight"):
            self.deferrals = 0
        return planned

    def _activate_next(self, start):
        for i in range(start, len(self.plan)):
            if self.plan[i].status == "Pending":
                self.plan[i].status = "Active"
                self.progress.reset(i, self.plan[i].verb)
                self.search = None
                self.inspect = None
                self.scan_left = 0
                return

    def _complete(self, idx):
        self.plan[idx].status = "Done"
        self.record.log("subgoal", step=self.sim.step_count, index=idx,
                        subgoal=self.plan[idx].to_dict())
        self._activate_next(idx + 1)

    # -- auditing ------------------------------------------------------
    def _audit(self, kind, failure=None):
        req = build_audit_request(self.task, self.plan, self.detected, kind, failure)
        resp = self.auditor.audit(req)
        entry = dict(step=self.sim.step_count, audit=kind, backend=resp.backend,
                     edits=[asdict(e) for e in resp.edits], rationale=resp.rationale)
        if resp.edits:
            try:
                before = active_index(self.plan)
                before_key = self.plan[before].key if before is not None else None
                self.plan = apply_revision(self.plan, resp)
                after = active_index(self.plan)
                if after is not None and (self.plan[after].key != before_key or after != before
                                          and resp.focus is not None):
                    self.progress.reset(after, self.plan[after].verb)
                    self.search = None
                    self.inspect = None
                else:
                    self.progress.active = after if after is not None else 0
                entry["applied"] = True
            except ValueError as exc:
                entry["applied"] = False
                entry["rejected"] = str(exc)
        entry["plan"] = [g.to_dict() for g in self.plan]
        self.record.log("audit", **entry)

    # -- acting --------------------------------------------------------
    def _execute(self, planned, source):
        obs = self.obs
        executed, label = planned, KEEP
        feats = None
        if self.cfg.low_level_on and source != "scan":
            executed, label, feats = correct(obs, planned, self.corrector, self.camera, self.R,
                                             self._contents_for(planned))
        if self.cfg.perturb_rate and source != "scan" and self.rng.random() < self.cfg.perturb_rate:
            planned = executed = self._perturbation()
        if self.dataset is not None:
            feats = feats or extract_features(obs, executed, self.camera, self.R,
                                              self._contents_for(executed))
            state = self.sim.state_dict() if self.keep_states else None
        before = self.sim.agent.holding
        outcome = self.sim.step(executed)
        if executed != planned:
            self.corrections += 1
            self.progress.corrections_applied += 1
        self.consecutive_failures = 0 if outcome.success else self.consecutive_failures + 1
        self.progress.steps_on_active += 1
        if self.search is not None:
            if self.search.queue:
                self.search.head_steps += 1
            if self.search.phase == "Exhausted":
                self.search.explore_steps += 1
        if not outcome.success and executed.kind == "MoveAhead" and outcome.failure_reason == "Blocked":
            dr, dc = HEADINGS[obs.pose.heading]
            cell = (obs.pose.row + dr, obs.pose.col + dc)
            H, W = self.map.grid_shape
            if 0 <= cell[0] < H and 0 <= cell[1] < W:
                self.map.mark_collision(cell)
        if outcome.success and executed.kind == "Put" and before is not None:
            self.delivered.add(before)
        if outcome.success and executed.kind == "Open":
            self._note_opened(executed.target)
        self._note_failure(executed, outcome)
        self.last = (executed, outcome)
        self.last_planned = planned
        if self.dataset is not None:
            self.dataset.append(CorrectionRecord(
                features=feats, planned=executed.kind,
                label=relabel(feats, outcome.success, self.R),
                outcome_success=outcome.success, outcome_reason=outcome.failure_reason,
                episode=self.episode_id, step=self.sim.step_count - 1,
                planned_target=executed.target,
                state=state if not outcome.success else None,
            ))
        self.record.log("step", step=self.sim.step_count - 1, source=source,
                        planned=str(planned), executed=str(executed),
                        correction=label if executed != planned else None,
                        success=outcome.success, reason=outcome.failure_reason,
                        pose=[obs.pose.row, obs.pose.col, obs.pose.heading, obs.pose.pitch])
        self._observe()
        self._after_step(executed, outcome)

    def _note_failure(self, executed, outcome):
        if outcome.success or executed.kind not in ("Put", "PickUp", "Heat", "Cool"):
            return
        t = executed.target
        cat = t if isinstance(t, str) else self._category_of(int(t))
        if executed.kind == "Put" and outcome.failure_reason == "InvalidTarget" and cat:
            if isinstance(t, str):
                iid = self._nearest_visible_instance(cat)
                self.full |= {iid} if iid is not None else set()
            else:
                self.full |= {i for i, inst in self.map.instances.items() if int(t) in inst.object_ids}
        if outcome.failure_reason == "ReceptacleClosed":
            idx = active_index(self.plan)
            if idx is not None and self.recoveries.get(idx, 0) < 2:
                self.recoveries[idx] = self.recoveries.get(idx, 0) + 1
                self.failure = (executed.kind, cat or str(executed.target), "ReceptacleClosed")

    def _nearest_visible_instance(self, category):
        """Closest map instance of ``category`` that is in view itself or through its contents."""
        seen = {i for i, _ in self.obs.detected}
        pose = self.obs.pose
        best = None
        for iid, inst in self.map.instances.items():
            if inst.category != category:
                continue
            if not seen & (inst.object_ids | self._contents(category, inst.object_ids)):
                continue
            d = min(math.hypot(r - pose.row, c - pose.col) for r, c in inst.footprint)
            if best is None or (d, iid) < best:
                best = (d, iid)
        return None if best is None else best[1]

    def _note_opened(self, target):
        cats = dict(self.obs.detected)
        if isinstance(target, (int, np.integer)):
            oid = int(target)
        else:
            # a category-level Open hits the nearest visible closed instance
            ids = [i for i, cat in self.obs.detected if cat == target and i not in self.opened]
            if not ids:
                return
            oid = min(ids, key=lambda i: (self._object_distance(i), i))
        self.opened.add(oid)
        self.opened_order.append((oid, cats.get(oid, target)))

    def _perturbation(self):
        idx = active_index(self.plan)
        goal = self.plan[idx] if idx is not None else None
        if goal is not None and goal.verb != "GoTo" and self.rng.random() < 0.6:
            act = self._interaction(goal)
            if act is not None:
                return act
        return Action("MoveAhead")

    def _after_step(self, executed, outcome):
        idx = active_index(self.plan)
        if idx is None:
            return
        goal = self.plan[idx]
        if not outcome.success or executed.kind != goal.verb:
            return
        if goal.verb == "PickUp" and self.obs.holding_category != goal.object:
            return
        if goal.verb == "Put":
            want = goal.receptacle
        elif goal.verb in APPLIANCE_FOR or goal.verb == "PickUp":
            want = goal.object
        else:
            want = goal.object
        tgt = executed.target
        if isinstance(tgt, str) and tgt != want:
            return
        self._complete(idx)

    # -- behaviours ----------------------------------------------------
    def _interaction(self, goal):
        verb, x, y = goal.key
        if verb == "GoTo":
            return None
        if verb == "Put":
            return Action("Put", self._instance_target(y, self.full))
        if verb in APPLIANCE_FOR:
            return Action(verb, x)
        if verb == "PickUp":
            return Action("PickUp", self._pickup_target(x))
        if verb == "Close":
            own = self._own_open(x)
            if own is not None:
                return Action("Close", own)
        if verb == "Open":
            return Action("Open", self._instance_target(x, self.full, skip=self.opened))
        return Action(verb, x)

    def _instance_target(self, category, avoid=(), skip=()):
        """Object id of the nearest in-view instance outside ``avoid``; the
        category itself when nothing specific is in view."""
        seen = {i for i, _ in self.obs.detected}
        pose = self.obs.pose
        best = None
        for iid, inst in self.map.instances.items():
            if inst.category != category or iid in avoid or iid in self.excluded:
                continue
            ids = sorted(inst.object_ids - set(skip))
            if not ids or not seen & (inst.object_ids | self._contents(category, inst.object_ids)):
                continue
            d = min(math.hypot(r - pose.row, c - pose.col) for r, c in inst.footprint)
            if best is None or (d, iid) < best[:2]:
                best = (d, iid, ids[0])
        return category if best is None else best[2]

    def _pickup_target(self, category):
        ids = sorted(oid for oid, c in self.obs.detected if c == category and oid not in self.delivered)
        if not ids:
            return category
        return min(ids, key=lambda i: (self._object_distance(i), i))

    def _object_distance(self, oid):
        pose = self.obs.pose
        best = math.inf
        for inst in self.map.instances.values():
            if oid in inst.object_ids:
                for r, c in inst.footprint:
                    best = min(best, math.hypot(r - pose.row, c - pose.col))
        return best

    def _behave(self, goal):
        verb, x, y = goal.key
        if verb == "PickUp" and self.obs.holding_category == x:
            self._complete(active_index(self.plan))
            return None
        if verb == "GoTo":
            act = self._goto(x)
            if act is None:
                self._complete(active_index(self.plan))
            return act
        where = {"Put": y}.get(verb, APPLIANCE_FOR.get(verb, x))
        avoid = self.full if verb in ("Put", "Open") else ()
        act = self._goto(where, self._own_open(x) if verb == "Close" else None, avoid)
        if act is not None:
            return act
        return self._interaction(goal)

    def _own_open(self, category):
        """Most recent instance of ``category`` this agent opened, if any."""
        for oid, cat in reversed(self.opened_order):
            if cat == category:
                return oid
        return None

    # -- navigation toward a category ------------------------------------
    def _candidates(self, category, oid=None, avoid=()):
        out = []
        for iid, inst in self.map.instances.items():
            if inst.category != category or iid in self.excluded or iid in avoid:
                continue
            if oid is not None and oid not in inst.object_ids:
                continue
            if catalog.is_small(category) and inst.object_ids and inst.object_ids <= self.delivered:
                continue
            out.append(iid)
        return out

    def _visible(self, category, oid=None):
        for i, c in self.obs.detected:
            if oid is not None and i != oid:
                continue
            if c == category and not (catalog.is_small(category) and i in self.delivered):
                return True
        if not catalog.is_small(category):
            ids = {oid} if oid is not None else None
            seen = {i for i, _ in self.obs.detected}
            return bool(seen & self._contents(category, ids))
        return False

    def _cands_visible(self, category, cands, oid=None):
        """Whether any of the map instances ``cands`` (or what they hold) is in view."""
        ids = set().union(*(self.map.instances[i].object_ids for i in cands))
        if oid is not None:
            ids &= {oid}
        seen = {i for i, _ in self.obs.detected}
        if catalog.is_small(category):
            return bool((seen & ids) - self.delivered)
        return bool(seen & (ids | self._contents(category, ids)))

    def _contents(self, category, ids=None):
        """Small objects mapped inside instances of a receptacle category.

        Inferred from the map: a small instance whose footprint lies within
        the receptacle's footprint sits in or on it.
        """
        out = set()
        for inst in self.map.instances.values():
            if inst.category != category or (ids is not None and not inst.object_ids & ids):
                continue
            for other in self.map.instances.values():
                if catalog.is_small(other.category) and other.footprint <= inst.footprint:
                    out |= other.object_ids
        return out

    def _contents_for(self, action):
        if action.kind not in ("Put", "Open", "Close", "ToggleOn"):
            return ()
        t = action.target
        if isinstance(t, (int, np.integer)):
            cat = dict(self.obs.detected).get(int(t)) or self._category_of(int(t))
            return tuple(sorted(self._contents(cat, {int(t)}))) if cat else ()
        return tuple(sorted(self._contents(t))) if t in catalog.CATEGORY_INDEX else ()

    def _category_of(self, oid):
        for inst in self.map.instances.values():
            if oid in inst.object_ids:
                return inst.category
        return None

    def _goto(self, category, oid=None, avoid=()):
        """Next action toward standing within range of ``category``; None once there and seen.

        ``oid`` narrows the goal to the map instance holding that object.
        """
        if category not in catalog.CATEGORY_INDEX:
            return self._explore("unknown-category")
        cands = self._candidates(category, oid, avoid)
        if oid is not None and not cands:
            return self._goto(category, None, avoid)
        if avoid and not cands and self._candidates(category):
            return self._explore("all-known-full")
        if not cands:
            if self._visible(category):
                return None
            if catalog.is_small(category):
                return self._search(category)
            return self._explore("unmapped")
        s = self.search
        if s is not None and s.target == category and s.phase != "Found":
            # the target showed up between search steps; close the search out
            s.phase = "Found"
            self._log_directive(SearchDirective("Found", cands[0]).to_dict(), s.host)
        pose = self.obs.pose
        blocked = self.map.blocked().copy()
        blocked[pose.cell] = False
        free = ~blocked
        goals = set()
        for iid in cands:
            bad = self.bad_views.get(iid, ())
            goals |= {rc for rc in cells_within(self.map.instances[iid].footprint, self.R,
                                               self.map.grid_shape) if free[rc] and rc not in bad}
        if not goals:
            self.excluded.update(cands)
            return self._goto(category, oid, avoid)
        field = distance_field(blocked, goals)
        if not np.isfinite(field[pose.cell]):
            self.excluded.update(cands)
            return self._goto(category, oid, avoid)
        if field[pose.cell] > 0:
            return self._nav(field)
        if self._cands_visible(category, cands, oid):
            return None
        # in range but not in view: face the nearest instance, then tilt toward it
        inst = min((self.map.instances[i] for i in cands
                    if pose.cell not in self.bad_views.get(i, ())),
                   key=lambda o: (min(math.hypot(r - pose.row, c - pose.col) for r, c in o.footprint), o.id))
        cell = min(inst.footprint, key=lambda rc: (math.hypot(rc[0] - pose.row, rc[1] - pose.col), rc))
        want_h = _heading_towards(pose, cell)
        if want_h != pose.heading:
            return Action(_turn(pose, want_h))
        want_p = max(-1, min(1, inst.z - 1))
        if want_p != pose.pitch:
            return Action(_pitch_step(pose, want_p))
        # looking straight at it and still nothing: something is in the way
        # from here (or the map entry is stale), so try another viewpoint
        self.bad_views.setdefault(inst.id, set()).add(pose.cell)
        return self._goto(category, oid, avoid)

    def _nav(self, field, arrive_at=0.0):
        pose = self.obs.pose
        try:
            kind = next_nav_action(pose, field, arrive_at)
        except Unreachable:
            return Action("RotateRight")
        if kind == ARRIVED:
            return None
        if kind == "MoveAhead" and pose.pitch != 0:
            return Action(_pitch_step(pose, 0))
        return Action(kind)

    def _explore(self, why):
        pose = self.obs.pose
        if pose.cell in set(frontier_cells(self.map)):
            self.tried_frontiers.add(pose.cell)
        cells = frontier_cells(self.map, exclude=self.tried_frontiers)
        if not cells:
            return Action("RotateRight")
        blocked = self.map.blocked().copy()
        blocked[pose.cell] = False
        field = distance_field(blocked, cells)
        if not np.isfinite(field[pose.cell]):
            self.tried_frontiers.update(cells)
            return Action("RotateRight")
        act = self._nav(field)
        if act is None:
            self.tried_frontiers.add(pose.cell)
            return Action("RotateRight")
        return act

    # -- search ----------------------------------------------------------
    def _search(self, category):
        if not self.cfg.mid_level_on:
            return self._heatmap(category)
        pose = self.obs.pose
        if self.search is None or self.search.target != category:
            self.search = start_search(category, self.map, pose, self.predictor)
            self.inspect = None
            self.record.log("search", step=self.sim.step_count, directive={"kind": "Start"}, target=category,
                            host=self.search.host, queue=list(self.search.queue))
        for _ in range(20):
            ignore = {i for i, o in self.map.instances.items() if o.category == category
                      and i not in self._candidates(category)}
            d = search_step(self.search, self.map, pose, self.R, self.cfg.per_instance_cap,
                            self.predictor, ignore=ignore)
            self._log_directive(d.to_dict(), self.search.host)
            if d.kind == "Found":
                return self._goto(category)
            if d.kind == "AdvanceQueue":
                self.inspect = None
                continue
            if d.kind == "Navigate":
                self.inspect = None
                blocked = self.map.blocked().copy()
                blocked[pose.cell] = False
                act = self._nav(distance_field(blocked, d.goals))
                if act is not None:
                    return act
                continue
            if d.kind == "OpenAndInspect":
                act = self._inspect(d)
                if act is not None:
                    return act
                continue
            if d.kind == "Explore":
                self.search.tried_frontiers = self.tried_frontiers
                return self._explore("search")
            return Action("RotateRight")
        return Action("RotateRight")

    def _log_directive(self, directive, host):
        if directive != self._last_directive:
            self._last_directive = directive
            self.record.log("search", step=self.sim.step_count, directive=directive, host=host)

    def _inspect(self, d):
        """Face, align pitch, open if needed, then sweep the three pitch levels."""
        s = self.search
        pose = self.obs.pose
        inst = self.map.instances[d.instance]
        if self.inspect is None or self.inspect["id"] != d.instance:
            self.inspect = {"id": d.instance, "sweep": None, "open_fail": 0, "sent": None}
        st = self.inspect
        if d.open_first and d.instance not in s.opened:
            executed, outcome = self.last
            if st["sent"] is not None and self.last_planned == st["sent"]:
                st["sent"] = None
                if executed == self.last_planned and outcome.success:
                    s.opened.add(d.instance)
                else:
                    # refused or corrected away: try another viewpoint next time
                    st["open_fail"] += 1
                    bad = s.bad_cells.setdefault(d.instance, set())
                    bad.add(pose.cell)
                    if len(bad) < 3 and d.goals:
                        self.inspect = None
                        return None
            targets = [i for i in sorted(inst.object_ids) if i not in self.opened]
            if st["open_fail"] >= 2 or (inst.object_ids and not targets):
                s.opened.add(d.instance)
        if d.open_first and d.instance not in s.opened:
            cell = min(inst.footprint, key=lambda rc: (math.hypot(rc[0] - pose.row, rc[1] - pose.col), rc))
            want_h = _heading_towards(pose, cell)
            if want_h != pose.heading:
                return Action(_turn(pose, want_h))
            want_p = max(-1, min(1, inst.z - 1))
            if want_p != pose.pitch:
                return Action(_pitch_step(pose, want_p))
            st["sent"] = Action("Open", targets[0] if targets else inst.category)
            return st["sent"]
        if st["sweep"] is None:
            st["sweep"] = [p for p in ((-1, 0, 1) if pose.pitch == 0 else (0, -pose.pitch))
                           if p != pose.pitch]
        while st["sweep"] and st["sweep"][0] == pose.pitch:
            st["sweep"].pop(0)
        if st["sweep"]:
            return Action(_pitch_step(pose, st["sweep"][0]))
        s.inspected.add(d.instance)
        return None

    def _heatmap(self, category):
        pose = self.obs.pose
        goal = heatmap_search_stub(self.map, category)
        self._log_directive({"kind": "Heatmap", "cell": [int(goal[0]), int(goal[1])]}, None)
        if goal in self.heat_goals:
            return self._explore("heatmap")
        if self.scan_left:
            self.scan_left -= 1
            if not self.scan_left:
                self.heat_goals.add(goal)
            return Action("RotateRight")
        blocked = self.map.blocked().copy()
        blocked[pose.cell] = False
        goals = {rc for rc in cells_within({goal}, self.R, self.map.grid_shape) if not blocked[rc]}
        if not goals:
            self.heat_goals.add(goal)
            return self._explore("heatmap")
        field = distance_field(blocked, goals)
        if not np.isfinite(field[pose.cell]):
            self.heat_goals.add(goal)
            return self._explore("heatmap")
        act = self._nav(field)
        if act is None:
            self.scan_left = 4
            return self._heatmap(category)
        return act


def rebuild_map(record):
    """Replay a trajectory log's executed actions and return the agent's map.

    Needs the header (scene, config), every step event and the search events
    (queue advances mark instances visited).
    """
    from .sim.scene import Scene

    head = record.of("header")[0]
    cfg = EpisodeConfig.from_dict(head["config"])
    scene = Scene.from_dict(head["scene"])
    sim = Simulator(scene, SimConfig(interaction_range=cfg.interaction_range), cfg.noise, cfg.seed)
    imap = InstanceMap(scene.grid_size, scene.height_levels, cfg.theta, sim.config.camera)
    imap.update(sim.observe())
    for e in record.events:
        if e["event"] == "search":
            d = e["directive"]
            if d["kind"] == "AdvanceQueue" and d.get("instance") in imap.instances:
                for j in imap.column(d["instance"]):
                    imap.mark_visited(j)
            continue
        if e["event"] != "step":
            continue
        pose = sim.agent.row, sim.agent.col, sim.agent.heading
        action = Action.parse(e["executed"])
        out = sim.step(action)
        if action.kind == "MoveAhead" and out.failure_reason == "Blocked":
            dr, dc = HEADINGS[pose[2]]
            cell = (pose[0] + dr, pose[1] + dc)
            H, W = imap.grid_shape
            if 0 <= cell[0] < H and 0 <= cell[1] < W:
                imap.mark_collision(cell)
        imap.update(sim.observe())
    return imap


def run_episode(scene, task, config=None, episode_id="episode", corrector=None,
                llm_client=None, dataset=None, keep_states=False):
    agent = Agent(scene, task, config, episode_id, corrector, llm_client, dataset, keep_states)
    return agent.run()
