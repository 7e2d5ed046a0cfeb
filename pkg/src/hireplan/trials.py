"""Targeted trials for the two commonsense mechanisms.

``audit_trials`` checks that the pre-execution audit repairs plans that would
run into a closed receptacle. ``search_trials`` hides the target inside the
host the search will predict and compares instance-wise search with the
pooled-heatmap stub.
"""

import random
from dataclasses import dataclass, replace

from . import catalog
from .agent import Agent, EpisodeConfig, ablate
from .catalog import OPENABLE
from .oracle import simulate_plan
from .planning import RuleAuditor, build_audit_request, plan_subgoals
from .sim.scene import ProfileInfeasible, SceneProfile, make_episode
from .sim.world import Simulator

SINGLE_HOST_TARGETS = tuple(sorted(
    c for c, hosts in catalog.cooccurrence().items()
    if len(hosts) == 1 and hosts[0][0] in OPENABLE))
OCCLUDED = SceneProfile(occlusion_rate=1.0)


# ----------------------------------------------------------------------
# audit completeness
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class AuditTrial:
    seed: int
    target: str
    unaudited_ok: bool
    unaudited_reason: str
    audited_ok: bool
    audited_reason: str
    audited_plan: tuple

    @property
    def repairable(self):
        """The unaudited plan failed for a reason the audit is meant to fix."""
        return not self.unaudited_ok and self.unaudited_reason in ("ReceptacleClosed", "NotVisible")


def audit_trials(n=100, seed=0):
    """Unaudited vs audited PickAndPlace plans, both run by the privileged oracle."""
    out = []
    auditor = RuleAuditor()
    for i in range(n):
        target = SINGLE_HOST_TARGETS[i % len(SINGLE_HOST_TARGETS)]
        s = seed * 100003 + i
        scene, task = make_episode(s, OCCLUDED, "PickAndPlace", target_hidden=True,
                                   target_category=target, destination_not_host=True)
        plan = plan_subgoals(task)
        detected = Simulator(scene).observe().categories
        resp = auditor.audit(build_audit_request(task, plan, detected))
        raw = simulate_plan(scene, task, plan)
        fixed = simulate_plan(scene, task, resp.revised_plan)
        out.append(AuditTrial(s, target, raw.success, raw.reason, fixed.success, fixed.reason,
                              tuple(g.key for g in resp.revised_plan)))
    return out


# ----------------------------------------------------------------------
# search
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class SearchTrial:
    seed: int
    target: str
    host: str
    queue_len: int
    budget: int  # queue length x per-instance cap
    found_step: int  # steps from search start to the Found directive; None if never
    heatmap_found: bool

    @property
    def found(self):
        return self.found_step is not None and self.found_step <= self.budget


def _search_span(record):
    """(start step, host, queued instances, steps to Found) of the first search."""
    start = host = found = None
    queued = set()
    for e in record.of("search"):
        d = e["directive"]
        if start is None:
            if d["kind"] == "Start":
                start, host, queued = e["step"], e["host"], set(e["queue"])
            continue
        if "instance" in d and d["kind"] != "Found":
            queued.add(d["instance"])
        if d["kind"] == "Found":
            found = e["step"] - start
            break
    return start, host, queued, found


def _run(scene, task, cfg):
    agent = Agent(scene, task, cfg)
    return agent, agent.run()


def _hide(scene, oid, host, rng):
    insts = [i for i in scene.instances(host) if scene.free_slots(i)]
    if not insts:
        return False
    rid = insts[rng.randrange(len(insts))]
    slots = scene.free_slots(rid)
    scene.containment[oid] = (rid, slots[rng.randrange(len(slots))])
    return True


def search_trial(seed, config=None, tries=20):
    """One trial, or None when no sub-seed gives a hidden, searched-for target.

    A probe run reveals which host the search predicts. The target is then
    moved into a random instance of that host and both searchers run on the
    moved scene. The heatmap stub gets the same step budget, counted from the
    same search start. The high level is off by default so no audit rewrites
    the target while the search runs.
    """
    cfg = config or ablate(EpisodeConfig(), "high")
    targets = sorted(c for c, hosts in catalog.cooccurrence().items()
                     if any(h in OPENABLE for h, _ in hosts))
    rng = random.Random(f"search-trial-{seed}")
    for k in range(tries):
        target = targets[rng.randrange(len(targets))]
        try:
            scene, task = make_episode(seed * 1000 + k, OCCLUDED, "PickAndPlace",
                                       target_hidden=True, target_category=target)
        except ProfileInfeasible:
            continue
        _, probe = _run(scene, task, cfg)
        _, host, _, _ = _search_span(probe)
        if host not in OPENABLE:
            continue
        oid = scene.instances(target)[0]
        if not _hide(scene, oid, host, rng):
            continue
        _, rec = _run(scene, task, cfg)
        start, host2, queued, found = _search_span(rec)
        if start is None or host2 != host:
            continue
        budget = len(queued) * cfg.per_instance_cap
        stub, _ = _run(scene, task, replace(ablate(cfg, "mid"), max_steps=start + budget))
        return SearchTrial(seed, target, host, len(queued), budget, found,
                           target in stub.detected)
    return None


def search_trials(n=100, seed=0, config=None):
    out, s = [], seed * 100003
    while len(out) < n:
        t = search_trial(s, config)
        if t is not None:
            out.append(t)
        s += 1
    return out
