"""Hand-built rooms for unit tests."""

import numpy as np

from hireplan.sim.scene import Scene, TaskSpec, _make_furniture, goal_conditions_for, make_small


def room(H=7, W=7, furniture=(), small=(), agent=(3, 3, 0)):
    """Walled room. ``furniture`` is ``[(kind, [(r, c), ...])]``; ``small`` is
    ``[(category, receptacle index in furniture, slot index)]``. Ids count from 1
    in the order given, furniture first."""
    walls = np.zeros((H, W), dtype=bool)
    walls[0, :] = walls[-1, :] = walls[:, 0] = walls[:, -1] = True
    objects, containment = {}, {}
    oid = 1
    fids = []
    for kind, cells in furniture:
        objects[oid] = _make_furniture(oid, kind, list(cells))
        fids.append(oid)
        oid += 1
    for cat, fi, slot in small:
        objects[oid] = make_small(oid, cat)
        containment[oid] = (fids[fi], slot)
        oid += 1
    return Scene(seed=0, grid_size=(H, W), walls=walls, objects=objects,
                 containment=containment, height_levels=3, agent_start=agent, next_id=oid)


def task(task_type, target, recep):
    return TaskSpec(task_type=task_type, target_category=target, receptacle_category=recep,
                    instruction_text=f"{task_type} {target} {recep}", step_by_step=[],
                    goal_conditions=goal_conditions_for(task_type, target, recep))
