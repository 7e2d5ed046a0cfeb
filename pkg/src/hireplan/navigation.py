"""Geodesic distance fields and greedy primitive-action descent.

On a 4-connected grid with unit step cost the fast-marching wavefront
reduces to a priority-queue expansion, which is what ``distance_field``
performs.
"""

import heapq

import numpy as np

from .sim.scene import HEADINGS


class NoGoal(ValueError):
    pass


class Unreachable(RuntimeError):
    pass


ARRIVED = "Arrived"
_STEPS = ((-1, 0), (0, 1), (1, 0), (0, -1))


def distance_field(occupancy, goal_cells):
    """Unit-speed arrival times from ``goal_cells`` over free cells.

    Goal cells seed the wavefront even when occupied (a target's own footprint
    is usually an obstacle); the front never enters any other occupied cell.
    """
    occ = np.asarray(occupancy, dtype=bool)
    H, W = occ.shape
    goals = {(int(r), int(c)) for r, c in goal_cells}
    if not goals:
        raise NoGoal("goal set is empty")
    field = np.full((H, W), np.inf)
    heap = []
    for r, c in goals:
        if not (0 <= r < H and 0 <= c < W):
            raise ValueError(f"goal {(r, c)} out of bounds")
        field[r, c] = 0.0
        heap.append((0.0, r, c))
    heapq.heapify(heap)
    while heap:
        d, r, c = heapq.heappop(heap)
        if d > field[r, c]:
            continue
        for dr, dc in _STEPS:
            rr, cc = r + dr, c + dc
            if 0 <= rr < H and 0 <= cc < W and not occ[rr, cc] and d + 1 < field[rr, cc]:
                field[rr, cc] = d + 1
                heapq.heappush(heap, (d + 1, rr, cc))
    return field


def cells_within(footprint, radius, shape):
    """Free-or-not cells whose centre lies within ``radius`` of some footprint cell."""
    H, W = shape
    k = int(np.floor(radius))
    out = set()
    for r, c in footprint:
        for dr in range(-k, k + 1):
            for dc in range(-k, k + 1):
                if dr * dr + dc * dc <= radius * radius:
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < H and 0 <= cc < W:
                        out.add((rr, cc))
    return out


def next_nav_action(pose, field, arrive_at=0.0):
    """One greedy descent step on ``field``; ``ARRIVED`` once the pose cell's
    value is at most ``arrive_at``."""
    H, W = field.shape
    here = field[pose.row, pose.col]
    if not np.isfinite(here):
        raise Unreachable(f"cell {(pose.row, pose.col)} cannot reach the goal")
    if here <= arrive_at:
        return ARRIVED

    def value(h):
        dr, dc = HEADINGS[h]
        r, c = pose.row + dr, pose.col + dc
        return field[r, c] if 0 <= r < H and 0 <= c < W else np.inf

    if value(pose.heading) < here:
        return "MoveAhead"
    # rotate toward the best neighbour; behind and ties prefer RotateRight
    best = min(range(4), key=lambda i: (value((pose.heading + i) % 4), i != 1, i))
    return "RotateLeft" if best == 3 else "RotateRight"
