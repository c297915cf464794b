"""Grid environments: a partially-observable Y-maze with checkpoint rewards,
its fully-observable twin, and a seek-avoid collection arena.

Every episode is fully determined by its reset seed: layout, obstacle
schedules, and object placement all derive from one PCG64 stream, so a
(seed, action sequence) pair reproduces every StepResult bit-for-bit.

Observations are flat float32 vectors of one-hot cell channels. PO mode is
a forward-facing egocentric window (agent at the bottom-center, nothing
behind); FO mode is the whole grid plus the agent's pose.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# headings: 0=N 1=E 2=S 3=W
DELTAS = ((-1, 0), (0, 1), (1, 0), (0, -1))
FORWARD, TURN_LEFT, TURN_RIGHT = 0, 1, 2

# forward-facing egocentric window: deep enough to recognize a target down a
# full hallway (first-person long-range vision), narrow laterally
PO_DEPTH = 10
PO_WIDTH = 5


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    cont: int
    info: dict = field(default_factory=dict)


def checkpoint_reward(t: int, horizon: int) -> float:
    """Positive reward for crossing a distance checkpoint at step t."""
    return (1.0 / 3.0) * (1.0 - 0.2 * (t / horizon))


def _bfs_distances(free: np.ndarray, start: tuple) -> np.ndarray:
    dist = np.full(free.shape, -1, dtype=np.int32)
    dist[start] = 0
    queue = [start]
    while queue:
        nxt = []
        for r, c in queue:
            for dr, dc in DELTAS:
                rr, cc = r + dr, c + dc
                if 0 <= rr < free.shape[0] and 0 <= cc < free.shape[1]:
                    if free[rr, cc] and dist[rr, cc] < 0:
                        dist[rr, cc] = dist[r, c] + 1
                        nxt.append((rr, cc))
        queue = nxt
    return dist


class GridEnvBase:
    """Common pose handling, egocentric windows, and text rendering."""

    action_count = 3

    def __init__(self, observability: str, horizon: int):
        if observability not in ("po", "fo"):
            raise ValueError(f"observability must be 'po' or 'fo', got {observability!r}")
        self.observability = observability
        self.horizon = horizon
        self.t = 0
        self.done = True

    def set_observability(self, mode: str):
        """Switch PO/FO; allowed only before the episode starts moving."""
        if self.t > 0:
            raise RuntimeError("set_observability: mid-episode switch rejected")
        if mode not in ("po", "fo"):
            raise ValueError(f"observability must be 'po' or 'fo', got {mode!r}")
        self.observability = mode
        return self

    # -- geometry -----------------------------------------------------------

    def _turn(self, action: int) -> None:
        if action == TURN_LEFT:
            self.heading = (self.heading - 1) % 4
        elif action == TURN_RIGHT:
            self.heading = (self.heading + 1) % 4

    def _forward_cell(self) -> tuple:
        dr, dc = DELTAS[self.heading]
        return (self.pos[0] + dr, self.pos[1] + dc)

    def _window_cells(self):
        """(f, l) -> grid cell for a forward-facing PO_DEPTH x PO_WIDTH patch."""
        fr, fc = DELTAS[self.heading]
        rr, rc = DELTAS[(self.heading + 1) % 4]  # right-hand vector
        half = PO_WIDTH // 2
        for f in range(PO_DEPTH):
            for l in range(-half, half + 1):
                yield f, l + half, (self.pos[0] + f * fr + l * rr,
                                    self.pos[1] + f * fc + l * rc)

    def _in_bounds(self, cell) -> bool:
        return 0 <= cell[0] < self.shape[0] and 0 <= cell[1] < self.shape[1]

    # -- observations -------------------------------------------------------

    def _cell_class(self, cell) -> int:
        raise NotImplementedError

    @property
    def channel_count(self) -> int:
        raise NotImplementedError

    def _po_obs(self) -> np.ndarray:
        ch = self.channel_count
        win = np.zeros((PO_DEPTH, PO_WIDTH, ch), dtype=np.float32)
        for f, l, cell in self._window_cells():
            cls = 0 if not self._in_bounds(cell) else self._cell_class(cell)
            win[f, l, cls] = 1.0
        return win.reshape(-1)

    def _fo_obs(self) -> np.ndarray:
        ch = self.channel_count
        grid = np.zeros(self.shape + (ch,), dtype=np.float32)
        for r in range(self.shape[0]):
            for c in range(self.shape[1]):
                grid[r, c, self._cell_class((r, c))] = 1.0
        grid[self.pos][...] = 0.0
        grid[self.pos][self.agent_channel] = 1.0
        pose = np.zeros(4, dtype=np.float32)
        pose[self.heading] = 1.0
        return np.concatenate([grid.reshape(-1), pose, self._fo_extra()])

    def _fo_extra(self) -> np.ndarray:
        return np.zeros(0, dtype=np.float32)

    def observe(self) -> np.ndarray:
        return self._po_obs() if self.observability == "po" else self._fo_obs()

    @property
    def extra_dims(self) -> int:
        return 0

    @property
    def obs_dim(self) -> int:
        if self.observability == "po":
            return PO_DEPTH * PO_WIDTH * self.channel_count + self.extra_dims
        return self.shape[0] * self.shape[1] * self.channel_count + 4 + self.extra_dims

    @property
    def obs_spatial_shape(self) -> tuple:
        """(rows, cols, channels) of the spatial part, for windowed metrics."""
        if self.observability == "po":
            return (PO_DEPTH, PO_WIDTH, self.channel_count)
        return self.shape + (self.channel_count,)

    def render_text(self) -> str:
        rows = []
        for r in range(self.shape[0]):
            row = []
            for c in range(self.shape[1]):
                if (r, c) == tuple(self.pos):
                    row.append("^>v<"[self.heading])
                else:
                    row.append(self._cell_char((r, c)))
            rows.append("".join(row))
        return "\n".join(rows)


# ---------------------------------------------------------------------------
# Y-maze


ARM_LEN = 9
ANTERIOR = (1, 2, 3)    # depths nearest the junction: static obstacles
MIDDLE = (4, 5, 6)      # dynamic obstacles patrol here
POSTERIOR = (7, 8, 9)   # target lives here

# channels: 0 oob, 1 wall, 2 free, 3 static, 4 dynamic, 5 target (+6 agent, FO)
YM_OOB, YM_WALL, YM_FREE, YM_STATIC, YM_DYNAMIC, YM_TARGET, YM_AGENT = range(7)


class YMaze(GridEnvBase):
    """Three width-2 hallways joined at a 2x2 junction.

    The target sits in the posterior third of a random arm; 0-3 static
    obstacles occupy the anterior third of each arm (never both lanes of one
    depth, so every arm stays passable); one dynamic obstacle per arm patrols
    laterally in the middle third on a seeded schedule. Positive reward is
    checkpoint-based on thirds of the initial target distance with a time
    decay; touching obstacles costs -0.05 (static) or -0.1 (dynamic).
    """

    shape = (13, 22)
    junction = ((10, 10), (10, 11), (11, 10), (11, 11))
    start_cell = (10, 10)

    def __init__(self, observability: str = "po", horizon: int = 400):
        super().__init__(observability, horizon)
        self._free = np.zeros(self.shape, dtype=bool)
        for cell in self.junction:
            self._free[cell] = True
        for arm in range(3):
            for depth in range(1, ARM_LEN + 1):
                for lane in (0, 1):
                    self._free[self._arm_cell(arm, depth, lane)] = True

    @staticmethod
    def _arm_cell(arm: int, depth: int, lane: int) -> tuple:
        if arm == 0:   # north
            return (10 - depth, 10 + lane)
        if arm == 1:   # west
            return (10 + lane, 10 - depth)
        return (10 + lane, 11 + depth)  # east

    @property
    def channel_count(self) -> int:
        return 7 if self.observability == "fo" else 6

    agent_channel = YM_AGENT

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self.target_arm = int(rng.integers(3))
        self.target = self._arm_cell(self.target_arm, int(rng.choice(POSTERIOR)),
                                     int(rng.integers(2)))
        self.static = set()
        for arm in range(3):
            count = int(rng.integers(0, 4))
            depths = rng.choice(ANTERIOR, size=count, replace=False)
            for depth in depths:
                self.static.add(self._arm_cell(arm, int(depth), int(rng.integers(2))))
        self._patrols = []
        for arm in range(3):
            depth = int(rng.choice(MIDDLE))
            period = int(rng.integers(1, 3))
            phase = int(rng.integers(2))
            self._patrols.append((arm, depth, period, phase))
        self.pos = self.start_cell
        self.heading = int(rng.integers(4))
        self.t = 0
        self.done = False
        self._claimed = [False, False, False]
        self._dist = _bfs_distances(self._free, self.target)
        self.initial_distance = int(self._dist[self.pos])
        self._dynamic = self._patrol_cells(0)
        return self.observe()

    def _patrol_cells(self, t: int) -> list:
        cells = []
        for arm, depth, period, phase in self._patrols:
            lane = (phase + t // period) % 2
            cells.append(self._arm_cell(arm, depth, lane))
        return cells

    def _cell_class(self, cell) -> int:
        if not self._free[cell]:
            return YM_WALL
        if cell in self._dynamic:
            return YM_DYNAMIC
        if cell in self.static:
            return YM_STATIC
        if cell == self.target:
            return YM_TARGET
        return YM_FREE

    def _cell_char(self, cell) -> str:
        return " #.SDT"[self._cell_class(cell)] if self._in_bounds(cell) else " "

    def step(self, action: int) -> StepResult:
        if self.done:
            raise RuntimeError("step on terminated episode rejected")
        info: dict = {"checkpoint": None, "collision": None}
        penalty = 0.0
        bonus = 0.0
        reached = False

        if action == FORWARD:
            nxt = self._forward_cell()
            if not self._in_bounds(nxt) or not self._free[nxt]:
                pass  # walls block silently
            else:
                # obstacles are touch penalties, not walls: the agent passes
                # through but pays for the contact (worst single event)
                if nxt in self._dynamic:
                    penalty = -0.1
                    info["collision"] = "dynamic"
                elif nxt in self.static:
                    penalty = -0.05
                    info["collision"] = "static"
                self.pos = nxt
                d = int(self._dist[self.pos])
                thresholds = (2 * self.initial_distance / 3.0,
                              self.initial_distance / 3.0, 0.0)
                for idx, thr in enumerate(thresholds):
                    if not self._claimed[idx] and d <= thr:
                        self._claimed[idx] = True
                        bonus = checkpoint_reward(self.t, self.horizon)
                        info["checkpoint"] = idx
                        break
                reached = self.pos == self.target
        else:
            self._turn(action)

        # dynamic obstacles advance on their schedule; one landing on the
        # agent counts as a touch (one penalty per step, the worst single
        # event, keeps rewards within [-0.1, 1/3])
        scheduled = self._patrol_cells(self.t + 1)
        for sched_cell in scheduled:
            if sched_cell == self.pos:
                penalty = min(penalty, -0.1)
                info["collision"] = "dynamic"
        self._dynamic = scheduled

        self.t += 1
        if reached or self.t >= self.horizon:
            self.done = True
        return StepResult(self.observe(), bonus + penalty, 0 if self.done else 1, info)


# ---------------------------------------------------------------------------
# seek-avoid collection


# channels: 0 oob, 1 wall, 2 free, 3-6 object types (+7 agent, FO)
CO_OOB, CO_WALL, CO_FREE = 0, 1, 2
CO_OBJ0 = 3
N_GOOD, N_BAD = 10, 6
ROOMS, OBJECT_TYPES = 2, 4


def _all_combos():
    return [(room, good, bad)
            for room in range(ROOMS)
            for good in range(OBJECT_TYPES)
            for bad in range(OBJECT_TYPES)
            if bad != good]


HELD_OUT_COMBOS = tuple(_all_combos()[i] for i in range(0, len(_all_combos()), 4))


class CollectArena(GridEnvBase):
    """Open-room seek-avoid task: +1 for good pickups, -1 for bad ones.

    Each episode draws a (room, good-type, bad-type) combination; evaluation
    resets draw only from the held-out combination set. The episode ends
    after 10 pickups or at the step cap.
    """

    shape = (11, 11)
    start_cell = (5, 5)

    def __init__(self, observability: str = "po", horizon: int = 300):
        super().__init__(observability, horizon)
        self._free = np.zeros(self.shape, dtype=bool)
        self._free[1:-1, 1:-1] = True

    @property
    def channel_count(self) -> int:
        return 8 if self.observability == "fo" else 7

    @property
    def extra_dims(self) -> int:
        return ROOMS

    agent_channel = CO_OBJ0 + OBJECT_TYPES

    def reset(self, seed: int, eval_mode: bool = False) -> np.ndarray:
        rng = np.random.default_rng(seed)
        pool = HELD_OUT_COMBOS if eval_mode else tuple(
            c for c in _all_combos() if c not in HELD_OUT_COMBOS)
        self.room, self.good_type, self.bad_type = pool[int(rng.integers(len(pool)))]
        cells = [(r, c) for r in range(1, 10) for c in range(1, 10)
                 if (r, c) != self.start_cell]
        picks = rng.choice(len(cells), size=N_GOOD + N_BAD, replace=False)
        self.objects = {}
        for i, idx in enumerate(picks):
            self.objects[cells[idx]] = self.good_type if i < N_GOOD else self.bad_type
        self.pos = self.start_cell
        self.heading = int(rng.integers(4))
        self.t = 0
        self.done = False
        self.pickups = 0
        return self.observe()

    def _cell_class(self, cell) -> int:
        if not self._free[cell]:
            return CO_WALL
        if cell in self.objects:
            return CO_OBJ0 + self.objects[cell]
        return CO_FREE

    def _cell_char(self, cell) -> str:
        cls = self._cell_class(cell)
        if cls >= CO_OBJ0:
            return str(cls - CO_OBJ0)
        return " #."[cls]

    def _fo_extra(self) -> np.ndarray:
        room = np.zeros(ROOMS, dtype=np.float32)
        room[self.room] = 1.0
        return room

    def _po_obs(self) -> np.ndarray:
        room = np.zeros(ROOMS, dtype=np.float32)
        room[self.room] = 1.0
        return np.concatenate([super()._po_obs(), room])

    @property
    def obs_spatial_shape(self) -> tuple:
        if self.observability == "po":
            return (PO_DEPTH, PO_WIDTH, self.channel_count)
        return self.shape + (self.channel_count,)

    def step(self, action: int) -> StepResult:
        if self.done:
            raise RuntimeError("step on terminated episode rejected")
        info: dict = {"pickup": None}
        reward = 0.0
        if action == FORWARD:
            nxt = self._forward_cell()
            if self._in_bounds(nxt) and self._free[nxt]:
                self.pos = nxt
                if nxt in self.objects:
                    kind = self.objects.pop(nxt)
                    reward = 1.0 if kind == self.good_type else -1.0
                    info["pickup"] = "good" if reward > 0 else "bad"
                    self.pickups += 1
        else:
            self._turn(action)
        self.t += 1
        if self.pickups >= 10 or self.t >= self.horizon:
            self.done = True
        return StepResult(self.observe(), reward, 0 if self.done else 1, info)


# ---------------------------------------------------------------------------


def make_env(task: str, horizon: int | None = None):
    """Environment factory for task names used by configs and the CLI."""
    if task == "ymaze-po":
        return YMaze("po", horizon or 400)
    if task == "ymaze-fo":
        return YMaze("fo", horizon or 400)
    if task == "collect":
        return CollectArena("po", horizon or 300)
    if task == "collect-fo":
        return CollectArena("fo", horizon or 300)
    raise ValueError(f"unknown task {task!r}")
