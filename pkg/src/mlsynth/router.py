"""Greedy module-less synthesis.

Every running mixer repeatedly picks the best shift it can legally make
(Z3 > Z2 > Z1 > X > STALL > Y) given what the other droplets have already
committed to. When a stage's mixes are done their products are split, carried
to merge points and fused into the next stage's mixers.
"""

import copy
import math
from dataclasses import dataclass, field
from typing import Optional

from .assay import natural_key
from .chains import try_form_chain, chain_step, wash_stats
from .exceptions import ConstraintViolation, DeadlockError, InfeasibleConfigError
from .geometry import DIRECTIONS, Cell, Direction, chebyshev, manhattan, neighbors4
from .grid import Droplet, apply_moves, exempt
from .placement import free_cell, seed_cells
from .shifts import (
    MAX_LINEAR_RUN, STALL, ShiftKind, ShiftMove, Z_BY_LENGTH,
)

MAX_STALLS = 3
# Mixing-phase steps without any droplet moving before we call it a deadlock.
NO_PROGRESS_LIMIT = 12
ROUTE_PATIENCE = 3
# ... and steps without any mixer beating its best percentage so far.
LIVELOCK_LIMIT = 80
# Steps a stage transition may go without bringing any product closer.
ROUTE_LIVELOCK = 40
# Idle droplets within this distance of a mixer stalled this long step aside.
YIELD_AFTER = 2
YIELD_RADIUS = 3
# Longest walk a loose droplet takes to clear a committed droplet's way.
DODGE_DEPTH = 3


# --------------------------------------------------------------------------
# shift selection


def _cells(pos, d, k):
    out = []
    for _ in range(k):
        pos = pos.step(d)
        out.append(pos)
    return out


def path_ok(chip, me, start, cells, reservations, forbidden=(), transient=()):
    """True if droplet ``me`` can walk ``cells`` (one per step) from ``start``.

    Each other droplet follows its reserved trajectory (first entry = current
    cell) and then stays put; we check spacing against it at every step up to
    the point where both have stopped. Droplets in ``transient`` are only
    trusted one step past their trajectory: they will move aside later.
    """
    for c in cells:
        if not chip.in_bounds(c) or c in forbidden:
            return False
        owner = chip.blocked.get(c)
        if owner is not None and owner != me:
            return False
    k = len(cells)
    for oid, traj in reservations.items():
        if oid == me:
            continue
        m = len(traj) - 1
        if chebyshev(start, traj[0]) > k + m + 1:
            continue
        pa, pb = start, traj[0]
        last = max(k, m) if oid not in transient else min(max(k, m), m + 1)
        for tau in range(1, last + 1):
            a = cells[tau - 1] if tau <= k else cells[-1]
            b = traj[tau] if tau <= m else traj[-1]
            for x, y in ((a, b), (a, pb), (pa, b)):
                if chebyshev(x, y) < 2 and not exempt(chip, me, oid, x, y):
                    return False
            pa, pb = a, b
    return True


def _free_run(chip, me, pos, d, reservations):
    others = [t[0] for oid, t in reservations.items() if oid != me]
    n = 0
    c = pos.step(d)
    while chip.in_bounds(c):
        owner = chip.blocked.get(c)
        if owner is not None and owner != me:
            break
        if any(chebyshev(c, o) < 2 for o in others):
            break
        n += 1
        c = c.step(d)
    return n


def _boundary_len(chip, pos, d):
    if d.dx > 0:
        return chip.width - pos.x
    if d.dx < 0:
        return pos.x - 1
    if d.dy > 0:
        return chip.height - pos.y
    return pos.y - 1


def _toward(pos, d, bias):
    """Smaller is better: how far one step along ``d`` leaves us from ``bias``."""
    if bias is None:
        return 0
    return manhattan(pos.step(d), bias) - manhattan(pos, bias)


def select_shift(chip, d, reservations=None, target_bias=None, forbidden=()):
    """Highest-precedence legal shift for droplet ``d``.

    ``reservations`` maps droplet ids to their committed trajectories; when
    omitted every other droplet on the chip is assumed to hold position.
    """
    if reservations is None:
        reservations = {i: [o.pos] for i, o in chip.droplets.items()}
    pos = d.pos

    def ok(cells):
        return path_ok(chip, d.id, pos, cells, reservations, forbidden)

    if d.last_dir is None:
        for k in (3, 2, 1):
            legal = [x for x in DIRECTIONS if ok(_cells(pos, x, k))]
            if legal:
                best = min(legal, key=lambda x: (
                    -_free_run(chip, d.id, pos, x, reservations),
                    _toward(pos, x, target_bias), x.name))
                return ShiftMove(Z_BY_LENGTH[k], best)
    else:
        for k in range(MAX_LINEAR_RUN - d.linear_run, 0, -1):
            if ok(_cells(pos, d.last_dir, k)):
                return ShiftMove(Z_BY_LENGTH[k], d.last_dir)
        turns = [x for x in d.last_dir.perpendicular() if ok([pos.step(x)])]
        if turns:
            best = min(turns, key=lambda x: (
                -_boundary_len(chip, pos, x), _toward(pos, x, target_bias), x.name))
            return ShiftMove(ShiftKind.X, best)
    if d.stall_count < MAX_STALLS:
        return STALL
    if d.last_dir is not None and ok([pos.step(d.last_dir.opposite)]):
        return ShiftMove(ShiftKind.Y, d.last_dir.opposite)
    return STALL


def apply_shift_state(d, shift):
    """Update the droplet's direction and counters after completing ``shift``."""
    kind = shift.kind
    if kind is ShiftKind.STALL:
        d.stall_count = min(d.stall_count + 1, MAX_STALLS)
    elif kind in (ShiftKind.X, ShiftKind.Y):
        d.last_dir = shift.dir
        d.linear_run = 0
        d.stall_count = 0
    else:
        if d.last_dir is not shift.dir:
            d.linear_run = 0
        d.last_dir = shift.dir
        d.linear_run += shift.steps
        d.stall_count = 0
    d.history.append(shift)


def label_moves(d, dirs):
    """Group raw per-step moves (Direction or None) into shifts for droplet ``d``.

    Straight steps continue the current run (up to three), a quarter turn is an
    X, a reversal a Y, a hold a STALL. Returns the list of ShiftMoves.
    """
    last, run = d.last_dir, d.linear_run
    out = []
    i = 0
    while i < len(dirs):
        m = dirs[i]
        if m is None:
            out.append(STALL)
            i += 1
            continue
        if last is None or m is last:
            room = MAX_LINEAR_RUN - (run if m is last else 0)
            if room <= 0:
                raise ValueError(f"{d.id}: straight run longer than {MAX_LINEAR_RUN}")
            k = 1
            while k < room and i + k < len(dirs) and dirs[i + k] is m:
                k += 1
            out.append(ShiftMove(Z_BY_LENGTH[k], m))
            run = (run if m is last else 0) + k
            last = m
            i += k
            continue
        kind = ShiftKind.Y if m is last.opposite else ShiftKind.X
        out.append(ShiftMove(kind, m))
        last, run = m, 0
        i += 1
    return out


# --------------------------------------------------------------------------
# run bookkeeping


@dataclass
class MixTask:
    node: str
    stage: int
    start_cell: Optional[Cell] = None
    start: Optional[int] = None
    status: str = "pending"
    completion_step: Optional[int] = None
    chained: bool = False
    path: list = field(default_factory=list)
    checkpoint: Optional[dict] = None
    attempts: int = 1
    shifts: list = field(default_factory=list)  # completed shifts, all attempts
    pcts: list = field(default_factory=list)    # sensed percentage after each mixing step
    ideal: list = field(default_factory=list)   # the same had every step mixed as commanded


@dataclass
class Agent:
    id: str
    role: str                     # mix | done | route | hold
    node: Optional[str] = None    # mix node this droplet serves
    plan: list = field(default_factory=list)   # pending (dir, shift, last) per step
    label: str = "HOLD"
    target: Optional[Cell] = None
    chain: object = None
    script: list = field(default_factory=list)  # queued ShiftMoves overriding the greedy choice
    forbidden: frozenset = frozenset()
    mix_steps: int = 0
    stuck_from: Optional[int] = None
    good_steps: int = 0
    wait: int = 0
    prev: Optional[Cell] = None
    committed: bool = False       # script is binding: others plan around all of it
    ideal_pct: float = 0.0        # percentage had no fault struck
    shift_steps: int = 0          # steps taken into the current shift
    log: list = field(default_factory=list)     # (dir, shift, last) actually executed, per step


@dataclass
class RunOptions:
    mode: str = "mls"
    smt: str = "off"
    seed: int = 0
    placement: dict = field(default_factory=dict)   # mix id -> start cell (stage 1)
    scripts: dict = field(default_factory=dict)     # mix id -> list of ShiftMoves to replay first
    stop_after_stage: Optional[int] = None
    detect_steps: int = 0
    max_steps: int = 20000
    sat_parallel: int = 6
    emit_cnf: Optional[str] = None
    faults: object = None
    max_concurrent: Optional[int] = None
    record_decisions: bool = False


@dataclass
class SynthesisReport:
    assay: str
    chip: tuple
    freq_hz: float
    mode: str
    smt: str
    total_steps: int
    total_seconds: float
    mixes: dict
    stalls: int
    ys: int
    chains: int
    w_path: int
    m_path: int
    ratio: float
    errors: list
    sat_invocations: int
    deadlocks: int
    paths: dict
    trace: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {
            "assay": self.assay,
            "chip": list(self.chip),
            "freq_hz": self.freq_hz,
            "mode": self.mode,
            "smt": self.smt,
            "total_steps": self.total_steps,
            "total_seconds": self.total_seconds,
            "mixes": self.mixes,
            "stalls": self.stalls,
            "ys": self.ys,
            "chains": self.chains,
            "w_path": self.w_path,
            "m_path": self.m_path,
            "ratio": self.ratio,
            "errors": self.errors,
            "sat_invocations": self.sat_invocations,
            "deadlocks": self.deadlocks,
            "paths": self.paths,
        }


def target_between(a, b):
    """Merge point ``ceil(d/2)`` steps from ``a`` on a shortest path to ``b``,
    preferring smaller x, then smaller y."""
    dist = manhattan(a, b)
    j = math.ceil(dist / 2)
    best = None
    for x in range(min(a.x, b.x), max(a.x, b.x) + 1):
        for y in range(min(a.y, b.y), max(a.y, b.y) + 1):
            c = Cell(x, y)
            if manhattan(a, c) == j and manhattan(c, b) == dist - j:
                if best is None or (x, y) < best:
                    best = (x, y)
    return Cell(*best)


def merge_points(a, b):
    """Every cell on a shortest a-b path, the canonical merge point first, then
    by distance from the halfway mark."""
    dist = manhattan(a, b)
    j = math.ceil(dist / 2)
    first = target_between(a, b)
    rest = []
    for x in range(min(a.x, b.x), max(a.x, b.x) + 1):
        for y in range(min(a.y, b.y), max(a.y, b.y) + 1):
            c = Cell(x, y)
            if c != first and manhattan(a, c) + manhattan(c, b) == dist:
                rest.append((abs(manhattan(a, c) - j), x, y))
    return [first] + [Cell(x, y) for _, x, y in sorted(rest)]


# --------------------------------------------------------------------------
# the engine


class Synthesizer:
    def __init__(self, chip, spec, options=None):
        self.chip = chip
        self.spec = spec
        self.opt = options or RunOptions()
        self.agents = {}
        self.trace = []
        self.events = []
        self.tasks = {}
        self.stage_of = spec.stage_of()
        self.consumers = spec.consumers()
        self.pending = {}        # parent mix -> mix consumers still owed a product
        self.spares = {}
        self.merges = {}         # child -> (target, [keeper ids])
        self.errors = []
        self.sat_invocations = 0
        self.deadlocks = 0
        self.decisions = []
        self.hooks = []
        self.queue = []
        self.cramped = set()     # parents with no room around them to split
        self.solo = None         # when set, the only travelling droplets allowed to move
        self.sat = None
        for n in spec.mixes:
            self.tasks[n.id] = MixTask(n.id, self.stage_of[n.id])
            mix_users = [c for c in self.consumers[n.id] if self._is_mix(c)]
            self.pending[n.id] = list(mix_users)
            self.spares[n.id] = 2 - len(self.consumers[n.id])
        if self.opt.smt != "off":
            from .sat.planner import SatEscalation
            self.sat = SatEscalation(self)

    def _is_mix(self, nid):
        return self.spec.node(nid).op in ("mix", "merge")

    # -- helpers ----------------------------------------------------------

    def order(self):
        return sorted(self.agents, key=natural_key)

    def trajectory(self, a):
        pos = self.chip.droplets[a.id].pos
        out = [pos]
        for d, _s, _l in a.plan:
            if d is not None:
                pos = pos.step(d)
            out.append(pos)
        if a.committed:
            for shift in a.script:
                for _ in range(shift.steps):
                    if shift.dir is not None:
                        pos = pos.step(shift.dir)
                    out.append(pos)
        return out

    def reservations(self):
        return {i: self.trajectory(a) for i, a in self.agents.items()}

    def bias_for(self, node):
        """Current cell of the droplet that will co-parent ``node``'s child."""
        for child in self.consumers.get(node, ()):
            if not self._is_mix(child):
                continue
            for src in self.spec.mix_sources(child):
                if src and src != node and src in self.chip.droplets:
                    return self.chip.droplets[src].pos
        return None

    def add_agent(self, did, pos, role, node=None, **kw):
        self.chip.add_droplet(Droplet(did, pos))
        a = Agent(did, role, node, **kw)
        self.agents[did] = a
        return a

    def drop_agent(self, did):
        a = self.agents.pop(did)
        if a.chain is not None:
            self.release_chain(a)
        self.chip.remove_droplet(did)
        return a

    def event(self, kind, **data):
        ev = {"t": self.chip.t, "event": kind}
        ev.update(data)
        self.events.append(ev)
        return ev

    # -- chains -------------------------------------------------------------

    def refresh_blocked(self):
        self.chip.blocked = {}
        for a in self.agents.values():
            if a.chain is not None:
                for c in a.chain.reserved:
                    self.chip.blocked.setdefault(c, a.id)

    def release_chain(self, a):
        self.event("chain_release", droplet=a.id)
        a.chain = None
        self.refresh_blocked()

    # -- per-step logic ---------------------------------------------------

    def plan_shift(self, a, shift):
        d = self.chip.droplets[a.id]
        if shift.kind is ShiftKind.STALL and d.stall_count >= MAX_STALLS:
            # the way back is blocked too: wait without mixing and count stalls afresh
            d.stall_count = 0
            a.plan = [(None, None, True)]
            return
        steps = shift.steps
        a.plan = [(shift.dir, shift, i == steps - 1) for i in range(steps)]

    def decide_mixer(self, a, res):
        d = self.chip.droplets[a.id]
        if a.committed and not a.script:
            a.committed = False
        if a.committed and a.script:
            shift = a.script[0]
            loose = {i for i, o in self.agents.items() if not o.committed}
            if path_ok(self.chip, a.id, d.pos, self.trajectory(a)[1:], res, transient=loose):
                a.script.pop(0)
                self.plan_shift(a, shift)
                return
            # the schedule it was committed to no longer holds
            a.committed = False
            a.script = []
            self.event("uncommitted", droplet=a.id)
        if a.chain is not None:
            shift = chain_step(a.chain, d)
        elif a.script:
            shift = a.script.pop(0)
        else:
            shift = select_shift(self.chip, d, res, self.bias_for(a.node), a.forbidden)
            if self.opt.record_decisions:
                self.decisions.append((copy.deepcopy(d), {k: list(v) for k, v in res.items()},
                                       self.bias_for(a.node), a.forbidden,
                                       copy.deepcopy(self.chip.blocked), shift))
            if shift is STALL and d.stall_count >= MAX_STALLS:
                self.deadlocks += 1
                self.event("deadlock", droplet=a.id)
                if self.sat is not None and self.sat.escape([a.id]):
                    return
        self.plan_shift(a, shift)

    def distance_field(self, a):
        """Steps to ``a.target`` around every droplet that is not itself travelling."""
        chip = self.chip
        walls = set()
        for oid, o in self.agents.items():
            p = chip.droplets[oid].pos
            if oid == a.id or o.target == a.target and o.role == "route":
                continue
            if o.role != "route" or p == o.target or self.solo:
                walls.update(Cell(p.x + dx, p.y + dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1))
        dist = {a.target: 0}
        frontier = [a.target]
        while frontier:
            nxt = []
            for c in frontier:
                for n in neighbors4(c, chip.width, chip.height):
                    if n in dist or n in walls or n in a.forbidden:
                        continue
                    if chip.blocked.get(n, a.id) != a.id:
                        continue
                    dist[n] = dist[c] + 1
                    nxt.append(n)
            frontier = nxt
        return dist

    def decide_router(self, a, res):
        """Carry a split product one step closer to its merge point (or wait)."""
        d = self.chip.droplets[a.id]
        pos, tgt = d.pos, a.target
        if tgt is None or pos == tgt or (self.solo and a.id not in self.solo):
            a.plan = [(None, None, True)]
            return

        def ok(c):
            return path_ok(self.chip, a.id, pos, [c], res, a.forbidden)

        dist = self.distance_field(a)
        far = 10**6
        here = dist.get(pos, manhattan(pos, tgt) + far)

        def cost(m):
            c = pos.step(m)
            return dist.get(c, manhattan(c, tgt) + far)

        for m in sorted(DIRECTIONS, key=lambda m: (cost(m), m.name)):
            if cost(m) < here and ok(pos.step(m)):
                a.plan = [(m, None, True)]
                a.wait = 0
                return
        a.wait += 1
        if a.wait >= ROUTE_PATIENCE:
            side = [m for m in DIRECTIONS if pos.step(m) != a.prev and ok(pos.step(m))]
            if side:
                m = min(side, key=lambda m: (cost(m), m.name))
                a.plan = [(m, None, True)]
                a.wait = 0
                return
        a.plan = [(None, None, True)]

    def make_way(self, a, res):
        """Step an idle droplet away from a mixer that has started stalling next to it,
        or from a parent that has no room to split."""
        pos = self.chip.droplets[a.id].pos
        crowded = [self.chip.droplets[m.id].pos for m in self.agents.values()
                   if m.role == "mix" and m.chain is None
                   and self.chip.droplets[m.id].stall_count >= YIELD_AFTER
                   and chebyshev(self.chip.droplets[m.id].pos, pos) <= YIELD_RADIUS]
        crowded += [self.chip.droplets[p].pos for p in self.cramped
                    if p != a.id and p in self.chip.droplets
                    and chebyshev(self.chip.droplets[p].pos, pos) <= YIELD_RADIUS]
        if not crowded:
            return

        def gap(c):
            return min(chebyshev(c, m) for m in crowded)

        best, best_key = None, (gap(pos),)
        for m in DIRECTIONS:
            c = pos.step(m)
            if gap(c) > best_key[0] and path_ok(self.chip, a.id, pos, [c], res, a.forbidden):
                key = (gap(c),)
                if best is None or key > best_key:
                    best, best_key = m, key
        if best is not None:
            a.plan = [(best, None, True)]

    def check_commitments(self, res):
        """Release droplets whose committed moves would now run into someone."""
        loose = {i for i, o in self.agents.items() if not o.committed}
        for did in self.order():
            a = self.agents[did]
            if not a.committed or not a.plan:
                continue
            pos = self.chip.droplets[did].pos
            if not path_ok(self.chip, did, pos, self.trajectory(a)[1:], res, transient=loose):
                # a loose droplet in the way may still step aside
                self.dodge()
                res = self.reservations()
                if path_ok(self.chip, did, pos, self.trajectory(a)[1:], res, transient=loose):
                    continue
                a.committed = False
                a.script = []
                a.plan = []
                a.good_steps = a.shift_steps = 0
                self.event("uncommitted", droplet=did)

    def dodge(self):
        """Step aside anyone about to hold a cell a committed droplet will need."""
        res = self.reservations()
        for did in self.order():
            a = self.agents[did]
            if a.committed or (a.plan and a.plan[0][0] is not None):
                continue
            pos = self.chip.droplets[did].pos
            if path_ok(self.chip, did, pos, [pos], res):
                continue
            walk = self._dodge_walk(did, pos, res, a.forbidden)
            if walk:
                a.plan = [(m, None, True) for m in walk]
                self.event("dodge", droplet=did)
                res = self.reservations()

    def _dodge_walk(self, did, pos, res, forbidden):
        """Shortest move sequence (up to DODGE_DEPTH) to a cell clear of every reservation."""
        walks = [[]]
        for _ in range(DODGE_DEPTH):
            longer = []
            for w in walks:
                cells = []
                c = pos
                for m in w:
                    c = c.step(m)
                    cells.append(c)
                for m in DIRECTIONS:
                    if w and m is w[-1].opposite:
                        continue
                    if path_ok(self.chip, did, pos, cells + [c.step(m)], res, forbidden):
                        return w + [m]
                    longer.append(w + [m])
            walks = longer
        return None

    def step(self):
        if self.chip.t >= self.opt.max_steps:
            raise DeadlockError(f"step cap {self.opt.max_steps} reached",
                                sorted(self.agents, key=natural_key), self.chip.t)
        res = self.reservations()
        self.check_commitments(res)
        for did in self.order():
            a = self.agents.get(did)
            if a is None or a.plan:
                continue
            if a.role == "mix":
                self.decide_mixer(a, res)
            elif a.role == "route":
                self.decide_router(a, res)
            elif a.role in ("done", "hold"):
                self.make_way(a, res)
            res = self.reservations() if a.plan else res
        if any(o.committed for o in self.agents.values()):
            self.dodge()
        moves = {i: (a.plan[0][0] if a.plan else None) for i, a in self.agents.items()}
        before = {i: self.chip.droplets[i].pos for i in self.agents}
        try:
            apply_moves(self.chip, moves)
        except ConstraintViolation as e:  # pragma: no cover - router bug
            raise ConstraintViolation(f"router produced an illegal step: {e}", e.pairs) from e
        moved = False
        labels = {}
        for did in self.order():
            a = self.agents[did]
            d = self.chip.droplets[did]
            if d.pos != before[did]:
                moved = True
                a.prev = before[did]
            if not a.plan:
                labels[did] = "HOLD" if a.role != "route" else "WAIT"
                a.log.append((None, None, True))
                continue
            _dir, shift, last = a.plan.pop(0)
            a.log.append((_dir, shift, last))
            if a.role == "mix" and shift is not None:
                labels[did] = shift.kind.value
                self.mix_tick(a, d, shift, last)
            else:
                labels[did] = "MOVE" if _dir is not None else ("WAIT" if a.role == "route" else "HOLD")
        self.after_step()
        self.record(labels)
        for h in self.hooks:
            h.on_step(self)
        self.sync_events()
        return moved

    def mix_tick(self, a, d, shift, last):
        a.mix_steps += 1
        a.shift_steps += 1
        task = self.tasks[a.node]
        task.path.append(d.pos)
        if a.stuck_from is None or a.mix_steps < a.stuck_from:
            a.good_steps += 1
        if not last:
            task.pcts.append(d.mix_pct + shift.gain * a.good_steps / shift.steps)
            task.ideal.append(a.ideal_pct + shift.gain * a.shift_steps / shift.steps)
            return
        gain = shift.gain * (a.good_steps / shift.steps)
        a.good_steps = a.shift_steps = 0
        apply_shift_state(d, shift)
        d.mix_pct = min(100.0, d.mix_pct + gain)
        a.ideal_pct = min(100.0, a.ideal_pct + shift.gain)
        task.shifts.append(shift)
        task.pcts.append(d.mix_pct)
        task.ideal.append(a.ideal_pct)
        if a.chain is not None:
            a.chain.advance()
        if d.mix_pct >= 100.0 - 1e-9:
            d.mix_pct = 100.0
            a.role = "done"
            # a jointly planned route keeps going so nobody walks into us
            a.plan = [(m, None, k) for m, _s, k in a.plan]
            a.script = []
            a.committed = False
            task.status = "mixed"
            task.completion_step = self.chip.t
            self.event("mixed", droplet=a.id)
            if a.chain is not None:
                self.release_chain(a)
            return
        if (self.opt.mode == "mmls" and a.chain is None and len(d.history) == 1
                and not a.script and not a.plan and not a.forbidden):
            others = {i: self.trajectory(o) for i, o in self.agents.items() if i != a.id}
            chain = try_form_chain(self.chip, d, others, self.chip.t)
            if chain is not None:
                a.chain = chain
                task.chained = True
                self.refresh_blocked()
                self.event("chain", droplet=a.id, cells=sorted(chain.footprint))

    def after_step(self):
        for a in list(self.agents.values()):
            if a.chain is not None and self.chip.t >= a.chain.expiry:
                self.release_chain(a)
        for child, (tgt, keepers) in list(self.merges.items()):
            if keepers and all(self.chip.droplets[k].pos == tgt for k in keepers):
                for k in keepers:
                    self.drop_agent(k)
                self.add_agent(child, tgt, "hold", child)
                self.tasks[child].start_cell = tgt
                del self.merges[child]
                self.event("merge", droplet=child, cell=list(tgt))

    def record(self, labels):
        rows = []
        for did in self.order():
            d = self.chip.droplets[did]
            rows.append([did, d.pos.x, d.pos.y, labels.get(did, "HOLD"), round(d.mix_pct, 6)])
        chains = sorted((a.id for a in self.agents.values() if a.chain is not None), key=natural_key)
        self.trace.append({"t": self.chip.t, "droplets": rows, "chains": chains, "events": []})
        self.sync_events()

    def sync_events(self):
        """Copy events logged at the current step into its trace row (hooks log late)."""
        if self.trace and self.trace[-1]["t"] == self.chip.t:
            evs = [e for e in self.events if e["t"] == self.chip.t]
            self.trace[-1]["events"] = [{k: v for k, v in e.items() if k != "t"} for e in evs]

    # -- phases -------------------------------------------------------------

    def running(self):
        return [a for a in self.agents.values() if a.role == "mix"]

    def capacity(self):
        cap = self.opt.max_concurrent
        return cap if cap else 10**9

    def start_stage(self, stage):
        nodes = sorted((n for n, t in self.tasks.items() if t.stage == stage), key=natural_key)
        self.queue = nodes[self.capacity():]
        for nid in nodes[:self.capacity()]:
            self.begin_mix(nid)
        for h in self.hooks:
            h.on_stage_start(self, stage)
        if self.sat is not None:
            self.sat.stage_start(stage)
        self.sync_events()

    def begin_mix(self, nid):
        task = self.tasks[nid]
        if nid not in self.agents:
            self.add_agent(nid, task.start_cell, "hold", nid)
            self.event("dispense", droplets=[nid])
        a = self.agents[nid]
        a.role = "mix"
        task.status = "running"
        task.start = self.chip.t
        if task.start_cell is None:
            task.start_cell = self.chip.droplets[nid].pos
        if nid in self.opt.scripts:
            a.script = list(self.opt.scripts[nid])

    def admit(self):
        """Start queued mixes while the concurrency cap allows it."""
        while self.queue and len(self.running()) < self.capacity():
            nid = self.queue[0]
            if nid not in self.agents:
                cell = self.tasks[nid].start_cell
                busy = [c for traj in self.reservations().values() for c in traj]
                if any(chebyshev(cell, c) < 2 for c in busy):
                    cell = free_cell(self.chip.width, self.chip.height, busy, spacing=2,
                                     prefer=cell)
                    if cell is None:
                        return
                    self.tasks[nid].start_cell = cell
            self.queue.pop(0)
            self.begin_mix(nid)

    def mix_phase(self, stage):
        idle = 0
        best = {}
        last_gain = self.chip.t
        while self.running() or self.queue:
            self.admit()
            moved = self.step()
            for a in self.agents.values():
                if a.role in ("mix", "done") and a.node in self.tasks:
                    pct = self.chip.droplets[a.id].mix_pct
                    key = (a.id, self.tasks[a.node].attempts)
                    if pct > best.get(key, -1e9) + 1e-9:
                        best[key] = pct
                        last_gain = self.chip.t
            if self.chip.t - last_gain >= LIVELOCK_LIMIT:
                stuck = sorted((a.id for a in self.running()), key=natural_key)
                raise DeadlockError(f"no mixing progress for {LIVELOCK_LIMIT} steps",
                                    stuck, self.chip.t)
            idle = 0 if moved else idle + 1
            if idle >= NO_PROGRESS_LIMIT:
                stuck = sorted((a.id for a in self.running()), key=natural_key)
                if self.sat is not None and self.sat.escape(stuck):
                    idle = 0
                    continue
                raise DeadlockError(f"no droplet moved for {idle} steps", stuck, self.chip.t)

    def seed_stage_one(self):
        first = sorted((n for n, s in self.stage_of.items() if s == 1), key=natural_key)
        placed = dict(self.opt.placement)
        free = [n for n in first if n not in placed]
        if free:
            cells = None
            if self.sat is not None and not placed:
                cells = self.sat.seed(first[:self.capacity()])
            if cells is None or len(cells) < len(free):
                cells = self._seed_order(first, free, list(placed.values()))
            placed.update(zip(free, cells))
        now = first[:self.capacity()]
        for n in first:
            self.tasks[n].start_cell = Cell(*placed[n])
        for n in now:
            self.add_agent(n, Cell(*placed[n]), "hold", n)
        self.event("dispense", droplets=now)

    def _seed_order(self, first, free, occupied):
        w, h = self.chip.width, self.chip.height
        cells = seed_cells(w, h, len(free), occupied)
        # co-parents share an edge: pair the corners bottom, top
        return cells

    def transition(self, stage):
        """Split finished products and assemble every mixer of ``stage``."""
        children = sorted((n for n, s in self.stage_of.items() if s == stage), key=natural_key)
        # products nobody will mix again leave for detection right away
        for did in self.order():
            a = self.agents[did]
            if a.role == "done" and a.node == did and not self.pending.get(did):
                self.drop_agent(did)
                self.event("detect", droplet=did)
        todo = list(children)
        idle = 0
        best, last_gain = None, self.chip.t
        eager = self.sat is not None and self.sat.engaged(len(children))
        retry = 0
        while todo or self.merges:
            if todo:
                left = self.split_step(todo)
                if len(left) < len(todo):
                    todo, idle = left, 0
                    continue
                self.relocate()
            if eager and self.chip.t >= retry:
                lost = [i for i in self.order() if self.agents[i].role == "route" and not self.agents[i].plan
                        and self.chip.droplets[i].pos != self.agents[i].target]
                if lost and not self.sat.route(lost):
                    retry = self.chip.t + ROUTE_PATIENCE
            moved = self.step()
            idle = 0 if moved else idle + 1
            gap = (len(todo), sum(manhattan(self.chip.droplets[k].pos, tgt)
                                  for tgt, ks in self.merges.values() for k in ks
                                  if k in self.chip.droplets))
            if best is None or gap < best:
                best, last_gain = gap, self.chip.t
            if self.chip.t - last_gain >= ROUTE_LIVELOCK:
                idle = NO_PROGRESS_LIMIT
                last_gain = self.chip.t
            if idle >= NO_PROGRESS_LIMIT:
                stuck = sorted((k for _, ks in self.merges.values() for k in ks), key=natural_key)
                if self.sat is not None and self.sat.route(stuck + todo):
                    idle = 0
                    continue
                if self.serialize():
                    idle = 0
                    best = None
                    continue
                raise DeadlockError("cannot assemble the next stage", stuck + todo, self.chip.t)
            if self.solo and not any(i in self.agents and self.agents[i].role == "route"
                                     and self.chip.droplets[i].pos != self.agents[i].target
                                     for i in self.solo):
                self.solo = None

    def serialize(self):
        """Let one group of travelling droplets move alone, everybody else standing still.

        Returns False when no group can reach its target even then.
        """
        groups = [ks for _c, (_t, ks) in sorted(self.merges.items(), key=lambda kv: natural_key(kv[0]))]
        for did in self.order():
            a = self.agents[did]
            if a.role == "route" and not any(did in g for g in groups):
                groups.append([did])
        previous = self.solo
        for g in groups:
            if previous is not None and set(g) == previous:
                continue
            self.solo = set(g)
            if all(self.chip.droplets[k].pos in self.distance_field(self.agents[k]) for k in g):
                self.event("serialize", droplets=sorted(g, key=natural_key))
                return True
        self.solo = None
        return False

    def relocate(self):
        """Send parents that cannot split where they stand to the nearest roomier cell."""
        for pid in sorted(self.cramped, key=natural_key):
            a = self.agents.get(pid)
            if a is None or a.role != "done":
                self.cramped.discard(pid)
                continue
            cell = self._split_room(pid)
            if cell is not None:
                a.role, a.target, a.wait = "route", cell, 0
                self.event("relocate", droplet=pid, cell=list(cell))
                self.cramped.discard(pid)

    def _split_room(self, pid):
        """Closest cell (BFS order) where ``pid`` could split into two opposite products."""
        chip = self.chip
        others = self._occupied({pid}) + [t for t, _ in self.merges.values()]
        start = chip.droplets[pid].pos
        seen = {start}
        frontier = [start]
        while frontier:
            nxt = []
            for c in frontier:
                if c != start and self._free(c, others):
                    for m in (Direction.RIGHT, Direction.UP):
                        x, y = c.step(m), c.step(m.opposite)
                        if self._free(x, others) and self._free(y, others):
                            return c
                for n in neighbors4(c, chip.width, chip.height):
                    if n not in seen and self._free(n, others):
                        seen.add(n)
                        nxt.append(n)
            frontier = sorted(nxt)
        return None

    def _occupied(self, exclude=()):
        return [d.pos for i, d in self.chip.droplets.items() if i not in exclude]

    def _free(self, c, taken):
        return self.chip.in_bounds(c) and c not in self.chip.blocked and all(
            chebyshev(c, o) >= 2 for o in taken)

    def split_step(self, children):
        """One time-step in which parents split and fresh mixers are dispensed.

        Returns the children that could not be set up yet.
        """
        chip = self.chip
        spawn = {}          # droplet id -> (cell, role, node, merge target)
        removed = set()
        targets = [t for t, _ in self.merges.values()]
        for a in self.agents.values():
            if len(a.plan) > 1:
                targets.extend(self.trajectory(a)[1:])
        deferred = []
        for child in children:
            parents = [p for p in self.spec.mix_sources(child) if p]
            if len(parents) == 2 and parents[0] == parents[1]:
                raise InfeasibleConfigError(f"{child} mixes two products of {parents[0]}")
            sources = [self._product_droplet(p, child) for p in parents]
            taken = (self._occupied(removed | set(sources)) + targets
                     + [c for c, *_ in spawn.values()])
            if not parents:
                cell = free_cell(chip.width, chip.height, taken, spacing=2)
                if cell is None:
                    deferred.append(child)
                    continue
                spawn[child] = (cell, "hold", child, None)
                continue
            opts = [self._product_options(p, s, child, taken) for p, s in zip(parents, sources)]
            plan = self._pick_products(parents, opts, taken) if all(opts) else None
            if plan is None:
                deferred.append(child)
                self.cramped.update(p for p, s, o in zip(parents, sources, opts) if s == p and not o)
                continue
            for p, src, (cells, _mine) in zip(parents, sources, plan):
                if src == p:
                    removed.add(p)
                    for other, cell in cells.items():
                        if other != child:
                            spawn[f"{p}>{other}"] = (cell, "hold", other, None)
            if len(parents) == 1:
                if sources[0] != parents[0]:
                    removed.add(sources[0])
                spawn[child] = (plan[0][1], "hold", child, None)
                continue
            tgt = plan[2]
            keepers = [f"{p}>{child}" for p in parents]
            for (_cells, mine), kid in zip(plan, keepers):
                spawn[kid] = (mine, "route", child, tgt)
            self.merges[child] = (tgt, keepers)
            targets.append(tgt)
        if not spawn:
            return deferred
        for did in sorted(removed, key=natural_key):
            self.drop_agent(did)
            self.event("split", droplet=did)
        chip.t += 1
        for did, (cell, role, node, tgt) in spawn.items():
            if did in chip.droplets:
                a = self.agents[did]
                a.role, a.target = role, tgt
            else:
                self.add_agent(did, cell, role, node, target=tgt)
            if tgt is not None:
                chip.merge_groups[did] = (node, tgt)
            if did == node:
                self.tasks[node].start_cell = cell
                self.event("dispense" if not self.spec.mix_sources(node)[0] and
                           not self.spec.mix_sources(node)[1] else "merge", droplet=node)
        for child in children:
            if child in deferred:
                continue
            for p in self.spec.mix_sources(child):
                if p and child in self.pending.get(p, ()):
                    self.pending[p].remove(child)
        self.after_step()
        self.record({})
        for h in self.hooks:
            h.on_step(self)
        return deferred

    def _product_droplet(self, parent, child):
        """Id of the droplet currently carrying ``parent``'s product for ``child``."""
        pid = f"{parent}>{child}"
        if pid in self.agents:
            return pid
        if parent in self.agents:
            return parent
        raise DeadlockError(f"product of {parent} for {child} is missing", [parent], self.chip.t)

    def _product_options(self, parent, source, child, taken):
        """Layouts ``({consumer: cell}, cell for child)`` for the product going to ``child``."""
        pos = self.chip.droplets[source].pos
        if source != parent:
            return [({child: pos}, pos)]
        owed = self.pending[parent]
        mu = [c for c in neighbors4(pos, self.chip.width, self.chip.height) if self._free(c, taken)]
        if len(owed) <= 1:
            out = [({child: c}, c) for c in mu]
            if not out and self._free(pos, taken):
                out.append(({child: pos}, pos))
            return out
        other = next(c for c in owed if c != child)
        out = []
        for c in mu:
            opp = Cell(2 * pos.x - c.x, 2 * pos.y - c.y)
            if opp in mu:
                out.append(({child: c, other: opp}, c))
        return out

    def _pick_products(self, parents, opts, taken):
        if len(parents) == 1:
            return [min(opts[0], key=lambda o: (
                -min((chebyshev(o[1], t) for t in taken), default=99), o[1].x, o[1].y))]
        pairs = []
        for oa in opts[0]:
            for ob in opts[1]:
                ca, cb = list(oa[0].values()), list(ob[0].values())
                if any(chebyshev(x, y) < 2 for x in ca for y in cb):
                    continue
                pairs.append((manhattan(oa[1], ob[1]), oa[1], ob[1], oa, ob))
        pairs.sort(key=lambda p: p[:3])
        for _dist, a, b, oa, ob in pairs:
            parked = [c for c in list(oa[0].values()) + list(ob[0].values()) if c not in (a, b)]
            for tgt in merge_points(a, b):
                if all(chebyshev(tgt, o) >= 2 for o in taken + parked):
                    return [oa, ob, tgt]
        return None

    # -- driver -------------------------------------------------------------

    def run(self):
        self.seed_stage_one()
        self.record({})
        last_stage = max(self.stage_of.values(), default=0)
        if self.opt.stop_after_stage:
            last_stage = min(last_stage, self.opt.stop_after_stage)
        for stage in range(1, last_stage + 1):
            if stage > 1:
                self.transition(stage)
            self.start_stage(stage)
            self.mix_phase(stage)
        return self.report()

    def report(self):
        done = [t.completion_step for t in self.tasks.values() if t.completion_step is not None]
        total = max(done, default=0)
        if total and self.opt.detect_steps:
            total += self.opt.detect_steps
        stalls = ys = 0
        for rec in self.trace:
            for row in rec["droplets"]:
                stalls += row[3] == "STALL"
                ys += row[3] == "Y"
        w_path, m_path, ratio = wash_stats(self.trace)
        mixes = {}
        for nid in sorted(self.tasks, key=natural_key):
            t = self.tasks[nid]
            mixes[nid] = {
                "stage": t.stage,
                "start": t.start,
                "completion": t.completion_step,
                "steps": None if t.completion_step is None else t.completion_step - t.start,
                "chained": t.chained,
                "checkpoint": t.checkpoint,
                "start_cell": None if t.start_cell is None else list(t.start_cell),
            }
        paths = {nid: [list(c) for c in self.tasks[nid].path] for nid in sorted(self.tasks, key=natural_key)}
        return SynthesisReport(
            assay=self.spec.name,
            chip=(self.chip.width, self.chip.height),
            freq_hz=self.chip.freq_hz,
            mode=self.opt.mode,
            smt=self.opt.smt,
            total_steps=total,
            total_seconds=total * self.chip.step_seconds,
            mixes=mixes,
            stalls=stalls,
            ys=ys,
            chains=sum(t.chained for t in self.tasks.values()),
            w_path=w_path,
            m_path=m_path,
            ratio=ratio,
            errors=[e.to_dict() if hasattr(e, "to_dict") else e for e in self.errors],
            sat_invocations=self.sat_invocations,
            deadlocks=self.deadlocks,
            paths=paths,
            trace=self.trace,
        )


def run_assay(chip, spec, options=None):
    """Synthesize ``spec`` on ``chip`` and return the SynthesisReport."""
    opt = options or RunOptions()
    if opt.mode not in ("mls", "mmls"):
        raise InfeasibleConfigError(f"unknown mode {opt.mode!r}")
    if opt.smt not in ("off", "auto", "on"):
        raise InfeasibleConfigError(f"unknown smt setting {opt.smt!r}")
    syn = Synthesizer(chip, spec, opt)
    if opt.faults is not None:
        from .recovery import FaultMonitor
        syn.hooks.append(FaultMonitor(syn, opt.faults))
    return syn.run()
