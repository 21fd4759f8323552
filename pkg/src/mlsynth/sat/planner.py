"""Bounded-horizon satisfiability planning of concurrent droplet motion.

Variables ``S[i,x,y,t]`` say droplet ``i`` sits on cell (x, y) at time ``t``.
Each droplet occupies exactly one cell per time, moves at most one cell per
step, and reaches its goal (if it has one) at the horizon. For every pair of
droplets the cells around a droplet's new position are excluded for the
other droplet both at the same time and one step earlier; for a move to the
left that is exactly the seven cells (x-2, y-1..y+1), (x-1, y+-1) and
(x, y+-1) seen from the old position, and symmetrically for the other three
directions.

Mixers can additionally be held to the shift rules: no reversals, at most
three straight steps in a row (holds do not break a run) and at most three
consecutive holds.
"""

import copy

from ..exceptions import EncodingError, SolverTimeout
from ..geometry import DIRECTIONS, Cell, Direction, chebyshev, manhattan
from ..grid import exempt
from .cnf import CnfProblem, export_dimacs
from .layout import SIDE, Loop, assign_seats, candidate_loops, circuit
from .solver import solve

MAX_RUN = 3
MAX_HOLDS = 3


def _domains(chip, d, goal, H, forbidden, radius):
    """Cells droplet ``d`` may occupy at each time 0..H."""
    start = d.pos
    out = []
    for t in range(H + 1):
        cells = []
        r = t if radius is None else min(t, radius)
        for x in range(max(1, start.x - r), min(chip.width, start.x + r) + 1):
            span = r - abs(x - start.x)
            for y in range(max(1, start.y - span), min(chip.height, start.y + span) + 1):
                c = Cell(x, y)
                if goal is not None and manhattan(c, goal) > H - t:
                    continue
                if c != start and (c in forbidden or chip.blocked.get(c, d.id) != d.id):
                    continue
                cells.append(c)
        out.append(cells)
    return out


def encode(chip, droplets, goals, H, fixed=None, forbidden=(), automaton=(), radius=None,
           headings=None):
    """CNF for moving ``droplets`` (Droplet objects) over ``H`` steps.

    ``goals`` maps droplet id to its cell at time H (None leaves the end free).
    ``fixed`` maps other droplet ids to trajectories they are committed to
    (holding the last cell afterwards); planned droplets keep their distance
    from those. Ids in ``automaton`` obey the mixing shift rules. ``radius``
    optionally caps how far each droplet may stray from where it starts.
    ``headings`` maps mixer ids to the direction their next straight run
    must be able to take right after the horizon (a full three steps).
    """
    p = CnfProblem(horizon=H)
    forbidden = set(forbidden)
    fixed = fixed or {}
    radius = radius or {}
    lb = max((manhattan(d.pos, goals[d.id]) for d in droplets if goals.get(d.id) is not None),
             default=0)
    if H < lb:
        p.warnings.append(f"horizon {H} below the lower bound {lb}")
    dom = {}
    for d in droplets:
        dom[d.id] = _domains(chip, d, goals.get(d.id), H, forbidden, radius.get(d.id))

    def S(i, c, t):
        return p.var(("S", i, c.x, c.y, t))

    # one droplet, one cell; every cell must be compatible with the committed droplets
    for d in droplets:
        i = d.id
        for t in range(H + 1):
            lits = []
            for c in dom[i][t]:
                v = S(i, c, t)
                lits.append(v)
            p.exactly_one(lits)
        p.add(S(i, d.pos, 0))
    for d in droplets:
        i = d.id
        for oid, traj in fixed.items():
            if oid == i:
                continue
            last = len(traj) - 1
            for t in range(H + 1):
                near = {traj[min(t, last)]}
                if t > 0:
                    near.add(traj[min(t - 1, last)])
                near.add(traj[min(t + 1, last)])
                if t == H:
                    near.update(traj[min(t, last):])
                for c in dom[i][t]:
                    if any(chebyshev(c, o) < 2 and not exempt(chip, i, oid, c, o) for o in near):
                        p.add(-S(i, c, t))
    # motion: stay or step to a 4-neighbour
    for d in droplets:
        i = d.id
        for t in range(1, H + 1):
            prev = set(dom[i][t - 1])
            for c in dom[i][t]:
                src = [c] + [c.step(m) for m in DIRECTIONS]
                p.add(-S(i, c, t), *[S(i, s, t - 1) for s in src if s in prev])
    # spacing guards against every other planned droplet
    ids = [d.id for d in droplets]
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            i, j = ids[a], ids[b]
            for t in range(H + 1):
                _pair(p, chip, i, j, dom[i][t], dom[j][t], t, t, S)
                if t > 0:
                    _pair(p, chip, i, j, dom[i][t], dom[j][t - 1], t, t - 1, S)
                    _pair(p, chip, i, j, dom[i][t - 1], dom[j][t], t - 1, t, S)
    # goals
    for d in droplets:
        g = goals.get(d.id)
        if g is not None:
            if g in dom[d.id][H]:
                p.add(S(d.id, Cell(*g), H))
            else:
                p.clauses.append(())
    for d in droplets:
        if d.id in automaton:
            _automaton(p, d, dom[d.id], H, S, (headings or {}).get(d.id))
    return p


def _pair(p, chip, i, j, cells_i, cells_j, ti, tj, S):
    if not cells_i or not cells_j:
        return
    index = set(cells_j)
    for c in cells_i:
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                o = Cell(c.x + dx, c.y + dy)
                if o in index and not exempt(chip, i, j, c, o):
                    p.add(-S(i, c, ti), -S(j, o, tj))


def _automaton(p, d, dom, H, S, heading=None):
    i = d.id

    def M(t, m):
        return p.var(("M", i, t, m.name))

    def L(t, m):
        return p.var(("L", i, t, m.name))

    def C(t, k):
        return p.var(("C", i, t, k))

    def Z(t, k):  # consecutive holds
        return p.var(("H", i, t, k))

    for m in DIRECTIONS:
        p.add(L(0, m) if d.last_dir is m else -L(0, m))
    for k in range(MAX_RUN + 1):
        p.add(C(0, k) if d.linear_run == k else -C(0, k))
    held = min(d.stall_count, MAX_HOLDS)
    for k in range(MAX_HOLDS + 1):
        p.add(Z(0, k) if held == k else -Z(0, k))
    for t in range(1, H + 1):
        prev = set(dom[t - 1])
        cur = set(dom[t])
        moves = [M(t, m) for m in DIRECTIONS]
        # M(t, m) holds exactly when the droplet steps along m at time t
        for m in DIRECTIONS:
            for c in prev:
                n = c.step(m)
                if n in cur:
                    p.add(-S(i, c, t - 1), -S(i, n, t), M(t, m))
                    p.add(-M(t, m), -S(i, c, t - 1), S(i, n, t))
                else:
                    p.add(-M(t, m), -S(i, c, t - 1))
        p.at_most_one(moves)
        # last direction
        for m in DIRECTIONS:
            p.add(-M(t, m), L(t, m))
            p.add(-L(t - 1, m), *moves, L(t, m))
            p.add(-L(t, m), M(t, m), L(t - 1, m))
            for e in DIRECTIONS:
                if e is not m:
                    p.add(-L(t, m), -M(t, e))
        # straight-run counter
        p.exactly_one([C(t, k) for k in range(MAX_RUN + 1)])
        for k in range(MAX_RUN + 1):
            p.add(*moves, -C(t - 1, k), C(t, k))
        for m in DIRECTIONS:
            for k in range(MAX_RUN):
                p.add(-M(t, m), -L(t - 1, m), -C(t - 1, k), C(t, k + 1))
            p.add(-M(t, m), -L(t - 1, m), -C(t - 1, MAX_RUN))
            p.add(-M(t, m), -L(t - 1, m.opposite))
            for q in m.perpendicular():
                p.add(-M(t, m), -L(t - 1, q), C(t, 0))
            p.add(-M(t, m), *[L(t - 1, q) for q in DIRECTIONS], C(t, 1))
        # hold counter: a fourth hold in a row is not allowed
        p.exactly_one([Z(t, k) for k in range(MAX_HOLDS + 1)])
        for m in DIRECTIONS:
            p.add(-M(t, m), Z(t, 0))
        for k in range(MAX_HOLDS):
            p.add(*moves, -Z(t - 1, k), Z(t, k + 1))
        p.add(*moves, -Z(t - 1, MAX_HOLDS))
    if heading is not None:
        # no reversal into the heading, and a straight run along it must be fresh
        p.add(-L(H, heading.opposite))
        p.add(-L(H, heading), C(H, 0))


def decode(p, result, droplets):
    """Per-droplet cell sequence (times 0..H) from a satisfying assignment."""
    seen = {}
    for k, v in p.names.items():
        if k[0] == "S" and result.value(v):
            seen.setdefault((k[1], k[4]), []).append(Cell(k[2], k[3]))
    out = {}
    for d in droplets:
        cells = []
        for t in range(p.horizon + 1):
            hits = seen.get((d.id, t), [])
            if len(hits) != 1:
                raise EncodingError(f"{d.id} occupies {len(hits)} cells at t={t}")
            cells.append(hits[0])
        out[d.id] = cells
    return out


def decode_and_splice(p, result, droplets, mixers=()):
    """Per-step plan ``[(direction or None, shift or None, last_step)]`` per droplet.

    Moves of droplets in ``mixers`` are grouped into shifts so the mixing gain
    can be credited; everybody else just gets bare moves.
    """
    from ..router import label_moves

    paths = decode(p, result, droplets)
    plans = {}
    for d in droplets:
        cells = paths[d.id]
        dirs = [None if a == b else Direction.between(a, b) for a, b in zip(cells, cells[1:])]
        # trailing holds carry no information
        while dirs and dirs[-1] is None:
            dirs.pop()
        if d.id in mixers:
            steps = []
            for shift in label_moves(d, dirs):
                for k in range(shift.steps):
                    steps.append((shift.dir, shift, k == shift.steps - 1))
            plans[d.id] = steps
        else:
            plans[d.id] = [(m, None, True) for m in dirs]
    return plans


def plan_paths(chip, droplets, goals, fixed=None, forbidden=(), automaton=(), radius=None,
               lower=None, conflict_limit=20000, emit=None, headings=None, upper=None):
    """Iterative deepening on the horizon; returns ``(problem, result)`` or None."""
    lb = max((manhattan(d.pos, goals[d.id]) for d in droplets if goals.get(d.id) is not None),
             default=1)
    lb = max(1, lb if lower is None else max(lb, lower))
    H = lb
    while H <= (4 * lb if upper is None else upper):
        p = encode(chip, droplets, goals, H, fixed, forbidden, automaton, radius, headings)
        if emit is not None:
            emit(p)
        try:
            r = solve(p, conflict_limit=conflict_limit)
        except SolverTimeout:
            r = None
        if r is not None and r.sat:
            return p, r
        H += 2
    return None


class SatEscalation:
    """Satisfiability fallback used by the synthesizer when greedy routing jams."""

    RADIUS = 4
    WAYPOINT_GAP = 3

    REACH = (0, 2, 4, 6, 8)
    SLACK = 6

    def __init__(self, engine):
        self.engine = engine
        self.calls = 0

    def engaged(self, count):
        opt = self.engine.opt
        return opt.smt == "on" or (opt.smt == "auto" and count >= opt.sat_parallel)

    # -- hooks called by the engine ------------------------------------------

    def seed(self, nodes):
        """Dispense cells for the first stage: seats of loops tiled from the corner."""
        if not self.engaged(len(nodes)):
            return None
        chip = self.engine.chip
        seats = []
        for y0 in range(1, chip.height - SIDE + 2, SIDE + 1):
            for x0 in range(1, chip.width - SIDE + 2, SIDE + 1):
                seats.extend(c for c, _h in Loop(x0, y0).seats)
        if len(seats) < len(nodes):
            return None
        return seats[:len(nodes)]

    def stage_start(self, stage):
        """Put the stage's mixers on loops: choose seats, then plan the trip there."""
        eng = self.engine
        chip = eng.chip
        mixers = [eng.agents[i] for i in eng.order()
                  if eng.agents[i].role == "mix" and eng.agents[i].chain is None
                  and not eng.agents[i].script and not eng.agents[i].plan]
        if not mixers or not self.engaged(len(mixers)):
            return
        ids = [a.id for a in mixers]
        fixed = {i: eng.trajectory(a) for i, a in eng.agents.items() if i not in ids}
        obstacles = [c for traj in fixed.values() for c in traj]
        starts = {i: chip.droplets[i].pos for i in ids}
        loops = candidate_loops(chip, obstacles)
        seats = {}
        for reach in self.REACH:
            seats = assign_seats(loops, starts, reach)
            if len(seats) == len(ids):
                break
        left = [i for i in ids if i not in seats]
        if left:
            loops = candidate_loops(chip, obstacles + [starts[i] for i in left])
            seats = assign_seats(loops, {i: starts[i] for i in ids if i in seats}, self.REACH[-1])
            left = [i for i in ids if i not in seats]
            fixed.update({i: [starts[i]] for i in left})
        if not seats:
            return
        movers = [chip.droplets[i] for i in ids if i in seats]
        goals = {d.id: seats[d.id][1] for d in movers}
        headings = {d.id: seats[d.id][2] for d in movers}
        if all(d.pos == goals[d.id] and d.last_dir is None for d in movers):
            travel = {d.id: [] for d in movers}
            p = None
        else:
            lb = max(manhattan(d.pos, goals[d.id]) for d in movers)
            got = plan_paths(chip, movers, goals, fixed, automaton=set(goals), headings=headings,
                             upper=max(lb, 1) + self.SLACK, emit=self._emit)
            if got is None:
                return
            p, r = got
            paths = decode(p, r, movers)
            travel = {i: [None if a == b else Direction.between(a, b) for a, b in zip(c, c[1:])]
                      for i, c in paths.items()}
        plans = self._circuits(movers, travel, seats)
        if not self._verify(plans, fixed):
            return
        for i, steps in plans.items():
            eng.agents[i].plan = steps
        self.calls += 1
        eng.sat_invocations += 1
        eng.event("sat_loops", droplets=sorted(plans, key=_natural),
                  loops=sorted({list(seats[i][0].key).__repr__() for i in plans}),
                  horizon=0 if p is None else p.horizon)

    def _circuits(self, movers, travel, seats):
        """Labelled per-step plans: trip to the seat, then laps until everyone on the loop is done."""
        from ..router import apply_shift_state, label_moves

        def need(d, moves):
            state = copy.deepcopy(d)
            pct = d.mix_pct
            steps = 0
            for shift in label_moves(d, moves):
                steps += shift.steps
                pct += shift.gain
                apply_shift_state(state, shift)
                if pct >= 100.0 - 1e-9:
                    return steps
            return None

        laps = {}
        for d in movers:
            lp, _cell, heading = seats[d.id]
            trip = travel[d.id]
            n = len(trip)
            for total in range(n, n + 200):
                got = need(d, trip + circuit(heading, total - n))
                if got is not None:
                    break
            laps[lp.key] = max(laps.get(lp.key, 0), max(0, got - n) if got is not None else 200)
        plans = {}
        for d in movers:
            lp, _cell, heading = seats[d.id]
            moves = travel[d.id] + circuit(heading, laps[lp.key])
            steps = []
            for shift in label_moves(d, moves):
                for k in range(shift.steps):
                    steps.append((shift.dir, shift, k == shift.steps - 1))
            plans[d.id] = steps
        return plans

    def _verify(self, plans, fixed):
        """Replay the joint plan on a scratch chip; committed droplets follow their trajectories."""
        from ..exceptions import ConstraintViolation
        from ..grid import apply_moves

        scratch = copy.deepcopy(self.engine.chip)
        horizon = max((len(s) for s in plans.values()), default=0)
        for t in range(horizon):
            moves = {}
            for i, steps in plans.items():
                moves[i] = steps[t][0] if t < len(steps) else None
            for i, traj in fixed.items():
                if t + 1 < len(traj):
                    moves[i] = Direction.between(traj[t], traj[t + 1])
            try:
                apply_moves(scratch, moves)
            except ConstraintViolation:
                return False
        return True

    def _emit(self, p):
        path = self.engine.opt.emit_cnf
        if path:
            with open(path, "w") as fh:
                fh.write(export_dimacs(p) + "\n")

    def _split(self, ids):
        """Droplets to plan (stuck ones plus idle neighbours) and committed obstacles."""
        eng = self.engine
        chip = eng.chip
        seeds = [chip.droplets[i].pos for i in ids if i in chip.droplets]
        movable, fixed = [], {}
        for oid in eng.order():
            a = eng.agents[oid]
            d = chip.droplets[oid]
            near = any(chebyshev(d.pos, s) <= self.RADIUS for s in seeds)
            free = not a.plan and a.chain is None and not a.script
            if (oid in ids or near) and free:
                movable.append(d)
            else:
                fixed[oid] = eng.trajectory(a)
        return movable, fixed

    def _waypoint(self, d, others):
        """Nearest cell with room to mix: clear of others and with a free straight run."""
        chip = self.engine.chip
        best = None
        for c in chip.cells():
            if c in chip.blocked and chip.blocked[c] != d.id:
                continue
            if any(chebyshev(c, o) < self.WAYPOINT_GAP for o in others):
                continue
            room = max(_run(chip, c, m, others) for m in DIRECTIONS)
            if room < MAX_RUN:
                continue
            key = (manhattan(c, d.pos), c.x, c.y)
            if best is None or key < best[0]:
                best = (key, c)
        return None if best is None else best[1]

    def _apply(self, p, r, movable, mixers):
        eng = self.engine
        plans = decode_and_splice(p, r, movable, mixers)
        for did, steps in plans.items():
            a = eng.agents[did]
            if steps:
                a.plan = steps
                a.wait = 0
        self.calls += 1
        eng.sat_invocations += 1
        eng.event("sat", droplets=sorted(plans, key=_natural), horizon=p.horizon,
                  vars=p.num_vars, clauses=len(p.clauses))
        return any(plans.values())

    def escape(self, ids):
        """Plan the jammed droplets (and idle neighbours) out of a deadlock."""
        eng = self.engine
        chip = eng.chip
        movable, fixed = self._split(ids)
        if not movable:
            return False
        goals = {}
        mixers = set()
        for d in movable:
            a = eng.agents[d.id]
            if a.role == "route":
                goals[d.id] = a.target
            elif a.role == "mix":
                mixers.add(d.id)
                if d.id in ids:
                    others = [o.pos for o in chip.droplets.values() if o.id != d.id]
                    goals[d.id] = self._waypoint(d, others)
        radius = {d.id: 2 for d in movable if d.id not in goals or goals[d.id] is None}
        if all(g is None for g in goals.values()):
            return False
        got = plan_paths(chip, movable, goals, fixed, automaton=mixers, radius=radius,
                         emit=self._emit)
        if got is None:
            return False
        return self._apply(*got, movable, mixers)

    def route(self, ids):
        """Joint plan bringing split products to their merge points."""
        return self.escape(ids)


def _run(chip, c, m, others):
    n = 0
    nxt = c.step(m)
    while chip.in_bounds(nxt) and n < MAX_RUN and not any(chebyshev(nxt, o) < 2 for o in others):
        n += 1
        nxt = nxt.step(m)
    return n


def _natural(s):
    from ..assay import natural_key
    return natural_key(s)
