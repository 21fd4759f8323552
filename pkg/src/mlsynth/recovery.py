"""Checkpointed error detection and rollback for mixing operations.

Every mix is sensed twice: at its checkpoint ``n = ceil(N/2)`` and at its
planned end ``N``. A mix that reads below plan is rolled back and restarted
from spare droplets while every other mix carries on as if nothing happened.

Fault model: a fault striking a mixer at step ``k`` of an attempt voids all
mixing gain from step ``k`` on (the droplet still moves).
"""

import copy
import math
import random
from dataclasses import dataclass
from typing import Optional

from .assay import builtin, natural_key
from .exceptions import InvalidConfigError, RecoveryError, SynthesisError
from .geometry import DIRECTIONS, Cell
from .grid import new_chip
from .router import RunOptions, path_ok, run_assay

REPEAT = "repeat-same-path"
AVOID = "avoid-region"
_EPS = 1e-6
# Steps a rolled-back mixer may wait for a way out of its quarantined region.
EXIT_PATIENCE = 20


def recovery_cost(N, n):
    """Expected total path length when the checkpoint sits at step ``n`` of ``N``."""
    if not 1 <= n <= N:
        raise InvalidConfigError(f"checkpoint {n} outside 1..{N}")
    return n * n - N * n + 2 * N * N


def best_checkpoint(N):
    return min(range(1, N + 1), key=lambda n: (recovery_cost(N, n), n))


@dataclass
class CheckpointPlan:
    N: int
    n: int
    threshold_pct: float

    @classmethod
    def for_length(cls, N, threshold_pct=50.0):
        if N < 1:
            raise InvalidConfigError("a mix needs at least one step")
        return cls(N, math.ceil(N / 2), threshold_pct)


@dataclass
class ErrorEvent:
    mix: str
    fault_step: Optional[int]
    detected_at: int
    strategy: Optional[str] = None
    recovery_steps: Optional[int] = None
    fault_cell: Optional[Cell] = None
    attempt: int = 1
    t: int = 0

    def to_dict(self):
        return {
            "mix": self.mix,
            "attempt": self.attempt,
            "fault_step": self.fault_step,
            "detected_at": self.detected_at,
            "t": self.t,
            "fault_cell": None if self.fault_cell is None else list(self.fault_cell),
            "strategy": self.strategy,
            "recovery_steps": self.recovery_steps,
        }


@dataclass(frozen=True)
class RegionMask:
    cells: frozenset = frozenset()

    @classmethod
    def around(cls, cell, chip=None):
        cells = {Cell(cell.x + dx, cell.y + dy) for dx in (-1, 0, 1) for dy in (-1, 0, 1)}
        if chip is not None:
            cells = {c for c in cells if chip.in_bounds(c)}
        return cls(frozenset(cells))

    def __contains__(self, cell):
        return cell in self.cells

    def __or__(self, other):
        return RegionMask(self.cells | other.cells)


def sensed_profile(shifts, fault_step=None):
    """Percentage a sensor would read after each step of ``shifts``.

    Gain is credited pro rata while a shift is under way; steps from
    ``fault_step`` on contribute nothing.
    """
    out = []
    pct = 0.0
    k = 0
    for s in shifts:
        good = 0
        for i in range(s.steps):
            k += 1
            if fault_step is None or k < fault_step:
                good += 1
            out.append(min(100.0, pct + s.gain * good / s.steps))
        pct = min(100.0, pct + s.gain * good / s.steps)
    return out


def sense(profile, at):
    """Reading at step ``at`` (1-based) of a sensed profile."""
    if not 1 <= at <= len(profile):
        raise InvalidConfigError(f"no reading at step {at}")
    return profile[at - 1]


@dataclass
class FaultConfig:
    prob: float = 0.0
    faults: tuple = ()            # (mix id, step) or (mix id, step, True) for a permanent fault
    seed: int = 0
    threshold_pct: Optional[float] = None   # None: the planned reading at the checkpoint
    strategy: str = "auto"        # auto | repeat | avoid
    per: str = "step"             # step: one draw per time-step, hitting one running mixer
                                  # mixer: one draw per running mixer per time-step

    @classmethod
    def parse(cls, text, seed=0):
        """From ``"p=0.005,M1@5,M3@20!"`` (``!`` marks a permanent fault)."""
        cfg = cls(seed=seed)
        fixed = []
        for part in filter(None, (p.strip() for p in text.split(","))):
            if part.startswith("p="):
                try:
                    cfg.prob = float(part[2:])
                except ValueError:
                    raise InvalidConfigError(f"bad probability in {part!r}") from None
            elif part.startswith("strategy="):
                cfg.strategy = part.split("=", 1)[1]
            elif part.startswith("per="):
                cfg.per = part.split("=", 1)[1]
            elif part.startswith("threshold="):
                cfg.threshold_pct = float(part.split("=", 1)[1])
            elif "@" in part:
                mix, step = part.split("@", 1)
                permanent = step.endswith("!")
                if not step.rstrip("!").isdigit() or int(step.rstrip("!")) < 1:
                    raise InvalidConfigError(f"bad fault step in {part!r}")
                fixed.append((mix, int(step.rstrip("!")), permanent))
            else:
                raise InvalidConfigError(f"bad fault spec {part!r}")
        if not 0.0 <= cfg.prob <= 1.0:
            raise InvalidConfigError("fault probability must lie in [0, 1]")
        if cfg.per not in ("step", "mixer"):
            raise InvalidConfigError(f"unknown fault rate basis {cfg.per!r}")
        if cfg.strategy not in ("auto", "repeat", "avoid"):
            raise InvalidConfigError(f"unknown strategy {cfg.strategy!r}")
        cfg.faults = tuple(fixed)
        return cfg


def _replay_cells(pos, shifts):
    out = []
    for s in shifts:
        for _ in range(s.steps):
            if s.dir is not None:
                pos = pos.step(s.dir)
            out.append(pos)
    return out


class FaultMonitor:
    """Engine hook injecting faults, sensing checkpoints and rolling mixes back."""

    def __init__(self, engine, config):
        self.cfg = config
        self.rng = random.Random(config.seed)
        self.fixed = {(f[0], f[1]): bool(f[2:] and f[2]) for f in config.faults}
        self.plans = {}      # mix -> CheckpointPlan of the current attempt
        self.scripts = {}    # mix -> planned shifts of the first attempt
        self.base = {}       # mix -> (index into task.pcts, index into task.path)
        self.faults = {}     # mix -> (step, permanent) on the current attempt
        self.masks = {}
        self.pending = {}    # mix -> ErrorEvent awaiting restart
        self.open = {}       # mix -> ErrorEvent awaiting completion
        self.events = []
        self.locked = set()  # mixers pinned to a fault-free forecast

    # -- planning ---------------------------------------------------------

    def forecast(self, eng, restore=()):
        """Fault-free continuation of the current stage, run on a copy."""
        hooks, eng.hooks = eng.hooks, []
        try:
            sim = copy.deepcopy(eng)
        finally:
            eng.hooks = hooks
        for a in sim.agents.values():
            a.stuck_from = None
        for mid in restore:
            sim.chip.droplets[mid].mix_pct = sim.agents[mid].ideal_pct
        stage = max((sim.tasks[a.node].stage for a in sim.running()), default=None)
        if stage is not None:
            try:
                sim.mix_phase(stage)
            except SynthesisError:
                pass
        return sim

    def _plan(self, eng, sim, mids):
        for mid in mids:
            task, st = eng.tasks[mid], sim.tasks[mid]
            pb = self.base.setdefault(mid, (0, 0))[0]
            N = len(st.pcts) - pb
            if N < 1:
                continue
            thr = 100.0 if self.cfg.threshold_pct is None else self.cfg.threshold_pct
            self.plans[mid] = CheckpointPlan.for_length(N, thr)
            if task.attempts == 1 and mid not in self.scripts:
                self.scripts[mid] = list(st.shifts)

    def _unplanned(self, eng):
        return [a.node for a in self._mixers(eng) if a.node not in self.plans]

    @staticmethod
    def _mixers(eng):
        return [eng.agents[i] for i in eng.order()
                if eng.agents[i].role == "mix" and eng.agents[i].node in eng.tasks]

    # -- hooks --------------------------------------------------------------

    def on_stage_start(self, eng, stage):
        todo = self._unplanned(eng)
        if todo:
            self._plan(eng, self.forecast(eng), todo)
        self._inject(eng)

    def on_step(self, eng):
        todo = self._unplanned(eng)
        if todo:
            self._plan(eng, self.forecast(eng), todo)
        for a in self._mixers(eng):
            if a.node in self.pending:
                continue
            plan = self.plans.get(a.node)
            if plan is None:
                continue
            k = a.mix_steps
            if k != plan.n and k < plan.N:
                continue
            task = eng.tasks[a.node]
            pb = self.base[a.node][0]
            reading = sense(task.pcts[pb:], k)
            # the controller knows what it commanded: anything short of that is a fault
            expected = min(sense(task.ideal[pb:], k), plan.threshold_pct)
            passed = reading >= expected - _EPS
            if k == plan.n:
                task.checkpoint = {"n": plan.n, "N": plan.N, "reading": round(reading, 6),
                                   "expected": round(expected, 6), "passed": passed,
                                   "attempt": task.attempts}
            if not passed:
                self._detect(eng, a, k)
        for mid, ev in list(self.pending.items()):
            if not eng.agents[mid].plan:
                self._restart(eng, eng.agents[mid], ev)
        for mid, ev in list(self.open.items()):
            task = eng.tasks[mid]
            if task.status == "mixed":
                ev.recovery_steps = task.completion_step - ev.t
                del self.open[mid]
                eng.event("recovered", droplet=mid, steps=ev.recovery_steps)
        self._inject(eng)

    def _inject(self, eng):
        live = [a for a in self._mixers(eng)
                if a.node not in self.pending and a.node not in self.faults]
        hits = set()
        if self.cfg.prob > 0:
            if self.cfg.per == "mixer":
                hits = {a.node for a in self._mixers(eng) if self.rng.random() < self.cfg.prob}
            elif self.rng.random() < self.cfg.prob and live:
                hits = {self.rng.choice(live).node}
        for a in live:
            nxt = a.mix_steps + 1
            key = (a.node, nxt)
            if a.node in hits or (key in self.fixed and eng.tasks[a.node].attempts == 1):
                self.faults[a.node] = (nxt, self.fixed.get(key, False))
                a.stuck_from = nxt

    # -- rollback -----------------------------------------------------------

    def _detect(self, eng, a, k):
        task = eng.tasks[a.node]
        step, permanent = self.faults.get(a.node, (None, False))
        cell = None
        if step is not None:
            cell = task.path[self.base[a.node][1] + step - 1]
        ev = ErrorEvent(a.node, step, k, fault_cell=cell, attempt=task.attempts, t=eng.chip.t)
        ev.permanent = permanent
        self.events.append(ev)
        eng.event("error", droplet=a.node, fault_step=step, detected_at=k)
        # everyone else keeps to the fault-free schedule from here on
        sim = self.forecast(eng, restore=[a.node])
        for o in self._mixers(eng):
            if o is a or o.node in self.pending or o.id not in sim.agents:
                continue
            if o.id in self.locked and o.committed and o.plan:
                continue  # already on the schedule an earlier rollback fixed
            future = sim.agents[o.id].log[len(o.log):]
            done = sim.tasks[o.node].completion_step
            if done is not None:
                future = future[:done - eng.chip.t]
            o.plan = list(future)
            o.script = []
            o.committed = True
            self.locked.add(o.id)
        # finish the step under way, then stop for the rollback
        cut = next((i + 1 for i, e in enumerate(a.plan) if e[2]), len(a.plan))
        a.plan = [(m, None, last) for m, _s, last in a.plan[:cut]]
        a.script = []
        a.committed = False
        self.pending[a.node] = ev

    def _restart(self, eng, a, ev):
        mid = a.node
        task = eng.tasks[mid]
        if not getattr(ev, "rolled", False):
            parents = [p for p in eng.spec.mix_sources(mid) if p]
            short = [p for p in parents if eng.spares.get(p, 0) <= 0]
            if short:
                eng.errors.append(ev)
                raise RecoveryError(f"{mid}: no spare droplet left from {', '.join(short)}", mid)
            for p in parents:
                eng.spares[p] -= 1
            ev.rolled = True
            ev.spares = sorted(parents, key=natural_key)
            d = eng.chip.droplets[a.id]
            d.mix_pct = 0.0
            d.last_dir = None
            d.linear_run = 0
            d.stall_count = 0
            d.history = []
            if a.chain is not None:
                eng.release_chain(a)
            a.ideal_pct = 0.0
            a.stuck_from = None
            a.good_steps = a.shift_steps = 0
            self.faults.pop(mid, None)
            ev.strategy = self._choose(eng, a, ev)
            if ev.strategy == AVOID and ev.fault_cell is not None:
                self.masks[mid] = self.masks.get(mid, RegionMask()) | RegionMask.around(ev.fault_cell, eng.chip)
            ev.waited = 0
        mask = self.masks.get(mid, RegionMask())
        if ev.strategy == AVOID and eng.chip.droplets[a.id].pos in mask:
            # walk out of the quarantined region before mixing again
            exit_plan = self._exit(eng, a, mask)
            if exit_plan is None:
                ev.waited += 1
                if ev.waited < EXIT_PATIENCE:
                    return
                mask = RegionMask()   # boxed in for good: mix without the quarantine
            else:
                a.plan = exit_plan
                return
        del self.pending[mid]
        a.mix_steps = 0
        task.attempts += 1
        self.base[mid] = (len(task.pcts), len(task.path))
        if ev.strategy == REPEAT:
            a.script = list(self.scripts.get(mid, ()))
            a.committed = True
        else:
            a.forbidden = frozenset(mask.cells)
        self.open[mid] = ev
        eng.errors.append(ev)
        eng.event("rollback", droplet=mid, strategy=ev.strategy, attempt=task.attempts,
                  spares=ev.spares)
        self.plans.pop(mid, None)
        self._plan(eng, self.forecast(eng), [mid])

    @staticmethod
    def _exit(eng, a, mask):
        """Shortest legal walk (as a plan of plain moves) to a cell outside ``mask``."""
        chip = eng.chip
        start = chip.droplets[a.id].pos
        res = eng.reservations()
        prev = {start: None}
        frontier = [start]
        while frontier:
            nxt = []
            for c in frontier:
                for dcell in sorted(DIRECTIONS, key=lambda x: x.name):
                    n = c.step(dcell)
                    if n in prev or not chip.in_bounds(n):
                        continue
                    prev[n] = (c, dcell)
                    if n not in mask:
                        dirs = []
                        cur = n
                        while prev[cur] is not None:
                            cur, step = prev[cur]
                            dirs.append(step)
                        dirs.reverse()
                        cells = []
                        pos = start
                        for step in dirs:
                            pos = pos.step(step)
                            cells.append(pos)
                        if path_ok(chip, a.id, start, cells, res):
                            return [(step, None, i == len(dirs) - 1) for i, step in enumerate(dirs)]
                    else:
                        nxt.append(n)
            frontier = nxt
        return None

    def _choose(self, eng, a, ev):
        want = self.cfg.strategy
        if want == "avoid" or (want == "auto" and getattr(ev, "permanent", False)):
            return AVOID
        script = self.scripts.get(a.node)
        if not script:
            return AVOID
        pos = eng.chip.droplets[a.id].pos
        cells = _replay_cells(pos, script)
        mask = self.masks.get(a.node, RegionMask())
        if any(c in mask for c in cells):
            return AVOID
        if path_ok(eng.chip, a.id, pos, cells, eng.reservations()):
            return REPEAT
        return AVOID



def recovery_rate(assay="pcr", chip=(8, 9), prob=0.005, trials=1000, seed=0,
                  mode="mls", smt="off", freq_hz=16.0, per="step"):
    """Share (percent) of seeded fault-injected runs that still finish every mix.

    Returns ``(rate, stats)`` where stats counts trials, faulted runs and the
    reasons for failures.
    """
    spec = builtin(assay) if isinstance(assay, str) else assay
    ok = 0
    stats = {"trials": trials, "faulted": 0, "recovered": 0, "failures": {}}
    for i in range(trials):
        cfg = FaultConfig(prob=prob, seed=seed + i, per=per)
        opt = RunOptions(mode=mode, smt=smt, seed=seed + i, faults=cfg)
        try:
            rep = run_assay(new_chip(*chip, freq_hz=freq_hz), spec, opt)
        except SynthesisError as e:
            name = type(e).__name__
            stats["failures"][name] = stats["failures"].get(name, 0) + 1
            stats["faulted"] += 1
            continue
        if rep.errors:
            stats["faulted"] += 1
        if all(m["completion"] is not None for m in rep.mixes.values()):
            ok += 1
            stats["recovered"] += bool(rep.errors)
    return 100.0 * ok / trials if trials else 100.0, stats


__all__ = [
    "AVOID", "REPEAT", "CheckpointPlan", "ErrorEvent", "FaultConfig", "FaultMonitor",
    "RegionMask", "best_checkpoint", "recovery_cost", "recovery_rate",
    "sense", "sensed_profile",
]
