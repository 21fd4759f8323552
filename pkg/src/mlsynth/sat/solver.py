"""A small conflict-driven clause-learning SAT solver.

Two watched literals, first-UIP learning, activity-ordered decisions with
phase saving, Luby restarts and solving under assumptions (with the subset of
failed assumptions reported on UNSAT). Everything is deterministic: ties in
the decision order fall to the lowest variable index.
"""

import heapq
import time

from ..exceptions import SolverTimeout
from .cnf import CnfProblem

UNSAT = "UNSAT"
SAT = "SAT"


def _luby(i):
    k = 1
    while (1 << k) - 1 < i:
        k += 1
    while True:
        if (1 << k) - 1 == i:
            return 1 << (k - 1)
        i -= (1 << (k - 1)) - 1
        k = 1
        while (1 << k) - 1 < i:
            k += 1


class Result:
    def __init__(self, status, model=None, core=None, stats=None):
        self.status = status
        self.model = model or {}
        self.core = core or []
        self.stats = stats or {}

    @property
    def sat(self):
        return self.status == SAT

    def value(self, var):
        return self.model.get(var, False)

    def true_vars(self):
        return sorted(v for v, b in self.model.items() if b)


class Solver:
    def __init__(self, num_vars=0, clauses=(), conflict_limit=None, time_limit=None):
        self.n = 0
        self.clauses = []
        self.watches = [[], []]      # literal code -> clause indices
        self.assign = [None]          # var -> True/False/None
        self.level = [0]
        self.reason = [None]
        self.activity = [0.0]
        self.phase = [False]
        self.trail = []
        self.trail_lim = []
        self.qhead = 0
        self.inc = 1.0
        self.heap = []
        self.empty = False
        self.units = []
        self.conflict_limit = conflict_limit
        self.time_limit = time_limit
        self.stats = {"conflicts": 0, "decisions": 0, "propagations": 0, "learned": 0, "restarts": 0}
        self.grow(num_vars)
        for c in clauses:
            self.add_clause(c)

    # -- setup --------------------------------------------------------------

    @staticmethod
    def _code(lit):
        return 2 * lit if lit > 0 else -2 * lit + 1

    def grow(self, n):
        while self.n < n:
            self.n += 1
            self.assign.append(None)
            self.level.append(0)
            self.reason.append(None)
            self.activity.append(0.0)
            self.phase.append(False)
            self.watches.append([])
            self.watches.append([])
            heapq.heappush(self.heap, (0.0, self.n))

    def add_clause(self, lits):
        lits = sorted(set(lits), key=lambda x: (abs(x), x))
        for i in range(len(lits) - 1):
            if lits[i] == -lits[i + 1]:
                return  # tautology
        if lits:
            self.grow(max(abs(x) for x in lits))
        if not lits:
            self.empty = True
            return
        if len(lits) == 1:
            self.units.append(lits[0])
            return
        idx = len(self.clauses)
        self.clauses.append(list(lits))
        self.watches[self._code(-lits[0])].append(idx)
        self.watches[self._code(-lits[1])].append(idx)

    # -- core -----------------------------------------------------------------

    def value(self, lit):
        v = self.assign[abs(lit)]
        if v is None:
            return None
        return v if lit > 0 else not v

    def enqueue(self, lit, reason):
        var = abs(lit)
        self.assign[var] = lit > 0
        self.level[var] = len(self.trail_lim)
        self.reason[var] = reason
        self.trail.append(lit)

    def propagate(self):
        """Unit propagation; returns a conflicting clause index or None."""
        clauses, watches, assign = self.clauses, self.watches, self.assign
        while self.qhead < len(self.trail):
            lit = self.trail[self.qhead]
            self.qhead += 1
            self.stats["propagations"] += 1
            # clauses watching the literal that just became false (-lit)
            code = 2 * lit if lit > 0 else -2 * lit + 1
            ws = watches[code]
            i = j = 0
            false_lit = -lit
            while i < len(ws):
                ci = ws[i]
                i += 1
                c = clauses[ci]
                if c[0] == false_lit:
                    c[0], c[1] = c[1], c[0]
                first = c[0]
                fv = assign[abs(first)]
                if fv is not None and fv == (first > 0):
                    ws[j] = ci
                    j += 1
                    continue
                found = False
                for k in range(2, len(c)):
                    q = c[k]
                    qv = assign[abs(q)]
                    if qv is None or qv == (q > 0):
                        c[1], c[k] = q, c[1]
                        watches[2 * -q if -q > 0 else 2 * q + 1].append(ci)
                        found = True
                        break
                if found:
                    continue
                ws[j] = ci
                j += 1
                if fv is None:
                    self.enqueue(first, ci)
                else:
                    while i < len(ws):
                        ws[j] = ws[i]
                        i += 1
                        j += 1
                    del ws[j:]
                    return ci
            del ws[j:]
        return None

    def bump(self, var):
        self.activity[var] += self.inc
        if self.activity[var] > 1e100:
            for v in range(1, self.n + 1):
                self.activity[v] *= 1e-100
            self.inc *= 1e-100
            self.heap = [(-self.activity[v], v) for v in range(1, self.n + 1) if self.assign[v] is None]
            heapq.heapify(self.heap)
            return
        if self.assign[var] is None:
            heapq.heappush(self.heap, (-self.activity[var], var))

    def analyze(self, ci):
        """First-UIP learned clause and backjump level."""
        seen = set()
        learned = [None]
        counter = 0
        lit = None
        idx = len(self.trail) - 1
        cur = len(self.trail_lim)
        clause = self.clauses[ci]
        while True:
            for q in clause:
                if lit is not None and q == lit:
                    continue
                v = abs(q)
                if v in seen or self.level[v] == 0:
                    continue
                seen.add(v)
                self.bump(v)
                if self.level[v] == cur:
                    counter += 1
                else:
                    learned.append(q)
            while abs(self.trail[idx]) not in seen:
                idx -= 1
            lit = self.trail[idx]
            idx -= 1
            counter -= 1
            if counter == 0:
                break
            clause = self.clauses[self.reason[abs(lit)]]
        learned[0] = -lit
        # drop literals implied by the rest of the clause
        keep = [learned[0]]
        marks = {abs(q) for q in learned}
        for q in learned[1:]:
            r = self.reason[abs(q)]
            if r is None or any(abs(x) not in marks and self.level[abs(x)] > 0
                                for x in self.clauses[r] if abs(x) != abs(q)):
                keep.append(q)
        learned = keep
        if len(learned) == 1:
            return learned, 0
        best = max(range(1, len(learned)), key=lambda k: self.level[abs(learned[k])])
        learned[1], learned[best] = learned[best], learned[1]
        return learned, self.level[abs(learned[1])]

    def cancel_until(self, lvl):
        if len(self.trail_lim) <= lvl:
            return
        stop = self.trail_lim[lvl]
        for lit in reversed(self.trail[stop:]):
            v = abs(lit)
            self.phase[v] = self.assign[v]
            self.assign[v] = None
            self.reason[v] = None
            heapq.heappush(self.heap, (-self.activity[v], v))
        del self.trail[stop:]
        del self.trail_lim[lvl:]
        self.qhead = len(self.trail)

    def pick(self):
        while self.heap:
            _a, v = heapq.heappop(self.heap)
            if self.assign[v] is None:
                return v if self.phase[v] else -v
        return None

    def learn(self, lits):
        idx = len(self.clauses)
        self.clauses.append(lits)
        self.watches[self._code(-lits[0])].append(idx)
        self.watches[self._code(-lits[1])].append(idx)
        self.stats["learned"] += 1
        return idx

    def failed(self, lit):
        """Assumptions responsible for ``lit`` being false (analyzeFinal)."""
        out = {lit}
        seen = {abs(lit)}
        for q in reversed(self.trail):
            v = abs(q)
            if v not in seen:
                continue
            r = self.reason[v]
            if r is None:
                if self.level[v] > 0:
                    out.add(q)
            else:
                for x in self.clauses[r]:
                    if self.level[abs(x)] > 0:
                        seen.add(abs(x))
        return sorted(out, key=abs)

    def solve(self, assumptions=()):
        start = time.monotonic()
        self.cancel_until(0)
        if self.empty:
            return Result(UNSAT, stats=dict(self.stats))
        for u in self.units:
            val = self.value(u)
            if val is False:
                return Result(UNSAT, stats=dict(self.stats))
            if val is None:
                self.enqueue(u, None)
        if self.propagate() is not None:
            self.empty = True
            return Result(UNSAT, stats=dict(self.stats))
        assumptions = list(assumptions)
        for a in assumptions:
            self.grow(abs(a))
        restart_no = 1
        budget = 64 * _luby(restart_no)
        since = 0
        while True:
            ci = self.propagate()
            if ci is not None:
                self.stats["conflicts"] += 1
                since += 1
                if not self.trail_lim:
                    self.empty = True
                    return Result(UNSAT, stats=dict(self.stats))
                learned, back = self.analyze(ci)
                self.cancel_until(back)
                if len(learned) == 1:
                    self.units.append(learned[0])
                    self.cancel_until(0)
                    self.enqueue(learned[0], None)
                else:
                    self.enqueue(learned[0], self.learn(learned))
                self.inc *= 1.05
                if self.conflict_limit and self.stats["conflicts"] >= self.conflict_limit:
                    raise SolverTimeout("conflict limit reached", dict(self.stats))
                if self.time_limit and time.monotonic() - start > self.time_limit:
                    raise SolverTimeout("time limit reached", dict(self.stats))
                continue
            if since >= budget:
                self.stats["restarts"] += 1
                restart_no += 1
                budget = 64 * _luby(restart_no)
                since = 0
                self.cancel_until(0)
                continue
            lvl = len(self.trail_lim)
            if lvl < len(assumptions):
                a = assumptions[lvl]
                val = self.value(a)
                if val is True:
                    self.trail_lim.append(len(self.trail))
                    continue
                if val is False:
                    core = self.failed(a)
                    self.cancel_until(0)
                    return Result(UNSAT, core=core, stats=dict(self.stats))
                self.trail_lim.append(len(self.trail))
                self.enqueue(a, None)
                continue
            lit = self.pick()
            if lit is None:
                model = {v: bool(self.assign[v]) for v in range(1, self.n + 1)}
                self.cancel_until(0)
                return Result(SAT, model=model, stats=dict(self.stats))
            self.stats["decisions"] += 1
            self.trail_lim.append(len(self.trail))
            self.enqueue(lit, None)


def solve(p, assumptions=(), conflict_limit=None, time_limit=None):
    """Solve a CnfProblem (or a plain clause list); returns a Result."""
    if isinstance(p, CnfProblem):
        s = Solver(p.num_vars, p.clauses, conflict_limit, time_limit)
    else:
        s = Solver(0, p, conflict_limit, time_limit)
    return s.solve(assumptions)
