"""CNF containers and DIMACS text I/O."""

from dataclasses import dataclass, field

from ..exceptions import EncodingError


@dataclass
class CnfProblem:
    """A clause list over variables ``1..num_vars``.

    ``names`` maps a hashable key (for instance ``("S", i, x, y, t)``) to its
    variable so encoders and decoders can agree on meaning.
    """

    num_vars: int = 0
    clauses: list = field(default_factory=list)
    horizon: int = 0
    objective: str = "feasibility"
    names: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def var(self, key=None):
        """Variable for ``key``, created on first use; a fresh anonymous one if key is None."""
        if key is not None and key in self.names:
            return self.names[key]
        self.num_vars += 1
        if key is not None:
            self.names[key] = self.num_vars
        return self.num_vars

    def lookup(self, key):
        return self.names.get(key)

    def add(self, *lits):
        clause = tuple(lits)
        for lit in clause:
            if lit == 0 or abs(lit) > self.num_vars:
                raise EncodingError(f"literal {lit} outside 1..{self.num_vars}")
        self.clauses.append(clause)

    def at_most_one(self, lits):
        """Sequential-counter at-most-one; pairwise when the list is short."""
        lits = list(lits)
        n = len(lits)
        if n <= 1:
            return
        if n <= 5:
            for i in range(n):
                for j in range(i + 1, n):
                    self.add(-lits[i], -lits[j])
            return
        s = [self.var() for _ in range(n - 1)]
        self.add(-lits[0], s[0])
        for i in range(1, n - 1):
            self.add(-lits[i], s[i])
            self.add(-s[i - 1], s[i])
            self.add(-lits[i], -s[i - 1])
        self.add(-lits[-1], -s[-1])

    def exactly_one(self, lits):
        lits = list(lits)
        if not lits:
            self.clauses.append(())
            return
        self.add(*lits)
        self.at_most_one(lits)


def export_dimacs(p):
    lines = [f"p cnf {p.num_vars} {len(p.clauses)}"]
    for c in p.clauses:
        lines.append(" ".join(str(lit) for lit in c) + (" 0" if c else "0"))
    return "\n".join(lines)


def parse_dimacs(text):
    """CnfProblem from DIMACS text (comments allowed, clauses may span lines)."""
    p = CnfProblem()
    declared = None
    current = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("c") or line.startswith("%"):
            continue
        if line.startswith("p"):
            parts = line.split()
            if len(parts) != 4 or parts[1] != "cnf":
                raise EncodingError(f"bad header {line!r}")
            p.num_vars = int(parts[2])
            declared = int(parts[3])
            continue
        for tok in line.split():
            lit = int(tok)
            if lit == 0:
                p.clauses.append(tuple(current))
                current = []
            else:
                if abs(lit) > p.num_vars:
                    raise EncodingError(f"literal {lit} exceeds declared {p.num_vars} variables")
                current.append(lit)
    if current:
        p.clauses.append(tuple(current))
    if declared is not None and declared != len(p.clauses):
        raise EncodingError(f"header declares {declared} clauses, found {len(p.clauses)}")
    return p
