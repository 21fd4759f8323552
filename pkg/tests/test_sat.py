import random

import pytest

from mlsynth.exceptions import EncodingError
from mlsynth.geometry import Cell, Direction
from mlsynth.grid import Droplet, new_chip
from mlsynth.sat.cnf import CnfProblem, export_dimacs, parse_dimacs
from mlsynth.sat.planner import decode, decode_and_splice, encode, plan_paths
from mlsynth.sat.solver import solve
from mlsynth.router import label_moves
from mlsynth.shifts import ShiftKind

from oracles import all_joint_trajectories, joint_feasible, mixer_paths

pysat_solvers = pytest.importorskip("pysat.solvers")


def problem(clauses, n=None):
    p = CnfProblem()
    p.num_vars = n if n is not None else max((abs(l) for c in clauses for l in c), default=0)
    for c in clauses:
        p.add(*c)
    return p


def test_trivial_verdicts():
    r = solve(CnfProblem())
    assert r.sat and r.true_vars() == []
    assert not solve(problem([(1,), (-1,)])).sat
    assert export_dimacs(CnfProblem()) == "p cnf 0 0"
    assert export_dimacs(problem([(1,)])) == "p cnf 1 1\n1 0"


def test_empty_clause_is_unsat():
    p = CnfProblem()
    p.clauses.append(())
    assert not solve(p).sat


def test_dimacs_round_trip_and_stability():
    rng = random.Random(3)
    clauses = [tuple(rng.choice((-1, 1)) * rng.randint(1, 20) for _ in range(3)) for _ in range(60)]
    p = problem(clauses, 20)
    text = export_dimacs(p)
    assert text == export_dimacs(parse_dimacs(text))
    assert parse_dimacs("c hi\np cnf 3 2\n1 -2\n 0 3 0\n").clauses == [(1, -2), (3,)]
    with pytest.raises(EncodingError):
        parse_dimacs("p cnf 1 1\n2 0\n")


def _pysat_verdict(p):
    with pysat_solvers.Minisat22(bootstrap_with=[list(c) for c in p.clauses]) as s:
        return s.solve()


@pytest.mark.parametrize("seed", range(40))
def test_random_3sat_agrees_with_reference_solver(seed):
    rng = random.Random(seed)
    n = rng.randint(8, 40)
    m = int(n * rng.uniform(3.6, 5.0))
    clauses = []
    for _ in range(m):
        vs = rng.sample(range(1, n + 1), 3)
        clauses.append(tuple(v if rng.random() < 0.5 else -v for v in vs))
    p = problem(clauses, n)
    ours = solve(p)
    assert ours.sat == _pysat_verdict(p)
    if ours.sat:
        assert all(any(ours.value(abs(l)) == (l > 0) for l in c) for c in clauses)


def _drops(*cells, mixers=()):
    out = []
    for i, c in enumerate(cells):
        d = Droplet(f"d{i}", Cell(*c))
        out.append(d)
    return out


def test_corridor_swap_is_unsat_everywhere():
    chip = new_chip(5, 1)
    ds = _drops((1, 1), (5, 1))
    goals = {"d0": Cell(5, 1), "d1": Cell(1, 1)}
    for H in range(4, 9):
        p = encode(chip, ds, goals, H)
        assert not solve(p).sat
        assert not _pysat_verdict(p)
        assert not joint_feasible(5, 1, [(1, 1), (5, 1)], [(5, 1), (1, 1)], H)


def _model_paths(p, ds):
    """Every satisfying assignment projected onto the position variables (via pysat)."""
    svars = {v: k for k, v in p.names.items() if k[0] == "S"}
    seen = set()
    with pysat_solvers.Minisat22(bootstrap_with=[list(c) for c in p.clauses]) as s:
        while s.solve():
            model = [l for l in s.get_model() if abs(l) in svars]
            true = [l for l in model if l > 0]
            pos = {}
            for l in true:
                _s, i, x, y, t = svars[l]
                pos[(i, t)] = (x, y)
            traj = tuple(tuple(pos[(d.id, t)] for d in ds) for t in range(p.horizon + 1))
            seen.add(traj)
            s.add_clause([-l for l in true])
    return seen


@pytest.mark.parametrize("w,h,starts,goals,H", [
    (3, 3, [(1, 1), (3, 3)], [(3, 3), (1, 1)], 4),
    (4, 3, [(1, 1), (4, 3)], [(4, 1), (1, 3)], 3),
    (3, 4, [(1, 1), (3, 4)], [(3, 1), None], 3),
    (5, 5, [(1, 3), (5, 3)], [(5, 3), (1, 3)], 6),
])
def test_solution_set_equals_enumeration(w, h, starts, goals, H):
    chip = new_chip(w, h)
    ds = _drops(*starts)
    g = {d.id: (None if goal is None else Cell(*goal)) for d, goal in zip(ds, goals)}
    p = encode(chip, ds, g, H)
    got = _model_paths(p, ds)
    want = set(all_joint_trajectories(w, h, starts, goals, H))
    assert got == want
    r = solve(p)
    assert r.sat == bool(want)
    if r.sat:
        paths = decode(p, r, ds)
        joint = tuple(tuple(tuple(paths[d.id][t]) for d in ds) for t in range(H + 1))
        assert joint in want


@pytest.mark.parametrize("start,last,goal,H", [
    ((2, 2), None, (4, 4), 4),
    ((1, 1), "RIGHT", None, 5),
    ((3, 3), "UP", (3, 5), 5),
    ((2, 3), "LEFT", (4, 3), 6),
])
def test_mixer_rules_match_enumeration(start, last, goal, H):
    chip = new_chip(5, 5)
    d = Droplet("m", Cell(*start))
    if last:
        d.last_dir = Direction[last]
    goals = {"m": None if goal is None else Cell(*goal)}
    p = encode(chip, [d], goals, H, automaton={"m"})
    got = {tuple(t[0] for t in traj) for traj in _model_paths(p, [d])}
    want = set(mixer_paths(5, 5, start, last, H, goal))
    assert got == want


def test_plan_paths_finds_a_detour_and_labels_shifts():
    chip = new_chip(5, 5)
    a, b = _drops((1, 1), (5, 5))
    goals = {"d0": Cell(5, 1), "d1": Cell(1, 5)}
    got = plan_paths(chip, [a, b], goals, automaton={"d0"})
    assert got is not None
    p, r = got
    plans = decode_and_splice(p, r, [a, b], mixers={"d0"})
    moves = [s for _m, s, last in plans["d0"] if last and s is not None]
    assert sum(s.steps for s in moves) <= p.horizon
    pos = a.pos
    for s in moves:
        if s.dir is not None:
            for _ in range(s.steps):
                pos = pos.step(s.dir)
    assert pos == Cell(5, 1)


def test_mixer_cannot_run_four_straight():
    chip = new_chip(6, 3)
    d = Droplet("m", Cell(1, 2))
    assert not solve(encode(chip, [d], {"m": Cell(5, 2)}, 4, automaton={"m"})).sat
    # without the automaton the plain move is fine, but it cannot be labelled
    p = encode(chip, [d], {"m": Cell(5, 2)}, 4)
    r = solve(p)
    assert r.sat
    with pytest.raises(ValueError):
        label_moves(d, [Direction.RIGHT] * 4)
    # with room for a turn the mixer gets there
    p = encode(chip, [d], {"m": Cell(5, 3)}, 5, automaton={"m"})
    r = solve(p)
    assert r.sat
    kinds = [s.kind for _m, s, last in decode_and_splice(p, r, [d], mixers={"m"})["m"] if last]
    assert ShiftKind.X in kinds or ShiftKind.Y in kinds or ShiftKind.STALL in kinds


def test_all_stay_plan_is_empty():
    chip = new_chip(6, 3)
    d = Droplet("m", Cell(1, 2))
    p = encode(chip, [d], {"m": Cell(1, 2)}, 3, automaton={"m"})
    plan = decode_and_splice(p, solve(p), [d], mixers={"m"})["m"]
    assert all(s is None or s.kind is ShiftKind.STALL for _m, s, _l in plan)
