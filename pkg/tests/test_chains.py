import pytest

from mlsynth.assay import builtin
from mlsynth.chains import CHAIN_TTL, chain_step, try_form_chain, wash_stats
from mlsynth.exceptions import IntegrityError
from mlsynth.geometry import Cell, Direction
from mlsynth.grid import Droplet, new_chip
from mlsynth.router import RunOptions, run_assay
from mlsynth.shifts import ShiftKind, ShiftMove, sequence_gain

K = ShiftKind


def after_z3(w, h, start, d=Direction.RIGHT, others=()):
    chip = new_chip(w, h)
    pos = start
    for _ in range(3):
        pos = pos.step(d)
    drop = Droplet("m", pos, last_dir=d, linear_run=3)
    drop.history = [ShiftMove(K.Z3, d)]
    chip.add_droplet(drop)
    for i, c in enumerate(others):
        chip.add_droplet(Droplet(f"o{i}", c))
    return chip, drop


def test_no_room_on_a_tiny_chip():
    chip, d = after_z3(4, 2, Cell(1, 1))
    assert try_form_chain(chip, d) is None


def test_only_right_after_the_opening_z3():
    chip, d = after_z3(8, 8, Cell(1, 1))
    d.history.append(ShiftMove(K.X, Direction.UP))
    assert try_form_chain(chip, d) is None


def test_chain_cycle_stays_inside_its_ring():
    chip, d = after_z3(8, 8, Cell(1, 1))
    ch = try_form_chain(chip, d)
    assert ch is not None and len(ch.footprint) == 10
    assert ch.expiry == chip.t + CHAIN_TTL
    kinds = [K.Z3]
    pos = d.pos
    for _ in range(24):
        d.pos = pos
        move = chain_step(ch, d)
        for _ in range(move.steps):
            pos = pos.step(move.dir)
            assert pos in ch.footprint
        kinds.append(move.kind)
        ch.advance()
    assert kinds[:6] == [K.Z3, K.X, K.X, K.Z3, K.X, K.X]
    # a full chained mix: Z3-X-X cycles until 100%
    steps = 0
    for n in range(1, len(kinds) + 1):
        pct, steps = sequence_gain(kinds[:n])
        if pct >= 100:
            break
    assert steps == 33


def test_neighbours_block_the_ring():
    chip, d = after_z3(8, 3, Cell(1, 1), others=[Cell(2, 3)])
    assert try_form_chain(chip, d) is None


def test_leaving_the_footprint_is_an_integrity_error():
    chip, d = after_z3(8, 8, Cell(1, 1))
    ch = try_form_chain(chip, d)
    d.pos = Cell(8, 8)
    with pytest.raises(IntegrityError):
        chain_step(ch, d)


def _trace(rows_per_t, chains=()):
    return [{"t": t, "droplets": rows, "chains": list(chains)} for t, rows in enumerate(rows_per_t)]


def test_wash_stats_counts_visited_cells():
    path = [(1, 1), (2, 1), (3, 1), (3, 2), (2, 2), (2, 1)]
    rows = [[["m", x, y, "X" if t else "HOLD", 0.0]] for t, (x, y) in enumerate(path)]
    w, m, r = wash_stats(_trace(rows))
    assert w == 5 and m == 5 and r == pytest.approx(1.0)
    w, m, _ = wash_stats(_trace(rows, chains=["m"]))
    assert w == 0 and m == 5


def test_mmls_on_pcr_forms_chains_without_residue():
    rep = run_assay(new_chip(8, 9), builtin("pcr"), RunOptions(mode="mmls"))
    chained = [k for k, v in rep.mixes.items() if v["chained"]]
    assert rep.chains == len(chained) >= 1
    mls = run_assay(new_chip(8, 9), builtin("pcr"))
    assert rep.w_path < mls.w_path
    assert rep.stalls <= mls.stalls


@pytest.mark.parametrize("name,chip", [("pcr", (8, 9)), ("pcr", (7, 9)), ("pcr", (7, 8)),
                                       ("ivd", (8, 9)), ("in_vitro_1", (16, 16)),
                                       ("in_vitro_2", (14, 14)), ("protein_2", (13, 13))])
def test_mmls_never_stalls_more_than_mls(name, chip):
    spec = builtin(name)
    a = run_assay(new_chip(*chip), spec, RunOptions(mode="mls"))
    b = run_assay(new_chip(*chip), spec, RunOptions(mode="mmls"))
    assert b.stalls <= a.stalls
