import pytest

from mlsynth.exceptions import BoundsError, ConstraintViolation, InvalidConfigError
from mlsynth.geometry import Cell, Direction, chebyshev
from mlsynth.grid import Droplet, apply_moves, fluidic_ok, new_chip

from oracles import cheb


def chip_with(*cells, w=8, h=8):
    chip = new_chip(w, h)
    for i, c in enumerate(cells, 1):
        chip.add_droplet(Droplet(f"d{i}", Cell(*c)))
    return chip


@pytest.mark.parametrize("w,h,f,dt", [(8, 8, 16, 0.0625), (8, 9, 8, 0.125), (1, 1, 16, 0.0625)])
def test_step_seconds(w, h, f, dt):
    assert new_chip(w, h, f).step_seconds == pytest.approx(dt)


@pytest.mark.parametrize("args", [(0, 4), (4, 0), (-1, 3), (4, 4, 0), (4, 4, -16), (65, 4)])
def test_bad_dimensions(args):
    with pytest.raises(InvalidConfigError):
        new_chip(*args)


def test_one_cell_chip_cannot_move():
    chip = chip_with((1, 1), w=1, h=1)
    for d in Direction:
        with pytest.raises(BoundsError):
            fluidic_ok(chip, {"d1": Cell(1, 1).step(d)})
    assert fluidic_ok(chip, {"d1": Cell(1, 1)})


def test_spacing_examples():
    chip = chip_with((2, 2), (5, 2))
    assert fluidic_ok(chip, {})
    chip = chip_with((2, 2), (4, 2))
    assert not fluidic_ok(chip, {"d1": Cell(3, 2)})
    lone = chip_with((4, 4))
    assert all(fluidic_ok(lone, {"d1": Cell(4, 4).step(d)}) for d in Direction)


def test_unknown_droplet():
    with pytest.raises(LookupError):
        fluidic_ok(chip_with((2, 2)), {"zz": Cell(2, 3)})


def test_dynamic_rule_catches_trailing_neighbour():
    # after the move the two are 2 apart, but d2 lands next to where d1 just was
    chip = chip_with((3, 3), (5, 3))
    assert not fluidic_ok(chip, {"d1": Cell(2, 3), "d2": Cell(4, 3)})
    assert fluidic_ok(chip, {"d1": Cell(2, 3)})


def test_apply_moves_is_atomic():
    chip = chip_with((2, 2), (4, 2))
    before = chip.snapshot()
    with pytest.raises(ConstraintViolation):
        apply_moves(chip, {"d1": Direction.RIGHT, "d2": None})
    assert chip.snapshot() == before and chip.t == 0
    apply_moves(chip, {"d1": Direction.LEFT, "d2": Direction.RIGHT})
    assert chip.droplets["d1"].pos == Cell(1, 2) and chip.droplets["d2"].pos == Cell(5, 2)
    assert chip.t == 1


def test_fluidic_ok_agrees_with_direct_rule():
    # exhaustive on a 5x5 chip: every pair of start cells and every pair of moves
    moves = [None] + list(Direction)
    cells = [Cell(x, y) for x in range(1, 6) for y in range(1, 6)]
    checked = 0
    for a in cells:
        for b in cells:
            if chebyshev(a, b) < 2 or (a.x, a.y) > (b.x, b.y):
                continue
            chip = chip_with(a, b, w=5, h=5)
            for ma in moves:
                for mb in moves:
                    na = a if ma is None else a.step(ma)
                    nb = b if mb is None else b.step(mb)
                    if not (chip.in_bounds(na) and chip.in_bounds(nb)):
                        continue
                    want = cheb(na, nb) >= 2 and cheb(na, b) >= 2 and cheb(a, nb) >= 2
                    assert fluidic_ok(chip, {"d1": na, "d2": nb}) == want
                    checked += 1
    assert checked == 3878
