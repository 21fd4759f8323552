"""Module-based synthesis time, for comparison with the module-less router.

Each mix runs inside a rectangular module from the library, surrounded by a
one-cell padding ring (clipped at the chip edge). Rings and active cells of
modules running at the same time may not overlap. Mixes of a level are packed
greedily, fastest module first; whatever does not fit waits for the next
round. A round lasts as long as its slowest module and a level as long as its
rounds.
"""

from .assay import natural_key
from .exceptions import InfeasibleConfigError
from .shifts import MODULE_LIBRARY

# fastest first; ties (none today) fall back to the name
_BY_SPEED = sorted(MODULE_LIBRARY, key=lambda k: (MODULE_LIBRARY[k].mix_seconds, k))


def _footprint(x, y, w, h, width, height):
    return {(i, j) for i in range(x - 1, x + w + 1) for j in range(y - 1, y + h + 1)
            if 1 <= i <= width and 1 <= j <= height}


def _orientations(name):
    m = MODULE_LIBRARY[name]
    return sorted({(m.cols, m.rows), (m.rows, m.cols)})


def place_module(name, width, height, used):
    """First spot (scanning x, then y) for module ``name`` clear of ``used`` cells.

    Returns ``(x, y, w, h, footprint)`` or None.
    """
    for w, h in _orientations(name):
        for y in range(1, height - h + 2):
            for x in range(1, width - w + 2):
                fp = _footprint(x, y, w, h, width, height)
                if not fp & used:
                    return x, y, w, h, fp
    return None


def _levels(spec):
    stage = spec.stage_of()
    out = {}
    for nid, s in stage.items():
        out.setdefault(s, []).append(nid)
    return [sorted(out[s], key=natural_key) for s in sorted(out)]


def schedule(spec, chip, placement=None):
    """Per-level rounds: ``[[[(mix, module), ...], ...], ...]``.

    ``placement`` optionally fixes the module of some mixes (mix id -> name);
    those are placed first, in level order, the rest greedily.
    """
    width, height = (chip.width, chip.height) if hasattr(chip, "width") else chip
    placement = dict(placement or {})
    for name in placement.values():
        if name not in MODULE_LIBRARY:
            raise InfeasibleConfigError(f"unknown module {name!r}")
    levels = []
    for mixes in _levels(spec):
        rounds = []
        todo = list(mixes)
        while todo:
            used, this, left = set(), [], []
            for nid in sorted(todo, key=lambda n: (n not in placement, natural_key(n))):
                names = [placement[nid]] if nid in placement else _BY_SPEED
                for name in names:
                    spot = place_module(name, width, height, used)
                    if spot is not None:
                        used |= spot[4]
                        this.append((nid, name))
                        break
                else:
                    left.append(nid)
            if not this:
                raise InfeasibleConfigError(
                    f"no module fits a {width}x{height} chip for {', '.join(left)}")
            rounds.append(sorted(this, key=lambda p: natural_key(p[0])))
            todo = left
        levels.append(rounds)
    return levels


def baseline_module_time(spec, chip, placement=None):
    """Seconds a module-based synthesis of ``spec`` needs on ``chip``."""
    total = 0.0
    for rounds in schedule(spec, chip, placement):
        for r in rounds:
            total += max(MODULE_LIBRARY[name].mix_seconds for _n, name in r)
    return round(total, 6)


# Module choice of the worked PCR example on an 8x9 chip.
PCR_EXAMPLE_PLACEMENT = {
    "M1": "1x4", "M2": "1x4", "M3": "2x4", "M4": "2x3",
    "M5": "2x4", "M6": "1x4", "M7": "2x4",
}
