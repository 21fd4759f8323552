import math

import pytest

from mlsynth.assay import builtin
from mlsynth.exceptions import InvalidConfigError, RecoveryError
from mlsynth.geometry import Cell, Direction
from mlsynth.grid import new_chip
from mlsynth.recovery import (AVOID, CheckpointPlan, FaultConfig, FaultMonitor, RegionMask,
                              best_checkpoint, recovery_cost, recovery_rate, sense, sensed_profile)
from mlsynth.router import RunOptions, Synthesizer, run_assay
from mlsynth.shifts import ShiftKind, ShiftMove

K = ShiftKind
R, U = Direction.RIGHT, Direction.UP


def loop(n):
    return [ShiftMove(K.Z3, R), ShiftMove(K.X, U)] * n


def test_cost_closed_form():
    assert recovery_cost(32, 16) == 1792
    assert recovery_cost(2, 1) == 7
    for N in range(1, 40):
        # brute force over the formula's own domain: minimum sits at ceil(N/2) or floor
        best = best_checkpoint(N)
        assert best in (N // 2, math.ceil(N / 2), 1)
        assert recovery_cost(N, best) == min(recovery_cost(N, n) for n in range(1, N + 1))
    for bad in (0, 33):
        with pytest.raises(InvalidConfigError):
            recovery_cost(32, bad)


def test_checkpoint_plan():
    assert CheckpointPlan.for_length(27).n == 14
    assert CheckpointPlan.for_length(28).n == 14
    with pytest.raises(InvalidConfigError):
        CheckpointPlan.for_length(0)


def test_sensed_profile():
    prof = sensed_profile(loop(4))
    assert len(prof) == 16
    assert sense(prof, 16) == pytest.approx(62.5)
    assert sense(prof, 2) == pytest.approx(10.0)   # pro rata inside the Z3
    dead = sensed_profile(loop(4), fault_step=1)
    assert all(v == 0 for v in dead)
    late = sensed_profile(loop(4), fault_step=6)
    assert sense(late, 16) == pytest.approx(15.625 + 5.0)  # one good step of the second Z3
    with pytest.raises(InvalidConfigError):
        sense(prof, 17)
    with pytest.raises(InvalidConfigError):
        sense(prof, 0)


def test_profile_caps_at_100():
    assert max(sensed_profile(loop(10))) == 100.0


@pytest.mark.parametrize("text,faults,prob", [
    ("", (), 0.0),
    ("p=0.01", (), 0.01),
    ("M1@5, M3@20!", (("M1", 5, False), ("M3", 20, True)), 0.0),
])
def test_fault_config_parse(text, faults, prob):
    cfg = FaultConfig.parse(text)
    assert cfg.faults == faults and cfg.prob == prob


@pytest.mark.parametrize("text", ["p=2", "p=x", "M1@0", "M1@a", "wat", "per=day", "strategy=pray"])
def test_fault_config_rejects(text):
    with pytest.raises(InvalidConfigError):
        FaultConfig.parse(text)


def test_region_mask():
    chip = new_chip(4, 4)
    m = RegionMask.around(Cell(1, 1), chip)
    assert len(m.cells) == 4 and Cell(2, 2) in m and Cell(3, 3) not in m
    assert len(RegionMask.around(Cell(2, 2)).cells) == 9
    assert len((m | RegionMask.around(Cell(4, 4), chip)).cells) == 8


def test_zero_probability_always_completes():
    rate, stats = recovery_rate(prob=0.0, trials=3)
    assert rate == 100.0 and stats["faulted"] == 0


def _run(spec_text, **kw):
    cfg = FaultConfig.parse(spec_text)
    syn = Synthesizer(new_chip(8, 9), builtin("pcr"), RunOptions(faults=cfg, **kw))
    mon = FaultMonitor(syn, cfg)
    syn.hooks.append(mon)
    return syn, mon, syn.run()


@pytest.mark.parametrize("step,detected", [(1, 14), (5, 14), (14, 14), (15, 28), (27, 28)])
def test_detection_at_checkpoint_or_end(step, detected):
    # fault-free M1 takes 28 steps: checkpoint at 14, end check at 28
    _syn, _mon, rep = _run(f"M1@{step}")
    (ev,) = rep.errors
    assert ev["fault_step"] == step and ev["detected_at"] == detected
    assert all(m["completion"] is not None for m in rep.mixes.values())


def test_a_fault_in_the_last_step_is_caught():
    _syn, _mon, rep = _run("M1@28")
    (ev,) = rep.errors
    assert ev["detected_at"] == 28


def test_avoid_strategy_keeps_out_of_the_region():
    syn, mon, rep = _run("M1@5,strategy=avoid")
    (ev,) = rep.errors
    assert ev["strategy"] == AVOID
    mask = mon.masks["M1"]
    assert Cell(*ev["fault_cell"]) in mask
    redo = syn.tasks["M1"].path[mon.base["M1"][1]:]
    assert redo and not any(c in mask for c in redo)
    assert rep.mixes["M1"]["checkpoint"]["attempt"] == 2


def test_events_reach_the_trace():
    _syn, _mon, rep = _run("M1@5")
    kinds = [e["event"] for r in rep.trace for e in r["events"]]
    for k in ("error", "rollback", "recovered"):
        assert k in kinds


def _tracks(rep):
    out = {}
    for r in rep.trace:
        for did, x, y, label, _p in r["droplets"]:
            out.setdefault(did, []).append((r["t"], x, y, label))
    return out


@pytest.mark.parametrize("faults", ["M1@5", "M2@20", "M1@5,M4@10", "M2@3,M3@12",
                                    "M1@2,M2@6,M3@9", "M1@3,M2@4,M3@5,M4@6"])
def test_concurrent_mixes_are_untouched(faults):
    spec = builtin("pcr")
    base = _tracks(run_assay(new_chip(8, 9), spec))
    rep = run_assay(new_chip(8, 9), spec, RunOptions(faults=FaultConfig.parse(faults)))
    hit = {e["mix"] for e in rep.errors}
    got = _tracks(rep)
    for m in ("M1", "M2", "M3", "M4"):
        if m not in hit:
            assert got[m][:34] == base[m][:34], m


class _Refault:
    """Strikes ``mix`` again a few steps into its second attempt."""

    def __init__(self, mon, mix):
        self.mon, self.mix, self.done = mon, mix, False

    def on_stage_start(self, eng, stage):
        pass

    def on_step(self, eng):
        task = eng.tasks.get(self.mix)
        if self.done or task is None or task.attempts != 2 or self.mix in self.mon.pending:
            return
        a = eng.agents[self.mix]
        self.mon.faults[self.mix] = (a.mix_steps + 1, False)
        a.stuck_from = a.mix_steps + 1
        self.done = True


def test_second_fault_on_a_spent_parent_is_a_recovery_error():
    cfg = FaultConfig.parse("M5@3")
    syn = Synthesizer(new_chip(8, 9), builtin("pcr"), RunOptions(faults=cfg))
    mon = FaultMonitor(syn, cfg)
    syn.hooks += [mon, _Refault(mon, "M5")]
    # the first rollback uses the one spare M1 and M2 each left behind
    with pytest.raises(RecoveryError) as e:
        syn.run()
    assert "M5" in str(e.value)
    assert syn.spares["M1"] == syn.spares["M2"] == 0
