from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from mlsynth.assay import tree_assay
from mlsynth.exceptions import DeadlockError
from mlsynth.grid import new_chip
from mlsynth.router import RunOptions, Synthesizer

from oracles import FrameRecorder, fluidic_breaches, shift_rule_breaches


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(profile=st.lists(st.integers(1, 5), min_size=2, max_size=4),
       w=st.integers(8, 13), h=st.integers(8, 13),
       mode=st.sampled_from(["mls", "mmls"]), smt=st.sampled_from(["off", "auto"]),
       seed=st.integers(0, 10**6))
def test_random_assays_never_break_the_rules(profile, w, h, mode, smt, seed):
    import random
    spec = tree_assay("fz", tuple(profile), (w, h), random.Random(seed))
    syn = Synthesizer(new_chip(w, h), spec, RunOptions(mode=mode, smt=smt, seed=seed))
    rec = FrameRecorder()
    syn.hooks.append(rec)
    try:
        syn.run()
    except DeadlockError:
        pass  # reported, not a rule breach; the frames so far must still be clean
    assert fluidic_breaches(rec.frames) == []
    runs, bad_y = shift_rule_breaches(syn.trace)
    assert runs == [] and bad_y == []
