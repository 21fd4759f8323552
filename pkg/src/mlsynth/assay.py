"""Bioassay sequence graphs: parsing, built-in benchmarks and random hard tests.

An assay file is JSON::

    {"name": "pcr", "chip": [8, 9],
     "nodes": [{"id": "D1", "op": "dispense", "inputs": []},
               {"id": "M1", "op": "mix", "inputs": ["D1", "D2"]}, ...]}

``chip`` and per-node ``level`` are optional; levels are derived when absent.
"""

import json
import random
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

from .exceptions import InfeasibleConfigError, SchemaError

OPS = ("dispense", "mix", "split", "merge", "detect")
ARITY = {"dispense": 0, "mix": 2, "merge": 2, "split": 1, "detect": 1}
PRODUCTS_PER_MIX = 2
BUILTINS = ("pcr", "ivd", "in_vitro_1", "in_vitro_2", "protein_1", "protein_2")


def natural_key(s):
    return [int(p) if p.isdigit() else p for p in re.split(r"(\d+)", s)]


@dataclass(frozen=True)
class AssayNode:
    id: str
    op: str
    inputs: tuple = ()
    level: int = 0


@dataclass(frozen=True)
class AssaySpec:
    name: str
    nodes: tuple
    chip_hint: Optional[tuple] = None
    stage_profile: tuple = field(default=())

    def node(self, node_id):
        return self._index()[node_id]

    def _index(self):
        return {n.id: n for n in self.nodes}

    @property
    def mixes(self):
        return [n for n in self.nodes if n.op in ("mix", "merge")]

    def stage_of(self):
        """Mixing stage (1-based) of each mix/merge node; splits are transparent."""
        idx = self._index()
        stage = {}

        def source_stage(nid):
            n = idx[nid]
            if n.op == "dispense":
                # a dispense declared at level k is issued once stage k is done
                return n.level
            if n.op == "split":
                return source_stage(n.inputs[0])
            if n.op in ("mix", "merge"):
                return stage_for(nid)
            raise SchemaError(f"{n.op} node cannot feed a mix", nid)

        def stage_for(nid):
            if nid not in stage:
                stage[nid] = 1 + max(source_stage(i) for i in idx[nid].inputs)
            return stage[nid]

        for n in self.nodes:
            if n.op in ("mix", "merge"):
                stage_for(n.id)
        return stage

    def mix_sources(self, node_id):
        """For a mix node, the (mix parent or None) behind each of its inputs."""
        idx = self._index()
        out = []
        for i in idx[node_id].inputs:
            n = idx[i]
            while n.op == "split":
                n = idx[n.inputs[0]]
            out.append(n.id if n.op in ("mix", "merge") else None)
        return out

    def consumers(self):
        """Mix/merge id -> ids of the nodes that take one of its products."""
        idx = self._index()
        out = {n.id: [] for n in self.mixes}
        for n in self.nodes:
            if n.op == "split":
                continue
            for i in n.inputs:
                src = idx[i]
                while src.op == "split":
                    src = idx[src.inputs[0]]
                if src.op in ("mix", "merge"):
                    out[src.id].append(n.id)
        return out

    @property
    def max_parallel(self):
        return max(self.stage_profile, default=0)

    def to_dict(self):
        d = {"name": self.name}
        if self.chip_hint is not None:
            d["chip"] = list(self.chip_hint)
        d["nodes"] = [
            {"id": n.id, "op": n.op, "inputs": list(n.inputs), "level": n.level}
            for n in self.nodes
        ]
        return d


def serialize(spec, indent=1):
    return json.dumps(spec.to_dict(), indent=indent)


def _levels(raw):
    idx = {n["id"]: n for n in raw}
    level = {}
    state = {}

    def visit(nid, via):
        if nid not in idx:
            raise SchemaError(f"{via} references unknown node {nid}", via)
        if state.get(nid) == 1:
            raise SchemaError(f"cycle through {nid}", nid)
        if state.get(nid) == 2:
            return level[nid]
        state[nid] = 1
        ins = idx[nid]["inputs"]
        lv = 0 if not ins else 1 + max(visit(i, nid) for i in ins)
        if idx[nid]["level"] is not None:
            lv = max(lv, int(idx[nid]["level"]))
        state[nid] = 2
        level[nid] = lv
        return lv

    for n in raw:
        visit(n["id"], n["id"])
    return level


def build_spec(name, raw_nodes, chip_hint=None):
    seen = set()
    raw = []
    for n in raw_nodes:
        nid = n.get("id")
        if not isinstance(nid, str) or not nid:
            raise SchemaError("node without a string id")
        if nid in seen:
            raise SchemaError(f"duplicate node id {nid}", nid)
        seen.add(nid)
        op = n.get("op")
        if op not in OPS:
            raise SchemaError(f"unknown op {op!r}", nid)
        ins = list(n.get("inputs", []))
        if len(ins) != ARITY[op]:
            raise SchemaError(f"{op} node needs {ARITY[op]} inputs, got {len(ins)}", nid)
        raw.append({"id": nid, "op": op, "inputs": ins, "level": n.get("level")})
    derived = _levels(raw)
    nodes = []
    for n in raw:
        lv = derived[n["id"]]
        if n["level"] is not None:
            given = int(n["level"])
            parents = [derived[i] for i in n["inputs"]]
            if given < 0:
                raise SchemaError(f"negative level {given}", n["id"])
            if parents and given <= max(parents):
                raise SchemaError(f"level {given} not above its inputs", n["id"])
            lv = given
        nodes.append(AssayNode(n["id"], n["op"], tuple(n["inputs"]), lv))
    spec = AssaySpec(name, tuple(nodes), tuple(chip_hint) if chip_hint else None)
    idx = spec._index()
    for n in nodes:
        for i in n.inputs:
            if idx[i].op == "detect":
                raise SchemaError(f"{n.id} consumes detect node {i}", n.id)
            if n.op == "split" and idx[i].op not in ("mix", "merge", "split"):
                raise SchemaError(f"split {n.id} needs a mixed input", n.id)
    for mid, users in spec.consumers().items():
        if len(users) > PRODUCTS_PER_MIX:
            raise SchemaError(
                f"{mid} feeds {len(users)} consumers, at most {PRODUCTS_PER_MIX}", mid
            )
    stages = spec.stage_of()
    profile = [0] * max(stages.values(), default=0)
    for n in nodes:
        if n.op == "mix":
            profile[stages[n.id] - 1] += 1
    return AssaySpec(name, tuple(nodes), spec.chip_hint, tuple(profile))


def parse_assay(text):
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError(f"not valid JSON: {e}") from e
    if not isinstance(data, dict) or "nodes" not in data:
        raise SchemaError("top level must be an object with 'nodes'")
    chip = data.get("chip")
    if chip is not None and (len(chip) != 2 or min(chip) < 1):
        raise SchemaError(f"bad chip hint {chip}")
    return build_spec(str(data.get("name", "assay")), data["nodes"], chip)


def load_assay(name_or_path):
    """A built-in benchmark, ``hard<k>`` for a hard test bench, or a JSON file path."""
    if name_or_path in BUILTINS:
        return builtin(name_or_path)
    m = re.fullmatch(r"hard_?(\d+)", name_or_path)
    if m:
        return hard_test(int(m.group(1)))
    with open(name_or_path, encoding="utf-8") as fh:
        return parse_assay(fh.read())


def builtin(name):
    if name not in BUILTINS:
        raise LookupError(f"unknown benchmark {name!r}; choose from {', '.join(BUILTINS)}")
    text = resources.files("mlsynth.data").joinpath(f"{name}.json").read_text("utf-8")
    return parse_assay(text)


class _Builder:
    def __init__(self):
        self.nodes = []
        self.counts = {}

    def add(self, prefix, op, inputs=()):
        self.counts[prefix] = self.counts.get(prefix, 0) + 1
        nid = f"{prefix}{self.counts[prefix]}"
        self.nodes.append({"id": nid, "op": op, "inputs": list(inputs)})
        return nid

    def fresh(self, level=None):
        nid = self.add("D", "dispense")
        if level:
            self.nodes[-1]["level"] = level
        return nid


def tree_assay(name, profile, chip=None, rng=None):
    """Assay whose mixing stages follow ``profile``.

    Growing stages hand each parent product to a child mix diluted with a fresh
    buffer (two children per parent at most; any surplus children start from
    two fresh droplets). Shrinking stages merge pairs of parents. Final outputs
    and unused parents end in detection.
    """
    if not profile or min(profile) < 1:
        raise InfeasibleConfigError(f"bad stage profile {profile}")
    b = _Builder()
    prev = []
    for stage, width in enumerate(profile):
        parents = list(prev)
        if rng is not None:
            rng.shuffle(parents)
        cur = []
        if len(parents) <= width:
            slots = [p for p in parents] + [p for p in parents]
            for k in range(width):
                if k < len(slots):
                    cur.append(b.add("M", "mix", [slots[k], b.fresh(stage)]))
                else:
                    cur.append(b.add("M", "mix", [b.fresh(stage), b.fresh(stage)]))
        else:
            pairs = min(len(parents) - width, width)
            it = iter(parents)
            for k in range(width):
                if k < pairs:
                    cur.append(b.add("M", "mix", [next(it), next(it)]))
                else:
                    cur.append(b.add("M", "mix", [next(it), b.fresh(stage)]))
            for left in it:
                b.add("T", "detect", [left])
        prev = cur
    for m in prev:
        b.add("T", "detect", [m])
    return build_spec(name, b.nodes, chip)


def pcr_assay():
    b = _Builder()
    first = [b.add("M", "mix", [b.fresh(), b.fresh()]) for _ in range(4)]
    m5 = b.add("M", "mix", first[:2])
    m6 = b.add("M", "mix", first[2:])
    m7 = b.add("M", "mix", [m5, m6])
    b.add("T", "detect", [m7])
    return build_spec("pcr", b.nodes, (8, 9))


def ivd_assay(name="ivd", chip=(8, 9), samples=4, reagents=4, batched=True):
    """Multiplexed in-vitro diagnostics: every sample mixed with every reagent, then detected.

    With ``batched`` one sample is dispensed per stage (its reagent mixes run in
    parallel); otherwise all mixes form a single stage.
    """
    b = _Builder()
    for s in range(samples):
        lv = s if batched else 0
        for _ in range(reagents):
            m = b.add("M", "mix", [b.fresh(lv), b.fresh(lv)])
            b.add("T", "detect", [m])
    return build_spec(name, b.nodes, chip)


def generate_builtins():
    """Spec objects for every built-in benchmark (the JSON data files mirror these)."""
    return {
        "pcr": pcr_assay(),
        "ivd": ivd_assay(),
        "in_vitro_1": ivd_assay("in_vitro_1", (16, 16), samples=3, reagents=2, batched=False),
        "in_vitro_2": tree_assay("in_vitro_2", (4, 3, 2), (14, 14)),
        "protein_1": tree_assay("protein_1", (1, 2, 4, 8, 8, 8, 8), (21, 21)),
        "protein_2": tree_assay("protein_2", (1, 2, 8, 11, 5, 4), (13, 13)),
    }


def gen_hard_test(seed, max_parallel, chip, stages=3):
    """Seeded random assay with ``stages`` mixing stages, one of width ``max_parallel``."""
    from .placement import seed_cells

    if max_parallel < 1 or stages < 1:
        raise InfeasibleConfigError("max_parallel and stages must be positive")
    w, h = chip
    seed_cells(w, h, max_parallel)  # raises when the chip cannot host the widest stage
    rng = random.Random(seed)
    peak = rng.randrange(stages)
    lo = max(2, max_parallel // 2)
    profile = [max_parallel if k == peak else rng.randint(lo, max_parallel) for k in range(stages)]
    return tree_assay(f"hard_{seed}_{max_parallel}_{w}x{h}", tuple(profile), (w, h), rng)


# (seed, widest stage, chip) of the regenerated hard test benches
HARD_TESTS = (
    (1, 14, (24, 24)),
    (2, 14, (16, 16)),
    (3, 12, (13, 13)),
    (4, 12, (12, 12)),
    (5, 10, (12, 12)),
    (6, 9, (12, 12)),
)


def hard_test(k):
    """The ``k``-th (1-based) regenerated hard test bench."""
    if not 1 <= k <= len(HARD_TESTS):
        raise LookupError(f"hard tests are numbered 1..{len(HARD_TESTS)}")
    return gen_hard_test(*HARD_TESTS[k - 1])
