"""Plain-text comparison tables over synthesis reports."""

from .assay import builtin, natural_key
from .baseline import baseline_module_time
from .exceptions import SynthesisError

COLUMNS = ("baseline", "MLS", "MMLS", "MLS+SAT", "MMLS+SAT")


def column_of(report):
    mode = report["mode"].upper()
    return mode if report["smt"] == "off" else f"{mode}+SAT"


def _as_dict(r):
    return r.to_dict() if hasattr(r, "to_dict") else dict(r)


def _baseline(name, chip):
    try:
        return baseline_module_time(builtin(name), tuple(chip))
    except (LookupError, SynthesisError):
        return None


def table_rows(reports, baselines=None):
    """``[(assay, "WxH", {column: seconds})]`` in first-seen order of (assay, chip)."""
    rows = {}
    for r in map(_as_dict, reports):
        key = (r["assay"], tuple(r["chip"]))
        cells = rows.setdefault(key, {})
        cells[column_of(r)] = r["total_seconds"]
    out = []
    for (name, chip), cells in rows.items():
        if baselines is not None and (name, chip) in baselines:
            cells["baseline"] = baselines[(name, chip)]
        elif "baseline" not in cells:
            cells["baseline"] = _baseline(name, chip)
        out.append((name, f"{chip[0]}x{chip[1]}", cells))
    return out


def report_tables(reports, baselines=None):
    """Seconds per assay and chip: module baseline, then each synthesis flavour."""
    rows = table_rows(reports, baselines)
    head = ["assay", "chip"] + list(COLUMNS)
    body = []
    for name, chip, cells in rows:
        body.append([name, chip] + [
            "-" if cells.get(c) is None else f"{cells[c]:.3f}" for c in COLUMNS])
    widths = [max(len(row[i]) for row in [head] + body) for i in range(len(head))]
    lines = ["  ".join(v.ljust(w) if i < 2 else v.rjust(w) for i, (v, w) in enumerate(zip(row, widths)))
             for row in [head] + body]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def sort_reports(reports):
    return sorted(reports, key=lambda r: (natural_key(_as_dict(r)["assay"]), tuple(_as_dict(r)["chip"])))
