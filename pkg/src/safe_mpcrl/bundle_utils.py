"""Helpers to write experiment results: CSV tables, JSON documents and NDJSON streams.

Floats are written with ``repr`` (shortest round-trip form) and keys in a fixed order,
so exporting the same bundle twice gives byte-identical files.
"""

from dataclasses import dataclass, field
import csv
import json
import logging
import os

import numpy as np

logger = logging.getLogger(__name__)

COST_FIELDS = ["episode", "cumulative_cost", "slack_penalty", "min_h"]


def format_float(value):
    """Format a number in its shortest round-trip form (empty string for None)."""
    if value is None:
        return ""
    return repr(float(value))


def _to_builtin(value):
    """Convert numpy containers and scalars into JSON-ready Python values."""
    if isinstance(value, dict):
        return {str(k): _to_builtin(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_to_builtin(v) for v in value]
    if isinstance(value, np.ndarray):
        return [_to_builtin(v) for v in value.tolist()]
    if isinstance(value, np.generic):
        return value.item()
    return value


def dumps_json(document, indent=None):
    """Serialize a document with sorted keys."""
    return json.dumps(_to_builtin(document), sort_keys=True, indent=indent)


class NdjsonWriter:
    """Appends one JSON record per line to a file.

    Parameters
    ----------
    path : str
        The output file. Its directory is created if needed.
    truncate : bool
        Whether to empty the file first.
    """

    def __init__(self, path, truncate=False):
        self.path = str(path)
        directory = os.path.dirname(self.path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        if truncate:
            with open(self.path, "w", encoding="utf-8"):
                pass

    def write(self, record):
        """Append a record."""
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(dumps_json(record))
            fh.write("\n")


def read_ndjson(path):
    """Read every record of an NDJSON file."""
    with open(path, "r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


@dataclass
class ResultBundle:
    """Everything a training or evaluation run writes.

    Attributes
    ----------
    costs : list of dict
        One record per episode with at least the keys of ``COST_FIELDS``.
    trajectory : Trajectory or None
        The final deterministic rollout.
    theta : ThetaVector or None
        The final parameters.
    theta_trace : list of dict
        Per-episode parameter values (block name to list).
    meta : dict
        The config echo, seed, package versions, config hash and runtime.
    """

    costs: list = field(default_factory=list)
    trajectory: object = None
    theta: object = None
    theta_trace: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def trajectory_header(num_obstacles):
    """The trajectory table header."""
    header = ["t", "px", "py", "vx", "vy", "ax", "ay"]
    header += [f"h_{i + 1}" for i in range(num_obstacles)]
    header += [f"decay_{i + 1}" for i in range(num_obstacles)]
    header.append("sigma_total")
    return header


def trajectory_rows(trajectory):
    """Format a Trajectory as table rows, one per visited state.

    The final row carries no action, decays or slack.
    """
    num_obstacles = len(trajectory.h_values[0])
    rows = []
    for t, state in enumerate(trajectory.states):
        row = [str(t)] + [format_float(v) for v in state]
        if t < len(trajectory.actions):
            row += [format_float(v) for v in trajectory.actions[t]]
        else:
            row += ["", ""]
        row += [format_float(v) for v in trajectory.h_values[t]]
        if t < len(trajectory.decays):
            row += [format_float(v) for v in trajectory.decays[t]]
            row.append(format_float(trajectory.slack_totals[t]))
        else:
            row += [""] * num_obstacles + [""]
        rows.append(row)
    return rows


def _write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def export_bundle(bundle, out_dir):
    """Write a ResultBundle into a directory.

    Files: ``costs.csv``, ``meta.json``, and when present ``trajectory.csv``,
    ``theta.json`` and ``theta_trace.jsonl``.

    Parameters
    ----------
    bundle : ResultBundle
        The results.
    out_dir : str
        The output directory (created if needed).

    Returns
    -------
    list of str
        The written file paths.
    """
    os.makedirs(out_dir, exist_ok=True)
    written = []

    costs_path = os.path.join(out_dir, "costs.csv")
    cost_rows = [
        [str(int(rec["episode"]))] + [format_float(rec[key]) for key in COST_FIELDS[1:]]
        for rec in bundle.costs
    ]
    _write_csv(costs_path, COST_FIELDS, cost_rows)
    written.append(costs_path)

    if bundle.trajectory is not None:
        traj_path = os.path.join(out_dir, "trajectory.csv")
        num_obstacles = len(bundle.trajectory.h_values[0])
        _write_csv(traj_path, trajectory_header(num_obstacles), trajectory_rows(bundle.trajectory))
        written.append(traj_path)

    if bundle.theta is not None:
        theta_path = os.path.join(out_dir, "theta.json")
        with open(theta_path, "w", encoding="utf-8") as fh:
            fh.write(bundle.theta.to_json())
            fh.write("\n")
        written.append(theta_path)

    if len(bundle.theta_trace) > 0:
        trace_path = os.path.join(out_dir, "theta_trace.jsonl")
        writer = NdjsonWriter(trace_path, truncate=True)
        for record in bundle.theta_trace:
            writer.write(record)
        written.append(trace_path)

    meta_path = os.path.join(out_dir, "meta.json")
    with open(meta_path, "w", encoding="utf-8") as fh:
        fh.write(dumps_json(bundle.meta, indent=2))
        fh.write("\n")
    written.append(meta_path)

    logger.info(f"Wrote {len(written)} result files to {out_dir}.")
    return written


def read_costs(path):
    """Read a costs table back into records."""
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            {"episode": int(row["episode"]), **{k: float(row[k]) for k in COST_FIELDS[1:]}}
            for row in reader
        ]
