"""Offline analysis over topology exports and sweep results.

Flow matrices are indexed ``[dst, src]``: information moves from ``src`` to
``dst`` in one layer when row ``dst`` attends to column ``src``.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, SchemaError
from .topology import (
    SparseTopology,
    _matmul_saturating,
    import_topology,
    layer_transition,
    required_padding,
    structural_nnz,
)

SWEEP_COLUMNS = ["model", "g", "mean_acc", "std_acc"]


def load_topology(source):
    """A :class:`SparseTopology` from an object, a dict, JSON text or a file path."""
    if isinstance(source, SparseTopology):
        return source
    if isinstance(source, dict):
        return import_topology(source)
    if isinstance(source, Path) or (isinstance(source, str) and not source.lstrip().startswith("{")):
        try:
            source = Path(source).read_text()
        except OSError as e:
            raise ParseError(f"cannot read topology: {e.strerror}", str(source)) from None
    return import_topology(source)


# ---------------------------------------------------------------------------
# information flow


@dataclass
class FlowReport:
    depth: np.ndarray  # [dst, src] fewest layers (>= 1) connecting src to dst; inf if none within L
    histogram: dict  # path count at depth L -> number of (dst, src) pairs
    bottleneck_width: int
    relays: tuple  # positions that relay some cross-block shortest path
    layers: int
    hierarchical: bool
    overflowed: bool

    def cross_block_min_depth(self, topo):
        ids = topo.block_ids()
        cross = (ids[:, None] >= 0) & (ids[None, :] >= 0) & (ids[:, None] != ids[None, :])
        return float(self.depth[cross].min()) if cross.any() else float("inf")

    def to_dict(self):
        depth = [[None if np.isinf(v) else int(v) for v in row] for row in self.depth]
        return {
            "layers": self.layers,
            "hierarchical": self.hierarchical,
            "depth": depth,
            "path_count_histogram": {str(k): v for k, v in sorted(self.histogram.items())},
            "bottleneck_width": self.bottleneck_width,
            "relays": list(self.relays),
            "overflowed": self.overflowed,
        }


def _reach_powers(step, layers):
    """Boolean reachability after exactly 1..layers steps (self-loops make it cumulative)."""
    b = step > 0
    out = [b]
    bi = b.astype(np.int64)
    for _ in range(layers - 1):
        out.append((bi @ out[-1].astype(np.int64)) > 0)
    return out


def flow_report(topology, layers, hierarchical=False):
    """Reachability depths, the depth-``layers`` path-count histogram and the relay set.

    The relay set is the union, over pairs in different local blocks, of the
    nodes sitting strictly inside some shortest path; its size is the
    bottleneck width.
    """
    topo = load_topology(topology)
    if layers < 1:
        raise ParseError("layers must be >= 1", "layers")
    step = layer_transition(topo, hierarchical)
    n = topo.n
    reach = _reach_powers(step, layers)
    depth = np.full((n, n), np.inf)
    for ell in range(layers, 0, -1):
        depth[reach[ell - 1]] = ell

    counts, over = step.copy(), False
    for _ in range(layers - 1):
        counts, o = _matmul_saturating(step, counts)
        over = over or o
    vals, freq = np.unique(counts, return_counts=True)
    histogram = {int(v): int(f) for v, f in zip(vals, freq)}

    ids = topo.block_ids()
    relays = set()
    for dst in range(n):
        for src in range(n):
            if ids[dst] < 0 or ids[src] < 0 or ids[dst] == ids[src] or np.isinf(depth[dst, src]):
                continue
            d = int(depth[dst, src])
            for t in range(1, d):
                # v after t steps from src, and dst within d - t steps of v
                mid = reach[t - 1][:, src] & reach[d - t - 1][dst, :]
                relays.update(int(v) for v in np.flatnonzero(mid))
    relays = tuple(sorted(relays))
    return FlowReport(depth, histogram, len(relays), relays, layers, hierarchical, over)


# ---------------------------------------------------------------------------
# FLOP accounting

FLOP_COLUMNS = ["n_base", "padded_n_base", "g", "w", "m", "n", "d", "dense", "st", "hst",
                "hst_minus_st", "st_over_dense", "hst_over_st"]


def flop_rows(configs):
    """One row per ``{"n": n_base, "g", "w", "d"}``; sequences are padded to fit ``w``.

    ``st`` and ``hst`` count one layer on the same representative-augmented
    layout, so they differ exactly by the dense representative pass
    ``m^2 d``. ``dense`` is ``n^2 d`` for that layout's length ``n``.
    """
    rows = []
    for c in configs:
        n_base, g, w, d = int(c["n"]), int(c["g"]), int(c["w"]), int(c["d"])
        padded = n_base + required_padding(n_base, g, w)
        m = (padded - g) // w
        n = padded + m
        st = structural_nnz(padded, g, w, insert_reps=True) * d
        hst = st + m * m * d
        dense = n * n * d
        rows.append({
            "n_base": n_base, "padded_n_base": padded, "g": g, "w": w, "m": m, "n": n, "d": d,
            "dense": dense, "st": st, "hst": hst, "hst_minus_st": hst - st,
            "st_over_dense": st / dense, "hst_over_st": hst / st,
        })
    return rows


def _csv(rows, columns):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([f"{r[c]:.10g}" if isinstance(r[c], float) else r[c] for c in columns])
    return buf.getvalue()


def flop_table(configs):
    """CSV text of :func:`flop_rows`."""
    return _csv(flop_rows(configs), FLOP_COLUMNS)


# ---------------------------------------------------------------------------
# sweep aggregation


def _read_sweep_csv(source, index):
    text = source if "\n" in str(source) else Path(source).read_text()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError(f"input {index} is empty") from None
    if header != SWEEP_COLUMNS:
        raise SchemaError(f"input {index} has columns {header}, expected {SWEEP_COLUMNS}")
    rows = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(SWEEP_COLUMNS):
            raise ParseError(f"expected {len(SWEEP_COLUMNS)} fields, got {len(row)}", f"input {index} line {lineno}")
        rows.append((lineno, row))
    return rows


def sweep_plotdata(sources):
    """Merge sweep CSVs (paths or CSV text) into one plot-ready CSV.

    Rows are keyed by ``(model, g)``. A key seen once passes through
    unchanged; a key seen in several inputs gets the mean and population
    standard deviation of their ``mean_acc`` values, each input counting as
    one observation. Rows with an empty ``mean_acc`` are dropped with a
    warning. Output is sorted by model, then ``g``.
    """
    groups = {}
    for i, src in enumerate(sources):
        for lineno, (model, g, mean, std) in _read_sweep_csv(src, i):
            if mean.strip() == "":
                warnings.warn(f"input {i} line {lineno}: empty accuracy for model={model} g={g}; row omitted",
                              stacklevel=2)
                continue
            try:
                key = (model, int(g))
                groups.setdefault(key, []).append((float(mean), float(std or 0.0)))
            except ValueError:
                raise ParseError("non-numeric field", f"input {i} line {lineno}") from None
    rows = []
    for (model, g) in sorted(groups):
        vals = groups[(model, g)]
        if len(vals) == 1:
            mean, std = vals[0]
        else:
            means = np.array([v[0] for v in vals])
            mean, std = float(means.mean()), float(means.std())
        rows.append({"model": model, "g": g, "mean_acc": mean, "std_acc": std})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([r["model"], r["g"], f"{r['mean_acc']:.6f}", f"{r['std_acc']:.6f}"])
    return buf.getvalue()
