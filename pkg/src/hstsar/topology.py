"""Sparse attention topologies: construction, rolling, path counting, export.

Layout of a topology with representatives inserted (``g`` globals, ``m``
blocks of width ``w``)::

    [G_0 .. G_{g-1}] [R_0 t t .. t] [R_1 t t .. t] ... [R_{m-1} t .. t]

Without representatives each block is just its ``w`` tokens. ``mask[i, j]``
is true when row ``i`` may attend to column ``j``.
"""

from __future__ import annotations

import functools
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError, ParseError

INT64_MAX = np.iinfo(np.int64).max


@dataclass(frozen=True)
class SparseTopology:
    n: int
    g: int
    w: int
    m: int
    mask: np.ndarray = field(repr=False)
    block_starts: tuple
    rep_positions: tuple = ()
    random_seed: int | None = None
    r: int | None = None

    def __post_init__(self):
        self.mask.setflags(write=False)

    @property
    def has_reps(self):
        return bool(self.rep_positions)

    @property
    def block_len(self):
        """Positions per block, including the representative slot."""
        return self.w + (1 if self.rep_positions else 0)

    def block_ids(self):
        """Block index per position; -1 for global tokens."""
        ids = np.full(self.n, -1, dtype=np.int64)
        for b, start in enumerate(self.block_starts):
            ids[start : start + self.block_len] = b
        return ids

    def nnz(self):
        return int(self.mask.sum())

    @functools.cached_property
    def is_block_structured(self):
        """True when the mask is exactly globals plus contiguous local blocks."""
        if self.r or self.m == 0 or self.n != self.g + self.m * self.block_len:
            return False
        if tuple(self.block_starts) != tuple(self.g + b * self.block_len for b in range(self.m)):
            return False
        ids = self.block_ids()
        glob = ids < 0
        want = glob[:, None] | glob[None, :] | (ids[:, None] == ids[None, :])
        return bool(np.array_equal(want, self.mask))

    def to_json(self):
        return json.dumps(export_topology(self), sort_keys=True)


def required_padding(n_base, g, w):
    """Tokens to append so that ``n_base - g`` is a multiple of ``w``."""
    if g < 0 or w < 1 or n_base < g:
        raise ConfigurationError(f"invalid layout n_base={n_base}, g={g}, w={w}")
    return (-(n_base - g)) % w


def build_topology(n_base, g, w, insert_reps=False, r=None, seed=None):
    """Global + block-local (+ optional random) attention mask.

    ``n_base`` counts tokens before representative insertion and includes the
    ``g`` global tokens.
    """
    pad = required_padding(n_base, g, w)
    if pad:
        raise ConfigurationError(
            f"n_base - g = {n_base - g} is not divisible by w = {w}; pad by {pad} tokens "
            f"(to n_base = {n_base + pad})"
        )
    m = (n_base - g) // w
    block_len = w + 1 if insert_reps else w
    n = g + m * block_len
    starts = tuple(g + b * block_len for b in range(m))
    reps = starts if insert_reps else ()

    block = np.full(n, -1, dtype=np.int64)
    for b, s in enumerate(starts):
        block[s : s + block_len] = b
    local = block >= 0
    mask = (block[:, None] == block[None, :]) & local[:, None] & local[None, :]
    mask[:g, :] = True
    mask[:, :g] = True

    if r:
        if seed is None:
            raise ConfigurationError("random attention needs a seed")
        rng = np.random.default_rng(seed)
        for i in range(g, n):
            mask[i, rng.choice(n, size=min(r, n), replace=False)] = True

    if n and not mask.any(axis=1).all():
        raise ContractError("topology has a row with no allowed column")
    return SparseTopology(n=n, g=g, w=w, m=m, mask=mask, block_starts=starts,
                          rep_positions=reps, random_seed=seed if r else None, r=r or None)


def full_topology(n):
    """Dense attention over ``n`` tokens, expressed as all-global."""
    return build_topology(n, g=n, w=1)


def roll_topology_input_indices(topo, k):
    """Permutation ``p`` such that ``rows[p]`` is the input cyclically shifted by ``k``.

    The mask stays fixed; moving the input underneath it is what changes the
    effective topology.
    """
    n = topo.n if isinstance(topo, SparseTopology) else int(topo)
    if not 0 <= k < max(n, 1):
        raise ContractError(f"roll amount must satisfy 0 <= k < {n}, got {k}")
    return np.roll(np.arange(n), k)


def hierarchical_transition(topo):
    """One HST layer as a 0/1 flow matrix: sparse pass, then representatives mix densely.

    Representative rows are replaced by attention over all representatives,
    other rows pass through unchanged.
    """
    s = topo.mask.astype(np.int64)
    if not topo.rep_positions:
        return s
    h = np.eye(topo.n, dtype=np.int64)
    reps = np.asarray(topo.rep_positions)
    h[np.ix_(reps, reps)] = 1
    return _matmul_saturating(h, s)[0]


def layer_transition(topo, hierarchical=False):
    return hierarchical_transition(topo) if hierarchical else topo.mask.astype(np.int64)


def _matmul_saturating(a, b):
    """Integer product clipped to int64 range; returns (product, overflowed)."""
    bound = int(a.max(initial=0)) * int(b.max(initial=0)) * a.shape[1]
    if bound <= INT64_MAX:
        return a @ b, False
    exact = a.astype(object) @ b.astype(object)
    over = bool((exact > INT64_MAX).any())
    return np.minimum(exact, INT64_MAX).astype(np.int64), over


def path_count_matrix(topo, layers, hierarchical=False):
    """Counts of src->dst paths through ``layers`` layers, indexed ``[dst, src]``.

    Returns ``(counts, overflowed)``; counts saturate at the int64 maximum.
    """
    if layers < 1:
        raise ContractError("layers must be >= 1")
    step = layer_transition(topo, hierarchical)
    acc, over = step.copy(), False
    for _ in range(layers - 1):
        acc, o = _matmul_saturating(step, acc)
        over = over or o
    return acc, over


def path_count(topo, layers, src, dst, hierarchical=False):
    counts, _ = path_count_matrix(topo, layers, hierarchical)
    return int(counts[dst, src])


def flop_estimate(topo, d, hierarchical=False):
    """Multiply-accumulates of one attention layer: nnz * d, plus m^2 * d for the dense pass."""
    count = topo.nnz() * d
    if hierarchical:
        count += topo.m * topo.m * d
    return int(count)


def structural_nnz(n_base, g, w, insert_reps=False):
    """Closed-form ``nnz`` of ``build_topology(...)`` without materialising the mask."""
    pad = required_padding(n_base, g, w)
    if pad:
        raise ConfigurationError(f"n_base - g not divisible by w; pad by {pad}")
    m = (n_base - g) // w
    bl = w + 1 if insert_reps else w
    n = g + m * bl
    return g * n + (n - g) * g + m * bl * bl


# ---------------------------------------------------------------------------
# JSON export


def _encode_runs(row):
    """Row as alternating run lengths, starting with a false run (possibly 0)."""
    runs, cur, length = [], False, 0
    for v in row:
        if bool(v) == cur:
            length += 1
        else:
            runs.append(length)
            cur, length = bool(v), 1
    runs.append(length)
    return runs


def _decode_runs(runs, n, row_index):
    out = np.zeros(n, dtype=bool)
    pos, val = 0, False
    for length in runs:
        if not isinstance(length, int) or length < 0:
            raise ParseError(f"run length must be a non-negative integer, got {length!r}",
                             f"mask_runs[{row_index}]")
        out[pos : pos + length] = val
        pos += length
        val = not val
    if pos != n:
        raise ParseError(f"runs cover {pos} columns, expected {n}", f"mask_runs[{row_index}]")
    return out


def export_topology(topo):
    """Portable document: ``{n, g, w, m, rep_positions, block_starts, mask_runs}``."""
    return {
        "format": "hstsar.topology/1",
        "n": topo.n,
        "g": topo.g,
        "w": topo.w,
        "m": topo.m,
        "rep_positions": [int(p) for p in topo.rep_positions],
        "block_starts": [int(p) for p in topo.block_starts],
        "r": topo.r,
        "random_seed": topo.random_seed,
        "mask_runs": [_encode_runs(row) for row in topo.mask],
    }


def import_topology(doc):
    """Inverse of :func:`export_topology`; accepts a dict or JSON text."""
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, f"line {exc.lineno}") from None
    if not isinstance(doc, dict):
        raise ParseError("topology export must be a JSON object", "document")
    for key in ("n", "g", "w", "m", "rep_positions", "mask_runs"):
        if key not in doc:
            raise ParseError("missing field", key)
    for key in ("n", "g", "w", "m"):
        if not isinstance(doc[key], int) or doc[key] < 0:
            raise ParseError("expected a non-negative integer", key)
    n = doc["n"]
    runs = doc["mask_runs"]
    if not isinstance(runs, list) or len(runs) != n:
        raise ParseError(f"expected {n} rows", "mask_runs")
    mask = np.stack([_decode_runs(r, n, i) for i, r in enumerate(runs)]) if n else np.zeros((0, 0), bool)
    reps = tuple(int(p) for p in doc["rep_positions"])
    if any(not 0 <= p < n for p in reps):
        raise ParseError("position out of range", "rep_positions")
    starts = doc.get("block_starts")
    if starts is None:
        bl = doc["w"] + (1 if reps else 0)
        starts = [doc["g"] + b * bl for b in range(doc["m"])]
    return SparseTopology(n=n, g=doc["g"], w=doc["w"], m=doc["m"], mask=mask,
                          block_starts=tuple(starts), rep_positions=reps,
                          random_seed=doc.get("random_seed"), r=doc.get("r"))
