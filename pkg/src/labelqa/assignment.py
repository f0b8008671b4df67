"""Dense linear assignment and similarity-optimal sample pairing.

The solver is a Jonker-Volgenant shortest-augmenting-path implementation.
A compiled kernel (``labelqa._lap_ext``) is used when it was built; otherwise
the pure-Python implementation in ``labelqa._lap_py`` takes over. Both are
exact and produce the same assignments.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import _lap_py

try:
    from . import _lap_ext
except ImportError:  # extension not compiled
    _lap_ext = None

log = logging.getLogger(__name__)

#: Diagonal value of the pairing cost matrix. Any -cosine lies in [-1, 1].
SENTINEL = 1e6

BACKENDS = ("compiled", "python")
DEFAULT_BACKEND = "compiled" if _lap_ext is not None else "python"


def available_backends() -> tuple[str, ...]:
    return BACKENDS if _lap_ext is not None else ("python",)


def solve_lap(cost, backend: str | None = None) -> tuple[np.ndarray, float]:
    """Minimum-cost assignment of a square cost matrix.

    Args:
        cost: N x N array of finite reals.
        backend: ``"compiled"``, ``"python"`` or None for the import-time default.

    Returns:
        ``(rowsol, total)`` where ``rowsol[i]`` is the column given to row ``i``
        and ``total`` is the summed cost of the assignment.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {c.shape}")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix must be finite; use a large constant instead of inf")
    backend = backend or DEFAULT_BACKEND
    if backend == "compiled":
        if _lap_ext is None:
            raise RuntimeError("compiled LAP backend is not available in this build")
        rowsol = np.asarray(_lap_ext.lapjv(np.ascontiguousarray(c)), dtype=np.int64)
    elif backend == "python":
        rowsol = np.asarray(_lap_py.lapjv(c.tolist()), dtype=np.int64)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    n = c.shape[0]
    total = float(c[np.arange(n), rowsol].sum()) if n else 0.0
    return rowsol, total


@dataclass
class PairingResult:
    similarity: np.ndarray
    cost: np.ndarray
    pairs: list[tuple[int, int]]
    dropped: int | None = None
    assignment: np.ndarray = field(default=None, repr=False)

    def total_similarity(self) -> float:
        return float(sum(self.similarity[i, j] for i, j in self.pairs))


def cosine_similarity(embeddings) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2:
        raise ValueError("embeddings must be an (N, d) array")
    norms = np.linalg.norm(e, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero vector among embeddings")
    u = e / norms[:, None]
    h = u @ u.T
    # symmetric with exact unit diagonal
    h = 0.5 * (h + h.T)
    np.fill_diagonal(h, 1.0)
    return h


def _cycles(perm) -> list[list[int]]:
    seen = np.zeros(len(perm), dtype=bool)
    out = []
    for s in range(len(perm)):
        if seen[s]:
            continue
        cyc = []
        i = s
        while not seen[i]:
            seen[i] = True
            cyc.append(i)
            i = int(perm[i])
        out.append(cyc)
    return out


def _greedy_complete(sim, paired, pairs):
    rest = np.flatnonzero(~paired)
    if rest.size < 2:
        return
    iu, ju = np.triu_indices(rest.size, k=1)
    cand_i, cand_j = rest[iu], rest[ju]
    # similarity descending, then index pair, for a platform-stable order
    order = np.lexsort((cand_j, cand_i, -sim[cand_i, cand_j]))
    for a, b in zip(cand_i[order], cand_j[order]):
        if not paired[a] and not paired[b]:
            pairs.append((int(a), int(b)))
            paired[a] = paired[b] = True


def _exact_matching(sim) -> list[tuple[int, int]]:
    import networkx as nx

    n = sim.shape[0]
    iu, ju = np.triu_indices(n, k=1)
    g = nx.Graph()
    g.add_nodes_from(range(n))
    # shift keeps weights positive; constant per edge, so optimum is unchanged
    g.add_weighted_edges_from(
        (int(a), int(b), float(sim[a, b]) + 2.0) for a, b in zip(iu, ju))
    m = nx.max_weight_matching(g, maxcardinality=True)
    return sorted((min(a, b), max(a, b)) for a, b in m)


def _pair_total(sim, pairs) -> float:
    return float(sum(sim[i, j] for i, j in sorted(pairs)))


def build_pairs(embeddings, parity_policy: str = "drop_last_unmatched",
                exact: bool = True, backend: str | None = None) -> PairingResult:
    """Pair batch samples so that total pair similarity is maximal.

    The diagonal of ``-H`` is replaced by :data:`SENTINEL` and the LAP is
    solved, giving a minimum-cost fixed-point-free permutation. Its cycles are
    turned into pairs: mutual assignments (2-cycles) directly, longer even
    cycles by taking the better of their two alternating edge sets. If no odd
    cycle remains, the result is a maximum-similarity perfect matching.

    Indices on odd cycles are matched greedily by descending similarity. With
    ``exact=True`` an exact general-graph matching is additionally computed in
    that case and replaces the greedy answer when strictly better. For odd N
    one index stays unpaired and is reported in ``dropped``.
    """
    if parity_policy != "drop_last_unmatched":
        raise ValueError(f"unsupported parity policy {parity_policy!r}")
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2:
        raise ValueError("embeddings must be an (N, d) array")
    n = e.shape[0]
    if n < 2:
        raise ValueError("need at least two samples to build pairs")
    sim = cosine_similarity(e)
    cost = -sim
    np.fill_diagonal(cost, SENTINEL)
    rowsol, _ = solve_lap(cost, backend=backend)

    paired = np.zeros(n, dtype=bool)
    pairs: list[tuple[int, int]] = []
    has_odd = False
    for cyc in _cycles(rowsol):
        L = len(cyc)
        if L % 2:
            has_odd = True
            continue
        even = [(cyc[k], cyc[k + 1]) for k in range(0, L, 2)]
        odd = [(cyc[k], cyc[(k + 1) % L]) for k in range(1, L, 2)]
        chosen = odd if _pair_total(sim, odd) > _pair_total(sim, even) else even
        for a, b in chosen:
            pairs.append((min(a, b), max(a, b)))
            paired[a] = paired[b] = True
    _greedy_complete(sim, paired, pairs)
    pairs.sort()

    if exact and has_odd:
        alt = _exact_matching(sim)
        if _pair_total(sim, alt) > _pair_total(sim, pairs):
            pairs = alt
            paired[:] = False
            for a, b in pairs:
                paired[a] = paired[b] = True

    leftover = np.flatnonzero(~paired)
    dropped = int(leftover[0]) if leftover.size else None
    return PairingResult(similarity=sim, cost=cost, pairs=pairs, dropped=dropped,
                         assignment=rowsol)
