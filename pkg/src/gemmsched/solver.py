"""Constrained mapping search for a fixed tuning point.

The feasible set is the MIP-style assignment of loop-bound prime factors to
(level, spatial|temporal) slots under the PE-array bound, per-operand
capacity with shares/double-buffering, and dataflow constraints.  The search
is exact: candidates are enumerated as per-level factor products (the cost
of a mapping depends only on those products and the temporal loop orders, so
each product class stands for all equivalent prime assignments), propagating
constraints while the per-dimension chains are built, and the proxy traffic
objective is evaluated over the surviving cross product for every relevant
permutation choice.

The proxy objective is total data movement in bytes across memory-level
boundaries; reuse follows the single-resident-tile model (a tile is
re-fetched whenever an outer temporal loop that indexes the operand
advances).  Final latency ranking is the cost model's job.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .archspec import DIMS, OPERAND_DIMS, ArchSpec, DataflowSpec
from .mapspace import (ELEM_BYTES, LevelFactors, Mapping, MemoryShares,
                       canonical_order, canonicalize, check_capacity,
                       check_dataflow, check_pe_bound, factorize,
                       mapping_sort_key)

ORACLE_FACTOR_LIMIT = 10


class OracleTooLarge(ValueError):
    def __init__(self, count):
        self.factor_count = count
        super().__init__(
            f"instance has {count} prime factors; the exhaustive oracle is "
            f"limited to {ORACLE_FACTOR_LIMIT}")


@dataclass
class SolveResult:
    mappings: list  # ranked Mapping list, best first
    costs: list  # aligned proxy costs (ints, bytes)
    infeasible_reason: str | None = None
    eliminated: dict = field(default_factory=dict)

    def __bool__(self):
        return bool(self.mappings)


# ---------------------------------------------------------------------------
# traffic model (single source of refill-count truth)


def _outer_loops(m: Mapping, level_index: int):
    """Temporal loops above a level, outermost first, unit extents dropped."""
    loops = []
    for li in range(len(m.levels) - 1, level_index, -1):
        lf = m.levels[li]
        for dim in lf.order:
            e = lf.temporal_of(dim)
            if e > 1:
                loops.append((dim, e))
    return loops


def _fetch_count(loops, relevant) -> int:
    """Number of tile fetches: product of extents from the outermost loop
    down to the innermost loop indexing the operand."""
    suffix = 0
    for dim, _ in reversed(loops):
        if dim in relevant:
            break
        suffix += 1
    total = 1
    upto = len(loops) - suffix
    for dim, e in loops[:upto]:
        total *= e
    return total


def traffic_breakdown(m: Mapping, w, arch: ArchSpec) -> dict:
    """Bytes moved per on-chip level, split by operand and direction.

    Loads are keyed by their destination level; output stores (and partial
    accumulator spills/reloads) by their source level.  Final output stores
    move requantized int8 data; partial spills move raw int32 partial sums.
    """
    out = {}
    bounds = m.total_bounds()
    for idx, lv in arch.on_chip_levels():
        entry = {}
        tile = m.cumulative_tile(idx)
        for operand in lv.operands_held:
            d0, d1 = OPERAND_DIMS[operand]
            tile_elems = tile[d0] * tile[d1]
            loops = _outer_loops(m, idx)
            if operand != "output":
                fetches = _fetch_count(loops, set(OPERAND_DIMS[operand]))
                entry[operand] = {"loads": tile_elems * ELEM_BYTES[operand]
                                  * fetches}
                continue
            inner_holding = arch.holding_levels("output")[0]
            if idx != inner_holding:
                # staging level for already-requantized int8 results
                entry[operand] = {"stores": bounds["N"] * bounds["K"]}
                continue
            activations = _fetch_count(loops, {"N", "K"})
            distinct = 1
            for dim, e in loops:
                if dim in ("N", "K"):
                    distinct *= e
            partials = activations - distinct
            entry[operand] = {
                "stores": distinct * tile_elems * 1
                + partials * tile_elems * ELEM_BYTES["output"],
                "loads": partials * tile_elems * ELEM_BYTES["output"],
            }
        out[lv.name] = entry
    return out


def proxy_objective(m: Mapping, w, arch: ArchSpec) -> int:
    """Total bytes moved across all level boundaries (lower is better)."""
    total = 0
    for entry in traffic_breakdown(m, w, arch).values():
        for rec in entry.values():
            total += sum(rec.values())
    return total


# ---------------------------------------------------------------------------
# chain enumeration (per-dimension factor products with propagation)


def _distribute(exponents, n_slots):
    """All ways to spread prime exponents over n_slots; yields per-slot
    product lists, deterministic order."""
    primes = sorted(exponents)

    def splits(total, slots):
        if slots == 1:
            yield (total,)
            return
        for first in range(total + 1):
            for rest in splits(total - first, slots - 1):
                yield (first,) + rest

    per_prime = []
    for p in primes:
        per_prime.append([tuple(p ** e for e in s)
                          for s in splits(exponents[p], n_slots)])
    for combo in itertools.product(*per_prime):
        out = [1] * n_slots
        for vec in combo:
            for i, v in enumerate(vec):
                out[i] *= v
        yield tuple(out)


def _divisors(n):
    out = [d for d in range(1, n + 1) if n % d == 0]
    return out


def _choose_split(f, bound, dim, level, lv_is_pe, mode, arch):
    """Pick the spatial/temporal split of a level product deterministically.

    Returns (spatial, temporal) or None when no split satisfies the caps and
    the dataflow's forced/forbidden requirement (PE level only).
    """
    ms = arch.constraints.max_spatial(arch, level, dim)
    mt = arch.constraints.max_temporal(level, dim)
    candidates = []
    for s in _divisors(f):
        t = f // s
        if ms is not None and s > ms:
            continue
        if mt is not None and t > mt:
            continue
        if lv_is_pe:
            if mode == "forbidden" and s != 1:
                continue
            if mode == "forced" and not (s > 1 or s == bound):
                continue
        candidates.append((s, t))
    if not candidates:
        return None
    if lv_is_pe and mode == "forced":
        return max(candidates)  # maximize spatial use of the array
    # prefer purely temporal when allowed (keeps the array 2-D at most)
    return min(candidates)


def _dim_chains(dim, bound, arch, df, eliminated):
    """Feasible per-level product chains for one dimension.

    Each chain is (products, spatial, temporal) tuples over levels, already
    split under the constraint caps and the dataflow's PE requirements.
    """
    exponents = {}
    for p in factorize(bound):
        exponents[p] = exponents.get(p, 0) + 1
    n_levels = len(arch.levels)
    pe_idx = arch.pe_level_index
    mode = df.spatial_map.get(dim, "free")
    chains = []
    last_reject = [None]
    for products in _distribute(exponents, n_levels):
        if products[pe_idx] > arch.pe_dim:
            eliminated["pe_bound"] = eliminated.get("pe_bound", 0) + 1
            last_reject[0] = "pe_bound"
            continue
        spatial = []
        temporal = []
        ok = True
        for li, f in enumerate(products):
            lv = arch.levels[li]
            fixed = arch.constraints.fixed(lv, dim)
            if fixed is not None and f != fixed:
                ok = False
                break
            split = _choose_split(f, bound, dim, lv, li == pe_idx, mode, arch)
            if split is None:
                ok = False
                break
            spatial.append(split[0])
            temporal.append(split[1])
        if not ok:
            eliminated["dataflow"] = eliminated.get("dataflow", 0) + 1
            last_reject[0] = "dataflow"
            continue
        chains.append((products, tuple(spatial), tuple(temporal)))
    return chains, last_reject[0]


# ---------------------------------------------------------------------------
# vectorized objective over the candidate cross product


def _budget_bytes(arch, lv, operand, shares, db):
    share = shares.get(lv.name, operand)
    budget = lv.capacity_bytes * share
    if db:
        budget = budget / 2
    return budget  # Fraction


def _vector_fetches(extents, relevance, total=None):
    """Vectorized fetch count over rows.

    ``extents``: list (outer->inner) of int64 arrays; ``relevance``: parallel
    list of bools.  Implements the same suffix rule as _fetch_count.  ``total``
    (product of all extents) may be supplied precomputed.
    """
    n = extents[0].shape[0] if extents else 0
    if total is None:
        total = np.ones(n, dtype=np.int64)
        for e in extents:
            total = total * e
    drop = np.ones(n, dtype=np.int64)
    scanning = np.ones(n, dtype=bool)
    for e, rel in zip(reversed(extents), reversed(relevance)):
        if rel:
            scanning = scanning & (e == 1)
            if not scanning.any():
                break
        else:
            drop = np.where(scanning, drop * e, drop)
    return total // drop


def solve(w, arch: ArchSpec, df: DataflowSpec, shares: MemoryShares,
          db: bool, k: int = 1) -> SolveResult:
    """Exact search over the feasible mapping space of one tuning point.

    Returns up to ``k`` feasible mappings ranked by the proxy traffic
    objective (ties broken by the deterministic mapping key); the first
    entry attains the global minimum.
    """
    if db and not arch.supports_double_buffering:
        return SolveResult([], [], "dataflow",
                           {"dataflow": 1})
    bounds = w.bounds
    eliminated: dict = {}
    chains = {}
    for dim in DIMS:
        cs, last = _dim_chains(dim, bounds[dim], arch, df, eliminated)
        if not cs:
            return SolveResult([], [], last or "dataflow", eliminated)
        chains[dim] = cs

    n_levels = len(arch.levels)
    on_chip = arch.on_chip_levels()
    budgets = {(lv.name, op): _budget_bytes(arch, lv, op, shares, db)
               for _, lv in on_chip for op in lv.operands_held}

    # cumulative tiles per chain, per level
    def cumtiles(cs):
        out = []
        for products, _, _ in cs:
            acc, row = 1, []
            for f in products:
                acc *= f
                row.append(acc)
            out.append(row)
        return np.asarray(out, dtype=np.int64)

    TN, TC, TK = (cumtiles(chains[d]) for d in DIMS)
    nN, nC, nK = (len(chains[d]) for d in DIMS)

    # per-level capacity ceilings expressed as element-count limits
    def elem_limit(operand):
        lims = []
        for idx, lv in on_chip:
            if operand in lv.operands_held:
                budget = budgets[(lv.name, operand)]
                lims.append((idx, int(budget // ELEM_BYTES[operand])))
        return lims

    lim_in, lim_w, lim_out = (elem_limit(o) for o in
                              ("input", "weight", "output"))

    # pairwise capacity masks, combined over the (iN, iC, iK) grid
    ok_nc = np.ones((nN, nC), dtype=bool)
    for li, lim in lim_in:
        ok_nc &= TN[:, li][:, None] * TC[:, li][None, :] <= lim
    ok_ck = np.ones((nC, nK), dtype=bool)
    for li, lim in lim_w:
        ok_ck &= TC[:, li][:, None] * TK[:, li][None, :] <= lim
    ok_nk = np.ones((nN, nK), dtype=bool)
    for li, lim in lim_out:
        ok_nk &= TN[:, li][:, None] * TK[:, li][None, :] <= lim
    grid = (ok_nc[:, :, None] & ok_ck[None, :, :] & ok_nk[:, None, :])
    iN_a, iC_a, iK_a = (a.astype(np.int64) for a in np.nonzero(grid))
    nrows = iN_a.shape[0]
    dropped = nN * nC * nK - nrows
    if dropped:
        eliminated["capacity"] = eliminated.get("capacity", 0) + dropped
    if not nrows:
        return SolveResult([], [], "capacity", eliminated)

    # per (dim, level) temporal extents and cumulative tiles for all rows
    temporal = {}
    tiles = {}
    for dim, idx_a, T in (("N", iN_a, TN), ("C", iC_a, TC), ("K", iK_a, TK)):
        cs = chains[dim]
        t_mat = np.asarray([c[2] for c in cs], dtype=np.int64)
        for li in range(n_levels):
            temporal[(dim, li)] = t_mat[idx_a, li]
            tiles[(dim, li)] = T[idx_a, li]

    # secondary objective: PE-call trips (total iteration space over the PE
    # tile).  Proxy-cost ties are broken toward the largest PE tile so the
    # representative of a cost class amortizes per-call overheads.
    pe_idx = arch.pe_level_index
    pe_tile = (tiles[("N", pe_idx)] * tiles[("C", pe_idx)]
               * tiles[("K", pe_idx)])
    total_iters = bounds["N"] * bounds["C"] * bounds["K"]
    trips_arr = total_iters // pe_tile

    # permutation choices matter only for levels with something held below
    holding_below = [False] * n_levels
    seen_holding = False
    for li in range(n_levels):
        holding_below[li] = seen_holding
        lv = arch.levels[li]
        if lv.capacity_bytes > 0 and lv.operands_held:
            seen_holding = True
    active = [li for li in range(1, n_levels) if holding_below[li]]
    all_orders = list(itertools.permutations(DIMS))
    combo_space = list(itertools.product(*[all_orders for _ in active])) or [()]

    inner_out = arch.holding_levels("output")[0]
    out_bounds_bytes = bounds["N"] * bounds["K"]

    # permutation-independent per-level precomputation: product of all
    # temporal extents above the level, per-operand distinct counts, tile sizes
    total_above = {}
    distinct_above = {}
    tile_elems = {}
    for idx, lv in on_chip:
        tot = np.ones(nrows, dtype=np.int64)
        dist = {op: np.ones(nrows, dtype=np.int64) for op in lv.operands_held}
        for li in range(n_levels - 1, idx, -1):
            for dim in DIMS:
                e = temporal[(dim, li)]
                tot = tot * e
                for op in lv.operands_held:
                    if dim in OPERAND_DIMS[op]:
                        dist[op] = dist[op] * e
        total_above[idx] = tot
        distinct_above[idx] = dist
        for op in lv.operands_held:
            d0, d1 = OPERAND_DIMS[op]
            tile_elems[(idx, op)] = tiles[(d0, idx)] * tiles[(d1, idx)]

    def combo_cost(combo):
        orders = {li: order for li, order in zip(active, combo)}
        cost = np.zeros(nrows, dtype=np.int64)
        for idx, lv in on_chip:
            # loop list above this level, outermost first
            extents, dims_of = [], []
            for li in range(n_levels - 1, idx, -1):
                order = orders.get(li, DIMS)
                for dim in order:
                    extents.append(temporal[(dim, li)])
                    dims_of.append(dim)
            for operand in lv.operands_held:
                te = tile_elems[(idx, operand)]
                if operand != "output":
                    d0, d1 = OPERAND_DIMS[operand]
                    rel = [d in (d0, d1) for d in dims_of]
                    fetches = (_vector_fetches(extents, rel, total_above[idx])
                               if extents else 1)
                    cost += te * ELEM_BYTES[operand] * fetches
                elif idx != inner_out:
                    cost += out_bounds_bytes
                else:
                    rel = [d in ("N", "K") for d in dims_of]
                    if extents:
                        act = _vector_fetches(extents, rel, total_above[idx])
                    else:
                        act = np.ones(nrows, dtype=np.int64)
                    partials = act - distinct_above[idx][operand]
                    cost += (distinct_above[idx][operand] * te
                             + partials * te * ELEM_BYTES["output"] * 2)
        return cost

    pool = []  # (cost, trips, row_index, combo_index)
    keep = max(k * 4, 16)
    big = int(trips_arr.max()) + 1
    for ci, combo in enumerate(combo_space):
        cost = combo_cost(combo)
        if int(cost.max()) < (1 << 62) // big:
            composite = cost * big + trips_arr
            if nrows > keep:
                part = np.argpartition(composite, keep - 1)[:keep]
            else:
                part = np.arange(nrows)
        else:
            part = np.lexsort((trips_arr, cost))[:keep]
        for ri in part:
            pool.append((int(cost[ri]), int(trips_arr[ri]), int(ri), ci))
    pool.sort()

    def materialize(row_index, combo_index):
        combo = combo_space[combo_index]
        orders = {li: order for li, order in zip(active, combo)}
        idxs = {"N": int(iN_a[row_index]), "C": int(iC_a[row_index]),
                "K": int(iK_a[row_index])}
        levels = []
        for li, lv in enumerate(arch.levels):
            spat, temp = [], []
            for dim in DIMS:
                _, s, t = chains[dim][idxs[dim]]
                spat.append(s[li])
                temp.append(t[li])
            order = orders.get(li, DIMS)
            levels.append(LevelFactors(lv.name, tuple(spat), tuple(temp),
                                       canonical_order(order, temp)))
        return Mapping(levels=tuple(levels), dataflow=df.name,
                       double_buffered=db, shares=shares)

    best = {}
    for cost, trips, ri, ci in pool:
        m = canonicalize(materialize(ri, ci))
        key = (m.levels,)
        if key not in best or (cost, trips) < best[key][:2]:
            best[key] = (cost, trips, m)
    ranked = sorted(((cost, trips, mapping_sort_key(m), m)
                     for cost, trips, m in best.values()),
                    key=lambda t: (t[0], t[1], t[2]))
    mappings = [m for _, _, _, m in ranked[:k]]
    costs = [c for c, _, _, _ in ranked[:k]]
    return SolveResult(mappings, costs, None, eliminated)


# ---------------------------------------------------------------------------
# exhaustive oracle


def enumerate_feasible(w, arch: ArchSpec, df: DataflowSpec,
                       shares: MemoryShares, db: bool):
    """Complete enumeration of feasible mappings for small instances.

    Independent of solve(): raw (factor -> slot) assignments are generated
    per prime multiset, every per-level permutation is tried, and candidates
    are filtered through the three mapspace predicates.
    """
    bounds = w.bounds
    primes = {d: factorize(bounds[d]) for d in DIMS}
    total = sum(len(ps) for ps in primes.values())
    if total > ORACLE_FACTOR_LIMIT:
        raise OracleTooLarge(total)
    if db and not arch.supports_double_buffering:
        return []

    n_levels = len(arch.levels)
    slots = [(li, kind) for li in range(n_levels)
             for kind in ("spatial", "temporal")]

    def dim_assignments(dim):
        groups = {}
        for p in primes[dim]:
            groups[p] = groups.get(p, 0) + 1
        per_group = []
        for p in sorted(groups):
            per_group.append([
                combo for combo in itertools.combinations_with_replacement(
                    range(len(slots)), groups[p])])
        out = []
        for combo in itertools.product(*per_group):
            prod = {}
            for p, slot_ids in zip(sorted(groups), combo):
                for sid in slot_ids:
                    prod[sid] = prod.get(sid, 1) * p
            out.append(prod)
        return out

    per_dim = [dim_assignments(d) for d in DIMS]
    all_orders = list(itertools.permutations(DIMS))
    seen = set()
    seen_assign = set()
    feasible_maps = []
    for assign in itertools.product(*per_dim):
        spat = [[1] * 3 for _ in range(n_levels)]
        temp = [[1] * 3 for _ in range(n_levels)]
        for di, prod in enumerate(assign):
            for sid, f in prod.items():
                li, kind = slots[sid]
                (spat if kind == "spatial" else temp)[li][di] *= f
        key = (tuple(map(tuple, spat)), tuple(map(tuple, temp)))
        if key in seen_assign:
            continue
        seen_assign.add(key)
        # feasibility is independent of loop order; check it once per
        # factor assignment before expanding the permutations
        probe = Mapping(
            levels=tuple(LevelFactors(arch.levels[li].name, tuple(spat[li]),
                                      tuple(temp[li]))
                         for li in range(n_levels)),
            dataflow=df.name, double_buffered=db, shares=shares)
        if not check_pe_bound(probe, arch):
            continue
        if not check_capacity(probe, arch, w):
            continue
        if not check_dataflow(probe, arch, df, w):
            continue
        order_choices = []
        for li in range(n_levels):
            non_unit = sum(1 for t in temp[li] if t > 1)
            order_choices.append(all_orders if non_unit >= 2 else [DIMS])
        for orders in itertools.product(*order_choices):
            levels = tuple(
                LevelFactors(arch.levels[li].name, tuple(spat[li]),
                             tuple(temp[li]),
                             canonical_order(orders[li], temp[li]))
                for li in range(n_levels))
            if levels in seen:
                continue
            seen.add(levels)
            feasible_maps.append(Mapping(levels=levels, dataflow=df.name,
                                         double_buffered=db, shares=shares))
    feasible_maps.sort(key=mapping_sort_key)
    return feasible_maps
