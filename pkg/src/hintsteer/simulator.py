"""Deterministic stand-in for the expert cost-based optimizer.

Generates catalogs and query workloads with controllable complexity
(scale factor, skew, table magnitude), compiles (query, hintset) pairs
into abstract plan trees, and executes plans against a true-cost model
with multiplicative noise and a cold-cache penalty.

The optimizer plans with *estimated* cardinalities that are seeded
distortions of the true ones, with errors that grow with join depth and
column skew. Hints therefore steer it into plans it would not pick on
its own, and a learned reward model has real headroom over the
estimator.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import InvalidSpec, UnknownTable

OPERATORS = (
    "TableScan",
    "IndexScan",
    "HashJoin",
    "IndexJoin",
    "RangeJoin",
    "HashedRangeJoin",
    "NestedLoopJoin",
    "Filter",
    "Aggregate",
    "Union",
)

_EQ_JOIN_OPS = ("HashJoin", "IndexJoin", "NestedLoopJoin")
_RANGE_JOIN_OPS = ("RangeJoin", "HashedRangeJoin", "NestedLoopJoin")


def stable_unit(*parts) -> float:
    """Deterministic pseudo-uniform in [0, 1) keyed by the parts.

    hashlib-based so results never depend on PYTHONHASHSEED.
    """
    h = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode(), digest_size=8)
    return struct.unpack("<Q", h.digest())[0] / 2.0**64


def stable_seed(*parts) -> int:
    h = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode(), digest_size=8)
    return struct.unpack("<Q", h.digest())[0]


# ---------------------------------------------------------------------------
# catalog


@dataclass
class TableDef:
    name: str
    row_count: int
    column_count: int
    column_skew: list[float]


@dataclass
class JoinEdge:
    table_a: str
    table_b: str
    kind: str  # "eq" | "range"
    selectivity: float

    def key(self) -> tuple[str, str]:
        return tuple(sorted((self.table_a, self.table_b)))


@dataclass
class CatalogSpec:
    n_tables: int
    max_rows: int
    skew: float = 0.0
    scale_factor: float = 1.0


@dataclass
class Catalog:
    tables: list[TableDef]
    join_graph: list[JoinEdge]
    skew: float
    scale_factor: float
    seed: int

    def table(self, name: str) -> TableDef:
        for t in self.tables:
            if t.name == name:
                return t
        raise UnknownTable(name)

    def edge(self, a: str, b: str) -> JoinEdge:
        key = tuple(sorted((a, b)))
        for e in self.join_graph:
            if e.key() == key:
                return e
        raise KeyError(f"no join edge between {a} and {b}")

    @property
    def max_records(self) -> int:
        return max(t.row_count for t in self.tables)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Catalog":
        raw = json.loads(text)
        return cls(
            tables=[TableDef(**t) for t in raw["tables"]],
            join_graph=[JoinEdge(**e) for e in raw["join_graph"]],
            skew=raw["skew"],
            scale_factor=raw["scale_factor"],
            seed=raw["seed"],
        )


@dataclass(frozen=True)
class WorkloadStats:
    """Classifier input: the statistics that weigh a workload."""

    workload_id: str
    scale_factor: float
    skew_flag: bool
    n_tables: int
    n_columns: int
    max_records: int


SKEW_FLAG_THRESHOLD = 0.5


def generate_catalog(spec: CatalogSpec, seed: int) -> Catalog:
    """Seeded synthetic catalog; the largest table has exactly
    max_rows * scale_factor rows."""
    if spec.n_tables < 1:
        raise InvalidSpec("n_tables must be >= 1")
    if spec.max_rows < 1:
        raise InvalidSpec("max_rows must be >= 1")
    if spec.scale_factor <= 0:
        raise InvalidSpec("scale_factor must be > 0")
    if not 0.0 <= spec.skew <= 1.0:
        raise InvalidSpec("skew must be in [0, 1]")

    rng = np.random.default_rng(seed)
    top_rows = int(round(spec.max_rows * spec.scale_factor))
    big_idx = int(rng.integers(spec.n_tables))

    tables: list[TableDef] = []
    for i in range(spec.n_tables):
        if i == big_idx:
            rows = top_rows
        else:
            frac = math.exp(rng.uniform(math.log(0.02), math.log(0.7)))
            rows = max(1, int(round(top_rows * frac)))
            rows = min(rows, max(1, top_rows - 1))
        n_cols = int(rng.integers(4, 29))
        if spec.skew > 0:
            col_skew = [
                spec.skew if rng.random() < 0.3 else float(rng.uniform(0, spec.skew * 0.5))
                for _ in range(n_cols)
            ]
            if i == big_idx:
                col_skew[0] = spec.skew
        else:
            col_skew = [0.0] * n_cols
        tables.append(TableDef(f"t{i}", rows, n_cols, col_skew))

    edges: list[JoinEdge] = []
    seen: set[tuple[str, str]] = set()

    def add_edge(i: int, j: int) -> None:
        a, b = tables[i], tables[j]
        key = tuple(sorted((a.name, b.name)))
        if key in seen or i == j:
            return
        seen.add(key)
        kind = "range" if rng.random() < 0.18 else "eq"
        skew_boost = 1.0 + 3.0 * max(max(a.column_skew), max(b.column_skew))
        fanout = rng.uniform(1.0, 8.0) * skew_boost
        sel = fanout / max(a.row_count, b.row_count)
        edges.append(JoinEdge(key[0], key[1], kind, float(min(sel, 1.0))))

    order = rng.permutation(spec.n_tables)
    for k in range(1, spec.n_tables):
        add_edge(int(order[k]), int(order[int(rng.integers(k))]))
    for _ in range(spec.n_tables // 2):
        i, j = int(rng.integers(spec.n_tables)), int(rng.integers(spec.n_tables))
        add_edge(i, j)

    return Catalog(tables, edges, spec.skew, spec.scale_factor, seed)


def workload_stats(catalog: Catalog, workload_id: str) -> WorkloadStats:
    skewed = any(
        s >= SKEW_FLAG_THRESHOLD for t in catalog.tables for s in t.column_skew
    )
    return WorkloadStats(
        workload_id=workload_id,
        scale_factor=catalog.scale_factor,
        skew_flag=skewed,
        n_tables=len(catalog.tables),
        n_columns=sum(t.column_count for t in catalog.tables),
        max_records=catalog.max_records,
    )


# ---------------------------------------------------------------------------
# queries


@dataclass
class Predicate:
    table: str
    column: int
    op: str  # "eq" | "range"
    literal: int


@dataclass
class Query:
    id: str
    workload_id: str
    tables: list[str]
    predicates: list[Predicate]
    joins: list[tuple[str, str]]  # join_graph edge keys
    aggregate: bool = False
    union_arms: int = 0
    subquery: bool = False

    def to_json(self) -> str:
        d = asdict(self)
        d["joins"] = [list(j) for j in self.joins]
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Query":
        raw = json.loads(text)
        raw["predicates"] = [Predicate(**p) for p in raw["predicates"]]
        raw["joins"] = [tuple(j) for j in raw["joins"]]
        return cls(**raw)


@dataclass
class TraitConfig:
    """Probabilities shaping generated queries.

    The defaults are tuned so that, over the 225-hintset default catalog,
    a query compiles to roughly 20-30 distinct plans on average with a
    per-query maximum comfortably under 45. Trait combinations that would
    blow past that envelope (e.g. unions combined with range joins) are
    excluded by construction.
    """

    p_single: float = 0.08
    p_union: float = 0.10
    p_range: float = 0.20
    p_aggregate: float = 0.72
    p_subquery: float = 0.45
    p_wide_pred: float = 0.35  # chance a table contributes a range predicate
    n_table_weights: tuple[float, ...] = (0.32, 0.30, 0.24, 0.14)  # for 2..5 tables


def _connected_subset(
    catalog: Catalog, rng: np.random.Generator, size: int,
    start_edge: JoinEdge | None = None, eq_only: bool = False,
) -> tuple[list[str], list[tuple[str, str]]] | None:
    """Grow a connected table subset along join-graph edges."""
    adj: dict[str, list[JoinEdge]] = {t.name: [] for t in catalog.tables}
    for e in catalog.join_graph:
        if eq_only and e.kind != "eq":
            continue
        adj[e.table_a].append(e)
        adj[e.table_b].append(e)
    if start_edge is not None:
        chosen = {start_edge.table_a, start_edge.table_b}
        edges = [start_edge.key()]
    else:
        candidates = [t.name for t in catalog.tables if adj[t.name]]
        if not candidates and size > 1:
            return None
        start = candidates[int(rng.integers(len(candidates)))] if candidates else catalog.tables[0].name
        chosen, edges = {start}, []
    while len(chosen) < size:
        frontier = []
        for t in sorted(chosen):
            for e in adj[t]:
                other = e.table_b if e.table_a == t else e.table_a
                if other not in chosen:
                    frontier.append((e, other))
        if not frontier:
            break
        e, other = frontier[int(rng.integers(len(frontier)))]
        chosen.add(other)
        edges.append(e.key())
    return sorted(chosen), edges


def generate_workload(
    catalog: Catalog,
    workload_id: str,
    n_queries: int,
    seed: int,
    traits: TraitConfig | None = None,
) -> list[Query]:
    traits = traits or TraitConfig()
    rng = np.random.default_rng(seed)
    range_edges = [e for e in catalog.join_graph if e.kind == "range"]
    queries = []
    for i in range(n_queries):
        queries.append(_generate_query(catalog, rng, f"{workload_id}-q{i:04d}",
                                       workload_id, traits, range_edges))
    return queries


def _pick_preds(
    rng: np.random.Generator, catalog: Catalog, tables: list[str],
    style: str,
) -> list[Predicate]:
    """style: 'plain' single eq preds, 'multi' one table gets two preds,
    'rangey' range predicates allowed."""
    preds = []
    multi_done = False
    for t in tables:
        tdef = catalog.table(t)
        if rng.random() < 0.25:
            continue  # table contributes no predicate
        n = 1
        if style == "multi" and not multi_done and rng.random() < 0.8:
            n, multi_done = 2, True
        cols = rng.choice(tdef.column_count, size=min(n, tdef.column_count), replace=False)
        for c in np.atleast_1d(cols):
            op = "range" if (style == "rangey" and rng.random() < 0.5) else "eq"
            preds.append(Predicate(t, int(c), op, int(rng.integers(1_000_000))))
    return preds


def _generate_query(
    catalog: Catalog, rng: np.random.Generator, qid: str, workload_id: str,
    traits: TraitConfig, range_edges: list[JoinEdge],
) -> Query:
    n_tables = len(catalog.tables)
    roll = rng.random()
    shape = "plain"
    if n_tables == 1 or roll < traits.p_single:
        shape = "single"
    elif roll < traits.p_single + traits.p_union:
        shape = "union"
    elif roll < traits.p_single + traits.p_union + traits.p_range and range_edges:
        shape = "range"

    if shape == "single":
        t = catalog.tables[int(rng.integers(n_tables))].name
        style = "multi" if rng.random() < 0.4 else ("rangey" if rng.random() < 0.5 else "plain")
        preds = _pick_preds(rng, catalog, [t], style)
        if not preds:  # a bare scan makes a degenerate query; force one predicate
            preds = [Predicate(t, 0, "eq", int(rng.integers(1_000_000)))]
        return Query(qid, workload_id, [t], preds, [],
                     aggregate=rng.random() < 0.5, union_arms=0, subquery=False)

    if shape == "union":
        sub = _connected_subset(catalog, rng, 2, eq_only=True)
        if sub is not None and len(sub[0]) == 2:
            tables, joins = sub
            preds = _pick_preds(rng, catalog, tables, "plain")
            return Query(qid, workload_id, tables, preds, joins,
                         aggregate=rng.random() < 0.55, union_arms=2, subquery=False)
        shape = "plain"

    if shape == "range":
        edge = range_edges[int(rng.integers(len(range_edges)))]
        size = 2 if rng.random() < 0.55 else 3
        sub = _connected_subset(catalog, rng, size, start_edge=edge)
        tables, joins = sub
        style = "multi" if rng.random() < 0.35 else "plain"
        preds = _pick_preds(rng, catalog, tables, style)
        return Query(qid, workload_id, tables, preds, joins,
                     aggregate=False, union_arms=0,
                     subquery=len(tables) >= 3 and rng.random() < traits.p_subquery)

    # plain equality-join query
    size = 2 + int(rng.choice(len(traits.n_table_weights), p=np.array(traits.n_table_weights)))
    size = min(size, n_tables)
    sub = _connected_subset(catalog, rng, size, eq_only=True)
    if sub is None:
        sub = _connected_subset(catalog, rng, size)
    tables, joins = sub
    if size >= 4:
        style = "plain"  # keeps rewrite co-applicability bounded
    else:
        style = ("multi", "rangey", "plain")[int(rng.integers(3))]
    preds = _pick_preds(rng, catalog, tables, style)
    return Query(qid, workload_id, tables, preds, joins,
                 aggregate=rng.random() < traits.p_aggregate, union_arms=0,
                 subquery=len(tables) >= 3 and rng.random() < traits.p_subquery)


# ---------------------------------------------------------------------------
# plans


@dataclass
class PlanNode:
    operator: str
    est_cost: float = 0.0
    est_size: float = 0.0
    children: list["PlanNode"] = field(default_factory=list)
    # build/execution annotations; never serialized
    table: str | None = None
    true_rows: float = 0.0
    true_cost: float = 0.0
    meta: dict | None = None

    def to_dict(self) -> dict:
        return {
            "operator": self.operator,
            "est_cost": self.est_cost,
            "est_size": self.est_size,
            "children": [c.to_dict() for c in self.children],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PlanNode":
        return cls(
            operator=d["operator"],
            est_cost=d["est_cost"],
            est_size=d["est_size"],
            children=[cls.from_dict(c) for c in d["children"]],
        )

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()


def _canonical(node: PlanNode) -> str:
    kids = ",".join(_canonical(c) for c in node.children)
    return f"{node.operator}[c={node.est_cost:.3g},s={node.est_size:.3g}]({kids})"


def plan_hash(root: PlanNode) -> str:
    """Structure + operators + estimates quantized to 3 significant digits."""
    return hashlib.blake2b(_canonical(root).encode(), digest_size=8).hexdigest()


@dataclass
class AbstractPlan:
    root: PlanNode
    plan_hash: str
    true_cost: float

    def to_json(self) -> str:
        return json.dumps(self.root.to_dict(), sort_keys=True)


@dataclass
class TrueCostModel:
    """Per-operator cost coefficients plus execution noise settings."""

    coefficients: dict[str, float] = field(default_factory=lambda: dict(_DEFAULT_COEFFS))
    noise_sigma: float = 0.08
    cold_cache_penalty: float = 3.0


_DEFAULT_COEFFS = {
    "table_scan": 2e-4,
    "index_scan": 1.2e-3,
    "filter": 8e-5,
    "hash_join_build": 4e-4,
    "hash_join_probe": 1.5e-4,
    "index_join": 6e-4,
    "nested_loop": 1.2e-4,
    "range_join": 5e-4,
    "hashed_range_join": 8e-4,
    "aggregate": 3e-4,
    "union": 5e-5,
    "out": 1e-4,
    "late_mat_factor": 0.6,
}

# estimation-error shaping: base sigma, growth per join below, growth with skew
_EST_SIGMA = 0.35
_EST_DEPTH_GAIN = 0.30
_EST_SKEW_GAIN = 1.2

_AGG_ROOT_EXP = 0.55
_AGG_PARTIAL_EXP = 0.75
_AGG_DISTINCT_EXP = 0.90


def _join_cost(coeffs: dict, op: str, left: float, right: float, out: float) -> float:
    c = coeffs
    if op == "HashJoin":
        return c["hash_join_build"] * min(left, right) + c["hash_join_probe"] * max(left, right) + c["out"] * out
    if op == "IndexJoin":
        return c["index_join"] * left * math.log2(1.0 + right) + c["out"] * out
    if op == "NestedLoopJoin":
        return c["nested_loop"] * left * right**0.6 + c["out"] * out
    if op == "RangeJoin":
        return c["range_join"] * (left + right) * math.log2(1.0 + left + right) + c["out"] * out
    if op == "HashedRangeJoin":
        return c["hashed_range_join"] * (left + right) + c["out"] * out
    raise ValueError(op)


class Simulator:
    """Compiles queries under hintsets and executes plans.

    compile() is a pure function; execute() mutates the warm-plan cache
    and must be serialized per instance by the caller.
    """

    def __init__(self, catalog: Catalog, cost_model: TrueCostModel | None = None,
                 hint_catalog=None):
        self.catalog = catalog
        self.cost_model = cost_model or TrueCostModel()
        self.hint_catalog = hint_catalog
        self._warm: set[str] = set()

    # -- execution ---------------------------------------------------------

    def clear_cache(self) -> None:
        self._warm.clear()

    def execute(self, plan: AbstractPlan, rng_seed: int) -> float:
        """Simulated CPU ms: true cost x lognormal noise x cold penalty."""
        base = plan.true_cost
        if base <= 0:
            raise ValueError("plan was not compiled by this simulator (no true cost)")
        sigma = self.cost_model.noise_sigma
        noise = 1.0
        if sigma > 0:
            z = np.random.default_rng(rng_seed).standard_normal()
            noise = math.exp(sigma * z)
        cold = 1.0
        if plan.plan_hash not in self._warm:
            cold = self.cost_model.cold_cache_penalty
            self._warm.add(plan.plan_hash)
        return base * noise * cold

    def true_cost(self, plan: AbstractPlan) -> float:
        return plan.true_cost

    # -- statistics --------------------------------------------------------

    def workload_stats(self, workload_id: str) -> WorkloadStats:
        return workload_stats(self.catalog, workload_id)

    # -- estimation --------------------------------------------------------

    def _distort(self, true_val: float, sig: str, joins_below: int, skew: float) -> float:
        spread = _EST_SIGMA * (1.0 + _EST_DEPTH_GAIN * joins_below) * (1.0 + _EST_SKEW_GAIN * skew)
        u = 2.0 * stable_unit(self.catalog.seed, "est", sig) - 1.0
        return true_val * math.exp(spread * u)

    def _pred_sel(self, pred: Predicate) -> float:
        tdef = self.catalog.table(pred.table)
        skew = tdef.column_skew[pred.column % tdef.column_count]
        if pred.op == "eq":
            ndv = max(2.0, tdef.row_count**0.6)
            return min(1.0, (1.0 + 8.0 * skew) / ndv)
        return 0.08 + 0.5 * stable_unit("rangesel", pred.table, pred.column, pred.literal)

    def _table_skew(self, name: str) -> float:
        return max(self.catalog.table(name).column_skew)

    # -- compilation -------------------------------------------------------

    def compile(self, query: Query, hintset) -> AbstractPlan:
        """Deterministic plan for (query, hintset).

        `hintset` may be a HintSet (requires hint_catalog), a hintset id,
        or an iterable of enabled hint names. Hints that do not apply to
        the query leave the plan identical to the mask without them.
        """
        flags = self._flags(hintset)
        for t in query.tables:
            self.catalog.table(t)  # raises UnknownTable

        root = self._build(query, flags)
        self._finalize(root, query, flags)
        h = plan_hash(root)
        return AbstractPlan(root=root, plan_hash=h, true_cost=root.true_cost)

    def _flags(self, hintset) -> frozenset[str]:
        if isinstance(hintset, (frozenset, set, list, tuple)):
            return frozenset(hintset)
        if self.hint_catalog is None:
            raise ValueError("hintset ids require a hint_catalog")
        return self.hint_catalog.enabled_names(hintset)

    # Build phase: assemble the operator tree with metadata; operators for
    # scans and joins are resolved in the finalize phase, where estimated
    # cardinalities are available bottom-up.

    def _build(self, query: Query, flags: frozenset[str]) -> PlanNode:
        preds = list(query.predicates)
        has_join = len(query.joins) >= 1
        n_joins = len(query.joins)

        # one range predicate acts as the post-aggregation filter unless
        # filter_thru_aggr pushes it into the normal stack
        having: Predicate | None = None
        if query.aggregate and "filter_thru_aggr" not in flags:
            for p in preds:
                if p.op == "range":
                    having = p
                    break
            if having is not None:
                preds = [p for p in preds if p is not having]

        push_filters = ("filter_thru_join" in flags and has_join) or not has_join
        by_table: dict[str, list[Predicate]] = {}
        for p in preds:
            by_table.setdefault(p.table, []).append(p)

        def filter_nodes(plist: list[Predicate]) -> list[list[Predicate]]:
            if "predicate_simplify" in flags and len(plist) > 1:
                return [plist]  # one merged filter
            return [[p] for p in plist]

        def wrap_filters(node: PlanNode, plist: list[Predicate]) -> PlanNode:
            for group in filter_nodes(plist):
                node = PlanNode("Filter", children=[node], meta={"preds": group})
            return node

        sources: dict[str, PlanNode] = {}
        for t in query.tables:
            scan_preds = by_table.get(t, []) if push_filters else []
            node = PlanNode("", table=t, meta={"kind": "scan", "scan_preds": scan_preds})
            if t == query.tables[0] and query.union_arms >= 2:
                arms = []
                for arm in range(query.union_arms):
                    arm_scan = PlanNode("", table=t,
                                        meta={"kind": "scan", "scan_preds": list(scan_preds)})
                    sel = 0.25 + 0.4 * stable_unit("arm", query.id, arm)
                    arm_node = PlanNode("Filter", children=[arm_scan],
                                        meta={"variant_sel": sel})
                    if query.aggregate and "aggr_before_union" in flags:
                        arm_node = PlanNode("Aggregate", children=[arm_node],
                                            meta={"agg": "partial"})
                    arms.append(arm_node)
                node = PlanNode("Union", children=arms)
            if push_filters and scan_preds and query.union_arms >= 2 and t == query.tables[0]:
                pass  # arm scans already carry the predicates
            sources[t] = node

        # distinct_pushdown: duplicate elimination above the largest source
        if "distinct_pushdown" in flags and n_joins >= 3:
            biggest = max(query.tables, key=lambda t: (self.catalog.table(t).row_count, t))
            sources[biggest] = PlanNode("Aggregate", children=[sources[biggest]],
                                        meta={"agg": "distinct"})

        # join tree, greedy smallest-estimate-first; order is hint-independent
        order, edge_for = self._join_order(query)
        tree = sources[order[0]]
        joined = {order[0]}
        if not push_filters and order[0] in by_table and not has_join:
            tree = wrap_filters(tree, by_table[order[0]])
        pending = dict(by_table) if not push_filters else {}
        pending.pop(order[0], None) if not has_join else None
        last_idx = len(order) - 1
        for idx, t in enumerate(order[1:], start=1):
            edge = edge_for[t]
            right = sources[t]
            is_last = idx == last_idx
            subq = query.subquery and is_last and "subquery_unnest" not in flags
            join_meta = {"kind": "join", "edge": edge, "subquery": subq}
            if ("union_thru_join" in flags and query.union_arms >= 2
                    and tree.operator == "Union"):
                # distribute this join over the union arms
                arms = [PlanNode("", children=[arm, right], meta=dict(join_meta))
                        for arm in tree.children]
                # the non-union side is shared; clone it per arm for a tree shape
                for k, arm_join in enumerate(arms):
                    if k > 0:
                        arm_join.children[1] = _clone(right)
                tree = PlanNode("Union", children=arms)
            else:
                tree = PlanNode("", children=[tree, right], meta=join_meta)
            joined.add(t)
            if not push_filters:
                # filters for tables now joined sit above this join
                for ft in sorted(joined):
                    if ft in pending:
                        tree = wrap_filters(tree, pending.pop(ft))

        if not push_filters and not has_join:
            for ft, plist in sorted(pending.items()):
                tree = wrap_filters(tree, plist)

        # preaggregation below the first join's left input
        if "preaggr_before_join" in flags and query.aggregate and n_joins >= 2:
            node = tree
            while node.meta is not None and node.meta.get("kind") == "join":
                if node.children[0].meta is None or node.children[0].meta.get("kind") != "join":
                    node.children[0] = PlanNode("Aggregate", children=[node.children[0]],
                                                meta={"agg": "partial"})
                    break
                node = node.children[0]

        if query.aggregate:
            agg = PlanNode("Aggregate", children=[], meta={"agg": "root"})
            placed = False
            if has_join and tree.meta is not None and tree.meta.get("kind") == "join":
                if "join_thru_aggr" in flags:
                    tree.children[1] = PlanNode("Aggregate", children=[tree.children[1]],
                                                meta={"agg": "root"})
                    placed = True
                elif "aggr_thru_join" in flags:
                    tree.children[0] = PlanNode("Aggregate", children=[tree.children[0]],
                                                meta={"agg": "root"})
                    placed = True
            if not placed:
                agg.children = [tree]
                tree = agg

        if having is not None:
            tree = PlanNode("Filter", children=[tree], meta={"preds": [having]})

        return tree

    def _join_order(self, query: Query):
        """Greedy order on estimated filtered source cardinalities."""
        est: dict[str, float] = {}
        pred_sel: dict[str, float] = {}
        for t in query.tables:
            sel = 1.0
            for p in query.predicates:
                if p.table == t:
                    sel *= self._pred_sel(p)
            pred_sel[t] = sel
            true_rows = self.catalog.table(t).row_count * sel
            est[t] = self._distort(true_rows, f"src({t},{sel:.4g})", 0, self._table_skew(t))
        edges = {tuple(sorted(j)): self.catalog.edge(*j) for j in query.joins}
        remaining = set(query.tables)
        start = min(remaining, key=lambda t: (est[t], t))
        order = [start]
        remaining.discard(start)
        edge_for: dict[str, JoinEdge] = {}
        cur_rows = est[start]
        while remaining:
            best = None
            for t in sorted(remaining):
                for key, e in edges.items():
                    if t in key and (set(key) - {t}).issubset(set(order)):
                        out = cur_rows * est[t] * e.selectivity
                        if best is None or out < best[0]:
                            best = (out, t, e)
            if best is None:  # disconnected (should not happen); join arbitrarily
                t = sorted(remaining)[0]
                best = (cur_rows * est[t], t, JoinEdge(order[-1], t, "eq", 1.0 / max(est[t], 1.0)))
            cur_rows, t, e = best
            order.append(t)
            edge_for[t] = e
            remaining.discard(t)
        return order, edge_for

    # Finalize phase: bottom-up cardinalities, operator resolution, costs.

    def _finalize(self, node: PlanNode, query: Query, flags: frozenset[str]):
        """Returns (true_rows, est_rows, joins_below, max_skew_below);
        sets operator, est_size, est_cost, true_rows, true_cost."""
        c = self.cost_model.coefficients
        lm = "late_materialization" in flags

        child_stats = [self._finalize(ch, query, flags) for ch in node.children]
        joins_below = sum(s[2] for s in child_stats)
        skew_below = max([s[3] for s in child_stats], default=0.0)

        meta = node.meta or {}
        kind = meta.get("kind")

        if kind == "scan":
            tdef = self.catalog.table(node.table)
            rows = float(tdef.row_count)
            skew_below = self._table_skew(node.table)
            sel = 1.0
            has_eq = False
            for p in meta.get("scan_preds", []):
                sel *= self._pred_sel(p)
                has_eq = has_eq or p.op == "eq"
            t_out = rows * sel
            sig = f"scan({node.table},{sel:.6g})"
            e_out = t_out if sel == 1.0 else self._distort(t_out, sig, 0, skew_below)
            wide = tdef.column_count > 20
            factor = c["late_mat_factor"] if (lm and wide) else 1.0
            ts_true = c["table_scan"] * rows * factor
            ts_est = c["table_scan"] * rows * factor
            if has_eq:
                is_est = c["index_scan"] * e_out * math.log2(1.0 + rows) * factor
                if is_est < ts_est:
                    node.operator = "IndexScan"
                    node.true_cost = c["index_scan"] * t_out * math.log2(1.0 + rows) * factor
                    node.est_cost = is_est
                else:
                    node.operator, node.true_cost, node.est_cost = "TableScan", ts_true, ts_est
            else:
                node.operator, node.true_cost, node.est_cost = "TableScan", ts_true, ts_est
            node.true_rows, node.est_size = t_out, e_out
            return t_out, e_out, 0, skew_below

        if node.operator == "Filter":
            t_in, e_in, _, _ = child_stats[0]
            if "variant_sel" in meta:
                sel = meta["variant_sel"]
                sig = f"variant({sel:.6g})"
            else:
                sel = 1.0
                for p in meta["preds"]:
                    sel *= self._pred_sel(p)
                sig = f"filter({sel:.6g},{_sig(node.children[0])})"
            t_out = t_in * sel
            e_out = self._distort(t_out, sig, joins_below, skew_below)
            node.true_rows, node.est_size = t_out, e_out
            node.true_cost = c["filter"] * t_in + child_stats[0][0] * 0.0 + _sum_true(node)
            node.est_cost = c["filter"] * e_in + _sum_est(node)
            return t_out, e_out, joins_below, skew_below

        if node.operator == "Union":
            t_out = sum(s[0] for s in child_stats)
            e_out = sum(s[1] for s in child_stats)
            node.true_rows, node.est_size = t_out, e_out
            node.true_cost = c["union"] * t_out + _sum_true(node)
            node.est_cost = c["union"] * e_out + _sum_est(node)
            return t_out, e_out, joins_below, skew_below

        if node.operator == "Aggregate":
            t_in, e_in, _, _ = child_stats[0]
            exp = {"root": _AGG_ROOT_EXP, "partial": _AGG_PARTIAL_EXP,
                   "distinct": _AGG_DISTINCT_EXP}[meta.get("agg", "root")]
            t_out = max(1.0, t_in**exp)
            sig = f"agg({meta.get('agg')},{_sig(node.children[0])})"
            e_out = self._distort(max(1.0, e_in**exp), sig, joins_below, skew_below)
            node.true_rows, node.est_size = t_out, e_out
            node.true_cost = c["aggregate"] * t_in + c["out"] * t_out + _sum_true(node)
            node.est_cost = c["aggregate"] * e_in + c["out"] * e_out + _sum_est(node)
            return t_out, e_out, joins_below, skew_below

        if kind == "join":
            edge: JoinEdge = meta["edge"]
            (lt, le, lj, ls), (rt, re, rj, rs) = child_stats
            joins_below = lj + rj + 1
            skew_below = max(ls, rs)
            t_out = lt * rt * edge.selectivity
            sig = f"join({edge.key()},{_sig(node.children[0])},{_sig(node.children[1])})"
            e_out = self._distort(le * re * edge.selectivity, sig, joins_below, skew_below)
            op = self._resolve_join_op(edge.kind, flags, meta.get("subquery", False),
                                       le, re, e_out)
            node.operator = op
            node.true_rows, node.est_size = t_out, e_out
            node.true_cost = _join_cost(c, op, lt, rt, t_out) + _sum_true(node)
            node.est_cost = _join_cost(c, op, le, re, e_out) + _sum_est(node)
            return t_out, e_out, joins_below, skew_below

        raise ValueError(f"unfinalized node {node.operator!r}")

    def _resolve_join_op(self, kind: str, flags: frozenset[str], subquery: bool,
                         le: float, re: float, e_out: float) -> str:
        c = self.cost_model.coefficients
        if kind == "eq":
            if "hash_join" in flags:
                return "HashJoin"
            if "index_join" in flags:
                return "IndexJoin"
            candidates = _EQ_JOIN_OPS
        else:
            if "range_join" in flags:
                return "RangeJoin"
            if "hashed_range_join" in flags:
                return "HashedRangeJoin"
            candidates = _RANGE_JOIN_OPS
        if subquery:
            return "NestedLoopJoin"
        return min(candidates, key=lambda op: (_join_cost(c, op, le, re, e_out), op))


def _sig(node: PlanNode) -> str:
    """Logical signature for estimate keying (tables + shape)."""
    meta = node.meta or {}
    if meta.get("kind") == "scan":
        preds = ",".join(f"{p.column}:{p.op}:{p.literal}" for p in meta.get("scan_preds", []))
        return f"s({node.table};{preds})"
    inner = ";".join(_sig(ch) for ch in node.children)
    tag = meta.get("kind") or node.operator
    if "agg" in meta:
        tag = f"agg.{meta['agg']}"
    if "variant_sel" in meta:
        tag = f"var{meta['variant_sel']:.4g}"
    if "preds" in meta:
        tag = "flt" + ",".join(f"{p.table}.{p.column}:{p.op}:{p.literal}" for p in meta["preds"])
    if "edge" in meta:
        tag = f"join{meta['edge'].key()}"
    return f"{tag}({inner})"


def _sum_true(node: PlanNode) -> float:
    return sum(ch.true_cost for ch in node.children)


def _sum_est(node: PlanNode) -> float:
    return sum(ch.est_cost for ch in node.children)


def _clone(node: PlanNode) -> PlanNode:
    return PlanNode(
        operator=node.operator,
        children=[_clone(c) for c in node.children],
        table=node.table,
        meta=dict(node.meta) if node.meta is not None else None,
    )
