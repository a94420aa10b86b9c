"""Policy decompositions: data model, counting, enumeration and pruning.

A decomposition is a forest of :class:`SubPolicyNode` objects. Each node owns
a set of input groups and a set of state groups (its *own* states); a node's
children are inner sub-policies whose outputs it receives, so its *effective*
state set is its own states plus everything below it.

Group ids are positions in ``sys.state_groups`` / ``sys.input_groups``, so
pseudo-state and pseudo-input reductions are purely a matter of how the
system is grouped.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .systems import ControlSystem

INT64_MAX = 2**63 - 1

FULL = "full"
DECOUPLED = "decoupled"
CASCADED = "cascaded"
MIXED = "mixed"
KINDS = (FULL, DECOUPLED, CASCADED, MIXED)


class EnumerationCapError(RuntimeError):
    """Raised when an enumeration would exceed the caller's cap."""

    def __init__(self, count: int, cap: int):
        super().__init__(f"{count} pure decompositions exceed the enumeration cap of {cap}")
        self.count = count
        self.cap = cap


@dataclass(frozen=True)
class SubPolicyNode:
    inputs: tuple[int, ...]
    states: tuple[int, ...]
    children: tuple["SubPolicyNode", ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(sorted(int(i) for i in self.inputs)))
        object.__setattr__(self, "states", tuple(sorted(int(i) for i in self.states)))
        object.__setattr__(self, "children", tuple(self.children))

    def effective_states(self) -> tuple[int, ...]:
        eff = set(self.states)
        for child in self.children:
            eff.update(child.effective_states())
        return tuple(sorted(eff))

    def descendants(self) -> Iterator["SubPolicyNode"]:
        for child in self.children:
            yield from child.descendants()
            yield child

    def descendant_inputs(self) -> tuple[int, ...]:
        return tuple(sorted(i for d in self.descendants() for i in d.inputs))


@dataclass(frozen=True)
class Decomposition:
    roots: tuple[SubPolicyNode, ...]
    kind: str

    def __post_init__(self):
        object.__setattr__(self, "roots", tuple(self.roots))
        if self.kind not in KINDS:
            raise ValueError(f"unknown decomposition kind {self.kind!r}")

    # construction helpers ---------------------------------------------------

    @classmethod
    def full(cls, sys: ControlSystem) -> "Decomposition":
        node = SubPolicyNode(tuple(range(len(sys.input_groups))), tuple(range(len(sys.state_groups))))
        return cls((node,), FULL)

    @classmethod
    def decoupled(cls, blocks: Sequence[tuple[Sequence[int], Sequence[int]]]) -> "Decomposition":
        """``blocks`` is a list of ``(input_groups, state_groups)`` pairs."""
        return cls(tuple(SubPolicyNode(tuple(i), tuple(s)) for i, s in blocks), DECOUPLED)

    @classmethod
    def cascade(cls, chain: Sequence[tuple[Sequence[int], Sequence[int]]]) -> "Decomposition":
        """``chain`` lists ``(input_groups, own_state_groups)`` innermost first."""
        node = None
        for inputs, states in chain:
            node = SubPolicyNode(tuple(inputs), tuple(states), () if node is None else (node,))
        return cls((node,), CASCADED)

    # traversal ---------------------------------------------------------------

    def nodes(self) -> list[tuple[tuple[int, ...], SubPolicyNode]]:
        """All ``(path, node)`` pairs, children before parents (solve order)."""
        out = []

        def visit(node, path):
            for k, child in enumerate(node.children):
                visit(child, path + (k,))
            out.append((path, node))

        for r, root in enumerate(self.roots):
            visit(root, (r,))
        return out

    @property
    def is_full(self) -> bool:
        return self.kind == FULL

    # serialisation ------------------------------------------------------------

    def to_dict(self) -> dict:
        leaf = lambda n: {"inputs": list(n.inputs), "states": list(n.states)}
        if self.kind == CASCADED:
            chain = []
            node = self.roots[0]
            while node is not None:
                chain.append(leaf(node))
                node = node.children[0] if node.children else None
            return {"kind": CASCADED, "chain": chain[::-1]}
        if self.kind in (DECOUPLED, FULL):
            return {"kind": self.kind, "nodes": [leaf(n) for n in self.roots]}

        def tree(n):
            d = leaf(n)
            d["children"] = [tree(c) for c in n.children]
            return d

        return {"kind": MIXED, "roots": [tree(r) for r in self.roots]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, doc: dict) -> "Decomposition":
        kind = doc["kind"]
        if kind == CASCADED:
            return cls.cascade([(n["inputs"], n["states"]) for n in doc["chain"]])
        if kind in (DECOUPLED, FULL):
            return cls(tuple(SubPolicyNode(n["inputs"], n["states"]) for n in doc["nodes"]), kind)
        if kind == MIXED:
            def tree(d):
                return SubPolicyNode(d["inputs"], d["states"], tuple(tree(c) for c in d.get("children", [])))
            return cls(tuple(tree(r) for r in doc["roots"]), MIXED)
        raise ValueError(f"unknown decomposition kind {kind!r}")

    @classmethod
    def from_json(cls, text: str) -> "Decomposition":
        return cls.from_dict(json.loads(text))

    def label(self, sys: ControlSystem) -> str:
        """Readable form such as ``pi_F(x, pi_tau(theta, thetadot))``."""
        sname = [g[0] for g in sys.state_groups]
        iname = [g[0] for g in sys.input_groups]
        all_states = tuple(range(len(sname)))

        def args(node):
            # "x" for the full state only where children follow; a lone "x" may be a state name
            states = node.effective_states()
            if node.children and tuple(states) == all_states:
                return "x"
            return ", ".join(sname[s] for s in states)

        def pol(inputs):
            names = [iname[i] for i in inputs]
            return "pi_" + (names[0] if len(names) == 1 else "[" + ",".join(names) + "]")

        def render(node):
            text = f"{pol(node.inputs)}({args(node)}"
            for child in node.children:
                text += ", " + render(child)
            return text + ")"

        return "; ".join(render(r) for r in self.roots)


# --------------------------------------------------------------------------
# Counting
# --------------------------------------------------------------------------


def _check_int(value: int) -> int:
    if value > INT64_MAX:
        raise OverflowError(f"count {value} exceeds the 64-bit integer range")
    return value


def surjection_count(a: int, b: int) -> int:
    """Number of onto maps from ``a`` labelled elements to ``b`` labelled groups."""
    if a < 0 or b < 1:
        raise ValueError("surjection_count needs a >= 0 and b >= 1")
    total = sum((-1) ** k * math.comb(b, k) * (b - k) ** a for k in range(b))
    return _check_int(total)


def count_pure(n: int, m: int) -> int:
    """Number of pure decoupled plus pure cascaded decompositions."""
    if n < 1:
        raise ValueError("need at least one state group")
    if m < 2:
        raise ValueError("a decomposition needs at least two input groups")
    total = 0
    for r in range(2, m + 1):
        # Delta(n, r) / r! decoupled + (r^n - (r-1)^n) cascaded, per ordered input split
        dec = surjection_count(n, r) // math.factorial(r)
        cas = r**n - (r - 1) ** n
        total += surjection_count(m, r) * (dec + cas)
    return _check_int(total)


# --------------------------------------------------------------------------
# Enumeration
# --------------------------------------------------------------------------


def set_partitions(m: int, r: int) -> Iterator[list[tuple[int, ...]]]:
    """Partitions of range(m) into r blocks, in restricted-growth-string order."""

    def grow(prefix, used):
        if len(prefix) == m:
            if used == r:
                yield prefix
            return
        for label in range(min(used + 1, r)):
            yield from grow(prefix + [label], max(used, label + 1))

    for rgs in grow([], 0):
        yield [tuple(i for i in range(m) if rgs[i] == b) for b in range(r)]


def enumerate_pure(sys: ControlSystem, cap: int | None = None) -> list[Decomposition]:
    """Every pure decoupled and pure cascaded decomposition, in canonical order.

    Decoupled forms come first. Within a form the order is lexicographic in
    the input partition, then the state assignment, then (cascades only) the
    cascade order.
    """
    n, m = len(sys.state_groups), len(sys.input_groups)
    total = count_pure(n, m)
    if cap is not None and total > cap:
        raise EnumerationCapError(total, cap)

    decoupled, cascaded = [], []
    for r in range(2, m + 1):
        for blocks in set_partitions(m, r):
            for assign in itertools.product(range(r), repeat=n):
                groups = [tuple(s for s in range(n) if assign[s] == b) for b in range(r)]
                if all(groups):
                    decoupled.append(Decomposition.decoupled(list(zip(blocks, groups))))
                for order in itertools.permutations(range(r)):
                    if groups[order[0]]:
                        cascaded.append(Decomposition.cascade([(blocks[b], groups[b]) for b in order]))
    return decoupled + cascaded


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------


def validate(sys: ControlSystem, d: Decomposition) -> list[str]:
    """List of invariant violations, each prefixed with the node path; empty if valid."""
    n, m = len(sys.state_groups), len(sys.input_groups)
    problems: list[str] = []
    nodes = d.nodes()
    seen_inputs: dict[int, tuple] = {}
    seen_states: dict[int, tuple] = {}
    for path, node in nodes:
        where = "/".join(map(str, path))
        if not node.inputs:
            problems.append(f"{where}: empty inputs")
        for i in node.inputs:
            if not 0 <= i < m:
                problems.append(f"{where}: unknown input group {i}")
            elif i in seen_inputs:
                problems.append(f"{where}: duplicate input {i}")
            else:
                seen_inputs[i] = path
        for s in node.states:
            if not 0 <= s < n:
                problems.append(f"{where}: unknown state group {s}")
            elif s in seen_states:
                problems.append(f"{where}: duplicate state {s}")
            else:
                seen_states[s] = path
        if not node.children and not node.states:
            problems.append(f"{where}: leaf without states")
    missing_in = sorted(set(range(m)) - set(seen_inputs))
    if missing_in:
        problems.append(f"root: missing inputs {missing_in}")
    missing_st = sorted(set(range(n)) - set(seen_states))
    if missing_st:
        problems.append(f"root: missing states {missing_st}")

    if d.kind == FULL and (len(d.roots) != 1 or d.roots[0].children):
        problems.append("root: full decomposition must be a single leaf")
    elif d.kind == DECOUPLED:
        if len(d.roots) < 2:
            problems.append("root: decoupled decomposition needs at least two sub-policies")
        for r, root in enumerate(d.roots):
            if root.children:
                problems.append(f"{r}: decoupled sub-policy has children")
    elif d.kind == CASCADED:
        if len(d.roots) != 1:
            problems.append("root: cascade must have exactly one root")
        else:
            node, path, depth = d.roots[0], "0", 1
            while node.children:
                if len(node.children) != 1:
                    problems.append(f"{path}: cascade node must have exactly one child")
                    break
                node, path, depth = node.children[0], path + "/0", depth + 1
            else:
                if not node.states:
                    problems.append(f"{path}: empty first cascade group")
            if depth < 2:
                problems.append("root: cascade needs at least two sub-policies")
    return problems


# --------------------------------------------------------------------------
# Compute-time estimates and pruning
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SolverBudget:
    """Quantities that scale grid policy iteration cost."""

    action_samples: int = 9
    iterations: int = 100


@dataclass(frozen=True)
class ComplexityEstimate:
    relative_cost: float
    per_node_cost: tuple[float, ...]


def _node_cost(sys: ControlSystem, states, inputs, budget: SolverBudget) -> float:
    axes = sys.state_group_indices(states)
    comps = sys.input_group_indices(inputs)
    cells = math.prod(sys.grid_shape[i] for i in axes)
    return float(cells) * float(budget.action_samples) ** len(comps) * budget.iterations


def estimate_compute_time(sys: ControlSystem, d: Decomposition,
                          budget: SolverBudget = SolverBudget()) -> ComplexityEstimate:
    """Grid-size times action-sample cost of each sub-policy, relative to the full solve."""
    every_state = range(len(sys.state_groups))
    every_input = range(len(sys.input_groups))
    full = _node_cost(sys, every_state, every_input, budget)
    per_node = tuple(_node_cost(sys, node.effective_states(), node.inputs, budget) / full
                     for _, node in d.nodes())
    return ComplexityEstimate(relative_cost=float(sum(per_node)), per_node_cost=per_node)


def pareto_front(points: Sequence[tuple[float, float]]) -> list[int]:
    """Indices of non-dominated (error, cost) points; exact ties are all kept."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    keep = []
    for i, p in enumerate(pts):
        dominated = np.any(np.all(pts <= p, axis=1) & np.any(pts < p, axis=1))
        if not dominated:
            keep.append(i)
    return keep
