"""Deterministic topological ordering with cycle reporting."""

from __future__ import annotations

import heapq
from typing import Callable, Hashable, Iterable, TypeVar

from .errors import DependencyCycle

K = TypeVar("K", bound=Hashable)


def reachable(roots: Iterable[K], deps: Callable[[K], Iterable[K]]) -> dict[K, list[K]]:
    """Map every node reachable from ``roots`` to its direct dependencies."""
    graph: dict[K, list[K]] = {}
    stack = list(roots)
    while stack:
        node = stack.pop()
        if node in graph:
            continue
        children = list(deps(node))
        graph[node] = children
        stack.extend(c for c in children if c not in graph)
    return graph


def find_cycle(graph: dict[K, list[K]]) -> list[K]:
    WHITE, GREY, BLACK = 0, 1, 2
    color = {n: WHITE for n in graph}
    for start in graph:
        if color[start] != WHITE:
            continue
        path = [start]
        iters = [iter(graph[start])]
        color[start] = GREY
        while iters:
            child = next(iters[-1], None)
            if child is None:
                color[path.pop()] = BLACK
                iters.pop()
            elif color.get(child, BLACK) == GREY:
                return path[path.index(child):] + [child]
            elif color.get(child) == WHITE:
                color[child] = GREY
                path.append(child)
                iters.append(iter(graph[child]))
    return []


def topological_order(roots: Iterable[K], deps: Callable[[K], Iterable[K]],
                      key: Callable[[K], object] = str) -> list[K]:
    """Dependencies before dependents; ties broken by ``key``.

    Raises DependencyCycle naming the members of a cycle if there is one.
    """
    graph = reachable(roots, deps)
    remaining = {n: len(set(children)) for n, children in graph.items()}
    dependents: dict[K, list[K]] = {n: [] for n in graph}
    for n, children in graph.items():
        for c in set(children):
            dependents[c].append(n)
    heap = [(key(n), i, n) for i, n in enumerate(graph) if remaining[n] == 0]
    heapq.heapify(heap)
    counter = len(graph)
    order = []
    while heap:
        _, _, node = heapq.heappop(heap)
        order.append(node)
        for parent in dependents[node]:
            remaining[parent] -= 1
            if remaining[parent] == 0:
                counter += 1
                heapq.heappush(heap, (key(parent), counter, parent))
    if len(order) != len(graph):
        left = {n: c for n, c in graph.items() if remaining[n] > 0}
        raise DependencyCycle(find_cycle(left) or sorted(left, key=key))
    return order
