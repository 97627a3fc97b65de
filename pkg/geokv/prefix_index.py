"""Token-block radix trie recording which nodes have served which prompt prefixes.

Only ownership is tracked, never KV contents. Edges carry fixed-size token blocks, so match
lengths round down to a block boundary unless the whole query matched.
"""

from __future__ import annotations

import heapq
import itertools
from collections import deque
from collections.abc import Callable, Iterator, Sequence

from pydantic import BaseModel, ConfigDict, Field

from geokv._logger import logger

DEFAULT_BLOCK_SIZE = 16
DEFAULT_CAPACITY_BLOCKS = 2**16

Block = tuple[int, ...]

EvictionHook = Callable[[tuple[int, ...]], None]
"""Called with the full token path of every block dropped by LRU eviction."""


class MatchResult(BaseModel):
    """Longest stored prefix of a query and the nodes owning it."""

    model_config = ConfigDict(frozen=True)

    match_len: int = Field(ge=0)
    holders: frozenset[str] = frozenset()


class _TrieNode:
    __slots__ = ("children", "holders", "key", "last_touch", "parent", "serial")

    def __init__(self, key: Block, parent: _TrieNode | None, serial: int) -> None:
        self.key = key
        self.parent = parent
        self.serial = serial
        self.children: dict[Block, _TrieNode] = {}
        self.holders: dict[str, int] = {}
        self.last_touch = -1


class PrefixIndex:
    """Radix trie over token blocks with LRU eviction of leaves.

    Single-writer: callers serialise mutations against queries.
    """

    def __init__(
        self,
        block_size: int = DEFAULT_BLOCK_SIZE,
        capacity_blocks: int = DEFAULT_CAPACITY_BLOCKS,
        on_evict: EvictionHook | None = None,
    ) -> None:
        if block_size < 1:
            raise ValueError(f"block_size must be >= 1, got {block_size}")
        if capacity_blocks < 1:
            raise ValueError(f"capacity_blocks must be >= 1, got {capacity_blocks}")
        self.block_size = block_size
        self.capacity_blocks = capacity_blocks
        self.on_evict = on_evict
        self._serials = itertools.count()
        self._root = _TrieNode((), None, next(self._serials))
        self._total_blocks = 0
        # (last_touch, serial, push seq, node); entries go stale when a node is touched again or detached
        self._lru: list[tuple[int, int, int, _TrieNode]] = []
        self._pushes = itertools.count()

    @property
    def total_blocks(self) -> int:
        return self._total_blocks

    def _blocks(self, tokens: Sequence[int]) -> Iterator[Block]:
        size = self.block_size
        for start in range(0, len(tokens), size):
            yield tuple(tokens[start : start + size])

    def insert(self, tokens: Sequence[int], node_id: str, now: int) -> None:
        """Record that ``node_id`` served ``tokens`` at logical time ``now``."""
        if not tokens:
            raise ValueError("cannot index an empty token sequence")

        node = self._root
        for key in self._blocks(tokens):
            child = node.children.get(key)
            if child is None:
                child = _TrieNode(key, node, next(self._serials))
                node.children[key] = child
                self._total_blocks += 1
            child.holders[node_id] = max(now, child.holders.get(node_id, now))
            if now > child.last_touch:
                child.last_touch = now
                self._push(child)
            node = child

        if len(self._lru) > 4 * self._total_blocks + 64:
            self._rebuild_lru()
        self.evict_to_capacity(now)

    def _descend(self, tokens: Sequence[int]) -> Iterator[tuple[int, list[_TrieNode]]]:
        """Yield (matched length, owning nodes) for each successively longer stored prefix of ``tokens``."""
        node = self._root
        matched = 0
        for key in self._blocks(tokens):
            if len(key) == self.block_size:
                child = node.children.get(key)
                if child is None:
                    return
                matched += len(key)
                yield matched, [child]
                node = child
            else:
                # partial tail block: any stored block starting with it covers the rest of the query
                covering = [c for k, c in node.children.items() if k[: len(key)] == key]
                if covering:
                    yield matched + len(key), covering
                return

    def longest_prefix_match(self, tokens: Sequence[int]) -> MatchResult:
        deepest = deque(self._descend(tokens), maxlen=1)
        if not deepest:
            return MatchResult(match_len=0)
        match_len, owners = deepest[0]
        holders = frozenset(h for owner in owners for h in owner.holders)
        return MatchResult(match_len=match_len, holders=holders)

    def overlap_for_node(self, tokens: Sequence[int], node_id: str) -> int:
        """Longest stored prefix of ``tokens`` owned by ``node_id``; 0 when the node is unknown."""
        best = 0
        for match_len, owners in self._descend(tokens):
            if any(node_id in owner.holders for owner in owners):
                best = match_len
            else:
                break
        return best

    def evict_to_capacity(self, now: int) -> int:
        """Drop least-recently touched leaves until the trie fits its capacity.

        Returns the number of evicted blocks.
        """
        evicted = 0
        while self._total_blocks > self.capacity_blocks:
            if not self._lru:
                self._rebuild_lru()
            touch, _, _, node = heapq.heappop(self._lru)
            parent = node.parent
            if parent is None or node.children or touch != node.last_touch:
                continue
            path = self._path(node) if self.on_evict is not None else ()
            del parent.children[node.key]
            node.parent = None
            self._total_blocks -= 1
            evicted += 1
            if parent is not self._root and not parent.children:
                self._push(parent)
            if self.on_evict is not None:
                self.on_evict(path)
        if evicted:
            logger.debug(f"Evicted {evicted} prefix blocks at t={now} ({self._total_blocks} remain)")
        return evicted

    def forget(self, tokens: Sequence[int], node_id: str) -> int:
        """Withdraw ``node_id``'s claim on the stored path ``tokens`` and everything below it.

        Blocks stay in the trie for other holders. Returns the number of blocks released.
        """
        node = self._root
        for key in self._blocks(tokens):
            child = node.children.get(key)
            if child is None:
                return 0
            node = child
        if node is self._root:
            return 0

        released = 0
        stack = [node]
        while stack:
            current = stack.pop()
            if current.holders.pop(node_id, None) is not None:
                released += 1
            stack.extend(current.children.values())
        return released

    def _path(self, node: _TrieNode) -> tuple[int, ...]:
        keys: list[Block] = []
        current: _TrieNode | None = node
        while current is not None and current is not self._root:
            keys.append(current.key)
            current = current.parent
        return tuple(token for key in reversed(keys) for token in key)

    def _push(self, node: _TrieNode) -> None:
        heapq.heappush(self._lru, (node.last_touch, node.serial, next(self._pushes), node))

    def _rebuild_lru(self) -> None:
        self._lru = [(n.last_touch, n.serial, next(self._pushes), n) for n in self._iter_nodes() if not n.children]
        heapq.heapify(self._lru)

    def _iter_nodes(self) -> Iterator[_TrieNode]:
        stack = list(self._root.children.values())
        while stack:
            node = stack.pop()
            yield node
            stack.extend(node.children.values())

    def dump(self) -> str:
        """Line-oriented debug view: ``path-tokens -> holder@touch,...`` in sorted path order."""
        lines: list[str] = []

        def walk(node: _TrieNode, path: tuple[int, ...]) -> None:
            for key in sorted(node.children):
                child = node.children[key]
                child_path = path + key
                holders = ",".join(f"{h}@{t}" for h, t in sorted(child.holders.items()))
                lines.append(f"{','.join(map(str, child_path))} -> {holders}")
                walk(child, child_path)

        walk(self._root, ())
        return "\n".join(lines)
