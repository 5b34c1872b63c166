"""Binary trie over IPv6 prefixes.

Lookups walk at most 128 bits regardless of how many prefixes are stored,
which keeps hitlist filtering and ASN enrichment linear in the number of
addresses.
"""
from __future__ import annotations

import ipaddress
from typing import Generic, Iterator, Optional, Tuple, TypeVar, Union

V = TypeVar("V")

AddressLike = Union[str, int, ipaddress.IPv6Address]
PrefixLike = Union[str, ipaddress.IPv6Network]

_MISSING = object()


def as_network(prefix: PrefixLike) -> ipaddress.IPv6Network:
    if isinstance(prefix, ipaddress.IPv6Network):
        return prefix
    net = ipaddress.ip_network(prefix, strict=False)
    if not isinstance(net, ipaddress.IPv6Network):
        raise ValueError(f"not an IPv6 prefix: {prefix!r}")
    return net


def as_int(address: AddressLike) -> int:
    if isinstance(address, int):
        return address
    if isinstance(address, str):
        address = ipaddress.IPv6Address(address)
    return int(address)


class _Node:
    __slots__ = ("zero", "one", "value")

    def __init__(self) -> None:
        self.zero: Optional[_Node] = None
        self.one: Optional[_Node] = None
        self.value: object = _MISSING


class PrefixTrie(Generic[V]):
    """Maps IPv6 prefixes to values and answers longest-prefix-match queries."""

    def __init__(self) -> None:
        self._root = _Node()
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def insert(self, prefix: PrefixLike, value: V = None) -> None:  # type: ignore[assignment]
        net = as_network(prefix)
        bits = int(net.network_address)
        node = self._root
        for i in range(net.prefixlen):
            if (bits >> (127 - i)) & 1:
                if node.one is None:
                    node.one = _Node()
                node = node.one
            else:
                if node.zero is None:
                    node.zero = _Node()
                node = node.zero
        if node.value is _MISSING:
            self._size += 1
        node.value = value

    def longest_match(
        self, address: AddressLike
    ) -> Optional[Tuple[ipaddress.IPv6Network, V]]:
        """Return ``(prefix, value)`` of the most specific covering prefix, or None."""
        bits = as_int(address)
        node: Optional[_Node] = self._root
        best_len = -1
        best_val: object = _MISSING
        depth = 0
        while node is not None:
            if node.value is not _MISSING:
                best_len, best_val = depth, node.value
            if depth == 128:
                break
            node = node.one if (bits >> (127 - depth)) & 1 else node.zero
            depth += 1
        if best_len < 0:
            return None
        net = ipaddress.IPv6Network((bits, best_len), strict=False)
        return net, best_val  # type: ignore[return-value]

    def lookup(self, address: AddressLike, default: Optional[V] = None) -> Optional[V]:
        hit = self.longest_match(address)
        return default if hit is None else hit[1]

    def covers(self, address: AddressLike) -> bool:
        return self.longest_match(address) is not None

    def covers_prefix(self, prefix: PrefixLike) -> bool:
        """True when some stored prefix contains (or equals) ``prefix``."""
        net = as_network(prefix)
        bits = int(net.network_address)
        node: Optional[_Node] = self._root
        for depth in range(net.prefixlen + 1):
            if node is None:
                return False
            if node.value is not _MISSING:
                return True
            if depth == net.prefixlen:
                break
            node = node.one if (bits >> (127 - depth)) & 1 else node.zero
        return False

    def __iter__(self) -> Iterator[Tuple[ipaddress.IPv6Network, V]]:
        stack = [(self._root, 0, 0)]
        while stack:
            node, bits, depth = stack.pop()
            if node.value is not _MISSING:
                yield ipaddress.IPv6Network((bits << (128 - depth), depth)), node.value  # type: ignore[misc]
            if node.one is not None:
                stack.append((node.one, (bits << 1) | 1, depth + 1))
            if node.zero is not None:
                stack.append((node.zero, bits << 1, depth + 1))


def minimal_cover(prefixes) -> list[ipaddress.IPv6Network]:
    """Drop every prefix that is contained in another prefix of the input."""
    nets = sorted({as_network(p) for p in prefixes}, key=lambda n: (n.prefixlen, int(n.network_address)))
    trie: PrefixTrie[None] = PrefixTrie()
    kept = []
    for net in nets:
        if not trie.covers_prefix(net):
            trie.insert(net)
            kept.append(net)
    return sorted(kept, key=lambda n: (int(n.network_address), n.prefixlen))
