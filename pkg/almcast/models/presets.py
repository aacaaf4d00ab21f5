"""
Node-count presets (country tables) and zone-based link calibrations.

Regions are lowercase country names. Link parameters come from the zone of
each country; one-way latencies are chosen so that EH-OH round trips average
between roughly 70 ms and 900 ms.
"""

from typing import Dict, List, Tuple

# Ordered 40-OH list. Prefixes of it form the 3/10/20/30-node settings:
# 3 low-load European nodes; then more Europe, one US and one heavily loaded
# Asian node; then Asia, Canada and Europe with loaded Israel/Germany nodes;
# then Europe and US.
TABLE1_OH: List[Tuple[str, float]] = [
    ("romania", 0.05), ("hungary", 0.05), ("austria", 0.05),
    ("germany", 0.1), ("france", 0.1), ("italy", 0.1), ("poland", 0.1),
    ("spain", 0.1), ("us", 0.1), ("korea", 0.85),
    ("korea", 0.3), ("canada", 0.1), ("canada", 0.1), ("israel", 0.8),
    ("germany", 0.8), ("germany", 0.1), ("italy", 0.1), ("france", 0.1),
    ("greece", 0.1), ("switzerland", 0.1),
    ("germany", 0.1), ("germany", 0.1), ("germany", 0.1), ("italy", 0.1),
    ("italy", 0.1), ("poland", 0.1), ("romania", 0.1), ("spain", 0.1),
    ("us", 0.1), ("us", 0.1),
    ("germany", 0.1), ("germany", 0.1), ("germany", 0.1), ("italy", 0.1),
    ("italy", 0.1), ("france", 0.1), ("france", 0.1), ("poland", 0.1),
    ("us", 0.1), ("us", 0.1),
]

TABLE1_SIZES = (3, 10, 20, 30, 40)

# The printed table sums to 1010; France is trimmed from 110 to 100 so the
# full preset holds exactly 1000 nodes.
TABLE2_EH: List[Tuple[str, int]] = [
    ("argentina", 10), ("australia", 10), ("austria", 40), ("belgium", 20),
    ("canada", 100), ("china", 20), ("finland", 10), ("france", 100),
    ("germany", 160), ("greece", 10), ("hungary", 20), ("italy", 60),
    ("japan", 10), ("korea", 20), ("netherlands", 20), ("poland", 40),
    ("portugal", 10), ("romania", 20), ("russia", 20), ("spain", 40),
    ("switzerland", 10), ("taiwan", 10), ("us", 240),
]

TABLE2_SIZES = (10, 50, 100, 250, 500, 1000)

COUNTRY_ZONE: Dict[str, str] = {
    "argentina": "sa", "australia": "oc", "austria": "eu", "belgium": "eu",
    "canada": "na", "china": "asia", "finland": "eu", "france": "eu",
    "germany": "eu", "greece": "eu", "hungary": "eu", "israel": "me",
    "italy": "eu", "japan": "asia", "korea": "asia", "netherlands": "eu",
    "poland": "eu", "portugal": "eu", "romania": "eu", "russia": "eu",
    "spain": "eu", "switzerland": "eu", "taiwan": "asia", "us": "na",
}

# one-way base latency (ms) between zones
_ZONE_BASE_MS: Dict[Tuple[str, str], float] = {
    ("eu", "eu"): 25.0, ("eu", "na"): 55.0, ("eu", "sa"): 110.0,
    ("eu", "asia"): 130.0, ("eu", "oc"): 160.0, ("eu", "me"): 35.0,
    ("na", "na"): 30.0, ("na", "sa"): 80.0, ("na", "asia"): 90.0,
    ("na", "oc"): 95.0, ("na", "me"): 70.0,
    ("sa", "sa"): 30.0, ("sa", "asia"): 170.0, ("sa", "oc"): 160.0,
    ("sa", "me"): 130.0,
    ("asia", "asia"): 40.0, ("asia", "oc"): 60.0, ("asia", "me"): 100.0,
    ("oc", "oc"): 20.0, ("oc", "me"): 170.0,
    ("me", "me"): 10.0,
}

SLOW_TAIL_MS = 30000.0
TAIL_SYN_LOSS = 0.005

LINK_PRESETS = ("zones-fast", "zones-tail")


def _zone_pair(a: str, b: str) -> Tuple[str, str]:
    return (a, b) if (a, b) in _ZONE_BASE_MS else (b, a)


def _slow_probability(za: str, zb: str) -> float:
    zones = {za, zb}
    if zones & {"asia", "me"}:
        return 0.35
    if zones & {"sa", "oc"}:
        return 0.08
    if zones == {"eu"}:
        return 0.015
    if zones == {"na"}:
        return 0.03
    return 0.04


def zone_link_params(src: str, dst: str, preset: str) -> Dict[str, float]:
    """
    LinkModel field values for a country pair under a named link preset.

    Raises:
        KeyError: Either country has no zone
        ValueError: Unknown preset
    """
    if preset not in LINK_PRESETS:
        raise ValueError(f"unknown link preset '{preset}'")
    za, zb = COUNTRY_ZONE[src], COUNTRY_ZONE[dst]
    base = _ZONE_BASE_MS[_zone_pair(za, zb)]
    if src == dst:
        base = max(5.0, base / 2)
    params = {
        "base_latency_ms": base,
        "jitter_ms": round(base * 0.1, 3),
        "connect_fast_ms": 2 * base + 20.0,
        "slow_connect_probability": 0.0,
        "slow_connect_ms": 0.0,
        "syn_loss_probability": 0.0,
        "drop_probability": 0.0,
    }
    if preset == "zones-tail":
        params.update(
            slow_connect_probability=_slow_probability(za, zb),
            slow_connect_ms=SLOW_TAIL_MS,
            syn_loss_probability=TAIL_SYN_LOSS,
        )
    return params


def table1_nodes(count: int) -> List[Tuple[str, float]]:
    """First ``count`` entries of the ordered 40-OH list."""
    if not 1 <= count <= len(TABLE1_OH):
        raise ValueError(f"table1 preset supports 1..{len(TABLE1_OH)} OHs, got {count}")
    return TABLE1_OH[:count]


def table2_counts(total: int) -> List[Tuple[str, int]]:
    """
    Per-country EH counts scaled to ``total`` by largest remainder.

    Ties in the remainder go to the country listed first.
    """
    full = sum(n for _, n in TABLE2_EH)
    if not 1 <= total <= full:
        raise ValueError(f"table2 preset supports 1..{full} EHs, got {total}")
    quotas = [(country, n * total / full) for country, n in TABLE2_EH]
    counts = {country: int(q) for country, q in quotas}
    leftover = total - sum(counts.values())
    by_remainder = sorted(
        range(len(quotas)), key=lambda i: (-(quotas[i][1] - int(quotas[i][1])), i)
    )
    for i in by_remainder[:leftover]:
        counts[quotas[i][0]] += 1
    return [(country, counts[country]) for country, _ in TABLE2_EH if counts[country]]


def parse_node_preset(name: str) -> Tuple[str, int]:
    """Split ``table1-40oh`` / ``table2-1000eh`` into (table, count)."""
    table, _, size = name.partition("-")
    suffix = {"table1": "oh", "table2": "eh"}.get(table)
    if suffix is None or not size.endswith(suffix) or not size[: -len(suffix)].isdigit():
        raise ValueError(f"unknown node preset '{name}'")
    return table, int(size[: -len(suffix)])


# sub-group count per OH-set size; every group gets n_oh / groups OHs
TABLE3_GROUPS: Dict[int, int] = {3: 3, 10: 5, 20: 5, 30: 5, 40: 5}


def table3_group_count(n_oh: int) -> int:
    """Sub-group count for ``n_oh`` OHs; other sizes get at most 5 groups of at least 8 OHs."""
    if n_oh in TABLE3_GROUPS:
        return TABLE3_GROUPS[n_oh]
    return max(1, min(5, n_oh // 8 or 1))
