"""Why a hitlist needs alias filtering, shown on a simulated /48.

    python3 demos/alias_detection.py

Inside 2001:db8:5::/48 a single /64 answers on every address (the farm's
AliasAll mode), while a handful of real hosts elsewhere in the /48 answer
only for themselves. Scanning the raw hitlist would count every address
in the aliased /64 as a separate device.
"""
import ipaddress
import random

from iot6scan.mockfarm import Behavior, FarmConfig, Listener, start_farm
from iot6scan.protocols import by_name
from iot6scan.targetprep import (
    AliasedPrefixSet,
    Hitlist,
    candidate_prefixes,
    detect_aliased_prefixes,
    filter_targets,
)

site = ipaddress.IPv6Network("2001:db8:5::/48")
aliased = ipaddress.IPv6Network("2001:db8:5:7::/64")
rng = random.Random(0)
hitlist = [aliased[rng.getrandbits(64)] for _ in range(200)]
real_hosts = {a for a in (site[rng.getrandbits(80)] for _ in range(15)) if a not in aliased}
hitlist += sorted(real_hosts)
print(f"hitlist: {len(hitlist)} addresses, {len(real_hosts)} of them real hosts")

farm = start_farm(FarmConfig([Listener(by_name("telnet"), Behavior.alias_all(str(aliased)))]))
try:
    farm_answers = farm.alias_prober()

    def prober(addr):
        return farm_answers(addr) or addr in real_hosts

    levels = range(48, 125, 4)
    candidates = candidate_prefixes(hitlist, levels)
    print(f"{len(candidates)} candidate prefixes between /48 and /124")
    found = detect_aliased_prefixes(candidates, prober, levels=levels, seed=0)
    print(f"probes answered by the aliased /64: {sum(farm.hits.values())}")
finally:
    farm.stop()

print("aliased prefixes:", ", ".join(map(str, found.prefixes)))
report = {}
kept = filter_targets(Hitlist(hitlist), AliasedPrefixSet(found.prefixes), None, report)
print(f"after filtering: {report['kept']} addresses kept, {report['removed_aliased']} removed as aliased")
assert set(kept.entries) == real_hosts
