#!/usr/bin/env python3
"""Regenerate crates/voltdac/data/feeder34.toml.

Usage: gen_feeder.py [scale]

Line data: classic 34-bus radial 11 kV test feeder (main feeder 1..12,
laterals at buses 3, 6, 7 and 10), with the substation mapped to bus 1 and
a short slack link 0-1 added so the controlled buses are 1..34. The scale
factor multiplies every impedance (r/x ratios preserved); the default is
calibrated so the bundled scenarios exercise the controller meaningfully.
"""
import sys

SCALE = float(sys.argv[1]) if len(sys.argv) > 1 else 1.0

# (from, to, r_ohm, x_ohm) at scale 1.
LINES = [
    (0, 1, 0.0922, 0.0470),
    (1, 2, 0.1170, 0.0480),
    (2, 3, 0.10725, 0.0440),
    (3, 4, 0.16445, 0.04565),
    (4, 5, 0.1495, 0.0415),
    (5, 6, 0.1495, 0.0415),
    (6, 7, 0.3144, 0.0540),
    (7, 8, 0.2096, 0.0360),
    (8, 9, 0.3144, 0.0540),
    (9, 10, 0.2096, 0.0360),
    (10, 11, 0.1310, 0.0225),
    (11, 12, 0.1048, 0.0180),
    (3, 13, 0.1572, 0.0270),
    (13, 14, 0.2096, 0.0360),
    (14, 15, 0.1048, 0.0180),
    (15, 16, 0.0524, 0.0090),
    (6, 17, 0.1794, 0.0498),
    (17, 18, 0.16445, 0.04565),
    (18, 19, 0.2079, 0.0473),
    (19, 20, 0.1890, 0.0430),
    (20, 21, 0.1890, 0.0430),
    (21, 22, 0.2620, 0.0450),
    (22, 23, 0.2620, 0.0450),
    (23, 24, 0.3144, 0.0540),
    (24, 25, 0.2096, 0.0360),
    (25, 26, 0.1310, 0.0225),
    (26, 27, 0.1048, 0.0180),
    (7, 28, 0.1572, 0.0270),
    (28, 29, 0.1572, 0.0270),
    (29, 30, 0.1572, 0.0270),
    (10, 31, 0.1572, 0.0270),
    (31, 32, 0.2096, 0.0360),
    (32, 33, 0.1572, 0.0270),
    (33, 34, 0.1048, 0.0180),
]

PV_SITES = [2, 3, 6, 10, 12, 13, 14, 16, 17, 19, 24, 31, 32, 34]

out = []
out.append("# 34-bus radial distribution feeder, 11 kV nominal.")
out.append("#")
out.append("# Derived from the classic 34-bus test feeder: main feeder buses 1-12,")
out.append("# laterals branching at buses 3 (13-16), 6 (17-27), 7 (28-30) and")
out.append("# 10 (31-34). Bus 0 is the slack; the 0-1 segment models the")
out.append(f"# substation link. Impedances carry a uniform x{SCALE:g} length scale")
out.append("# (r/x ratios unchanged); regenerate with tools/gen_feeder.py.")
out.append("")
out.append("v0_kv = 11.0")
out.append(f"buses = [{', '.join(str(b) for b in range(1, 35))}]")
out.append(f"pv_sites = [{', '.join(str(b) for b in PV_SITES)}]")
for f, t, r, x in LINES:
    out.append("")
    out.append("[[lines]]")
    out.append(f"from = {f}")
    out.append(f"to = {t}")
    out.append(f"r_ohm = {r * SCALE:.6g}")
    out.append(f"x_ohm = {x * SCALE:.6g}")

path = "crates/voltdac/data/feeder34.toml"
with open(path, "w") as fh:
    fh.write("\n".join(out) + "\n")
print(f"wrote {path} at scale {SCALE:g}")
