"""Block-sparse topologies and how information crosses block boundaries.

Run: python demos/01_topology.py
"""

from hstsar.analysis import flow_report
from hstsar.topology import build_topology, path_count

# Seven tokens: one global followed by three blocks of two.
st = build_topology(7, g=1, w=2)
print("sparse mask (row = destination):")
for row in st.mask:
    print("  " + "".join("#" if x else "." for x in row))

# Token 1 (block 0) reaches token 5 (block 2) only by way of the global.
rep = flow_report(st, layers=2)
print("cross-block depth:", rep.cross_block_min_depth(st), "relays:", rep.relays)

# Adding a representative per block and letting representatives talk densely
# opens m extra relays.
hst = build_topology(7, g=1, w=2, insert_reps=True)
print("representatives at", hst.rep_positions)
rep_h = flow_report(hst, layers=2, hierarchical=True)
print("bottleneck width: sparse", rep.bottleneck_width, "| hierarchical", rep_h.bottleneck_width)
src, dst = 2, 8
print(f"2-layer paths {src}->{dst}: sparse {path_count(hst, 2, src, dst)}, "
      f"hierarchical {path_count(hst, 2, src, dst, hierarchical=True)}")
