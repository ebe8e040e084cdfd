"""A miniature global-count sweep and the attention cost table.

Takes a few seconds. Run: python demos/05_sweep_and_costs.py
"""

from hstsar.analysis import flop_table
from hstsar.harness.tasks import SyntheticTaskSpec
from hstsar.harness.train import TrainConfig, bottleneck_sweep

spec = SyntheticTaskSpec(length=16, block_width=4, train_size=500, dev_size=100, test_size=200)
report = bottleneck_sweep(dict(w=4, d=16, layers=2, heads=2, dropout=0.0, attn_dropout=0.0),
                          TrainConfig(lr=3e-3, batch_size=32, steps=150), spec, g_values=[0, 1], repeats=1)
print(report.to_csv())

# Extra cost of the representative pass is m^2 d on top of the sparse count.
print(flop_table([{"n": n, "g": 1, "w": 64, "d": 64} for n in (256, 1024, 4096)]))
