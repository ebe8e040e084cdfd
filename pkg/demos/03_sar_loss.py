"""The shift-agreement loss on a small model, plus a finite-difference check.

Run: python demos/03_sar_loss.py
"""

import numpy as np

from hstsar import tensor as T
from hstsar.hst import HstModel, HstModelConfig, SequenceBatch
from hstsar.sar import SarConfig, bidirectional_kl, sar_step

print("symmetric KL of (0.5, 0.5) vs (0.25, 0.75):", bidirectional_kl([0.5, 0.5], [0.25, 0.75]))

cfg = HstModelConfig(n_base=9, g=1, w=2, d=8, layers=2, heads=2, vocab_size=10, num_classes=2,
                     dropout=0.0, attn_dropout=0.0)
model = HstModel.init(cfg)
rng = np.random.default_rng(1)
ids = rng.integers(3, 10, (4, 9))
ids[:, 0] = 2
batch = SequenceBatch.from_base(ids, rng.integers(0, 2, 4), cfg.g, cfg.w)

sar = SarConfig(alpha=1.0, roll_tokens=2)
out = sar_step(batch, model, cfg=sar)
print("loss parts:", out.as_dict())

# One coordinate of the hierarchical query weights, checked numerically.
p = model.named_parameters()["layers.1.hier.w_q"]
h = 1e-5
p.data[0, 0] += h
with T.no_grad():
    hi = sar_step(batch, model, cfg=sar, run_backward=False).total
p.data[0, 0] -= 2 * h
with T.no_grad():
    lo = sar_step(batch, model, cfg=sar, run_backward=False).total
p.data[0, 0] += h
print("analytic", p.grad[0, 0], "numeric", (hi - lo) / (2 * h))
