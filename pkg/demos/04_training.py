"""Train on a short ListOps-style task with and without the agreement term.

Takes under a minute. Run: python demos/04_training.py
"""

from hstsar.harness.tasks import SyntheticTaskSpec, generate
from hstsar.harness.train import TrainConfig, model_config_for_task, train
from hstsar.sar import SarConfig

spec = SyntheticTaskSpec(task="listops_mini", length=64, max_depth=2, train_size=1000, dev_size=200, test_size=200)
data = {s: generate(spec, s) for s in ("train", "dev", "test")}
model_cfg = model_config_for_task(spec, 1, 8, d=16, layers=2, heads=2, dropout=0.0, attn_dropout=0.0)
train_cfg = TrainConfig(lr=3e-3, batch_size=32, steps=100, warmup=0.05, decay="cosine")

for alpha in (0.0, 5.0):
    res = train(model_cfg, train_cfg, SarConfig(alpha=alpha, roll_tokens=2), None, datasets=data)
    print(f"alpha={alpha}: test accuracy {res.test.accuracy:.3f}, "
          f"default/shifted divergence {res.test.divergence:.4f}")
