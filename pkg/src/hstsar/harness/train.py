"""Training loop, evaluation and the global-token bottleneck sweep."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import tensor as T
from ..attention import EVAL, TRAIN
from ..errors import ConfigurationError, DivergenceError
from ..hst import GLOBAL_ID, PAD_ID, HstModel, HstModelConfig, Roll, SequenceBatch, model_forward, save_checkpoint
from ..sar import SarConfig, bidirectional_kl, sar_step
from ..topology import required_padding
from .optim import Adam, Decay, learning_rate
from .tasks import SPLITS, generate


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 32
    steps: int = 1000
    warmup: float = 0  # whole steps, or a fraction of all steps when in (0, 1)
    decay: Decay = Decay.NONE
    weight_decay: float = 0.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_every: int = 0  # 0: evaluate once, after the last step
    eval_batch_size: int = 250

    def __post_init__(self):
        self.decay = Decay(self.decay)
        # lr == 0 is allowed so a run can be checked to leave parameters untouched
        if not self.lr >= 0:
            raise ConfigurationError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.steps < 0 or self.warmup < 0 or self.eval_every < 0:
            raise ConfigurationError("steps, warmup and eval_every must be non-negative")

    def warmup_steps(self, total):
        if 0 < self.warmup < 1:
            return int(round(self.warmup * total))
        return int(self.warmup)

    def to_dict(self):
        d = asdict(self)
        d["decay"] = self.decay.value
        return d


@dataclass
class TrainRecord:
    step: int
    lr: float
    nll: float
    sar: float
    total: float
    eval_accuracy: float
    eval_divergence: float
    wall_clock: float = 0.0
    samples_per_sec: float = 0.0

    def metrics(self):
        """The deterministic part; timing lives in a separate file."""
        d = asdict(self)
        del d["wall_clock"], d["samples_per_sec"]
        return d


@dataclass
class EvalResult:
    accuracy: float
    divergence: float
    count: int
    probs: np.ndarray = field(repr=False, default=None)


@dataclass
class TrainResult:
    model: HstModel
    history: list
    final: TrainRecord
    test: EvalResult
    out_dir: Path | None = None


# ---------------------------------------------------------------------------
# data encoding


def content_length(length, w):
    return length + (-length) % w


def model_config_for_task(task_spec, g, w, **kw):
    """Model config whose input size, vocabulary and classes fit ``task_spec``."""
    n_base = g + content_length(task_spec.length, w)
    return HstModelConfig(n_base=n_base, g=g, w=w, vocab_size=task_spec.vocab,
                          num_classes=task_spec.num_classes, **kw)


def encode_dataset(ds, g, w):
    """Prepend ``g`` global tokens, PAD the content to a multiple of ``w``, insert reps."""
    ids = np.asarray(ds.ids, dtype=np.int64)
    pad = (-ids.shape[1]) % w
    if pad:
        ids = np.concatenate([ids, np.full((len(ids), pad), PAD_ID, dtype=np.int64)], axis=1)
    base = np.concatenate([np.full((len(ids), g), GLOBAL_ID, dtype=np.int64), ids], axis=1)
    assert required_padding(base.shape[1], g, w) == 0
    return SequenceBatch.from_base(base, ds.labels, g, w)


# ---------------------------------------------------------------------------
# evaluation


def _as_roll(roll):
    if roll is None or isinstance(roll, Roll):
        return roll
    if isinstance(roll, SarConfig):
        return roll.second_pass_roll()
    return Roll(int(roll))


def evaluate(model, batch, topo=None, roll=None, batch_size=250):
    """Eval-mode accuracy and mean bidirectional KL between default and rolled passes.

    ``roll`` is a :class:`Roll`, a token count, a :class:`SarConfig` or None.
    Without a (non-zero) roll the divergence is exactly 0.
    """
    roll = _as_roll(roll)
    if roll is not None and roll.k == 0:
        roll = None
    correct = 0
    div = 0.0
    probs = []
    with T.no_grad():
        for lo in range(0, len(batch), batch_size):
            sub = batch.subset(slice(lo, lo + batch_size))
            p1 = model_forward(sub, model, topo, EVAL).data
            probs.append(p1)
            correct += int((p1.argmax(axis=1) == sub.labels).sum())
            if roll is not None:
                p2 = model_forward(sub, model, topo, EVAL, roll=roll).data
                div += float(np.sum(bidirectional_kl(p1, p2)))
    n = len(batch)
    return EvalResult(correct / n, div / n, n, np.concatenate(probs) if probs else None)


# ---------------------------------------------------------------------------
# training


class _Sampler:
    """Endless stream of indices drawn epoch by epoch without replacement."""

    def __init__(self, n, rng):
        self.n, self.rng, self.buf = n, rng, np.empty(0, dtype=np.int64)

    def take(self, k):
        while len(self.buf) < k:
            self.buf = np.concatenate([self.buf, self.rng.permutation(self.n)])
        out, self.buf = self.buf[:k], self.buf[k:]
        return out


def _write_json(path, obj):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def train(model_cfg, train_cfg, sar_cfg=None, task_spec=None, out_dir=None, *, datasets=None, log=None):
    """Train a fresh model and evaluate it on the test split.

    With SAR enabled (and ``double_steps``) each optimizer step sees half a
    batch of distinct examples, both passes of which enter the loss, and the
    step count doubles; the sample budget is unchanged.

    ``datasets`` maps split names to :class:`Dataset` and overrides
    generation from ``task_spec``. When ``out_dir`` is given, writes
    ``metrics.jsonl`` (deterministic), ``timing.jsonl``, ``summary.csv``,
    ``config.json`` and ``checkpoint/``.
    """
    sar_cfg = sar_cfg or SarConfig(enabled=False)
    if datasets is None:
        if task_spec is None:
            raise ConfigurationError("train needs a task spec or explicit datasets")
        datasets = {s: generate(task_spec, s) for s in SPLITS}
    enc = {s: encode_dataset(d, model_cfg.g, model_cfg.w) for s, d in datasets.items()}
    model = HstModel.init(model_cfg)
    topo = model.topology
    for s, b in enc.items():
        if b.ids.shape[1] != topo.n:
            raise ConfigurationError(
                f"{s} split encodes to length {b.ids.shape[1]}, model expects {topo.n}"
            )
    sar_cfg.validate(topo.n, model_cfg.layers)

    steps, per_step = train_cfg.steps, train_cfg.batch_size
    if sar_cfg.doubles_steps:
        steps, per_step = 2 * steps, max(1, per_step // 2)
    warmup = train_cfg.warmup_steps(steps)
    order_rng = np.random.default_rng([train_cfg.seed, 11])
    drop_rng = np.random.default_rng([train_cfg.seed, 23])
    sampler = _Sampler(len(enc["train"]), order_rng)
    opt = Adam(model.parameters(), (train_cfg.beta1, train_cfg.beta2), train_cfg.eps, train_cfg.weight_decay)
    eval_split = "dev" if "dev" in enc else "test"

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_json(out_dir / "config.json", {
            "model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "sar": asdict(sar_cfg),
            "task": task_spec.to_dict() if task_spec is not None else None,
        })
        metrics_fh = open(out_dir / "metrics.jsonl", "w")
        timing_fh = open(out_dir / "timing.jsonl", "w")

    history = []
    acc = np.zeros(3)
    seen = 0
    t0 = time.perf_counter()
    last_t, last_seen = t0, 0
    lr = 0.0
    try:
        for step in range(1, steps + 1):
            batch = enc["train"].subset(sampler.take(per_step))
            T.reset_tape()
            model.zero_grad()
            loss = sar_step(batch, model, topo, sar_cfg, TRAIN, drop_rng)
            if not math.isfinite(loss.total):
                diag = {"step": step, "lr": lr, **loss.as_dict(),
                        "max_abs_param": max(float(np.max(np.abs(p.data))) for p in model.parameters())}
                if out_dir is not None:
                    _write_json(out_dir / "divergence.json", diag)
                raise DivergenceError(f"non-finite loss at step {step}", diag)
            lr = learning_rate(step, train_cfg.lr, warmup, steps, train_cfg.decay)
            opt.step(lr)
            acc += (loss.nll, loss.sar, loss.total)
            seen += len(batch)
            if step == steps or (train_cfg.eval_every and step % train_cfg.eval_every == 0):
                ev = evaluate(model, enc[eval_split], topo, sar_cfg.second_pass_roll(), train_cfg.eval_batch_size)
                now = time.perf_counter()
                interval = step - (history[-1].step if history else 0)
                mean = acc / interval
                rec = TrainRecord(step, lr, float(mean[0]), float(mean[1]), float(mean[2]),
                                  ev.accuracy, ev.divergence, now - t0,
                                  (seen - last_seen) / max(now - last_t, 1e-12))
                history.append(rec)
                acc[:] = 0
                last_t, last_seen = now, seen
                if log:
                    log(rec)
                if out_dir is not None:
                    metrics_fh.write(json.dumps(rec.metrics()) + "\n")
                    timing_fh.write(json.dumps({"step": step, "wall_clock": rec.wall_clock,
                                                "samples_per_sec": rec.samples_per_sec}) + "\n")
    finally:
        T.reset_tape()
        if out_dir is not None:
            metrics_fh.close()
            timing_fh.close()

    if not history:  # zero steps
        ev = evaluate(model, enc[eval_split], topo, sar_cfg.second_pass_roll(), train_cfg.eval_batch_size)
        history.append(TrainRecord(0, 0.0, 0.0, 0.0, 0.0, ev.accuracy, ev.divergence))
    test = evaluate(model, enc["test"], topo, sar_cfg.second_pass_roll(), train_cfg.eval_batch_size)
    if out_dir is not None:
        final = history[-1]
        with open(out_dir / "summary.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "nll", "sar", "total", "eval_accuracy", "eval_divergence",
                        "test_accuracy", "test_divergence"])
            w.writerow([final.step, repr(final.nll), repr(final.sar), repr(final.total),
                        repr(final.eval_accuracy), repr(final.eval_divergence),
                        repr(test.accuracy), repr(test.divergence)])
        save_checkpoint(model, out_dir / "checkpoint")
    return TrainResult(model, history, history[-1], test, out_dir)


# ---------------------------------------------------------------------------
# bottleneck sweep

SWEEP_COLUMNS = ("model", "g", "mean_acc", "std_acc")


@dataclass
class SweepReport:
    rows: list  # (model, g, mean_acc, std_acc)
    cells: dict  # (model, g) -> list of per-seed test accuracies

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for model, g, mean, std in self.rows:
            w.writerow([model, g, f"{mean:.6f}", f"{std:.6f}"])
        return buf.getvalue()


def _run_cell(args):
    name, g, seed, model_kw, train_cfg, sar_cfg, task_spec = args
    mcfg = model_config_for_task(task_spec, g, hierarchical_enabled=(name == "HST"), init_seed=seed, **model_kw)
    res = train(mcfg, replace(train_cfg, seed=seed), sar_cfg, task_spec)
    return res.test.accuracy


def bottleneck_sweep(model_kw, train_cfg, task_spec, g_values, repeats=2, sar_cfg=None, workers=1,
                     models=("ST", "HST")):
    """Train ST and HST at every ``g`` for ``repeats`` seeds and tabulate test accuracy.

    ``model_kw`` holds model settings other than ``g``, ``n_base``,
    ``vocab_size``, ``num_classes`` and ``hierarchical_enabled``; it must
    include ``w``. Seeds are ``train_cfg.seed + r``. The standard deviation
    is the population one (ddof 0). ``workers > 1`` runs cells in separate
    processes; results do not depend on it.
    """
    if repeats < 1:
        raise ConfigurationError("repeats must be >= 1")
    model_kw = dict(model_kw)
    for key in ("g", "n_base", "vocab_size", "num_classes", "hierarchical_enabled", "init_seed"):
        if key in model_kw:
            raise ConfigurationError(f"sweep sets {key!r} itself")
    jobs = [(name, g, train_cfg.seed + r, model_kw, train_cfg, sar_cfg, task_spec)
            for name in models for g in g_values for r in range(repeats)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            accs = list(ex.map(_run_cell, jobs))
    else:
        accs = [_run_cell(j) for j in jobs]
    cells = {}
    for job, a in zip(jobs, accs):
        cells.setdefault((job[0], job[1]), []).append(a)
    rows = [(name, g, float(np.mean(v)), float(np.std(v))) for (name, g), v in cells.items()]
    return SweepReport(rows, cells)
