import json

import numpy as np
import pytest

from hstsar import tensor as T
from hstsar.errors import ConfigurationError, DivergenceError, ParseError
from hstsar.harness.config import build_config, load_config, output_root, parse_override
from hstsar.harness.tasks import Dataset, SyntheticTaskSpec, generate
from hstsar.harness.train import (
    TrainConfig,
    bottleneck_sweep,
    encode_dataset,
    evaluate,
    model_config_for_task,
    train,
)
from hstsar.hst import GLOBAL_ID, PAD_ID, REP_ID, HstModel, load_checkpoint
from hstsar.sar import SarConfig


@pytest.fixture(autouse=True)
def _fresh_tape():
    T.reset_tape()
    yield
    T.reset_tape()


SPEC = SyntheticTaskSpec(length=16, block_width=4, train_size=64, dev_size=32, test_size=32)


def tiny(g=1, **kw):
    kw = {"d": 8, "layers": 1, "heads": 2, "dropout": 0.0, "attn_dropout": 0.0, **kw}
    return model_config_for_task(SPEC, g, 4, **kw)


def test_encode_dataset_layout():
    ds = Dataset(np.array([[5, 6, 7, 0, 0]]), np.array([1]))
    b = encode_dataset(ds, g=2, w=3)
    # globals, then blocks [rep, 5, 6, 7] [rep, PAD, PAD, PAD]
    assert b.ids.tolist() == [[GLOBAL_ID, GLOBAL_ID, REP_ID, 5, 6, 7, REP_ID, PAD_ID, PAD_ID, PAD_ID]]
    assert b.rep_positions == (2, 6)
    assert b.valid.tolist() == [[True] * 6 + [False] * 4]


def test_zero_lr_keeps_parameters_bit_identical():
    cfg = tiny()
    before = {k: p.data.copy() for k, p in HstModel.init(cfg).named_parameters().items()}
    res = train(cfg, TrainConfig(lr=0.0, batch_size=8, steps=3), None, SPEC)
    for k, p in res.model.named_parameters().items():
        assert np.array_equal(p.data, before[k]), k


def test_metrics_files_are_reproducible(tmp_path):
    cfg = tiny(dropout=0.1, attn_dropout=0.1)
    tc = TrainConfig(lr=1e-2, batch_size=8, steps=6, eval_every=2, warmup=2, decay="root_square")
    sar = SarConfig(alpha=1.0, roll_tokens=1)
    for run in ("a", "b"):
        train(cfg, tc, sar, SPEC, tmp_path / run)
    for name in ("metrics.jsonl", "summary.csv", "config.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    records = [json.loads(line) for line in (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in records] == [2, 4, 6, 8, 10, 12]  # SAR doubles the steps
    assert "wall_clock" not in records[0]
    timing = (tmp_path / "a" / "timing.jsonl").read_text().splitlines()
    assert len(timing) == 6 and "samples_per_sec" in json.loads(timing[0])
    model = load_checkpoint(tmp_path / "a" / "checkpoint")
    assert model.config == cfg


def test_sar_halves_batches_and_doubles_steps():
    res = train(tiny(), TrainConfig(lr=1e-3, batch_size=8, steps=3), SarConfig(alpha=1.0, roll_tokens=1), SPEC)
    assert res.final.step == 6
    res = train(tiny(), TrainConfig(lr=1e-3, batch_size=8, steps=3),
                SarConfig(alpha=1.0, roll_tokens=1, double_steps=False), SPEC)
    assert res.final.step == 3


def test_divergence_aborts_with_record(tmp_path):
    with np.errstate(all="ignore"), pytest.raises(DivergenceError) as info:
        train(tiny(), TrainConfig(lr=1e300, batch_size=8, steps=5), None, SPEC, tmp_path)
    assert info.value.record["step"] >= 2
    assert json.loads((tmp_path / "divergence.json").read_text())["step"] == info.value.record["step"]


def test_length_mismatch_is_rejected():
    cfg = model_config_for_task(SyntheticTaskSpec(length=32, block_width=4), 1, 4, d=8, layers=1, heads=2)
    with pytest.raises(ConfigurationError, match="expects"):
        train(cfg, TrainConfig(steps=1), None, SPEC)


def test_evaluate_constant_correct_model_and_zero_roll():
    cfg = tiny()
    model = HstModel.init(cfg)
    model.ln_f_g.data[:] = 0.0
    model.ln_f_b.data[:] = 1.0
    model.w_out.data[:] = 0.0
    model.w_out.data[:, 1] = 1.0
    ds = generate(SPEC, "test")
    ds = Dataset(ds.ids, np.ones_like(ds.labels))
    res = evaluate(model, encode_dataset(ds, cfg.g, cfg.w), roll=3)
    assert res.accuracy == 1.0
    assert evaluate(model, encode_dataset(ds, cfg.g, cfg.w), roll=0).divergence == 0.0


def test_untrained_model_has_positive_divergence():
    spec = SyntheticTaskSpec(length=8, block_width=2, train_size=1, dev_size=1, test_size=20)
    cfg = model_config_for_task(spec, 1, 2, d=8, layers=2, heads=2)
    batch = encode_dataset(generate(spec, "test"), 1, 2)
    assert evaluate(HstModel.init(cfg), batch, roll=1).divergence > 0


def test_sweep_is_deterministic_and_tabulates_both_models():
    tc = TrainConfig(lr=1e-2, batch_size=8, steps=2)
    kw = {"w": 4, "d": 8, "layers": 1, "heads": 2, "dropout": 0.0, "attn_dropout": 0.0}
    a = bottleneck_sweep(kw, tc, SPEC, [0, 1], repeats=2)
    b = bottleneck_sweep(kw, tc, SPEC, [0, 1], repeats=2)
    assert a.to_csv() == b.to_csv()
    lines = a.to_csv().splitlines()
    assert lines[0] == "model,g,mean_acc,std_acc"
    assert [tuple(line.split(",")[:2]) for line in lines[1:]] == [("ST", "0"), ("ST", "1"), ("HST", "0"), ("HST", "1")]
    for (name, g), accs in a.cells.items():
        assert len(accs) == 2
    with pytest.raises(ConfigurationError):
        bottleneck_sweep({**kw, "g": 1}, tc, SPEC, [0])


def test_sweep_workers_do_not_change_results():
    tc = TrainConfig(lr=1e-2, batch_size=8, steps=2)
    kw = {"w": 4, "d": 8, "layers": 1, "heads": 2}
    assert (bottleneck_sweep(kw, tc, SPEC, [1], repeats=1, workers=2).to_csv()
            == bottleneck_sweep(kw, tc, SPEC, [1], repeats=1).to_csv())


# ---------------------------------------------------------------------------
# configuration


def test_overrides_and_derived_model():
    cfg = build_config({"task": {"length": 32, "block_width": 8}},
                       ["train.lr=0.05", "model.g=2", "model.w=8", "sar.alpha=2", "sar.enabled=true",
                        "train.decay=cosine"])
    assert cfg.train.lr == 0.05 and cfg.sar.alpha == 2 and cfg.sar.enabled
    m = cfg.model_config()
    assert (m.n_base, m.g, m.w, m.num_classes) == (34, 2, 8, 2)


@pytest.mark.parametrize("bad", ["lr=1", "train.lr", "nosuch.x=1"])
def test_bad_override_shapes(bad):
    with pytest.raises(ConfigurationError):
        build_config({}, [bad])


def test_unknown_and_derived_keys_rejected():
    with pytest.raises(ConfigurationError, match="unknown keys"):
        build_config({"train": {"learning_rate": 1}})
    with pytest.raises(ConfigurationError, match="derived"):
        build_config({"model": {"n_base": 10}})
    with pytest.raises(ConfigurationError):
        build_config({"train": {"batch_size": 0}})


def test_parse_override_values():
    assert parse_override("task.task=listops_mini") == ("task", "task", "listops_mini")
    assert parse_override("sweep.g_values=[0, 2]") == ("sweep", "g_values", [0, 2])


def test_load_config_file(tmp_path, monkeypatch):
    p = tmp_path / "c.json"
    p.write_text('{"train": {"steps": 7}}')
    assert load_config(p).train.steps == 7
    p.write_text('{"train": {\n "steps": }')
    with pytest.raises(ParseError, match="line 2"):
        load_config(p)
    monkeypatch.setenv("HSTSAR_OUTPUT_ROOT", str(tmp_path / "out"))
    assert output_root() == tmp_path / "out"
