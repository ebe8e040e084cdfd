import numpy as np
import pytest

from hstsar.errors import ConfigurationError, ParseError
from hstsar.harness.data_io import read_dataset, sidecar_path, write_dataset
from hstsar.harness.tasks import (
    FILLER_START,
    MARK_A,
    MARK_B,
    SyntheticTaskSpec,
    decode_listops,
    evaluate_listops,
    generate,
    parity_label,
    tokenize_listops,
)


def oracle_eval(text):
    """Recursive-descent evaluator, written independently of the stack machine."""
    toks = text.replace("]", " ] ").split()

    def parse(i):
        if toks[i].isdigit():
            return int(toks[i]), i + 1
        op, i, args = toks[i], i + 1, []
        while toks[i] != "]":
            v, i = parse(i)
            args.append(v)
        if op == "[MIN":
            r = min(args)
        elif op == "[MAX":
            r = max(args)
        elif op == "[MED":
            r = int(np.median(args))
        else:
            r = sum(args) % 10
        return r, i + 1

    v, end = parse(0)
    assert end == len(toks)
    return v


@pytest.mark.parametrize("marks,label", [(("A", "A"), 0), (("A", "B", "A"), 0), (("B", "A"), 1)])
def test_parity_label(marks, label):
    assert parity_label(marks) == label


def test_parity_structure_and_balance():
    spec = SyntheticTaskSpec(length=64, block_width=8, train_size=5000, test_size=5000)
    ds = generate(spec, "test")
    blocks = ds.ids.reshape(len(ds), 8, 8)
    marks = np.isin(blocks, [MARK_A, MARK_B]).sum(axis=2)
    assert np.all(marks == 1)
    assert np.all((blocks >= FILLER_START) | np.isin(blocks, [MARK_A, MARK_B]))
    np.testing.assert_array_equal(ds.labels, (blocks == MARK_A).sum(axis=(1, 2)) % 2)
    majority = max(np.mean(ds.labels), 1 - np.mean(ds.labels))
    assert abs(majority - 0.5) <= 0.02


def test_generation_is_pure_and_splits_differ():
    spec = SyntheticTaskSpec(length=32, block_width=4, train_size=50, dev_size=50)
    a, b = generate(spec, "train"), generate(spec, "train")
    assert np.array_equal(a.ids, b.ids) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.ids, generate(spec, "dev").ids)


def test_parity_spec_validation():
    with pytest.raises(ConfigurationError):
        SyntheticTaskSpec(length=30, block_width=8)


@pytest.mark.parametrize("text,value", [
    ("[MAX 2 9 1]", 9),
    ("[MIN [MAX 2 3] 4]", 3),
    ("[SM 5 6]", 1),
    ("[MED 1 7 3 9]", 5),
])
def test_listops_examples(text, value):
    assert evaluate_listops(text) == value
    assert oracle_eval(text) == value


def test_tokenizer_splits_brackets():
    assert tokenize_listops("[MIN [MAX 2 3]] 4]") == ["[MIN", "[MAX", "2", "3", "]", "]", "4", "]"]


@pytest.mark.parametrize("bad", ["[MAX 2 9", "[MAX ]", "[FOO 1]", "3 4", "1]"])
def test_listops_malformed(bad):
    with pytest.raises(ParseError):
        evaluate_listops(bad)


def test_listops_generated_labels_match_oracle():
    spec = SyntheticTaskSpec(task="listops_mini", length=128, max_depth=3, train_size=300)
    ds = generate(spec, "train")
    for row, label in zip(ds.ids, ds.labels):
        toks = decode_listops(row)
        assert len(toks) <= 128
        assert oracle_eval(" ".join(toks)) == label
    depth = max(max(np.cumsum([1 if t.startswith("[") else -1 if t == "]" else 0
                               for t in decode_listops(r)])) for r in ds.ids)
    assert depth <= 3
    assert len(np.unique(ds.labels)) == 10


def test_dataset_file_round_trip(tmp_path):
    spec = SyntheticTaskSpec(task="listops_mini", length=64, max_depth=2, train_size=40)
    ds = generate(spec, "train")
    path = write_dataset(tmp_path / "train.bin", ds, {"split": "train"})
    back, doc = read_dataset(path)
    assert np.array_equal(back.ids, ds.ids) and np.array_equal(back.labels, ds.labels)
    assert doc["count"] == 40 and doc["pad_to"] == 64
    raw = path.read_bytes()
    length, label = np.frombuffer(raw[:8], "<u4")[0], np.frombuffer(raw[4:8], "<i4")[0]
    assert label == ds.labels[0]
    assert np.array_equal(np.frombuffer(raw[8 : 8 + 4 * length], "<i4"), ds.ids[0, :length])


def test_dataset_file_errors(tmp_path):
    spec = SyntheticTaskSpec(length=16, block_width=4, train_size=3)
    path = write_dataset(tmp_path / "d.bin", generate(spec, "train"))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(ParseError, match="record 2"):
        read_dataset(path)
    sidecar_path(path).write_text("{\n  \"format\": 1,\n")
    with pytest.raises(ParseError, match="line"):
        read_dataset(path)
