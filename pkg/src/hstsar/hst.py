"""Hierarchical sparse transformer: representative tokens, layers, pooled classifier.

Each layer runs a sparse transformer block over the whole sequence, pulls out
the representative rows, mixes them with dense attention and writes them
back in place. The classifier pools the final representative states.
"""

from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .attention import EVAL, TRAIN, AttentionParams, BlockParams, _check_mode, attend, transformer_block
from .errors import ConfigurationError, DimensionError, SchemaError
from .topology import SparseTopology, build_topology, required_padding

PAD_ID = 0
REP_ID = 1  # the [CLS] id every representative slot carries
GLOBAL_ID = 2
FIRST_FREE_ID = 3

CHECKPOINT_FORMAT = "hstsar.checkpoint/1"


class Pooling(str, enum.Enum):
    MEAN = "mean"
    MAX = "max"
    CLS_G_ONLY = "cls_g_only"


class HierInit(str, enum.Enum):
    RANDOM = "random"
    WARM_START_COPY = "warm_start_copy"
    SHARED = "shared"


@dataclass
class HstModelConfig:
    n_base: int
    g: int
    w: int
    d: int
    layers: int
    heads: int
    vocab_size: int
    num_classes: int
    pooling: Pooling = Pooling.MEAN
    weight_sharing: bool = False
    hierarchical_enabled: bool = True
    hier_init: HierInit = HierInit.RANDOM
    mlp_dim: int | None = None
    dropout: float = 0.1
    attn_dropout: float = 0.1
    scale_scores: bool = True
    hier_residual: bool = False
    random_tokens: int | None = None
    topo_seed: int = 0
    init_seed: int = 0

    def __post_init__(self):
        self.pooling = Pooling(self.pooling)
        self.hier_init = HierInit(self.hier_init)
        if self.hier_init is HierInit.SHARED:
            self.weight_sharing = True
        elif self.weight_sharing:
            self.hier_init = HierInit.SHARED
        if self.mlp_dim is None:
            self.mlp_dim = 2 * self.d
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.layers < 1 or self.d < 1:
            raise ConfigurationError("need at least one layer and d >= 1")
        if self.d % self.heads:
            raise ConfigurationError(f"d={self.d} is not divisible by heads={self.heads}")
        pad = required_padding(self.n_base, self.g, self.w)
        if pad:
            raise ConfigurationError(
                f"n_base - g = {self.n_base - self.g} is not divisible by w = {self.w}; "
                f"pad by {pad} tokens"
            )
        if self.pooling is Pooling.CLS_G_ONLY and self.g < 1:
            raise ConfigurationError("CLS_G_ONLY pooling needs at least one global token")
        if self.vocab_size <= FIRST_FREE_ID:
            raise ConfigurationError(f"vocab_size must exceed the {FIRST_FREE_ID} reserved ids")

    @property
    def m(self):
        return (self.n_base - self.g) // self.w

    @property
    def n(self):
        """Sequence length after representative insertion."""
        return self.n_base + self.m

    def to_dict(self):
        d = asdict(self)
        d["pooling"] = self.pooling.value
        d["hier_init"] = self.hier_init.value
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def topology(self):
        return build_topology(self.n_base, self.g, self.w, insert_reps=True,
                              r=self.random_tokens, seed=self.topo_seed if self.random_tokens else None)


def insert_representatives(ids, g, w, rep_id=REP_ID):
    """Put ``rep_id`` at the start of every local block.

    Returns the augmented id list and the representative positions; block
    ``i`` starts at ``g + i * (w + 1)``.
    """
    ids = list(ids)
    pad = required_padding(len(ids), g, w)
    if pad:
        raise ConfigurationError(f"len(ids) - g = {len(ids) - g} not divisible by w = {w}; pad by {pad}")
    out = ids[:g]
    reps = []
    for start in range(g, len(ids), w):
        reps.append(len(out))
        out.append(rep_id)
        out.extend(ids[start : start + w])
    return out, reps


def remove_representatives(ids, rep_positions):
    drop = set(rep_positions)
    return [t for i, t in enumerate(ids) if i not in drop]


@dataclass
class SequenceBatch:
    """Token ids after representative insertion, with labels and padding flags."""

    ids: np.ndarray
    labels: np.ndarray
    valid: np.ndarray
    rep_positions: tuple
    g: int

    def __len__(self):
        return self.ids.shape[0]

    @classmethod
    def from_base(cls, base_ids, labels, g, w, valid=None):
        """Build from ``[b, n_base]`` ids (globals first); ``valid`` flags non-PAD tokens."""
        base_ids = np.asarray(base_ids, dtype=np.int64)
        if base_ids.ndim != 2:
            raise DimensionError("base_ids must be [batch, n_base]")
        if valid is None:
            valid = base_ids != PAD_ID
        valid = np.asarray(valid, dtype=bool)
        rows, vrows, reps = [], [], ()
        for row, vrow in zip(base_ids, valid):
            aug, reps = insert_representatives(row.tolist(), g, w)
            v, _ = insert_representatives(vrow.tolist(), g, w, rep_id=True)
            rows.append(aug)
            vrows.append(v)
        ids = np.array(rows, dtype=np.int64).reshape(len(base_ids), -1)
        vmask = np.array(vrows, dtype=bool).reshape(ids.shape)
        vmask = _with_block_validity(vmask, reps, w + 1)
        return cls(ids, np.asarray(labels, dtype=np.int64), vmask, tuple(reps), g)

    def subset(self, idx):
        return SequenceBatch(self.ids[idx], self.labels[idx], self.valid[idx], self.rep_positions, self.g)


def _block_validity(valid, rep_positions, block_len):
    """Per-block flag: does any position of the block hold a real token?"""
    reps = np.asarray(rep_positions, dtype=np.int64)
    if reps.size == 0:
        return np.zeros(valid.shape[:-1] + (0,), dtype=bool)
    spans = reps[:, None] + np.arange(block_len)[None, :]
    content = spans[:, 1:] if block_len > 1 else spans
    return valid[..., content].any(axis=-1)


def _with_block_validity(valid, rep_positions, block_len):
    valid = valid.copy()
    if len(rep_positions):
        valid[..., list(rep_positions)] = _block_validity(valid, rep_positions, block_len)
    return valid


@dataclass(eq=False)
class HstLayer:
    block: BlockParams
    hier: AttentionParams

    @property
    def shared(self):
        return self.hier is self.block.attn


def hst_layer_forward(H_prev, layer, topo, mode=EVAL, *, hierarchical=True, key_valid=None,
                      rep_valid=None, dropout=0.0, attn_dropout=0.0, rng=None, scale=True,
                      residual=False):
    """One layer: sparse block, dense attention among representatives, scatter back.

    With ``hierarchical`` false this is exactly the sparse block. With
    ``residual`` the dense output is added to the representative rows rather
    than replacing them.
    """
    H_s = transformer_block(H_prev, layer.block, topo, key_valid, dropout=dropout,
                            attn_dropout=attn_dropout, mode=mode, rng=rng, scale=scale)
    if not hierarchical:
        return H_s
    reps = topo.rep_positions
    if not reps:
        raise ConfigurationError("hierarchical pass needs representative positions")
    R_s = T.gather_rows(H_s, reps)
    R = attend(R_s, layer.hier, None, rep_valid, scale=scale, attn_dropout=attn_dropout,
               rng=rng, mode=mode).values
    if residual:
        R = T.add(R_s, R)
    return T.scatter_rows(H_s, reps, R)


def pool_representatives(R, mode, valid=None, cls_row=None):
    """Reduce ``R`` (``[m, d]`` or ``[b, m, d]``) to one vector per example.

    ``valid`` (``[m]`` or ``[b, m]``) drops blocks that hold only padding.
    ``CLS_G_ONLY`` returns ``cls_row`` (the first global token) instead.
    """
    mode = Pooling(mode)
    if mode is Pooling.CLS_G_ONLY:
        if cls_row is None:
            raise ConfigurationError("CLS_G_ONLY pooling needs the first global token state")
        return cls_row
    m = R.shape[-2]
    if m == 0:
        raise ConfigurationError(f"{mode.value} pooling over zero representatives")
    if valid is None:
        return T.mean(R, axis=-2) if mode is Pooling.MEAN else T.max(R, axis=-2)
    valid = np.asarray(valid, dtype=bool)
    if not valid.any(axis=-1).all():
        raise ConfigurationError("an example has no non-padding block to pool")
    if mode is Pooling.MEAN:
        weights = valid / valid.sum(axis=-1, keepdims=True)
        return T.sum(T.mul(R, T.Tensor(weights[..., None])), axis=-2)
    offset = np.where(valid, 0.0, T.MASK_FILL)[..., None]
    return T.max(T.add(R, T.Tensor(offset)), axis=-2)


def classify_logits(pooled, w_out):
    return T.matmul(pooled if pooled.ndim > 1 else T.reshape(pooled, (1, -1)), w_out)


def classify(pooled, w_out):
    """Class probabilities ``softmax(pooled @ w_out)``."""
    out = T.softmax_rows(classify_logits(pooled, w_out))
    return out if pooled.ndim > 1 else T.reshape(out, (w_out.shape[1],))


@dataclass(eq=False)
class HstModel:
    config: HstModelConfig
    tok_emb: T.Tensor
    pos_emb: T.Tensor
    layers: list
    ln_f_g: T.Tensor
    ln_f_b: T.Tensor
    w_out: T.Tensor
    _topology: SparseTopology | None = field(default=None, repr=False)

    @classmethod
    def init(cls, config):
        rng = np.random.default_rng(config.init_seed)
        d = config.d
        layers = []
        for i in range(config.layers):
            block = BlockParams.init(d, config.heads, config.mlp_dim, rng, f"layers.{i}.block")
            if config.hier_init is HierInit.SHARED:
                hier = block.attn
            elif config.hier_init is HierInit.WARM_START_COPY:
                hier = block.attn.copy(f"layers.{i}.hier")
            else:
                hier = AttentionParams.init(d, config.heads, rng, f"layers.{i}.hier")
            layers.append(HstLayer(block, hier))
        return cls(
            config=config,
            tok_emb=T.parameter(rng.normal(0.0, 1.0, (config.vocab_size, d)), "tok_emb"),
            pos_emb=T.parameter(rng.normal(0.0, 0.5, (config.n, d)), "pos_emb"),
            layers=layers,
            ln_f_g=T.parameter(np.ones(d), "ln_f_g"),
            ln_f_b=T.parameter(np.zeros(d), "ln_f_b"),
            w_out=T.parameter(rng.normal(0.0, 1.0 / np.sqrt(d), (d, config.num_classes)), "w_out"),
        )

    @property
    def topology(self):
        if self._topology is None:
            self._topology = self.config.topology()
        return self._topology

    def named_parameters(self):
        """Distinct parameters in a stable order; aliased hierarchical weights appear once."""
        out = {"tok_emb": self.tok_emb, "pos_emb": self.pos_emb}
        for i, layer in enumerate(self.layers):
            for k, v in layer.block.tensors().items():
                out[f"layers.{i}.block.{k}"] = v
            if not layer.shared:
                for k, v in layer.hier.tensors().items():
                    out[f"layers.{i}.hier.{k}"] = v
        out.update(ln_f_g=self.ln_f_g, ln_f_b=self.ln_f_b, w_out=self.w_out)
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def num_parameters(self):
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self):
        T.zero_grad(self.parameters())


@dataclass(frozen=True)
class Roll:
    """Cyclic shift of ``k`` positions applied to the input of layer ``layer + 1``."""

    k: int
    layer: int = 0


def model_logits(batch, model, topo=None, mode=EVAL, rng=None, roll=None):
    """Class logits ``[b, c]``: embed, run the layers, pool representatives, project."""
    training = _check_mode(mode)
    cfg = model.config
    topo = model.topology if topo is None else topo
    if batch.ids.shape[1] != topo.n:
        raise DimensionError(f"batch length {batch.ids.shape[1]} != topology length {topo.n}")
    if roll is not None and not 0 <= roll.layer < cfg.layers:
        raise ConfigurationError(f"roll layer {roll.layer} outside [0, {cfg.layers})")

    key_valid = batch.valid
    reps = topo.rep_positions
    block_len = topo.block_len
    rep_valid = _block_validity(key_valid, reps, block_len)

    H = T.add(T.embed(batch.ids, model.tok_emb), model.pos_emb)
    for l, layer in enumerate(model.layers):
        if roll is not None and roll.layer == l and roll.k:
            perm = np.roll(np.arange(topo.n), roll.k)
            H = T.gather_rows(H, perm)
            key_valid = key_valid[:, perm]
            rep_valid = _block_validity(key_valid, reps, block_len)
        if l == 0:
            H = T.dropout(H, cfg.dropout, rng, training)
        H = hst_layer_forward(
            H, layer, topo, mode,
            hierarchical=cfg.hierarchical_enabled,
            key_valid=key_valid, rep_valid=rep_valid,
            dropout=cfg.dropout, attn_dropout=cfg.attn_dropout, rng=rng,
            scale=cfg.scale_scores, residual=cfg.hier_residual,
        )

    if cfg.pooling is Pooling.CLS_G_ONLY:
        cls_row = T.reshape(T.gather_rows(H, [0]), (H.shape[0], cfg.d))
        pooled = pool_representatives(None, cfg.pooling, cls_row=T.layer_norm(cls_row, model.ln_f_g, model.ln_f_b))
    else:
        R = T.layer_norm(T.gather_rows(H, reps), model.ln_f_g, model.ln_f_b)
        pooled = pool_representatives(R, cfg.pooling, rep_valid)
    return classify_logits(pooled, model.w_out)


def model_forward(batch, model, topo=None, mode=EVAL, rng=None, roll=None):
    """Class probabilities ``[b, c]``."""
    return T.softmax_rows(model_logits(batch, model, topo, mode, rng, roll))


# ---------------------------------------------------------------------------
# checkpoints


def _param_file(name):
    return name.replace("/", "_") + ".f64"


def save_checkpoint(model, path):
    """Write ``manifest.json`` plus one little-endian float64 file per parameter."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, p in model.named_parameters().items():
        fname = _param_file(name)
        p.data.astype("<f8").tofile(path / fname)
        entries.append({"name": name, "shape": list(p.shape), "file": fname})
    aliases = {
        f"layers.{i}.hier.{k}": f"layers.{i}.block.attn.{k}"
        for i, layer in enumerate(model.layers) if layer.shared
        for k in layer.hier.tensors()
    }
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "dtype": "float64",
        "byte_order": "little",
        "layout": "row-major",
        "config": model.config.to_dict(),
        "parameters": entries,
        "aliases": aliases,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path):
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise SchemaError(f"cannot read checkpoint manifest: {exc}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise SchemaError(f"unsupported checkpoint format {manifest.get('format')!r}")
    model = HstModel.init(HstModelConfig.from_dict(manifest["config"]))
    params = model.named_parameters()
    listed = {e["name"] for e in manifest["parameters"]}
    if listed != set(params):
        raise SchemaError(f"parameter set mismatch: {sorted(listed ^ set(params))}")
    for e in manifest["parameters"]:
        p = params[e["name"]]
        data = np.fromfile(path / e["file"], dtype="<f8")
        if data.size != int(np.prod(e["shape"])) or tuple(e["shape"]) != p.shape:
            raise SchemaError(f"shape mismatch for {e['name']}")
        p.data[...] = data.reshape(p.shape)
    return model
