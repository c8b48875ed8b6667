"""End-to-end model assembly and training.

The forward path is stem -> SE gate -> GAP/RoI pooling -> graph query
module -> transformer reasoning -> classifier head -> optional pair-score
symmetrization. Five ablation toggles select the loss weighting, masking
direction, symmetrization, query source, and SE gate.

Training uses adaptive moment estimation with two learning-rate groups
(stem parameters vs everything else) and is bit-reproducible from the seed,
including across a checkpoint save/resume boundary.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import quantize as qz
from .backbone import SEGate, Stem, gap, roi_pool
from .checkpoint import Record, read_container, records_as_dict, write_container
from .errors import ConfigError, DataError, GraphTooSmallError, NumericError
from .graph import GraphQueryModule
from .loss import build_mask, compute_class_weights, ClassWeights, weighted_bce_sum
from .metrics import EvalRecord, mean_average_precision, per_class_recall
from .nn import Module
from .tensor import Tensor, concat, no_grad
from .transformer import ClassifierHead, Dropout, LogitCube, ReasoningModule

TOGGLES = ("wbce", "bilateral", "logit_transform", "edge_query", "se_block")

ABLATION_STEPS = (
    ("wbce", "wbce"),
    ("+bilateral", "bilateral"),
    ("+logit_transform", "logit_transform"),
    ("+gqm_edge_query", "edge_query"),
    ("+se_block", "se_block"),
)


@dataclass
class ModelConfig:
    # ablation toggles; all on reproduces the full model
    wbce: bool = True
    bilateral: bool = True
    logit_transform: bool = True
    edge_query: bool = True
    se_block: bool = True
    # dimensions
    num_classes: int = 6
    feat_channels: int = 32
    stem_mid_channels: int = 16
    graph_dim: int = 96
    model_dim: int = 96
    roi_grid: int = 3
    max_persons: int = 4
    heads: int = 8
    ff_dim: int = 256
    se_reduction: int = 4
    image_size: int = 32
    # training
    lr_backbone: float = 1e-5
    lr_rest: float = 1e-4
    batch_size: int = 1
    epochs: int = 30
    seed: int = 0
    dropout: float = 0.2
    gqm_iterations: int = 2
    eval_every: int = 1
    literal_loss: bool = False

    def to_mapping(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_mapping(mapping: dict) -> "ModelConfig":
        fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
        kwargs = {}
        for key, value in mapping.items():
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[key] = value
        return ModelConfig(**kwargs)


def config_kv_lines(cfg: ModelConfig) -> str:
    from .report import kv_lines

    return kv_lines(cfg.to_mapping())


def parse_config_file(path) -> ModelConfig:
    """Read a key=value config file (blank lines and # comments allowed)."""
    fields = {f.name: f.type for f in dataclasses.fields(ModelConfig)}
    mapping = {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            lines = f.readlines()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        mapping[key] = _parse_value(fields[key], value, f"{path}:{lineno}")
    return ModelConfig.from_mapping(mapping)


def _parse_value(type_name, value: str, where: str):
    t = type_name if isinstance(type_name, str) else getattr(type_name, "__name__", str(type_name))
    try:
        if t == "bool":
            if value.lower() in ("true", "1", "yes", "on"):
                return True
            if value.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if t == "int":
            return int(value)
        if t == "float":
            return float(value)
        return value
    except ValueError as e:
        raise ConfigError(f"{where}: bad {t} value {value!r}") from e


class RelationModel(Module):
    """Full pipeline over one image and its person boxes."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype).type
        roi_dim = cfg.feat_channels * cfg.roi_grid * cfg.roi_grid
        self.query_dim = cfg.graph_dim if cfg.edge_query else 2 * cfg.graph_dim
        self.stem = Stem(cfg.feat_channels, rng, dtype, mid_channels=cfg.stem_mid_channels)
        self.se = SEGate(cfg.feat_channels, rng, dtype, reduction=cfg.se_reduction)
        self.gqm = GraphQueryModule(roi_dim, cfg.feat_channels, cfg.graph_dim,
                                    cfg.gqm_iterations, rng, dtype)
        self.trm = ReasoningModule(cfg.feat_channels, self.query_dim, cfg.model_dim,
                                   cfg.heads, cfg.ff_dim, rng, dtype)
        self.head = ClassifierHead(cfg.model_dim, cfg.num_classes, rng, dtype)
        self.quant: qz.QuantContext | None = None

    def _act(self, site: str, t: Tensor) -> Tensor:
        return t if self.quant is None else self.quant.activation(site, t)

    def forward(self, image: np.ndarray, persons, training: bool = False, rng=None) -> LogitCube:
        cfg = self.cfg
        p_actual = len(persons)
        if p_actual < 2:
            raise GraphTooSmallError(f"image has {p_actual} persons; need at least 2")
        if p_actual > cfg.max_persons:
            raise DataError(f"image has {p_actual} persons; model padded size is {cfg.max_persons}")
        hook = self.quant.weight_hook() if self.quant is not None else None
        drop = Dropout(cfg.dropout, rng, training)

        x = Tensor(np.asarray(image, dtype=self.dtype))
        f = self.stem(x, weight_hook=hook)
        if cfg.se_block:
            f = self.se(f, weight_hook=hook)
        f = self._act("fem.out", f)

        x_global = gap(f).reshape(1, cfg.feat_channels)
        roi_rows = [roi_pool(f, box, cfg.roi_grid).reshape(1, -1) for box in persons]
        x_rois = concat(roi_rows, axis=0)

        mode = "edge" if cfg.edge_query else "concat"
        q_small, _ = self.gqm(x_rois, x_global, mode, weight_hook=hook)
        q_small = self._act("gqm.query", q_small)

        queries, valid = self._pad_queries(q_small, p_actual)
        memory = self._act("trm.memory", self.trm.encode(f, drop=drop, weight_hook=hook))
        decoded = self._act("trm.decoded",
                            self.trm.decode(queries, memory, valid, drop=drop, weight_hook=hook))
        return self.head(decoded, cfg.max_persons, valid,
                         symmetric=cfg.logit_transform, weight_hook=hook)

    def _pad_queries(self, q_small: Tensor, p_actual: int):
        p = self.cfg.max_persons
        zero_row = p_actual * p_actual
        idx = np.full(p * p, zero_row, dtype=np.int64)
        valid = np.zeros(p * p, dtype=bool)
        for i in range(p_actual):
            for j in range(p_actual):
                if i != j:
                    idx[i * p + j] = i * p_actual + j
                    valid[i * p + j] = True
        padded = concat([q_small, Tensor(np.zeros((1, q_small.shape[1]), dtype=q_small.data.dtype))], axis=0)
        return padded.gather_rows(idx), valid


class Adam:
    """Adaptive moment estimation with per-name learning rates."""

    def __init__(self, named_params, lr_for_name, betas=(0.9, 0.999), eps=1e-8):
        self.named = list(named_params)
        self.lr = {name: lr_for_name(name) for name, _ in self.named}
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.named}
        self.v = {name: np.zeros_like(p.data) for name, p in self.named}

    def step(self):
        self.step_count += 1
        b1, b2 = self.b1, self.b2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.named:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (self.lr[name] / bc1) * m / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainState:
    config: ModelConfig
    model: RelationModel
    optimizer: Adam
    rng: np.random.Generator
    epoch: int = 0
    history: list = field(default_factory=list)
    best_map: float = float("-inf")
    best_epoch: int = -1
    best_params: dict | None = None


def lr_for_name(cfg: ModelConfig):
    def f(name: str) -> float:
        return cfg.lr_backbone if name.startswith("stem.") else cfg.lr_rest
    return f


def init_train_state(cfg: ModelConfig, dtype=np.float32) -> TrainState:
    ss = np.random.SeedSequence(cfg.seed)
    init_ss, train_ss = ss.spawn(2)
    model = RelationModel(cfg, np.random.default_rng(init_ss), dtype)
    opt = Adam(model.named_parameters(), lr_for_name(cfg))
    return TrainState(config=cfg, model=model, optimizer=opt, rng=np.random.default_rng(train_ss))


def training_weights(dataset, cfg: ModelConfig) -> ClassWeights:
    """Frozen class weights for the split; uniform 1.0 when wbce is off."""
    if not cfg.wbce:
        ones = np.ones(cfg.num_classes, dtype=np.int64)
        return ClassWeights(w=np.ones(cfg.num_classes), n=ones)
    counts = np.zeros(cfg.num_classes, dtype=np.int64)
    for img in dataset:
        for _, _, c in img.relations:
            if c >= cfg.num_classes:
                raise DataError(f"class {c} out of range for {cfg.num_classes}-class config")
            counts[c] += 1
    return compute_class_weights(counts)


def masking_mode(cfg: ModelConfig) -> str:
    return "bilateral" if cfg.bilateral else "unilateral"


def evaluate(model: RelationModel, dataset, mode: str | None = None) -> dict:
    """Eval-mode forward over a dataset; per-class recall and mAP."""
    cfg = model.cfg
    if mode is None:
        mode = masking_mode(cfg)
    if mode not in ("unilateral", "bilateral"):
        raise ConfigError(f"unknown masking mode {mode!r}")
    records = []
    p = cfg.max_persons
    with no_grad():
        for img in dataset:
            if len(img.persons) < 2:
                continue
            cube = model.forward(img.image, img.persons, training=False)
            scores = cube.scores.data
            for i, j, cls in img.relations:
                slots = [(i, j)] if mode == "unilateral" else [(i, j), (j, i)]
                for a, b in slots:
                    records.append(EvalRecord(scores[a * p + b].copy(), cls, img.image_id, (a, b)))
    if not records:
        raise DataError("evaluation split has no labeled pairs")
    recalls = per_class_recall(records, cfg.num_classes)
    mean_ap = mean_average_precision(records, cfg.num_classes)
    correct = sum(1 for r in records if int(np.argmax(r.scores)) == r.true_class)
    return {
        "mAP": mean_ap,
        "recalls": [float(v) for v in recalls],
        "pairs": len(records),
        "pair_accuracy": 100.0 * correct / len(records),
        "records": records,
    }


def train(dataset, cfg: ModelConfig, state: TrainState | None = None,
          epochs: int | None = None, eval_dataset=None, log=None) -> TrainState:
    """Run (or continue) training; returns the updated state.

    `epochs` is the absolute target epoch count, so a resumed state
    continues where it left off.
    """
    if state is None:
        state = init_train_state(cfg)
    cfg = state.config
    target = cfg.epochs if epochs is None else epochs
    weights = training_weights(dataset, cfg)
    mode = masking_mode(cfg)
    eval_data = dataset if eval_dataset is None else eval_dataset
    model, opt, rng = state.model, state.optimizer, state.rng

    while state.epoch < target:
        epoch = state.epoch
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            model.zero_grad()
            total, count = None, 0
            for idx in batch:
                img = dataset[int(idx)]
                if len(img.persons) < 2:
                    continue
                cube = model.forward(img.image, img.persons, training=True, rng=rng)
                mask, targets = build_mask(img.relations, len(img.persons), cfg.max_persons, mode)
                s, c = weighted_bce_sum(cube, targets, mask, weights, cfg.literal_loss)
                total = s if total is None else total + s
                count += c
            if total is None:
                continue
            loss = total * (1.0 / count)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"training loss diverged (epoch {epoch})")
            loss.backward()
            opt.step()
            losses.append(value)

        entry = {"epoch": epoch, "loss": float(np.mean(losses)) if losses else None}
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            metrics = evaluate(model, eval_data, mode)
            entry["mAP"] = metrics["mAP"]
            entry["recalls"] = metrics["recalls"]
            if metrics["mAP"] > state.best_map:
                state.best_map = metrics["mAP"]
                state.best_epoch = epoch
                state.best_params = model.state_arrays()
        state.history.append(entry)
        if log is not None:
            log(entry)
        state.epoch = epoch + 1
    return state


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

_U64 = (1 << 64) - 1


def _rng_to_array(rng: np.random.Generator) -> np.ndarray:
    st = rng.bit_generator.state
    s, inc = st["state"]["state"], st["state"]["inc"]
    return np.array([s & _U64, s >> 64, inc & _U64, inc >> 64,
                     st["has_uint32"], st["uinteger"]], dtype=np.uint64)


def _rng_from_array(arr: np.ndarray) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(arr[0]) | (int(arr[1]) << 64),
                  "inc": int(arr[2]) | (int(arr[3]) << 64)},
        "has_uint32": int(arr[4]),
        "uinteger": int(arr[5]),
    }
    return rng


def save_train_state(state: TrainState, path):
    records = [
        Record("config.json", np.frombuffer(json.dumps(state.config.to_mapping(), sort_keys=True).encode(), dtype=np.uint8).copy()),
        Record("history.json", np.frombuffer(json.dumps(state.history).encode(), dtype=np.uint8).copy()),
        Record("epoch", np.array(state.epoch, dtype=np.int64)),
        Record("opt.step", np.array(state.optimizer.step_count, dtype=np.int64)),
        Record("rng.pcg64", _rng_to_array(state.rng)),
        Record("best.map", np.array(state.best_map, dtype=np.float64)),
        Record("best.epoch", np.array(state.best_epoch, dtype=np.int64)),
    ]
    for name, p in state.model.named_parameters():
        records.append(Record(f"param.{name}", p.data))
        records.append(Record(f"opt.m.{name}", state.optimizer.m[name]))
        records.append(Record(f"opt.v.{name}", state.optimizer.v[name]))
    if state.best_params is not None:
        for name, arr in state.best_params.items():
            records.append(Record(f"best.param.{name}", arr))
    write_container(path, records)


def load_train_state(path) -> TrainState:
    recs = records_as_dict(read_container(path))
    try:
        cfg = ModelConfig.from_mapping(json.loads(recs["config.json"].array.tobytes().decode()))
        state = init_train_state(cfg)
        state.history = json.loads(recs["history.json"].array.tobytes().decode())
        state.epoch = int(recs["epoch"].array)
        state.optimizer.step_count = int(recs["opt.step"].array)
        state.rng = _rng_from_array(recs["rng.pcg64"].array)
        state.best_map = float(recs["best.map"].array)
        state.best_epoch = int(recs["best.epoch"].array)
        for name, p in state.model.named_parameters():
            p.data = np.ascontiguousarray(recs[f"param.{name}"].array)
            state.optimizer.m[name] = np.ascontiguousarray(recs[f"opt.m.{name}"].array)
            state.optimizer.v[name] = np.ascontiguousarray(recs[f"opt.v.{name}"].array)
        best = {}
        for key, rec in recs.items():
            if key.startswith("best.param."):
                best[key[len("best.param."):]] = np.ascontiguousarray(rec.array)
        state.best_params = best or None
    except KeyError as e:
        raise DataError(f"checkpoint {path} missing record {e.args[0]!r}") from e
    return state


# ---------------------------------------------------------------------------
# Ablation switches
# ---------------------------------------------------------------------------

def ablation_configs(base: ModelConfig):
    """Cumulative toggle rows: start from everything off, add one per row."""
    flags = {name: False for name in TOGGLES}
    rows = []
    for label, flag in ABLATION_STEPS:
        flags[flag] = True
        rows.append((label, replace(base, **flags)))
    return rows


def toggle_combinations(base: ModelConfig):
    """All 2^5 toggle assignments over the base config."""
    combos = []
    for bits in range(32):
        flags = {name: bool(bits >> k & 1) for k, name in enumerate(TOGGLES)}
        combos.append(replace(base, **flags))
    return combos


def run_ablation(dataset, base: ModelConfig, epochs: int, eval_dataset=None, log=None):
    rows = []
    for label, cfg in ablation_configs(base):
        state = train(dataset, cfg, epochs=epochs, eval_dataset=eval_dataset)
        metrics = evaluate(state.model, eval_dataset if eval_dataset is not None else dataset,
                           masking_mode(cfg))
        rows.append((label, metrics["mAP"]))
        if log is not None:
            log(label, metrics["mAP"])
    return rows


# ---------------------------------------------------------------------------
# Quantization driver
# ---------------------------------------------------------------------------

def calibrate(model: RelationModel, dataset, sites=qz.DEFAULT_ACT_SITES, max_images=None) -> qz.QuantContext:
    """Observe activation ranges over the dataset and freeze the schemes."""
    qctx = qz.QuantContext(model, sites, mode="calibrate")
    model.quant = qctx
    n = 0
    with no_grad():
        for img in dataset:
            if len(img.persons) < 2:
                continue
            model.forward(img.image, img.persons, training=False)
            n += 1
            if max_images is not None and n >= max_images:
                break
    if n == 0:
        raise DataError("calibration saw no usable images")
    qctx.freeze_activations()
    return qctx


def fake_quant_train(dataset, state: TrainState, qat_epochs: int, eval_dataset=None,
                     calib_images=None, log=None):
    """QAT on a trained state: calibrate, fake-quant train, report both metrics.

    Returns (state, qctx, fp32_metrics, int8_metrics).
    """
    model = state.model
    mode = masking_mode(state.config)
    eval_data = eval_dataset if eval_dataset is not None else dataset
    model.quant = None
    fp32_metrics = evaluate(model, eval_data, mode)
    qctx = calibrate(model, dataset, max_images=calib_images)
    qctx.mode = "qat"
    train(dataset, state.config, state=state, epochs=state.epoch + qat_epochs,
          eval_dataset=eval_dataset, log=log)
    int8_metrics = evaluate(model, eval_data, mode)
    return state, qctx, fp32_metrics, int8_metrics
