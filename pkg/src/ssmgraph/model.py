"""Full model assembly: per-channel sequence encoder -> interval pooling ->
graph structure learning -> GIN -> temporal/graph readout -> linear head.

Also owns the total loss, parameter/MAC profiling, and the binary
checkpoint format (magic "GS4M").
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .gnn import ClassifierHead, GinLayer, PoolSpec, temporal_graph_readout
from .graphlearn import (FULL_INTERVAL, GslConfig, GslLayer, RegWeights,
                         interval_mean_pool, num_intervals, reg_loss_total)
from .rnn import GruEncoder
from .s4 import S4Encoder
from .tensor import ContractError, ShapeError, Tensor

TASKS = ("binary", "multiclass", "multilabel")
ENCODERS = ("s4", "gru")

CHECKPOINT_MAGIC = b"GS4M"
CHECKPOINT_VERSION = 1

# Self-attention cost model: MACs per node per interval at width D.
GSL_MACS_NODE_FACTOR = 64


@dataclass
class ModelConfig:
    n_sensors: int = 6
    input_dim: int = 1
    d_model: int = 16
    s4_depth: int = 2
    p_states: int = 4
    bidirectional: bool = False
    dropout: float = 0.0
    encoder: str = "s4"
    use_gsl: bool = True
    use_gnn: bool = True
    gsl: GslConfig = field(default_factory=GslConfig)
    reg: RegWeights = field(default_factory=RegWeights)
    pool: PoolSpec = field(default_factory=PoolSpec)
    n_classes: int = 1
    task: str = "binary"
    fixed_graph: list | None = None  # used when use_gsl is False; identity if None
    dtype: str = "float64"
    dt_min: float = 1e-3   # initialization bounds for the SSM step size
    dt_max: float = 1e-1

    def __post_init__(self):
        if self.task not in TASKS:
            raise ContractError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.encoder not in ENCODERS:
            raise ContractError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.task == "binary" and self.n_classes != 1:
            raise ContractError("binary task uses a single sigmoid logit (n_classes=1)")
        if self.task != "binary" and self.n_classes < 2:
            raise ContractError(f"{self.task} task needs n_classes >= 2")
        if self.d_model % self.gsl.heads != 0:
            raise ContractError(f"d_model {self.d_model} not divisible by heads {self.gsl.heads}")
        if not 1 <= self.gsl.knn_k < self.n_sensors:
            raise ContractError(f"knn_k must be in [1, {self.n_sensors - 1}]")
        if self.dtype not in ("float32", "float64"):
            raise ContractError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if not 0.0 < self.dt_min <= self.dt_max:
            raise ContractError(f"need 0 < dt_min <= dt_max, got [{self.dt_min}, {self.dt_max}]")
        if self.fixed_graph is not None:
            g = np.asarray(self.fixed_graph, dtype=float)
            if g.shape != (self.n_sensors, self.n_sensors):
                raise ContractError(f"fixed_graph must be {self.n_sensors}x{self.n_sensors}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def fixed_graph_matrix(self) -> np.ndarray:
        if self.fixed_graph is None:
            return np.eye(self.n_sensors, dtype=self.np_dtype)
        return np.asarray(self.fixed_graph, dtype=self.np_dtype)


@dataclass
class ModelOutput:
    logits: Tensor              # (B, C)
    graphs: np.ndarray          # (B, n_d, N, N) adjacency values
    reg_loss: Tensor            # scalar, already averaged over graphs and batch

    @property
    def n_d(self) -> int:
        return self.graphs.shape[1]


class SsmGraphModel:
    """Sequence-then-graph classifier over multivariate sensor signals."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        dtype = cfg.np_dtype
        if cfg.encoder == "s4":
            self.encoder = S4Encoder(cfg.input_dim, cfg.d_model, cfg.s4_depth, cfg.p_states,
                                     rng, cfg.bidirectional, cfg.dropout, dtype,
                                     cfg.dt_min, cfg.dt_max)
        else:
            self.encoder = GruEncoder(cfg.input_dim, cfg.d_model, cfg.s4_depth, rng,
                                      cfg.dropout, dtype)
        self.gsl = GslLayer(cfg.d_model, cfg.gsl, rng, dtype) if cfg.use_gsl else None
        self.gin = GinLayer(cfg.d_model, rng, cfg.dropout, dtype) if cfg.use_gnn else None
        self.head = ClassifierHead(cfg.d_model, cfg.n_classes, rng, dtype)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = self.encoder.named_parameters("encoder.")
        if self.gsl is not None:
            out += self.gsl.named_parameters("gsl.")
        if self.gin is not None:
            out += self.gin.named_parameters("gin.")
        out += self.head.named_parameters("head.")
        return out

    def parameter_count(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def assert_stable(self) -> None:
        self.encoder.assert_stable()

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.zero_grad()

    def forward(self, x, mask: np.ndarray | None = None, train: bool = False,
                rng: np.random.Generator | None = None) -> ModelOutput:
        """Run the full pipeline on a batch (B, N, T, M) (or one record (N, T, M))."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.cfg.np_dtype))
        if x.ndim == 3:
            x = x.reshape((1,) + x.shape)
            if mask is not None and np.ndim(mask) == 1:
                mask = np.asarray(mask)[None, :]
        if x.ndim != 4:
            raise ShapeError(f"expected (B, N, T, M), got {x.shape}")
        if x.shape[1] != self.cfg.n_sensors:
            raise ShapeError(f"{x.shape[1]} sensors != configured {self.cfg.n_sensors}")
        t_len = x.shape[2]
        num_intervals(t_len, self.cfg.gsl.r)  # rejects indivisible fixed-length setups

        h = self.encoder.encode(x, mask=mask, train=train, rng=rng)
        pooled = interval_mean_pool(h, self.cfg.gsl.r, mask)      # (B, n_d, N, D)

        if self.gsl is not None:
            w = self.gsl.build_graphs(pooled)
            reg = reg_loss_total(w, pooled, self.cfg.reg)
        else:
            fixed = self.fixed_graph_tensor(pooled.shape[:2])
            w = fixed
            reg = Tensor(np.zeros((), dtype=self.cfg.np_dtype))

        z = self.gin.forward(pooled, w, train=train, rng=rng) if self.gin is not None else pooled
        readout = temporal_graph_readout(z, self.cfg.pool)        # (B, D)
        logits = self.head.forward(readout)
        return ModelOutput(logits=logits, graphs=w.numpy(), reg_loss=reg)

    def fixed_graph_tensor(self, lead_shape) -> Tensor:
        g = self.cfg.fixed_graph_matrix()
        return Tensor(np.broadcast_to(g, tuple(lead_shape) + g.shape).copy())

    def total_loss(self, out: ModelOutput, y) -> Tensor:
        """Prediction loss plus the (already per-graph-averaged) regularization."""
        return self.prediction_loss(out.logits, y) + out.reg_loss

    def prediction_loss(self, logits: Tensor, y) -> Tensor:
        cfg = self.cfg
        y = np.asarray(y)
        if cfg.task == "binary":
            if y.ndim != 1 or logits.shape != (y.shape[0], 1):
                raise ContractError("binary task expects y of shape (B,) and logits (B, 1)")
            return T.bce_with_logits(logits, y.astype(float)[:, None])
        if cfg.task == "multilabel":
            if y.shape != logits.shape:
                raise ContractError(f"multilabel y shape {y.shape} != logits {logits.shape}")
            return T.bce_with_logits(logits, y.astype(float))
        if y.ndim != 1 or y.shape[0] != logits.shape[0]:
            raise ContractError("multiclass task expects integer labels of shape (B,)")
        return T.softmax_cross_entropy(logits, y)

    def scores(self, logits: np.ndarray) -> np.ndarray:
        """Map logits to decision scores: sigmoid probabilities or softmax rows."""
        if self.cfg.task == "multiclass":
            e = np.exp(logits - logits.max(axis=-1, keepdims=True))
            return e / e.sum(axis=-1, keepdims=True)
        return 1.0 / (1.0 + np.exp(-logits))


def build_model(cfg: ModelConfig, seed: int) -> SsmGraphModel:
    return SsmGraphModel(cfg, np.random.default_rng(seed))


# -- profiling ------------------------------------------------------------


def gsl_param_count(d_model: int) -> int:
    """Query + key projections, shared across heads: 2 * D^2."""
    return 2 * d_model * d_model


def gsl_mac_estimate(n_sensors: int, d_model: int, t_len: int, r) -> int:
    """Attention cost for all dynamic graphs of one record.

    The same layer runs once per interval, so MACs scale linearly in
    n_d = T / r while the parameter count stays fixed.
    """
    n_d = num_intervals(t_len, r)
    return n_d * n_sensors * GSL_MACS_NODE_FACTOR * d_model * d_model


def profile(cfg: ModelConfig, t_len: int, seed: int = 0) -> dict:
    model = build_model(cfg, seed)
    return {
        "param_count": model.parameter_count(),
        "gsl_param_count": gsl_param_count(cfg.d_model) if cfg.use_gsl else 0,
        "gsl_mac_estimate": (gsl_mac_estimate(cfg.n_sensors, cfg.d_model, t_len, cfg.gsl.r)
                             if cfg.use_gsl else 0),
        "n_d": num_intervals(t_len, cfg.gsl.r),
    }


# -- checkpoint I/O ---------------------------------------------------------


def _config_to_dict(cfg: ModelConfig) -> dict:
    return {
        "n_sensors": cfg.n_sensors, "input_dim": cfg.input_dim, "d_model": cfg.d_model,
        "s4_depth": cfg.s4_depth, "p_states": cfg.p_states,
        "bidirectional": cfg.bidirectional, "dropout": cfg.dropout,
        "encoder": cfg.encoder, "use_gsl": cfg.use_gsl, "use_gnn": cfg.use_gnn,
        "gsl": {"r": cfg.gsl.r, "knn_k": cfg.gsl.knn_k, "epsilon": cfg.gsl.epsilon,
                "kappa": cfg.gsl.kappa, "heads": cfg.gsl.heads},
        "reg": {"alpha": cfg.reg.alpha, "beta": cfg.reg.beta, "gamma": cfg.reg.gamma},
        "pool": {"graph_pool": cfg.pool.graph_pool, "temporal_pool": cfg.pool.temporal_pool},
        "n_classes": cfg.n_classes, "task": cfg.task,
        "fixed_graph": cfg.fixed_graph, "dtype": cfg.dtype,
        "dt_min": cfg.dt_min, "dt_max": cfg.dt_max,
    }


def config_from_dict(d: dict) -> ModelConfig:
    from .config import parse_model_config
    return parse_model_config(d)


def save_checkpoint(model: SsmGraphModel, path, extra: dict | None = None) -> bytes:
    """Write magic, version, embedded config JSON, then named f32 tensors."""
    payload = {"config": _config_to_dict(model.cfg)}
    if extra:
        payload["extra"] = extra
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    params = model.named_parameters()
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", p.ndim))
        for dim in p.shape:
            buf.write(struct.pack("<I", dim))
        buf.write(p.data.astype("<f4").tobytes())
    raw = buf.getvalue()
    if path is not None:
        with open(path, "wb") as fh:
            fh.write(raw)
    return raw


class CheckpointError(ValueError):
    pass


def load_checkpoint(path) -> tuple[SsmGraphModel, dict]:
    """Rebuild a model from a checkpoint; returns (model, extra-metadata)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0

    def need(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise CheckpointError(f"truncated checkpoint at byte {off}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    if need(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic at byte 0")
    version = struct.unpack("<I", need(4))[0]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    blob_len = struct.unpack("<I", need(4))[0]
    payload = json.loads(need(blob_len).decode("utf-8"))
    cfg = config_from_dict(payload["config"])
    model = build_model(cfg, seed=0)
    params = dict(model.named_parameters())
    n_tensors = struct.unpack("<I", need(4))[0]
    for _ in range(n_tensors):
        name_len = struct.unpack("<I", need(4))[0]
        name = need(name_len).decode("utf-8")
        ndim = struct.unpack("<I", need(4))[0]
        shape = tuple(struct.unpack("<I", need(4))[0] for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(need(4 * count), dtype="<f4").reshape(shape)
        if name not in params:
            raise CheckpointError(f"unknown parameter {name!r} in checkpoint")
        if params[name].shape != shape:
            raise CheckpointError(f"parameter {name!r} shape {shape} != {params[name].shape}")
        params[name].data[...] = values.astype(cfg.np_dtype)
    if off != len(raw):
        raise CheckpointError(f"trailing bytes at offset {off}")
    return model, payload.get("extra", {})
