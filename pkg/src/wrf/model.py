"""Toy composed-retrieval model.

Two branches share an embedding space: a fusion MLP maps the
concatenation of a reference vector and a modification embedding to a
query embedding, and a single linear projection maps candidate target
vectors into the same space. Both outputs are row-normalized, so
retrieval is by dot product.

An optional low-rank adapter mode freezes every weight matrix and
trains factor pairs on the fusion layers instead: the effective weight
is W + A·B with A seeded-random (in x rank) and B zero-initialized
(rank x out), so at step zero the adapted model equals the base model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffcore import Executor, Graph
from .errors import ConfigError
from .loss import attach_q2t_loss
from .params import GradientSet, ParameterSet

# Seed stream tags, distinct across modules so an equal integer seed
# never aliases two different random draws.
_INIT_TAG = 0x11
_LORA_TAG = 0x12

ACTIVATIONS = ("tanh", "relu")
MODES = ("full", "lora")


@dataclass(frozen=True)
class ModelConfig:
    d_ref: int = 32
    d_mod: int = 8
    hidden: tuple[int, ...] = (64, 64)
    d_out: int = 16
    activation: str = "tanh"
    init_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        dims = (self.d_ref, self.d_mod, self.d_out, *self.hidden)
        if any(d < 1 for d in dims):
            raise ConfigError(f"all dimensions must be >= 1, got {dims}")
        if not (np.isfinite(self.init_scale) and self.init_scale > 0):
            raise ConfigError(f"init_scale must be positive, got {self.init_scale}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")


def fusion_dims(config: ModelConfig) -> list[int]:
    return [config.d_ref + config.d_mod, *config.hidden, config.d_out]


def init_model(config: ModelConfig) -> ParameterSet:
    """Seeded uniform init in [-s/sqrt(fan_in), s/sqrt(fan_in)], zero biases."""
    rng = np.random.default_rng([_INIT_TAG, config.seed])
    layers: dict[str, np.ndarray] = {}
    dims = fusion_dims(config)
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        bound = config.init_scale / np.sqrt(fan_in)
        layers[f"fusion.{i}.w"] = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers[f"fusion.{i}.b"] = np.zeros(fan_out)
    bound = config.init_scale / np.sqrt(config.d_ref)
    layers["target.w"] = rng.uniform(-bound, bound, size=(config.d_ref, config.d_out))
    layers["target.b"] = np.zeros(config.d_out)
    return ParameterSet(layers)


def set_finetune_mode(
    params: ParameterSet,
    mode: str,
    rank: int | None = None,
    config: ModelConfig | None = None,
) -> ParameterSet:
    """Return a ParameterSet wired for the given fine-tuning mode.

    full: every layer trainable. lora: weight matrices frozen; each
    fusion weight gains adapter factors lora_a (seeded random) and
    lora_b (zeros); only adapters and biases train.
    """
    if mode == "full":
        return ParameterSet({n: a.copy() for n, a in params.items()})
    if mode != "lora":
        raise ConfigError(f"fine-tune mode must be one of {MODES}, got {mode!r}")
    if rank is None or int(rank) < 1:
        raise ConfigError(f"lora mode needs a positive rank, got {rank}")
    if config is None:
        raise ConfigError("lora mode needs the model config for seeded adapter init")
    rank = int(rank)
    rng = np.random.default_rng([_LORA_TAG, config.seed])
    layers: dict[str, np.ndarray] = {}
    trainable: list[str] = []
    for name, arr in params.items():
        if name.endswith((".lora_a", ".lora_b")):
            raise ConfigError(f"params already carry adapters ({name!r})")
        layers[name] = arr.copy()
        if name.startswith("fusion.") and name.endswith(".w"):
            n_in, n_out = arr.shape
            if rank > min(n_in, n_out):
                raise ConfigError(
                    f"rank {rank} exceeds min dim of {name!r} with shape {arr.shape}"
                )
            stem = name[: -len(".w")]
            bound = config.init_scale / np.sqrt(n_in)
            layers[f"{stem}.lora_a"] = rng.uniform(-bound, bound, size=(n_in, rank))
            layers[f"{stem}.lora_b"] = np.zeros((rank, n_out))
            trainable += [f"{stem}.lora_a", f"{stem}.lora_b"]
        elif name.endswith(".b"):
            trainable.append(name)
    return ParameterSet(layers, trainable)


def _fusion_weight_node(graph: Graph, stem: str, mode: str) -> int:
    w = graph.param(f"{stem}.w")
    if mode == "lora":
        adapter = graph.matmul(graph.param(f"{stem}.lora_a"), graph.param(f"{stem}.lora_b"))
        return graph.add(w, adapter)
    return w


def _append_query_branch(g: Graph, config: ModelConfig, mode: str) -> int:
    x = g.row_concat(g.input("refs"), g.input("mods"))
    n_affine = len(config.hidden) + 1
    for i in range(n_affine):
        w = _fusion_weight_node(g, f"fusion.{i}", mode)
        x = g.bias_add(g.matmul(x, w), g.param(f"fusion.{i}.b"))
        if i < n_affine - 1:
            x = g.tanh(x) if config.activation == "tanh" else g.relu(x)
    return g.l2norm_rows(x)


def _append_target_branch(g: Graph) -> int:
    x = g.bias_add(g.matmul(g.input("targets"), g.param("target.w")), g.param("target.b"))
    return g.l2norm_rows(x)


def build_query_graph(config: ModelConfig, mode: str = "full") -> tuple[Graph, int]:
    g = Graph()
    return g, _append_query_branch(g, config, mode)


def build_target_graph(config: ModelConfig) -> tuple[Graph, int]:
    g = Graph()
    return g, _append_target_branch(g)


def build_loss_graph(config: ModelConfig, mode: str, tau: float) -> tuple[Graph, int]:
    """Joint graph: both branches plus the contrastive loss, one backward pass."""
    g = Graph()
    query = _append_query_branch(g, config, mode)
    target = _append_target_branch(g)
    return g, attach_q2t_loss(g, query, target, tau)


@dataclass
class RetrievalModel:
    """Owns the graphs for one (config, mode) pair and runs them."""

    config: ModelConfig
    mode: str = "full"
    lora_rank: int | None = None
    _loss_graphs: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"fine-tune mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "lora" and (self.lora_rank is None or self.lora_rank < 1):
            raise ConfigError("lora mode needs a positive lora_rank")
        self._query_graph, self._query_out = build_query_graph(self.config, self.mode)
        self._target_graph, self._target_out = build_target_graph(self.config)

    def init_params(self) -> ParameterSet:
        base = init_model(self.config)
        if self.mode == "lora":
            return set_finetune_mode(base, "lora", rank=self.lora_rank, config=self.config)
        return set_finetune_mode(base, "full")

    def embed_queries(self, params: ParameterSet, refs: np.ndarray, mods: np.ndarray) -> np.ndarray:
        ex = Executor(self._query_graph)
        return ex.forward({"refs": refs, "mods": mods}, params, self._query_out)

    def embed_targets(self, params: ParameterSet, targets: np.ndarray) -> np.ndarray:
        ex = Executor(self._target_graph)
        return ex.forward({"targets": targets}, params, self._target_out)

    def _loss_graph(self, tau: float) -> tuple[Graph, int]:
        key = float(tau)
        if key not in self._loss_graphs:
            self._loss_graphs[key] = build_loss_graph(self.config, self.mode, key)
        return self._loss_graphs[key]

    def batch_loss(self, params: ParameterSet, refs, mods, targets, tau: float) -> float:
        g, out = self._loss_graph(tau)
        val = Executor(g).forward({"refs": refs, "mods": mods, "targets": targets}, params, out)
        return float(val)

    def loss_and_grads(
        self, params: ParameterSet, refs, mods, targets, tau: float
    ) -> tuple[float, GradientSet]:
        g, out = self._loss_graph(tau)
        ex = Executor(g)
        val = ex.forward({"refs": refs, "mods": mods, "targets": targets}, params, out)
        return float(val), ex.backward(out)
