"""Parameter registry, layer helpers, initialization, and gradient checking."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Mode(enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


class ComputeGraph:
    """A differentiable model: named parameters, named buffers, and a mode.

    Subclasses register parameters and buffers at construction time and
    implement ``forward``.  The operation tape is built dynamically on each
    call, so the graph is acyclic by construction.
    """

    def __init__(self) -> None:
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.mode = Mode.TRAIN

    def parameter(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params or name in self.buffers:
            raise ValueError(f"duplicate registry name {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float32), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def buffer(self, name: str, data: np.ndarray) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise ValueError(f"duplicate registry name {name!r}")
        self.buffers[name] = np.asarray(data, dtype=np.float32)
        return self.buffers[name]

    def train(self) -> "ComputeGraph":
        self.mode = Mode.TRAIN
        return self

    def eval(self) -> "ComputeGraph":
        self.mode = Mode.EVAL
        return self

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def trainable_parameters(self) -> list[Tensor]:
        return [t for t in self.params.values() if t.requires_grad]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def to_dtype(self, dtype) -> "ComputeGraph":
        for t in self.params.values():
            t.data = t.data.astype(dtype)
        for name in self.buffers:
            self.buffers[name] = self.buffers[name].astype(dtype)
        return self

    def state(self) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
        """Copy of (parameters, buffers), e.g. for best-epoch snapshots."""
        return (
            {k: t.data.copy() for k, t in self.params.items()},
            {k: b.copy() for k, b in self.buffers.items()},
        )

    def load_state(self, state: tuple[dict[str, np.ndarray], dict[str, np.ndarray]]) -> None:
        params, buffers = state
        for k, v in params.items():
            self.params[k].data = v.copy()
        for k, v in buffers.items():
            self.buffers[k][...] = v


class Conv3dLayer:
    def __init__(self, graph: ComputeGraph, name: str, cin: int, cout: int, kernel, padding=0):
        k = ad._triple(kernel)
        self.padding = padding
        self.weight = graph.parameter(f"{name}.weight", np.zeros((cout, cin, *k), np.float32))
        self.bias = graph.parameter(f"{name}.bias", np.zeros(cout, np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.conv3d(x, self.weight, self.bias, stride=1, padding=self.padding)


class DenseLayer:
    def __init__(self, graph: ComputeGraph, name: str, fin: int, fout: int):
        self.weight = graph.parameter(f"{name}.weight", np.zeros((fin, fout), np.float32))
        self.bias = graph.parameter(f"{name}.bias", np.zeros(fout, np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.dense(x, self.weight, self.bias)


class BatchNorm3dLayer:
    """Batch norm whose running buffers live in the owning graph's registry.

    ``frozen`` pins the layer to running statistics regardless of graph mode,
    so a frozen feature extractor stays bit-stable during fine-tuning.
    """

    def __init__(
        self, graph: ComputeGraph, name: str, channels: int, eps: float = 1e-5, momentum: float = 0.1
    ):
        self.graph = graph
        self.eps = eps
        self.momentum = momentum
        self.frozen = False
        self.gamma = graph.parameter(f"{name}.gamma", np.ones(channels, np.float32))
        self.beta = graph.parameter(f"{name}.beta", np.zeros(channels, np.float32))
        self.mean_name = f"{name}.running_mean"
        self.var_name = f"{name}.running_var"
        graph.buffer(self.mean_name, np.zeros(channels, np.float32))
        graph.buffer(self.var_name, np.ones(channels, np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        training = self.graph.mode is Mode.TRAIN and not self.frozen
        return ad.batchnorm(
            x,
            self.gamma,
            self.beta,
            self.graph.buffers[self.mean_name],
            self.graph.buffers[self.var_name],
            eps=self.eps,
            momentum=self.momentum,
            training=training,
        )


class InitKind(enum.Enum):
    UNIFORM = "uniform"
    XAVIER = "xavier"
    MSRA = "msra"


@dataclass(frozen=True)
class InitScheme:
    kind: InitKind = InitKind.MSRA
    seed: int = 0


def _fans(name: str, shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 2:
        return shape[0], shape[1]
    if len(shape) == 5:
        k = int(np.prod(shape[2:]))
        if name.endswith(".up_weight"):
            return shape[0] * k, shape[1] * k
        return shape[1] * k, shape[0] * k
    raise ValueError(f"cannot derive fans for {name!r} with shape {shape}")


def init_bound(kind: InitKind, fan_in: int, fan_out: int) -> float:
    """Half-width of the uniform init interval for one weight tensor."""
    if kind is InitKind.UNIFORM:
        return 0.05
    if kind is InitKind.XAVIER:
        return float(np.sqrt(6.0 / (fan_in + fan_out)))
    return float(np.sqrt(6.0 / fan_in))


def init_weights(graph: ComputeGraph, scheme: InitScheme) -> None:
    """Initialize in registry order: weights uniform within the scheme's bound,
    biases and batch-norm shifts zero, batch-norm scales one."""
    rng = np.random.default_rng(scheme.seed)
    for name, t in graph.params.items():
        if name.endswith((".weight", ".up_weight")):
            fan_in, fan_out = _fans(name, t.data.shape)
            bound = init_bound(scheme.kind, fan_in, fan_out)
            t.data = rng.uniform(-bound, bound, size=t.data.shape).astype(t.data.dtype)
        elif name.endswith(".gamma"):
            t.data = np.ones_like(t.data)
        elif name.endswith((".bias", ".beta")):
            t.data = np.zeros_like(t.data)
        else:
            raise ValueError(f"parameter {name!r} has no initialization rule")
    for name in graph.buffers:
        if name.endswith(".running_mean"):
            graph.buffers[name] = np.zeros_like(graph.buffers[name])
        elif name.endswith(".running_var"):
            graph.buffers[name] = np.ones_like(graph.buffers[name])


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst: str
    per_param: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4
    skipped: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance and not self.skipped


# Denominator floor for the relative error.  Gradients below this magnitude
# are compared at absolute scale tolerance * floor, which sits well above
# float64 difference noise but far below any real backward-rule bug.
_REL_FLOOR = 1e-3


def grad_check(
    graph: ComputeGraph,
    x: np.ndarray,
    tolerance: float = 1e-4,
    fraction: float = 0.01,
    step: float = 1e-4,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients against central differences in float64.

    The loss is a fixed random projection of the output, which exercises
    every gradient path.  A random subset (at least two entries) of each
    parameter tensor is probed.

    Relu and max-pool make the loss only piecewise smooth, and batch norm
    centers activations right at the relu kink, so a probe can straddle a
    region boundary where the difference quotient measures no derivative at
    all.  Every probe therefore records the activation decision pattern; if
    either side differs from the base point the step shrinks until both
    sides agree.  Entries that stay pinned to a kink are reported as
    skipped and fail the check rather than producing a bogus comparison.
    """
    rng = np.random.default_rng(seed)
    graph.to_dtype(np.float64)
    try:
        x64 = np.asarray(x, dtype=np.float64)
        probe_cache: dict[str, np.ndarray] = {}

        def run() -> Tensor:
            out = graph.forward(Tensor(x64))
            if "loss_weights" not in probe_cache:
                probe_cache["loss_weights"] = np.random.default_rng(seed + 1).normal(
                    size=out.data.shape
                )
            return ad.tsum(ad.mul(out, Tensor(probe_cache["loss_weights"])))

        def probe() -> tuple[float, list[np.ndarray]]:
            pattern: list[np.ndarray] = []
            with ad.no_grad(), ad.trace_patterns(pattern):
                value = run().item()
            return value, pattern

        def same(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
            return len(a) == len(b) and all(np.array_equal(p, q) for p, q in zip(a, b))

        base_pattern: list[np.ndarray] = []
        with ad.trace_patterns(base_pattern):
            loss = run()
        graph.zero_grad()
        ad.backward(loss)
        analytic = {
            name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
            for name, t in graph.params.items()
            if t.requires_grad
        }

        per_param: dict[str, float] = {}
        skipped: list[str] = []
        worst = ("", 0.0)
        for name, t in graph.params.items():
            if not t.requires_grad:
                continue
            flat = t.data.reshape(-1)
            n_probe = max(2, int(round(fraction * flat.size)))
            n_probe = min(n_probe, flat.size)
            idxs = rng.choice(flat.size, size=n_probe, replace=False)
            errs = [0.0]
            for i in idxs:
                orig = flat[i]
                h = step
                numeric = None
                for _attempt in range(7):
                    flat[i] = orig + h
                    f_plus, p_plus = probe()
                    flat[i] = orig - h
                    f_minus, p_minus = probe()
                    flat[i] = orig
                    if same(p_plus, base_pattern) and same(p_minus, base_pattern):
                        numeric = (f_plus - f_minus) / (2.0 * h)
                        break
                    h /= 4.0
                if numeric is None:
                    skipped.append(f"{name}[{int(i)}]")
                    continue
                a = float(analytic[name].reshape(-1)[i])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), _REL_FLOOR)
                errs.append(rel)
            per_param[name] = max(errs)
            if per_param[name] > worst[1]:
                worst = (name, per_param[name])
        return GradCheckReport(worst[1], worst[0], per_param, tolerance, skipped)
    finally:
        graph.to_dtype(np.float32)
