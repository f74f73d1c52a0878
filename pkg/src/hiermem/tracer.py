"""Derive per-tensor lifetimes and timing estimates from a model description.

The logical timeline of one training iteration is the 2n compute ops
``forward(l_0..l_{n-1})`` then ``backward(l_{n-1}..l_0})``; lifetimes are
intervals of logical op indices, never wall times. Parameters live from
their forward to their backward op; activations likewise unless
recomputation collapses intermediate ones into their own forward op;
parameter gradients exist only at the backward op. FP32 optimizer-state
tensors are CPU/SSD residents and carry no GPU lifetime here (the
lock-free module owns their CPU timeline).

Pure derivation; everything here is safe to call concurrently.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError
from .footprint import TensorSpec

# Default proportional-timing rates: activation/gradient production charged
# at an HBM-stream proxy, optimizer math at a DDR-stream proxy.
GPU_SEC_PER_BYTE_DEFAULT = 1.0 / 600e9
CPU_SEC_PER_BYTE_DEFAULT = 1.0 / 80e9


def forward_id(layer: int) -> int:
    return layer


def backward_id(layer: int, num_layers: int) -> int:
    return 2 * num_layers - 1 - layer


@dataclass(frozen=True)
class TensorTrace:
    """Lifetime record: first/last logical access plus production times."""

    tensor_id: int
    first_id: int
    end_id: int
    cpu_time: float
    gpu_time: float


@dataclass(frozen=True)
class LogicalOp:
    index: int
    kind: str  # "forward" | "backward"
    layer: int
    gpu_time: float
    cpu_time: float


@dataclass(frozen=True)
class LogicalTimeline:
    """Forward ops l_0..l_{n-1} followed by backward ops l_{n-1}..l_0."""

    num_layers: int
    ops: tuple[LogicalOp, ...]

    @property
    def num_ops(self) -> int:
        return 2 * self.num_layers

    @classmethod
    def build(cls, num_layers: int, traces: "list[TensorTrace] | None" = None) -> "LogicalTimeline":
        if num_layers < 1:
            raise ConfigError("timeline needs at least one layer")
        gpu = [0.0] * (2 * num_layers)
        cpu = [0.0] * (2 * num_layers)
        for tr in traces or []:
            gpu[tr.first_id] += tr.gpu_time
            cpu[tr.first_id] += tr.cpu_time
        ops = []
        for i in range(num_layers):
            ops.append(LogicalOp(i, "forward", i, gpu[i], cpu[i]))
        for i in reversed(range(num_layers)):
            idx = backward_id(i, num_layers)
            ops.append(LogicalOp(idx, "backward", i, gpu[idx], cpu[idx]))
        return cls(num_layers, tuple(ops))


@dataclass(frozen=True)
class TimingModel:
    """Per-tensor production-time estimates.

    kind="proportional": gpu time scales with produced activation/gradient
    bytes, cpu time with the optimizer-state bytes behind each parameter
    tensor (optims are exactly 3x the params bytes, i.e. 6x the param16
    half). kind="constant": flat per-tensor times. kind="table": explicit
    per-name lookup with (cpu_time, gpu_time) values.
    """

    kind: str = "proportional"
    gpu_sec_per_byte: float = GPU_SEC_PER_BYTE_DEFAULT
    cpu_sec_per_byte: float = CPU_SEC_PER_BYTE_DEFAULT
    gpu_time_const: float = 1e-3
    cpu_time_const: float = 1e-3
    table: dict = field(default_factory=dict)

    def times_for(self, spec: TensorSpec) -> tuple[float, float]:
        """Returns (cpu_time, gpu_time) for producing this tensor."""
        if self.kind == "table":
            if spec.name not in self.table:
                raise ConfigError(f"timing table has no entry for {spec.name!r}")
            cpu, gpu = self.table[spec.name]
            return float(cpu), float(gpu)
        if self.kind == "constant":
            if spec.kind == "param16":
                return self.cpu_time_const, 0.0
            if spec.kind in ("activation16", "grad16"):
                return 0.0, self.gpu_time_const
            return 0.0, 0.0
        if self.kind == "proportional":
            if spec.kind in ("activation16", "grad16"):
                return 0.0, spec.bytes * self.gpu_sec_per_byte
            if spec.kind == "param16":
                return 6 * spec.bytes * self.cpu_sec_per_byte, 0.0
            return 0.0, 0.0
        raise ConfigError(f"unknown timing model kind {self.kind!r}")

    @classmethod
    def from_dict(cls, raw: dict) -> "TimingModel":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown timing fields: {sorted(unknown)}")
        return cls(**raw)


def _is_checkpoint_act(spec: TensorSpec) -> bool:
    # The layer's boundary output (final LayerNorm activation) is kept under
    # recomputation; everything else internal regenerates during backward.
    return spec.name.endswith("post_ffn.layer_norm.act16")


def build_trace(
    inventory: list[TensorSpec],
    timing_model: TimingModel | None = None,
    recompute_policy: bool = False,
) -> list[TensorTrace]:
    """Lifetimes for every GPU-resident tensor in the inventory.

    Tensor ids are inventory list indices. Optimizer-state tensors are
    skipped (no GPU lifetime). With ``recompute_policy`` on, intermediate
    activations collapse to their forward op while checkpointed boundary
    activations keep their regeneration access at the backward op.
    """
    if not inventory:
        raise ConfigError("empty tensor inventory")
    timing = timing_model or TimingModel()
    n = max(spec.layer_index for spec in inventory) + 1
    traces: list[TensorTrace] = []
    for tensor_id, spec in enumerate(inventory):
        if spec.kind == "optim32":
            continue
        cpu_t, gpu_t = timing.times_for(spec)
        fwd, bwd = forward_id(spec.layer_index), backward_id(spec.layer_index, n)
        if spec.kind in ("param16",):
            first, end = fwd, bwd
        elif spec.kind == "grad16":
            first = end = bwd
        else:  # activation16
            if recompute_policy and not _is_checkpoint_act(spec):
                first = end = fwd
            else:
                first, end = fwd, bwd
        traces.append(TensorTrace(tensor_id, first, end, cpu_t, gpu_t))
    return traces


def validate_trace(traces: list[TensorTrace], timeline: LogicalTimeline) -> list[str]:
    """Empty list iff ids are unique and every trace fits the timeline."""
    violations: list[str] = []
    seen: set[int] = set()
    for tr in traces:
        if tr.tensor_id in seen:
            violations.append(f"tensor {tr.tensor_id}: duplicate tensor_id")
        seen.add(tr.tensor_id)
        if tr.first_id > tr.end_id:
            violations.append(
                f"tensor {tr.tensor_id}: first_id {tr.first_id} > end_id {tr.end_id}"
            )
        if tr.first_id < 0 or tr.end_id >= timeline.num_ops:
            violations.append(
                f"tensor {tr.tensor_id}: lifetime [{tr.first_id}, {tr.end_id}] outside "
                f"[0, {timeline.num_ops})"
            )
        if tr.cpu_time < 0 or tr.gpu_time < 0:
            violations.append(f"tensor {tr.tensor_id}: negative production time")
    return violations


def peak_live_bytes(traces: list[TensorTrace], sizes: dict[int, int], num_ops: int) -> int:
    """Peak concurrently-live bytes over the timeline (sweep by op index)."""
    delta = [0] * (num_ops + 1)
    for tr in traces:
        delta[tr.first_id] += sizes[tr.tensor_id]
        delta[tr.end_id + 1] -= sizes[tr.tensor_id]
    peak = live = 0
    for x in range(num_ops):
        live += delta[x]
        peak = max(peak, live)
    return peak
