"""Two-phase lifetime-based page scheduling for one data-parallel rank.

Phase 1 prefetches every owned parameter page at trigger 0, then walks the
forward layers: when the projected residency at a layer's compute slot
exceeds the GPU budget it first defers the most recent prefetch of a
not-yet-needed layer onto a wait stack, and failing that evicts the
oldest already-used layer replica (which is then re-acquired for its
backward op). Gather and compute tasks are appended per layer, and parked
pages are re-scheduled as soon as headroom allows. The backward half
mirrors the forward sweep: re-acquisition for evicted layers, a backward
compute per layer, and post-backward eviction of owned pages.

Phase 2 re-triggers each all_gather at the earliest point that keeps peak
residency within budget (owned-page gathers never add memory and move to
their page's move trigger; no trigger ever increases).

Residency model: an owned page is resident from its move trigger, a
non-owned page from its gather trigger, until the next eviction trigger
or one slot past the layer's backward op; activations and parameter
gradients contribute per their trace lifetimes. trigger_id t means the
task becomes eligible when compute slot t is reached (t=0 at iteration
start).

Scheduling is a pure function; a Schedule is an immutable value.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .errors import ConfigError, InfeasibleScheduleError
from .footprint import TensorSpec
from .pagemem import PAGE_BYTES_DEFAULT
from .tracer import TensorTrace, backward_id

OPERATIONS = ("move_to_gpu", "all_gather", "compute", "evict_to_cpu")


@dataclass(frozen=True)
class Task:
    operation: str
    target: int  # page id for movement/communication, layer index for compute
    trigger_id: int
    layer: int
    slot: int  # compute slot this task serves (reporting/simulation metadata)
    owned: bool = False

    def to_dict(self) -> dict:
        return {
            "operation": self.operation,
            "target": self.target,
            "trigger_id": self.trigger_id,
            "layer": self.layer,
            "slot": self.slot,
            "owned": self.owned,
        }


@dataclass(frozen=True)
class ShardingModel:
    """Even page-level partitioning of parameters across data-parallel ranks."""

    world_size: int = 1
    rank: int = 0

    def __post_init__(self):
        if self.world_size < 1 or not (0 <= self.rank < self.world_size):
            raise ConfigError(
                f"bad sharding: world_size={self.world_size} rank={self.rank}"
            )

    def owner(self, page_id: int) -> int:
        return page_id % self.world_size

    def owns(self, page_id: int) -> bool:
        return self.owner(page_id) == self.rank


class LayerModel:
    """Per-layer parameter pages plus the tensor size table behind the traces."""

    def __init__(self, num_layers: int, page_bytes: int,
                 layer_param_bytes: list[int], layer_optim_bytes: list[int],
                 tensor_info: dict[int, TensorSpec], batch_size: int = 1):
        if num_layers < 1:
            raise ConfigError("model needs at least one layer")
        self.num_layers = num_layers
        self.page_bytes = page_bytes
        self.layer_param_bytes = list(layer_param_bytes)
        self.layer_optim_bytes = list(layer_optim_bytes)
        self.tensor_info = dict(tensor_info)
        self.batch_size = batch_size
        self.layer_pages: list[list[int]] = []
        self.page_layer: dict[int, int] = {}
        next_page = 0
        for layer in range(num_layers):
            count = max(1, math.ceil(layer_param_bytes[layer] / page_bytes))
            pages = list(range(next_page, next_page + count))
            next_page += count
            self.layer_pages.append(pages)
            for pid in pages:
                self.page_layer[pid] = layer

    @classmethod
    def from_inventory(cls, inventory: list[TensorSpec],
                       page_bytes: int = PAGE_BYTES_DEFAULT,
                       batch_size: int = 1) -> "LayerModel":
        num_layers = max(s.layer_index for s in inventory) + 1
        params = [0] * num_layers
        optims = [0] * num_layers
        for spec in inventory:
            if spec.kind == "param16":
                params[spec.layer_index] += spec.bytes
            elif spec.kind == "optim32":
                optims[spec.layer_index] += spec.bytes
        info = {i: spec for i, spec in enumerate(inventory)}
        return cls(num_layers, page_bytes, params, optims, info, batch_size)

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "page_bytes": self.page_bytes,
            "layer_param_bytes": self.layer_param_bytes,
            "layer_optim_bytes": self.layer_optim_bytes,
            "batch_size": self.batch_size,
            "tensors": [
                {"tensor_id": tid, "name": s.name, "kind": s.kind,
                 "bytes": s.bytes, "layer_index": s.layer_index}
                for tid, s in sorted(self.tensor_info.items())
            ],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "LayerModel":
        info = {
            t["tensor_id"]: TensorSpec(t["name"], t["kind"], t["bytes"], t["layer_index"])
            for t in raw["tensors"]
        }
        return cls(raw["num_layers"], raw["page_bytes"], raw["layer_param_bytes"],
                   raw["layer_optim_bytes"], info, raw.get("batch_size", 1))


@dataclass(frozen=True)
class Schedule:
    tasks: tuple[Task, ...]
    phase: str  # "phase1" | "phase2"
    gpu_budget: int
    model: LayerModel = field(compare=False)
    sharding: ShardingModel = ShardingModel()

    @property
    def num_slots(self) -> int:
        return 2 * self.model.num_layers

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "gpu_budget": self.gpu_budget,
            "world_size": self.sharding.world_size,
            "rank": self.sharding.rank,
            "model": self.model.to_dict(),
            "tasks": [t.to_dict() for t in self.tasks],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Schedule":
        tasks = tuple(
            Task(t["operation"], t["target"], t["trigger_id"], t["layer"],
                 t["slot"], t.get("owned", False))
            for t in raw["tasks"]
        )
        return cls(tasks, raw["phase"], raw["gpu_budget"],
                   LayerModel.from_dict(raw["model"]),
                   ShardingModel(raw.get("world_size", 1), raw.get("rank", 0)))


# -- residency ---------------------------------------------------------------

_RESIDENT_KINDS = ("activation16", "grad16")


def _resident_profile(tasks, model: LayerModel, sharding: ShardingModel,
                      traces: list[TensorTrace], exclude_layer: int | None = None) -> list[int]:
    """Resident GPU bytes per compute slot (diff-array sweep)."""
    n = model.num_layers
    horizon = 2 * n
    delta = [0] * (horizon + 2)

    moves: dict[int, list[int]] = {}
    gathers: dict[int, list[int]] = {}
    evicts: dict[int, list[int]] = {}
    for task in tasks:
        if task.operation == "move_to_gpu":
            moves.setdefault(task.target, []).append(task.trigger_id)
        elif task.operation == "all_gather":
            gathers.setdefault(task.target, []).append(task.trigger_id)
        elif task.operation == "evict_to_cpu":
            evicts.setdefault(task.target, []).append(task.trigger_id)

    page_bytes = model.page_bytes
    for pid, layer in model.page_layer.items():
        if layer == exclude_layer:
            continue
        release_default = backward_id(layer, n) + 1
        acquires = sorted(moves.get(pid, ())) if sharding.owns(pid) \
            else sorted(gathers.get(pid, ()))
        rels = sorted(evicts.get(pid, ()))
        for a in acquires:
            r = next((e for e in rels if e > a), release_default)
            r = min(r, release_default)
            if r > a:
                delta[min(a, horizon)] += page_bytes
                delta[min(r, horizon)] -= page_bytes
    for tr in traces:
        spec = model.tensor_info.get(tr.tensor_id)
        if spec is None or spec.kind not in _RESIDENT_KINDS:
            continue
        if spec.layer_index == exclude_layer:
            continue
        delta[min(tr.first_id, horizon)] += spec.bytes
        delta[min(tr.end_id + 1, horizon)] -= spec.bytes

    profile = [0] * horizon
    running = 0
    for x in range(horizon):
        running += delta[x]
        profile[x] = running
    return profile


def available_memory(schedule: Schedule, traces: list[TensorTrace], at_id: int) -> int:
    """GPU budget minus bytes resident at a logical compute slot."""
    if not (0 <= at_id < schedule.num_slots):
        raise ConfigError(f"at_id {at_id} outside [0, {schedule.num_slots})")
    profile = _resident_profile(schedule.tasks, schedule.model, schedule.sharding, traces)
    return schedule.gpu_budget - profile[at_id]


def peak_memory(schedule: Schedule, traces: list[TensorTrace]) -> int:
    """Max resident bytes over all logical slots; 0 for an empty schedule."""
    if not schedule.tasks:
        return 0
    profile = _resident_profile(schedule.tasks, schedule.model, schedule.sharding, traces)
    return max(profile)


def _layer_working_set(model: LayerModel, traces: list[TensorTrace], layer: int) -> int:
    """Gathered FP16 params of the layer plus its peak live traced bytes."""
    n = model.num_layers
    slots = (layer, backward_id(layer, n))
    live = {s: 0 for s in slots}
    for tr in traces:
        spec = model.tensor_info.get(tr.tensor_id)
        if spec is None or spec.kind not in _RESIDENT_KINDS or spec.layer_index != layer:
            continue
        for s in slots:
            if tr.first_id <= s <= tr.end_id:
                live[s] += spec.bytes
    return len(model.layer_pages[layer]) * model.page_bytes + max(live.values())


# -- phase 1 -----------------------------------------------------------------

def _build_phase1(model: LayerModel, traces: list[TensorTrace], gpu_budget: int,
                  sharding: ShardingModel) -> tuple[list[Task], dict[int, int]]:
    n = model.num_layers
    page_bytes = model.page_bytes
    own_pages = [[p for p in pages if sharding.owns(p)] for pages in model.layer_pages]

    sizes = [_layer_working_set(model, traces, i) for i in range(n)]
    for i, size in enumerate(sizes):
        if size > gpu_budget:
            raise InfeasibleScheduleError(i, size, gpu_budget)

    tasks: list[Task] = []
    for i in range(n):
        for pid in own_pages[i]:
            tasks.append(Task("move_to_gpu", pid, 0, i, i, True))

    wait_stack: list[int] = []
    evicted_fwd: dict[int, int] = {}

    def avail(at: int, exclude: int | None) -> int:
        profile = _resident_profile(tasks, model, sharding, traces, exclude_layer=exclude)
        return gpu_budget - profile[at]

    for i in range(n):
        # pages of this layer parked earlier must move now (the gather needs them)
        for pid in [p for p in wait_stack if model.page_layer[p] == i]:
            wait_stack.remove(pid)
            tasks.append(Task("move_to_gpu", pid, i, i, i, True))

        while avail(i, exclude=i) < sizes[i]:
            deferred = False
            for idx in range(len(tasks) - 1, -1, -1):
                t = tasks[idx]
                if t.operation == "move_to_gpu" and t.layer > i:
                    tasks.pop(idx)
                    wait_stack.append(t.target)
                    deferred = True
                    break
            if deferred:
                continue
            victim = next(
                (j for j in range(i) if j not in evicted_fwd), None
            )
            if victim is None:
                raise InfeasibleScheduleError(i, sizes[i], avail(i, exclude=i))
            for pid in model.layer_pages[victim]:
                tasks.append(Task("evict_to_cpu", pid, i, victim, i,
                                  sharding.owns(pid)))
            evicted_fwd[victim] = i

        for pid in model.layer_pages[i]:
            tasks.append(Task("all_gather", pid, i, i, i, sharding.owns(pid)))
        tasks.append(Task("compute", i, i, i, i))

        while wait_stack and avail(i, exclude=None) > page_bytes:
            pid = wait_stack.pop()
            layer = model.page_layer[pid]
            tasks.append(Task("move_to_gpu", pid, i, layer, layer, True))

    assert not wait_stack, "wait stack must drain by the end of the forward sweep"

    for slot in range(n, 2 * n):
        i = 2 * n - 1 - slot
        if i in evicted_fwd:
            for pid in own_pages[i]:
                tasks.append(Task("move_to_gpu", pid, slot, i, slot, True))
            for pid in model.layer_pages[i]:
                tasks.append(Task("all_gather", pid, slot, i, slot, sharding.owns(pid)))
        tasks.append(Task("compute", i, slot, i, slot))
        for pid in own_pages[i]:
            tasks.append(Task("evict_to_cpu", pid, slot + 1, i, slot, True))

    return tasks, evicted_fwd


# -- phase 2 -----------------------------------------------------------------

def advance_gathers(schedule: Schedule, traces: list[TensorTrace]) -> Schedule:
    """Re-trigger each all_gather at its earliest in-budget point.

    Tasks are scanned in schedule order. An owned page's gather may never
    precede that page's move; a non-owned gather stops at the first slot
    whose residency would overflow the budget. Only gather triggers change,
    and none increases.
    """
    model, sharding = schedule.model, schedule.sharding
    page_bytes = model.page_bytes
    budget = schedule.gpu_budget
    tasks = list(schedule.tasks)
    resident = _resident_profile(tasks, model, sharding, traces)

    moves_by_page: dict[int, list[int]] = {}
    evicts_by_page: dict[int, list[int]] = {}
    for t in tasks:
        if t.operation == "move_to_gpu":
            moves_by_page.setdefault(t.target, []).append(t.trigger_id)
        elif t.operation == "evict_to_cpu":
            evicts_by_page.setdefault(t.target, []).append(t.trigger_id)

    for idx, task in enumerate(tasks):
        if task.operation != "all_gather":
            continue
        old = task.trigger_id
        # a re-gather may not precede the eviction it recovers from
        lb = max([e for e in evicts_by_page.get(task.target, []) if e <= old],
                 default=0)
        if task.owned:
            moves = [m for m in moves_by_page.get(task.target, []) if m <= old]
            lb = max(lb, max(moves) if moves else old)
            new = lb  # owned-page gathers reuse the resident shard: no memory cost
        else:
            new = old
            while new > lb and resident[new - 1] + page_bytes <= budget:
                new -= 1
            for x in range(new, old):
                resident[x] += page_bytes
        if new != old:
            tasks[idx] = replace(task, trigger_id=new)

    order = sorted(range(len(tasks)), key=lambda k: (tasks[k].trigger_id, k))
    return Schedule(tuple(tasks[k] for k in order), "phase2",
                    budget, model, sharding)


def schedule(model_layers: LayerModel, traces: list[TensorTrace], gpu_budget: int,
             sharding: ShardingModel | None = None, phase1_only: bool = False) -> Schedule:
    """Emit the page-level task schedule for one rank under a GPU budget."""
    sharding = sharding or ShardingModel()
    tasks, _ = _build_phase1(model_layers, traces, gpu_budget, sharding)
    phase1 = Schedule(tuple(tasks), "phase1", gpu_budget, model_layers, sharding)
    peak = peak_memory(phase1, traces)
    if peak > gpu_budget:
        profile = _resident_profile(tasks, model_layers, sharding, traces)
        slot = profile.index(peak)
        n = model_layers.num_layers
        layer = slot if slot < n else 2 * n - 1 - slot
        raise InfeasibleScheduleError(layer, peak, gpu_budget)
    if phase1_only:
        return phase1
    return advance_gathers(phase1, traces)


# -- validation --------------------------------------------------------------

def validate_schedule(schedule: Schedule, traces: list[TensorTrace],
                      budget: int | None = None) -> list[str]:
    """Empty list iff the schedule fits the budget and respects dependencies."""
    budget = schedule.gpu_budget if budget is None else budget
    violations: list[str] = []

    peak = peak_memory(schedule, traces)
    if peak > budget:
        violations.append(f"peak memory {peak} exceeds budget {budget}")

    gathers_by_page: dict[int, list[Task]] = {}
    moves_by_page: dict[int, list[Task]] = {}
    for t in schedule.tasks:
        if t.operation == "all_gather":
            gathers_by_page.setdefault(t.target, []).append(t)
        elif t.operation == "move_to_gpu":
            moves_by_page.setdefault(t.target, []).append(t)

    for t in schedule.tasks:
        if t.operation != "compute":
            continue
        for pid in schedule.model.layer_pages[t.target]:
            gs = gathers_by_page.get(pid, [])
            if not any(g.trigger_id <= t.trigger_id for g in gs):
                violations.append(
                    f"compute(layer {t.target}, slot {t.slot}) lacks a preceding "
                    f"all_gather for page {pid}"
                )

    for pid, gs in gathers_by_page.items():
        if not schedule.sharding.owns(pid):
            continue
        for g in gs:
            ms = moves_by_page.get(pid, [])
            if not any(m.trigger_id <= g.trigger_id for m in ms):
                violations.append(
                    f"all_gather of owned page {pid} at trigger {g.trigger_id} "
                    f"precedes its move_to_gpu"
                )

    last = -1
    for t in schedule.tasks:
        if t.operation == "compute":
            if t.trigger_id <= last:
                violations.append(
                    f"compute triggers not strictly increasing at slot {t.slot}"
                )
            last = t.trigger_id

    return violations
