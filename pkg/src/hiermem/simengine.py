"""Deterministic discrete-event replay of a page schedule on a hardware profile.

Every resource (GPU compute, the two PCIe directions, the inter-GPU link,
CPU, SSD) is a FIFO service queue; a task joins its queue once its trigger
slot is reached and its dependencies finished, and queued tasks are served
in arrival order with ties broken by task index. A task with trigger t
becomes eligible when compute slot t is reached, i.e. when slot t-1
finishes (t=0 at iteration start). Compute slot durations come from the
trace production times: activations charge half at their forward op and
half at their last (gradient-side) op, gradients charge fully at their
backward op.

The optional synchronous-update mode appends a per-layer optimizer
pipeline (SSD fetch, CPU update, SSD store over the rank's state shard)
gated on that layer's gradient offload, and the next iteration starts only
after the pipeline drains.

The event loop is single-threaded and deterministic; resource exclusivity
and causality are re-checked after every run.
"""
from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

from .errors import ConfigError, SimulationError
from .scheduler import Schedule
from .tracer import TensorTrace

LINKS = ("pcie_h2d", "pcie_d2h", "gpu_interconnect", "ssd_io")
DEFAULT_LATENCY_S = 10e-6


@dataclass(frozen=True)
class LinkSpec:
    bandwidth_bytes_per_s: float
    latency_s: float = DEFAULT_LATENCY_S

    def __post_init__(self):
        if self.bandwidth_bytes_per_s <= 0 or self.latency_s < 0:
            raise ConfigError("link needs positive bandwidth and non-negative latency")


@dataclass(frozen=True)
class HardwareProfile:
    """Tier bandwidths/latencies plus compute rates for one GPU server."""

    links: dict[str, LinkSpec]
    gpu_bytes_per_s: float = 600e9
    cpu_bytes_per_s: float = 80e9
    num_gpus: int = 1
    pcie_lanes: int = 4

    def __post_init__(self):
        missing = set(LINKS) - set(self.links)
        if missing:
            raise ConfigError(f"profile lacks links: {sorted(missing)}")
        if self.gpu_bytes_per_s <= 0 or self.cpu_bytes_per_s <= 0:
            raise ConfigError("compute rates must be positive")
        if self.num_gpus < 1 or self.pcie_lanes < 1:
            raise ConfigError("num_gpus and pcie_lanes must be >= 1")

    def transfer_time(self, nbytes: int, link: str) -> float:
        """latency + bytes/bandwidth for a single transfer on a link."""
        if link not in self.links:
            raise ConfigError(f"unknown link {link!r}")
        spec = self.links[link]
        return spec.latency_s + nbytes / spec.bandwidth_bytes_per_s

    def pcie_effective_bw(self, link: str) -> float:
        """Per-rank PCIe bandwidth when num_gpus ranks share pcie_lanes links."""
        spec = self.links[link]
        return spec.bandwidth_bytes_per_s * min(1.0, self.pcie_lanes / self.num_gpus)

    def to_dict(self) -> dict:
        return {
            "links": {
                name: {"bandwidth_bytes_per_s": s.bandwidth_bytes_per_s,
                       "latency_s": s.latency_s}
                for name, s in sorted(self.links.items())
            },
            "gpu_bytes_per_s": self.gpu_bytes_per_s,
            "cpu_bytes_per_s": self.cpu_bytes_per_s,
            "num_gpus": self.num_gpus,
            "pcie_lanes": self.pcie_lanes,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "HardwareProfile":
        links = {
            name: LinkSpec(entry["bandwidth_bytes_per_s"],
                           entry.get("latency_s", DEFAULT_LATENCY_S))
            for name, entry in raw["links"].items()
        }
        return cls(links,
                   raw.get("gpu_bytes_per_s", 600e9),
                   raw.get("cpu_bytes_per_s", 80e9),
                   raw.get("num_gpus", 1),
                   raw.get("pcie_lanes", 4))


def transfer_time(nbytes: int, link: str, profile: HardwareProfile) -> float:
    return profile.transfer_time(nbytes, link)


@dataclass(frozen=True)
class TimelineEntry:
    task_id: str
    operation: str
    resource: str
    start_s: float
    end_s: float


@dataclass(frozen=True)
class SimReport:
    makespan_s: float
    busy_s: dict[str, float]
    utilization: dict[str, float]
    gpu_idle_fraction: float
    timeline: tuple[TimelineEntry, ...]
    samples_per_s: float
    metadata: dict

    def to_dict(self) -> dict:
        return {
            "makespan_s": self.makespan_s,
            "busy_s": dict(sorted(self.busy_s.items())),
            "utilization": dict(sorted(self.utilization.items())),
            "gpu_idle_fraction": self.gpu_idle_fraction,
            "samples_per_s": self.samples_per_s,
            "metadata": self.metadata,
            "timeline": [
                {"task_id": e.task_id, "operation": e.operation, "resource": e.resource,
                 "start_s": e.start_s, "end_s": e.end_s}
                for e in self.timeline
            ],
        }


def compare(report_a: SimReport, report_b: SimReport) -> dict:
    """speedup = makespan_a / makespan_b, plus per-resource utilization deltas."""
    resources = set(report_a.utilization) | set(report_b.utilization)
    return {
        "speedup": report_a.makespan_s / report_b.makespan_s,
        "utilization_delta": {
            r: report_b.utilization.get(r, 0.0) - report_a.utilization.get(r, 0.0)
            for r in sorted(resources)
        },
    }


@dataclass
class _SimTask:
    uid: int
    task_id: str
    operation: str
    resource: str | None  # None = control task, completes at arrival
    duration: float
    deps: list[int] = field(default_factory=list)


def _slot_durations(schedule: Schedule, traces: list[TensorTrace]) -> list[float]:
    model = schedule.model
    dur = [0.0] * (2 * model.num_layers)
    for tr in traces:
        spec = model.tensor_info.get(tr.tensor_id)
        if spec is None or spec.kind not in ("activation16", "grad16"):
            continue
        if spec.kind == "activation16" and tr.end_id != tr.first_id:
            dur[tr.first_id] += tr.gpu_time / 2
            dur[tr.end_id] += tr.gpu_time / 2
        else:
            dur[tr.first_id] += tr.gpu_time
    return dur


def _layer_update_cpu_s(schedule: Schedule, traces: list[TensorTrace]) -> list[float]:
    model = schedule.model
    out = [0.0] * model.num_layers
    for tr in traces:
        spec = model.tensor_info.get(tr.tensor_id)
        if spec is not None and spec.kind == "param16":
            out[spec.layer_index] += tr.cpu_time
    world = schedule.sharding.world_size
    return [t / world for t in out]


def simulate(schedule: Schedule, traces: list[TensorTrace], profile: HardwareProfile,
             iterations: int = 1, update_mode: str = "none",
             optimizer_tier: str = "ssd") -> SimReport:
    """Replay the schedule and report makespan, utilization, and idle fraction."""
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    if update_mode not in ("none", "sync"):
        raise ConfigError(f"unknown update_mode {update_mode!r}")
    if optimizer_tier not in ("ssd", "cpu"):
        raise ConfigError(f"unknown optimizer_tier {optimizer_tier!r}")

    model = schedule.model
    n = model.num_layers
    num_slots = 2 * n
    page_bytes = model.page_bytes
    world = schedule.sharding.world_size

    slot_dur = _slot_durations(schedule, traces)
    update_cpu = _layer_update_cpu_s(schedule, traces)
    h2d_bw = profile.pcie_effective_bw("pcie_h2d")
    d2h_bw = profile.pcie_effective_bw("pcie_d2h")
    h2d_lat = profile.links["pcie_h2d"].latency_s
    d2h_lat = profile.links["pcie_d2h"].latency_s
    gather_frac = (world - 1) / world

    sim_tasks: list[_SimTask] = []

    def add(task_id, operation, resource, duration, deps):
        sim_tasks.append(_SimTask(len(sim_tasks), task_id, operation, resource,
                                  duration, deps))
        return sim_tasks[-1].uid

    compute_tasks = {}
    for t in schedule.tasks:
        if t.operation == "compute":
            if t.trigger_id in compute_tasks:
                raise SimulationError(f"two compute tasks share trigger {t.trigger_id}")
            compute_tasks[t.trigger_id] = t
    by_trigger: dict[int, list] = {}
    for t in schedule.tasks:
        if t.operation != "compute":
            by_trigger.setdefault(t.trigger_id, []).append(t)
    max_trigger = max((t.trigger_id for t in schedule.tasks), default=0)

    prev_iteration_uids: list[int] = []
    for it in range(iterations):
        gate = add(f"it{it}.gate", "gate", None, 0.0, list(prev_iteration_uids))
        iteration_uids: list[int] = [gate]

        prev_comp: int | None = None  # latest compute instantiated so far
        compute_uid: dict[int, int] = {}
        moves_done: dict[int, list[tuple[int, int]]] = {}  # page -> [(trigger, uid)]
        gather_uids_by_slot: dict[int, list[int]] = {}
        evict_uids_by_layer: dict[int, list[int]] = {}

        for slot in range(max_trigger + 1):
            # trigger t tasks become eligible when slot t is reached, i.e. at
            # the finish of the latest compute before slot t (or at the gate)
            elig = gate if slot == 0 or prev_comp is None else prev_comp
            for t in by_trigger.get(slot, []):
                if t.operation == "move_to_gpu":
                    dur = h2d_lat + page_bytes / h2d_bw
                    uid = add(f"it{it}.move.p{t.target}@{t.trigger_id}",
                              "move_to_gpu", "pcie_h2d", dur, [elig])
                    moves_done.setdefault(t.target, []).append((t.trigger_id, uid))
                elif t.operation == "all_gather":
                    dur = profile.links["gpu_interconnect"].latency_s + \
                        page_bytes * gather_frac / profile.links["gpu_interconnect"].bandwidth_bytes_per_s
                    deps = [elig]
                    if t.owned:
                        cands = [u for (trig, u) in moves_done.get(t.target, [])
                                 if trig <= t.trigger_id]
                        if not cands:
                            raise SimulationError(
                                f"all_gather of owned page {t.target} has no earlier move"
                            )
                        deps.append(cands[-1])
                    uid = add(f"it{it}.gather.p{t.target}@{t.trigger_id}",
                              "all_gather", "gpu_interconnect", dur, deps)
                    gather_uids_by_slot.setdefault(t.slot, []).append(uid)
                elif t.operation == "evict_to_cpu":
                    dur = d2h_lat + page_bytes / d2h_bw
                    uid = add(f"it{it}.evict.p{t.target}@{t.trigger_id}",
                              "evict_to_cpu", "pcie_d2h", dur, [elig])
                    evict_uids_by_layer.setdefault(t.layer, []).append(uid)
                else:
                    raise SimulationError(f"unknown operation {t.operation!r}")
                iteration_uids.append(sim_tasks[-1].uid)

            ct = compute_tasks.get(slot)
            if ct is not None:
                deps = ([prev_comp] if prev_comp is not None else [gate])
                deps += gather_uids_by_slot.get(slot, [])
                dur = slot_dur[slot] if slot < num_slots else 0.0
                uid = add(f"it{it}.compute.s{slot}.l{ct.target}", "compute", "gpu",
                          dur, deps)
                compute_uid[slot] = uid
                prev_comp = uid
                iteration_uids.append(uid)

        if update_mode == "sync":
            prev_in_pipe: int | None = None
            last_comp = prev_comp if prev_comp is not None else gate
            for layer in reversed(range(n)):
                grad_deps = evict_uids_by_layer.get(
                    layer, [compute_uid.get(2 * n - 1 - layer, last_comp)]
                )
                shard_state_bytes = model.layer_optim_bytes[layer] // world
                if optimizer_tier == "ssd":
                    fetch_dur = profile.transfer_time(shard_state_bytes, "ssd_io")
                    deps = list(grad_deps)
                    if prev_in_pipe is not None:
                        deps.append(prev_in_pipe)
                    fetch = add(f"it{it}.optim_fetch.l{layer}", "optim_fetch",
                                "ssd_io", fetch_dur, deps)
                    upd = add(f"it{it}.optim_update.l{layer}", "optim_update",
                              "cpu", update_cpu[layer], [fetch])
                    store = add(f"it{it}.optim_store.l{layer}", "optim_store",
                                "ssd_io", fetch_dur, [upd])
                    prev_in_pipe = store
                    iteration_uids += [fetch, upd, store]
                else:
                    deps = list(grad_deps)
                    if prev_in_pipe is not None:
                        deps.append(prev_in_pipe)
                    upd = add(f"it{it}.optim_update.l{layer}", "optim_update",
                              "cpu", update_cpu[layer], deps)
                    prev_in_pipe = upd
                    iteration_uids.append(upd)

        prev_iteration_uids = iteration_uids

    finish = _run_event_loop(sim_tasks)

    timeline = []
    busy: dict[str, float] = {}
    for t in sim_tasks:
        if t.resource is None:
            continue
        start, end = finish[t.uid][0], finish[t.uid][1]
        timeline.append(TimelineEntry(t.task_id, t.operation, t.resource, start, end))
        busy[t.resource] = busy.get(t.resource, 0.0) + (end - start)
    makespan = max((f[1] for f in finish.values()), default=0.0)
    _post_hoc_checks(sim_tasks, finish)

    utilization = {r: (b / makespan if makespan > 0 else 0.0) for r, b in busy.items()}
    gpu_busy = busy.get("gpu", 0.0)
    idle = 1.0 - gpu_busy / makespan if makespan > 0 else 0.0
    samples = iterations * model.batch_size
    return SimReport(
        makespan_s=makespan,
        busy_s=busy,
        utilization=utilization,
        gpu_idle_fraction=idle,
        timeline=tuple(sorted(timeline, key=lambda e: (e.start_s, e.task_id))),
        samples_per_s=samples / makespan if makespan > 0 else math.inf,
        metadata={
            "iterations": iterations,
            "update_mode": update_mode,
            "optimizer_tier": optimizer_tier if update_mode == "sync" else None,
            "allgather_cost_model": "per page: latency + bytes*(N-1)/N / link bandwidth",
            "num_gpus": profile.num_gpus,
            "pcie_lanes": profile.pcie_lanes,
            "schedule_phase": schedule.phase,
        },
    )


def _run_event_loop(sim_tasks: list[_SimTask]) -> dict[int, tuple[float, float]]:
    """FIFO-per-resource event loop; returns uid -> (start, finish)."""
    pending = {t.uid: len(t.deps) for t in sim_tasks}
    dependents: dict[int, list[int]] = {}
    for t in sim_tasks:
        for d in t.deps:
            dependents.setdefault(d, []).append(t.uid)

    queues: dict[str, list] = {}
    running: dict[str, int | None] = {}
    finish: dict[int, tuple[float, float]] = {}
    events: list[tuple[float, int, int]] = []  # (time, seq, uid) completions
    seq = 0

    def enqueue(uid: int, arrival: float):
        nonlocal seq
        t = sim_tasks[uid]
        if t.resource is None:
            heapq.heappush(events, (arrival, seq, uid))
            seq += 1
            return
        queues.setdefault(t.resource, [])
        running.setdefault(t.resource, None)
        heapq.heappush(queues[t.resource], (arrival, uid))
        maybe_start(t.resource, arrival)

    def maybe_start(resource: str, now: float):
        nonlocal seq
        if running[resource] is not None or not queues[resource]:
            return
        arrival, uid = heapq.heappop(queues[resource])
        start = max(arrival, now)
        t = sim_tasks[uid]
        running[resource] = uid
        finish[uid] = (start, start + t.duration)
        heapq.heappush(events, (start + t.duration, seq, uid))
        seq += 1

    arrival_time: dict[int, float] = {}
    for t in sim_tasks:
        if pending[t.uid] == 0:
            arrival_time[t.uid] = 0.0
            enqueue(t.uid, 0.0)

    done = 0
    while events:
        now, _, uid = heapq.heappop(events)
        t = sim_tasks[uid]
        if t.resource is None:
            finish[uid] = (now, now)
        else:
            running[t.resource] = None
        done += 1
        for dep_uid in dependents.get(uid, []):
            pending[dep_uid] -= 1
            if pending[dep_uid] == 0:
                arr = max(finish[d][1] for d in sim_tasks[dep_uid].deps)
                arrival_time[dep_uid] = arr
                enqueue(dep_uid, arr)
        if t.resource is not None:
            maybe_start(t.resource, now)

    if done != len(sim_tasks):
        raise SimulationError(
            f"simulation stalled: {len(sim_tasks) - done} tasks never ran "
            "(cyclic or unsatisfiable dependencies)"
        )
    return finish


def _post_hoc_checks(sim_tasks: list[_SimTask], finish: dict[int, tuple[float, float]]):
    by_resource: dict[str, list[tuple[float, float]]] = {}
    for t in sim_tasks:
        start, end = finish[t.uid]
        for d in t.deps:
            if finish[d][1] > start + 1e-12:
                raise SimulationError(
                    f"causality violation: {t.task_id} started before a dependency finished"
                )
        if t.resource is not None:
            by_resource.setdefault(t.resource, []).append((start, end))
    for resource, spans in by_resource.items():
        spans.sort()
        for (s0, e0), (s1, _) in zip(spans, spans[1:]):
            if s1 < e0 - 1e-12:
                raise SimulationError(f"overlap on resource {resource}")
