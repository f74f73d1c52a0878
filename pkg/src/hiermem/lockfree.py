"""Executable lock-free optimizer-update protocol with a toy numeric trainer.

Three actors exchange messages: the GPU actor runs forward/backward passes
against published FP16 parameter snapshots and offloads FP16 gradients;
the buffering actor exclusively owns the FP16 parameter/gradient buffers
(accumulating gradients, handing accumulated gradients to the updater,
publishing fresh parameters); the updating actor exclusively owns the FP32
master state (params + Adam moments, SSD-resident in spirit) and sweeps
layers in reverse whenever uncleared gradients exist.

Gradient buffers are cleared atomically at the moment the updater takes
them, so every accumulated unit is consumed by exactly one master update
(exact conservation); the subsequent publish installs the refreshed FP16
parameters without touching gradients that arrived mid-update. Publishes
are torn-read-free: each publish installs a brand-new immutable
(version, array) record behind a single reference swap.

Runs execute either on a deterministic virtual clock (actors are
coroutines driven by a discrete-event loop) or on real threads with real
sleeps for concurrency stress.
"""
from __future__ import annotations

import heapq
import math
import queue as queue_mod
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ProtocolError


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass(frozen=True)
class ToyTrainConfig:
    """Small MLP regression problem with per-layer structure.

    num_layers square tanh layers of width ``dim`` feed a fixed random
    readout; the teacher shares the architecture. All randomness flows
    from ``seed``.
    """

    num_layers: int = 4
    dim: int = 32
    batch_size: int = 64
    val_size: int = 512
    noise_std: float = 0.01
    seed: int = 0
    hyper: AdamHyper = field(default_factory=AdamHyper)

    def __post_init__(self):
        if self.num_layers < 1 or self.dim < 1 or self.batch_size < 1:
            raise ConfigError("toy config needs positive layers/dim/batch")

    @property
    def param_bytes16(self) -> int:
        return 2 * self.dim * self.dim

    @property
    def state_bytes32(self) -> int:
        # FP32 master params + first and second moments
        return 3 * 4 * self.dim * self.dim

    @property
    def flops_per_layer(self) -> int:
        # forward matmul, backward is charged at twice forward
        return 2 * self.batch_size * self.dim * self.dim


@dataclass(frozen=True)
class DelayModel:
    """Simulated transfer/compute costs, charged on a virtual or wall clock."""

    pcie_bytes_per_s: float = 32e9
    ssd_bytes_per_s: float | None = 3.5e9  # None: master states live in CPU RAM
    cpu_mem_bytes_per_s: float = 100e9
    gpu_flops_per_s: float = 1e11

    def fetch_s(self, nbytes: int) -> float:
        return nbytes / self.pcie_bytes_per_s

    def offload_s(self, nbytes: int) -> float:
        return nbytes / self.pcie_bytes_per_s

    def state_fetch_s(self, nbytes: int) -> float:
        rate = self.ssd_bytes_per_s or self.cpu_mem_bytes_per_s
        return nbytes / rate

    state_store_s = state_fetch_s

    def update_compute_s(self, nbytes_touched: int) -> float:
        return nbytes_touched / self.cpu_mem_bytes_per_s

    def compute_s(self, flops: float) -> float:
        return flops / self.gpu_flops_per_s

    @classmethod
    def preset(cls, name: str) -> "DelayModel":
        if name == "ssd":
            return cls()
        if name == "cpu":
            return cls(ssd_bytes_per_s=None)
        if name == "zero":
            return cls(pcie_bytes_per_s=math.inf, ssd_bytes_per_s=math.inf,
                       cpu_mem_bytes_per_s=math.inf, gpu_flops_per_s=math.inf)
        raise ConfigError(f"unknown delay preset {name!r}")


@dataclass(frozen=True)
class GradMessage:
    layer: int
    payload: np.ndarray  # FP16 gradient
    iteration: int


def apply_update(p32, m32, v32, grad, hyper: AdamHyper, step: int):
    """One Adam step (bias-corrected) on FP32 masters; rejects non-finite grads.

    Returns (p32, m32, v32, applied).
    """
    g = grad.astype(np.float32, copy=False)
    if not np.isfinite(g).all():
        return p32, m32, v32, False
    m32 = hyper.beta1 * m32 + (1.0 - hyper.beta1) * g
    v32 = hyper.beta2 * v32 + (1.0 - hyper.beta2) * (g * g)
    bias1 = 1.0 - hyper.beta1 ** step
    bias2 = 1.0 - hyper.beta2 ** step
    m_hat = m32 / bias1
    v_hat = v32 / bias2
    p32 = p32 - hyper.lr * m_hat / (np.sqrt(v_hat) + hyper.eps)
    return p32.astype(np.float32), m32.astype(np.float32), v32.astype(np.float32), True


class MasterState:
    """FP32 masters (params, moments) per layer; mutated only by the updater."""

    def __init__(self, params: list[np.ndarray], tier: str = "SSD"):
        self.p32 = [p.astype(np.float32) for p in params]
        self.m32 = [np.zeros_like(p, dtype=np.float32) for p in params]
        self.v32 = [np.zeros_like(p, dtype=np.float32) for p in params]
        self.steps = [0] * len(params)
        self.tier = tier

    def update_layer(self, layer: int, grad: np.ndarray, hyper: AdamHyper) -> bool:
        self.steps[layer] += 1
        p, m, v, applied = apply_update(
            self.p32[layer], self.m32[layer], self.v32[layer], grad, hyper,
            self.steps[layer],
        )
        if applied:
            self.p32[layer], self.m32[layer], self.v32[layer] = p, m, v
        else:
            self.steps[layer] -= 1
        return applied


def _published(p32: np.ndarray, version: int, applied_iter: int):
    p16 = p32.astype(np.float16)
    p16.flags.writeable = False
    return (version, p16, applied_iter)


class ParamBuffer:
    """FP16 parameter/gradient buffers owned by the buffering actor.

    Published parameter records are immutable (version, fp16 array,
    applied_iter) tuples swapped in with a single reference assignment, so
    concurrent readers never observe a torn vector. Gradients accumulate in
    FP32 and are stored back to FP16.
    """

    def __init__(self, initial_params: list[np.ndarray]):
        self._published = [_published(p.astype(np.float32), 0, -1) for p in initial_params]
        self.g16 = [np.zeros(p.shape, dtype=np.float16) for p in initial_params]
        self._pending_msgs = [0] * len(initial_params)
        self._max_iter = [-1] * len(initial_params)
        self.ledger = ConservationLedger(len(initial_params))

    @property
    def num_layers(self) -> int:
        return len(self.g16)

    def read(self, layer: int):
        """Snapshot of (version, fp16 params, applied_iter); safe concurrently."""
        return self._published[layer]

    def version(self, layer: int) -> int:
        return self._published[layer][0]

    def applied_iter(self, layer: int) -> int:
        return self._published[layer][2]

    def min_applied_iter(self) -> int:
        return min(rec[2] for rec in self._published)

    def total_pending(self) -> int:
        return sum(self._pending_msgs)

    def accumulate(self, msg: GradMessage) -> None:
        if not (0 <= msg.layer < self.num_layers):
            raise ProtocolError(f"gradient for unknown layer {msg.layer}")
        if msg.payload.shape != self.g16[msg.layer].shape:
            raise ProtocolError(
                f"gradient shape {msg.payload.shape} != buffer shape "
                f"{self.g16[msg.layer].shape} for layer {msg.layer}"
            )
        old_sum = float(np.sum(self.g16[msg.layer], dtype=np.float64))
        acc = self.g16[msg.layer].astype(np.float32) + msg.payload.astype(np.float32)
        self.g16[msg.layer] = acc.astype(np.float16)
        new_sum = float(np.sum(self.g16[msg.layer], dtype=np.float64))
        self.ledger.record_accumulate(msg.layer, new_sum - old_sum)
        self._pending_msgs[msg.layer] += 1
        self._max_iter[msg.layer] = max(self._max_iter[msg.layer], msg.iteration)

    def take(self, layer: int):
        """Atomically hand over and clear the accumulated gradient.

        Returns (grad fp32, message_count, newest_iteration) or None when
        nothing is pending.
        """
        if self._pending_msgs[layer] == 0:
            return None
        g = self.g16[layer].astype(np.float32)
        count = self._pending_msgs[layer]
        newest = self._max_iter[layer]
        self.ledger.record_take(layer, float(np.sum(self.g16[layer], dtype=np.float64)),
                                count)
        self.g16[layer] = np.zeros_like(self.g16[layer])
        self._pending_msgs[layer] = 0
        return g, count, newest

    def publish(self, layer: int, p32: np.ndarray, applied_iter: int | None = None,
                clear: bool = True) -> int:
        """Install fresh FP16 params; with ``clear`` also zero the gradient buffer.

        The actor loop publishes with ``clear=False`` because the clear
        already happened atomically inside :meth:`take`; clearing here again
        would drop gradients that arrived during the master update.
        """
        if clear:
            self.ledger.record_take(
                layer, float(np.sum(self.g16[layer], dtype=np.float64)),
                self._pending_msgs[layer],
            )
            self.g16[layer] = np.zeros_like(self.g16[layer])
            self._pending_msgs[layer] = 0
        old_version, _, old_iter = self._published[layer]
        rec = _published(
            p32, old_version + 1, old_iter if applied_iter is None else applied_iter
        )
        self._published[layer] = rec  # single reference swap: atomic for readers
        return rec[0]


def publish_params(buffer: ParamBuffer, layer: int, p32: np.ndarray) -> None:
    """Clear buffered gradients, then publish FP16 params (version += 1)."""
    buffer.publish(layer, p32, clear=True)


def accumulate_gradient(buffer: ParamBuffer, msg: GradMessage) -> None:
    buffer.accumulate(msg)


class ConservationLedger:
    """Exact gradient-conservation bookkeeping in float64.

    Accumulation deltas telescope to the taken sums, so
    fsum(produced) == fsum(consumed) == fsum(applied) holds bitwise over a
    complete run (rejected updates tracked apart).
    """

    def __init__(self, num_layers: int):
        self.produced_deltas = [[] for _ in range(num_layers)]
        self.consumed_sums = [[] for _ in range(num_layers)]
        self.applied_sums = [[] for _ in range(num_layers)]
        self.rejected_sums = [[] for _ in range(num_layers)]
        self.messages_sent = [0] * num_layers
        self.messages_accumulated = [0] * num_layers
        self.messages_consumed = [0] * num_layers

    def record_accumulate(self, layer: int, delta: float) -> None:
        self.produced_deltas[layer].append(delta)
        self.messages_accumulated[layer] += 1

    def record_take(self, layer: int, total: float, count: int) -> None:
        self.consumed_sums[layer].append(total)
        self.messages_consumed[layer] += count

    def record_apply(self, layer: int, total: float, rejected: bool) -> None:
        (self.rejected_sums if rejected else self.applied_sums)[layer].append(total)

    def summary(self) -> dict:
        layers = []
        balanced = True
        for l in range(len(self.produced_deltas)):
            produced = math.fsum(self.produced_deltas[l])
            consumed = math.fsum(self.consumed_sums[l])
            applied = math.fsum(self.applied_sums[l])
            rejected = math.fsum(self.rejected_sums[l])
            ok = (produced == consumed == applied + rejected
                  and self.messages_accumulated[l] == self.messages_consumed[l]
                  == self.messages_sent[l])
            balanced &= ok
            layers.append({
                "layer": l,
                "produced": produced,
                "consumed": consumed,
                "applied": applied,
                "rejected": rejected,
                "messages_sent": self.messages_sent[l],
                "messages_accumulated": self.messages_accumulated[l],
                "messages_consumed": self.messages_consumed[l],
                "balanced": ok,
            })
        return {"balanced": balanced, "layers": layers}


# -- toy problem ---------------------------------------------------------------


def _rng(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed, tag])


def init_problem(cfg: ToyTrainConfig):
    """Teacher weights, student init, fixed readout, validation set."""
    rng = _rng(cfg.seed, 0)
    d = cfg.dim
    teacher = [rng.normal(0, 1.0 / math.sqrt(d), (d, d)).astype(np.float32)
               for _ in range(cfg.num_layers)]
    student = [rng.normal(0, 0.5 / math.sqrt(d), (d, d)).astype(np.float32)
               for _ in range(cfg.num_layers)]
    readout = rng.normal(0, 1.0 / math.sqrt(d), (d,)).astype(np.float32)
    vrng = _rng(cfg.seed, 1)
    x_val = vrng.normal(0, 1, (cfg.val_size, d)).astype(np.float32)
    y_val = _teacher_forward(teacher, readout, x_val, cfg, vrng)
    return teacher, student, readout, (x_val, y_val)


def _teacher_forward(teacher, readout, x, cfg, noise_rng=None):
    h = x
    for w in teacher:
        h = np.tanh(h @ w)
    y = h @ readout
    if noise_rng is not None and cfg.noise_std > 0:
        y = y + noise_rng.normal(0, cfg.noise_std, y.shape).astype(np.float32)
    return y.astype(np.float32)


def batch_for(cfg: ToyTrainConfig, teacher, readout, iteration: int):
    rng = _rng(cfg.seed, 2 + iteration)
    x = rng.normal(0, 1, (cfg.batch_size, cfg.dim)).astype(np.float32)
    y = _teacher_forward(teacher, readout, x, cfg, rng)
    return x, y


def forward_backward(params32: list[np.ndarray], readout: np.ndarray,
                     x: np.ndarray, y: np.ndarray):
    """MSE loss and per-layer weight gradients for the tanh MLP."""
    hs = [x]
    for w in params32:
        hs.append(np.tanh(hs[-1] @ w))
    y_hat = hs[-1] @ readout
    err = y_hat - y
    loss = float(np.mean(err * err))
    dy = (2.0 / len(y)) * err
    dh = np.outer(dy, readout).astype(np.float32)
    grads: list[np.ndarray] = [None] * len(params32)
    for l in reversed(range(len(params32))):
        dz = dh * (1.0 - hs[l + 1] * hs[l + 1])
        grads[l] = (hs[l].T @ dz).astype(np.float32)
        if l > 0:
            dh = dz @ params32[l].T
    return loss, grads


def validation_loss(buffer: ParamBuffer, readout, x_val, y_val) -> float:
    params = [buffer.read(l)[1].astype(np.float32) for l in range(buffer.num_layers)]
    loss, _ = forward_backward(params, readout, x_val, y_val)
    return loss


# -- actor runtimes -------------------------------------------------------------


class _Mailbox:
    def __init__(self):
        self.queue: deque = deque()
        self.waiter: int | None = None


class VirtualRuntime:
    """Drives coroutine actors on a deterministic virtual clock.

    Actors yield ("sleep", seconds), ("send", mailbox, payload) or
    ("recv", mailbox); recv resumes with the payload, timestamp-synced to
    the sender's clock.
    """

    def __init__(self):
        self.clocks: list[float] = []

    def mailbox(self) -> _Mailbox:
        return _Mailbox()

    def run(self, actors) -> float:
        gens = list(actors)
        n = len(gens)
        self.clocks = [0.0] * n
        resume: list = [None] * n
        finished = [False] * n
        seq = 0
        ready: list[tuple[float, int, int]] = []
        for i in range(n):
            ready.append((0.0, seq, i))
            seq += 1
        heapq.heapify(ready)

        while ready:
            clock, _, i = heapq.heappop(ready)
            self.clocks[i] = max(self.clocks[i], clock)
            value, resume[i] = resume[i], None
            try:
                effect = gens[i].send(value)
            except StopIteration:
                finished[i] = True
                continue
            kind = effect[0]
            if kind == "sleep":
                self.clocks[i] += effect[1]
                heapq.heappush(ready, (self.clocks[i], seq, i))
                seq += 1
            elif kind == "send":
                box, payload = effect[1], effect[2]
                box.queue.append((self.clocks[i], payload))
                if box.waiter is not None:
                    j, box.waiter = box.waiter, None
                    ts, msg = box.queue.popleft()
                    self.clocks[j] = max(self.clocks[j], ts)
                    resume[j] = msg
                    heapq.heappush(ready, (self.clocks[j], seq, j))
                    seq += 1
                heapq.heappush(ready, (self.clocks[i], seq, i))
                seq += 1
            elif kind == "recv":
                box = effect[1]
                if box.queue:
                    ts, msg = box.queue.popleft()
                    self.clocks[i] = max(self.clocks[i], ts)
                    resume[i] = msg
                    heapq.heappush(ready, (self.clocks[i], seq, i))
                    seq += 1
                else:
                    if box.waiter is not None:
                        raise ProtocolError("two actors blocked on one mailbox")
                    box.waiter = i
            else:
                raise ProtocolError(f"unknown actor effect {kind!r}")

        if not all(finished):
            stuck = [i for i, f in enumerate(finished) if not f]
            raise ProtocolError(f"deadlock: actors {stuck} never finished")
        return max(self.clocks)


class _ThreadMailbox:
    def __init__(self):
        self.queue: queue_mod.Queue = queue_mod.Queue()


class ThreadRuntime:
    """Drives the same coroutine actors on real threads with real sleeps."""

    def __init__(self, time_scale: float = 1.0, watchdog_s: float = 60.0):
        self.time_scale = time_scale
        self.watchdog_s = watchdog_s
        self._failure: list[BaseException] = []

    def mailbox(self) -> _ThreadMailbox:
        return _ThreadMailbox()

    def _drive(self, gen):
        try:
            value = None
            while True:
                try:
                    effect = gen.send(value)
                except StopIteration:
                    return
                value = None
                if effect[0] == "sleep":
                    if effect[1] > 0:
                        time.sleep(effect[1] * self.time_scale)
                elif effect[0] == "send":
                    effect[1].queue.put(effect[2])
                elif effect[0] == "recv":
                    value = effect[1].queue.get(timeout=self.watchdog_s)
                else:
                    raise ProtocolError(f"unknown actor effect {effect[0]!r}")
        except BaseException as exc:  # surfaced to the caller after join
            self._failure.append(exc)

    def run(self, actors) -> float:
        start = time.monotonic()
        threads = [threading.Thread(target=self._drive, args=(g,), daemon=True)
                   for g in actors]
        for t in threads:
            t.start()
        for t in threads:
            t.join(timeout=self.watchdog_s)
            if t.is_alive():
                raise ProtocolError("watchdog: actor thread did not finish")
        if self._failure:
            raise ProtocolError(f"actor failed: {self._failure[0]!r}") from self._failure[0]
        return time.monotonic() - start


# -- actors ---------------------------------------------------------------------


@dataclass
class _RunRecorder:
    loss_curve: list = field(default_factory=list)
    staleness: Counter = field(default_factory=Counter)
    staleness_records: list = field(default_factory=list)
    gpu_busy_s: float = 0.0
    rejected_updates: int = 0
    publishes: int = 0


def _gpu_actor(cfg, delays, buffer, readout, teacher, boxes, iterations, rec,
               max_inflight):
    L = cfg.num_layers
    for it in range(iterations):
        if max_inflight is not None and it >= max_inflight:
            yield ("send", boxes["buf"], ("sync_check", it - max_inflight))
            yield ("recv", boxes["gpu"])
        x, y = batch_for(cfg, teacher, readout, it)
        params = []
        for l in range(L):
            yield ("sleep", delays.fetch_s(cfg.param_bytes16))
            _, p16, applied = buffer.read(l)
            staleness = max(0, (it - 1) - applied)
            rec.staleness[staleness] += 1
            rec.staleness_records.append((it, l, staleness))
            params.append(p16.astype(np.float32))
            t = delays.compute_s(cfg.flops_per_layer)
            rec.gpu_busy_s += t
            yield ("sleep", t)
        loss, grads = forward_backward(params, readout, x, y)
        rec.loss_curve.append(loss)
        for l in reversed(range(L)):
            t = delays.compute_s(2 * cfg.flops_per_layer)
            rec.gpu_busy_s += t
            yield ("sleep", t)
            g16 = grads[l].astype(np.float16)
            yield ("sleep", delays.offload_s(g16.nbytes))
            buffer.ledger.messages_sent[l] += 1
            yield ("send", boxes["buf"], ("grad", GradMessage(l, g16, it)))
    yield ("send", boxes["buf"], ("gpu_done",))


def _buffering_actor(buffer, boxes, rec):
    gpu_done = False
    work_waiter = False
    sync_waiter: int | None = None
    while True:
        msg = yield ("recv", boxes["buf"])
        kind = msg[0]
        if kind == "grad":
            buffer.accumulate(msg[1])
            if work_waiter:
                work_waiter = False
                yield ("send", boxes["upd"], ("work", True, gpu_done))
        elif kind == "take":
            yield ("send", boxes["upd"], ("taken", msg[1], buffer.take(msg[1])))
        elif kind == "publish":
            _, layer, p32, newest_iter = msg
            buffer.publish(layer, p32, applied_iter=newest_iter, clear=False)
            rec.publishes += 1
            if sync_waiter is not None and buffer.min_applied_iter() >= sync_waiter:
                sync_waiter = None
                yield ("send", boxes["gpu"], ("proceed",))
        elif kind == "sync_check":
            if buffer.min_applied_iter() >= msg[1]:
                yield ("send", boxes["gpu"], ("proceed",))
            else:
                sync_waiter = msg[1]
        elif kind == "gpu_done":
            gpu_done = True
            if work_waiter:
                work_waiter = False
                yield ("send", boxes["upd"], ("work", buffer.total_pending() > 0, True))
        elif kind == "wait_work":
            if buffer.total_pending() > 0 or gpu_done:
                yield ("send", boxes["upd"], ("work", buffer.total_pending() > 0, gpu_done))
            else:
                work_waiter = True
        elif kind == "stop":
            return
        else:
            raise ProtocolError(f"buffering actor got unknown message {kind!r}")


def _updating_actor(cfg, delays, buffer, masters, boxes, rec):
    L = cfg.num_layers
    hyper = cfg.hyper
    while True:
        yield ("send", boxes["buf"], ("wait_work",))
        _, has_pending, gpu_done = (yield ("recv", boxes["upd"]))
        if not has_pending and gpu_done:
            break
        for layer in reversed(range(L)):
            yield ("send", boxes["buf"], ("take", layer))
            _, _, snapshot = (yield ("recv", boxes["upd"]))
            if snapshot is None:
                continue
            grad, _count, newest_iter = snapshot
            yield ("sleep", delays.state_fetch_s(cfg.state_bytes32))
            applied = masters.update_layer(layer, grad, hyper)
            total = float(np.sum(grad, dtype=np.float64))
            buffer.ledger.record_apply(layer, total, rejected=not applied)
            if not applied:
                rec.rejected_updates += 1
            yield ("sleep", delays.update_compute_s(cfg.state_bytes32 * 2))
            yield ("send", boxes["buf"],
                   ("publish", layer, masters.p32[layer].copy(), newest_iter))
            yield ("sleep", delays.state_store_s(cfg.state_bytes32))
    yield ("send", boxes["buf"], ("stop",))


# -- reports and runners ---------------------------------------------------------


@dataclass(frozen=True)
class TrainReport:
    mode: str
    iterations: int
    batch_size: int
    loss_curve: tuple[float, ...]
    final_train_loss: float
    val_loss: float
    makespan_s: float
    samples_per_s: float
    gpu_busy_s: float
    gpu_idle_fraction: float
    staleness_histogram: dict[int, int]
    max_staleness: int
    conservation: dict
    rejected_updates: int
    publishes: int

    def to_dict(self) -> dict:
        out = dict(self.__dict__)
        out["loss_curve"] = list(self.loss_curve)
        out["staleness_histogram"] = {str(k): v for k, v in
                                      sorted(self.staleness_histogram.items())}
        return out


def _make_report(mode, cfg, iterations, rec, buffer, readout, val, makespan) -> TrainReport:
    x_val, y_val = val
    vloss = validation_loss(buffer, readout, x_val, y_val)
    busy = rec.gpu_busy_s
    return TrainReport(
        mode=mode,
        iterations=iterations,
        batch_size=cfg.batch_size,
        loss_curve=tuple(rec.loss_curve),
        final_train_loss=rec.loss_curve[-1] if rec.loss_curve else math.nan,
        val_loss=vloss,
        makespan_s=makespan,
        samples_per_s=iterations * cfg.batch_size / makespan if makespan > 0 else math.inf,
        gpu_busy_s=busy,
        gpu_idle_fraction=1.0 - busy / makespan if makespan > 0 else 0.0,
        staleness_histogram=dict(rec.staleness),
        max_staleness=max(rec.staleness) if rec.staleness else 0,
        conservation=buffer.ledger.summary(),
        rejected_updates=rec.rejected_updates,
        publishes=rec.publishes,
    )


def run_lockfree(toy_cfg: ToyTrainConfig, delays: DelayModel, iterations: int,
                 mode: str = "virtual", max_inflight: int | None = None,
                 time_scale: float = 1.0) -> TrainReport:
    """Train with the three concurrent actors; deterministic in virtual mode."""
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    teacher, student, readout, val = init_problem(toy_cfg)
    buffer = ParamBuffer(student)
    masters = MasterState(student)
    rec = _RunRecorder()

    runtime = VirtualRuntime() if mode == "virtual" else ThreadRuntime(time_scale)
    boxes = {"buf": runtime.mailbox(), "upd": runtime.mailbox(), "gpu": runtime.mailbox()}
    actors = [
        _gpu_actor(toy_cfg, delays, buffer, readout, teacher, boxes, iterations,
                   rec, max_inflight),
        _buffering_actor(buffer, boxes, rec),
        _updating_actor(toy_cfg, delays, buffer, masters, boxes, rec),
    ]
    makespan = runtime.run(actors)
    return _make_report("lockfree", toy_cfg, iterations, rec, buffer, readout, val,
                        makespan)


def run_sync(toy_cfg: ToyTrainConfig, delays: DelayModel, iterations: int) -> TrainReport:
    """Synchronous baseline: each step blocks on the full update + publish."""
    if iterations < 1:
        raise ConfigError("iterations must be >= 1")
    cfg = toy_cfg
    teacher, student, readout, val = init_problem(cfg)
    buffer = ParamBuffer(student)
    masters = MasterState(student, tier="SSD" if delays.ssd_bytes_per_s else "CPU")
    rec = _RunRecorder()
    L = cfg.num_layers
    clock = 0.0

    for it in range(iterations):
        x, y = batch_for(cfg, teacher, readout, it)
        params = []
        for l in range(L):
            clock += delays.fetch_s(cfg.param_bytes16)
            _, p16, applied = buffer.read(l)
            staleness = max(0, (it - 1) - applied)
            rec.staleness[staleness] += 1
            rec.staleness_records.append((it, l, staleness))
            params.append(p16.astype(np.float32))
            t = delays.compute_s(cfg.flops_per_layer)
            rec.gpu_busy_s += t
            clock += t
        loss, grads = forward_backward(params, readout, x, y)
        rec.loss_curve.append(loss)
        for l in reversed(range(L)):
            t = delays.compute_s(2 * cfg.flops_per_layer)
            rec.gpu_busy_s += t
            clock += t
            g16 = grads[l].astype(np.float16)
            clock += delays.offload_s(g16.nbytes)
            buffer.ledger.messages_sent[l] += 1
            buffer.accumulate(GradMessage(l, g16, it))
        # GPU blocks on the complete master update + publish
        for l in reversed(range(L)):
            snapshot = buffer.take(l)
            if snapshot is None:
                continue
            grad, _count, newest = snapshot
            clock += delays.state_fetch_s(cfg.state_bytes32)
            applied = masters.update_layer(l, grad, cfg.hyper)
            buffer.ledger.record_apply(l, float(np.sum(grad, dtype=np.float64)),
                                       rejected=not applied)
            if not applied:
                rec.rejected_updates += 1
            clock += delays.update_compute_s(cfg.state_bytes32 * 2)
            buffer.publish(l, masters.p32[l].copy(), applied_iter=newest, clear=False)
            rec.publishes += 1
            clock += delays.state_store_s(cfg.state_bytes32)

    return _make_report("sync", cfg, iterations, rec, buffer, readout, val, clock)


def reference_train(toy_cfg: ToyTrainConfig, iterations: int) -> list[float]:
    """Single-threaded reference trainer: same math, no buffers or actors."""
    cfg = toy_cfg
    teacher, student, readout, _ = init_problem(cfg)
    masters = MasterState(student)
    losses = []
    for it in range(iterations):
        x, y = batch_for(cfg, teacher, readout, it)
        params = [p.astype(np.float16).astype(np.float32) for p in masters.p32]
        loss, grads = forward_backward(params, readout, x, y)
        losses.append(loss)
        for l in reversed(range(cfg.num_layers)):
            g16 = grads[l].astype(np.float16)
            masters.update_layer(l, g16.astype(np.float32), cfg.hyper)
    return losses
