"""User, Master, Actor, Task Executor and Remote Logger as message handlers.

Every envelope carries the sender's advertised address in ``reply_to`` and,
in its payload, the logical names ``sender`` and ``route_to``. Responses go
to the ``reply_to`` of the message that caused them; the names let a proxy
route without the components knowing whether one is in the path.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

from .calc import CalcInput, CalcOutput, CalculationError, execute_calculation
from .envelope import Envelope
from .logstore import LogEntry, LogStore, remote_logger_append
from .scheduler import EmptyRosterError, SchedulerState, round_robin_next

if TYPE_CHECKING:
    from ..netsim import DeliveryResult, Simulator

log = logging.getLogger(__name__)

MASTER_NAME = "fogbus2-master"
REMOTE_LOGGER_NAME = "fogbus2-remote-logger"
USER_NAME = "fogbus2-user"
CALCULATION_TASK = "cloudslab/fogbus2-calculation"

MASTER_PORT = 5001
REMOTE_LOGGER_PORT = 5000
ROLES = ("user", "master", "actor", "task_executor", "remote_logger")


class PlacementRejected(RuntimeError):
    pass


class TaskFailed(RuntimeError):
    pass


class SubmitTimeout(TimeoutError):
    def __init__(self, request_id: str, reason: str):
        super().__init__(f"no result for {request_id}: {reason}")
        self.request_id = request_id
        self.reason = reason


class ExecutorStartupError(RuntimeError):
    pass


@dataclass(frozen=True)
class ComponentIdentity:
    role: str
    name: str
    bind_address: str
    advertise_address: str

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown component role {self.role!r}")


@dataclass(frozen=True)
class PeerRef:
    """How to reach another component: its logical name and advertised address."""

    name: str
    address: str


class Component:
    def __init__(self, sim: Simulator, identity: ComponentIdentity, logger: PeerRef | None = None):
        self.sim = sim
        self.identity = identity
        self.logger = logger

    @property
    def name(self) -> str:
        return self.identity.name

    def send(self, kind: str, request_id: str, to: PeerRef, payload: dict | None = None) -> DeliveryResult:
        body = dict(payload or {})
        body["sender"] = self.identity.name
        body["route_to"] = to.name
        env = Envelope(kind, request_id, self.identity.advertise_address, to.address, body)
        return self.sim.send(env, self.identity.bind_address)

    def reply(self, request: Envelope, kind: str, payload: dict | None = None) -> DeliveryResult:
        return self.send(kind, request.request_id, PeerRef(request.payload.get("sender", "?"), request.reply_to), payload)

    def emit_log(self, text: str, request_id: str = "-", level: str = "INFO"):
        if self.logger is not None:
            self.send("log", request_id, self.logger, {"level": level, "text": text})

    def __call__(self, env: Envelope):
        handler = getattr(self, f"on_{env.kind}", None)
        if handler is None:
            log.warning("%s ignoring unexpected %s message", self.name, env.kind)
            return
        handler(env)


class RemoteLogger(Component):
    def __init__(self, sim: Simulator, identity: ComponentIdentity, store: LogStore | None = None):
        super().__init__(sim, identity)
        self.store = store if store is not None else LogStore()

    def on_log(self, env: Envelope):
        entry = LogEntry(
            time=self.sim.now,
            source=env.payload.get("sender", "?"),
            level=env.payload.get("level", "INFO"),
            text=env.payload.get("text", ""),
        )
        remote_logger_append(self.store, entry)


class TaskExecutor:
    def __init__(self, image: str, fn: Callable[[dict], dict]):
        self.image = image
        self.fn = fn
        self.executed = 0

    def run(self, data: dict) -> dict:
        self.executed += 1
        return self.fn(data)


def _calculation(data: dict) -> dict:
    return execute_calculation(CalcInput.from_json(data)).to_json()


TASKS: dict[str, Callable[[dict], dict]] = {CALCULATION_TASK: _calculation}


def default_executor_factory(image: str) -> TaskExecutor:
    if image not in TASKS:
        raise ExecutorStartupError(f"no task image {image!r}")
    return TaskExecutor(image, TASKS[image])


class Actor(Component):
    def __init__(
        self,
        sim: Simulator,
        identity: ComponentIdentity,
        master: PeerRef,
        logger: PeerRef | None = None,
        executor_factory: Callable[[str], TaskExecutor] = default_executor_factory,
    ):
        super().__init__(sim, identity, logger)
        self.master = master
        self.executor_factory = executor_factory
        self.executors: dict[str, TaskExecutor] = {}
        self.registered = False

    def start(self):
        self.send("register_actor", f"register-{self.name}", self.master, {"actor": self.name})

    def on_ack(self, env: Envelope):
        if env.payload.get("status", "ok") == "ok":
            self.registered = True

    def executor_for(self, image: str) -> TaskExecutor:
        executor = self.executors.get(image)
        if executor is None:
            executor = self.executors[image] = self.executor_factory(image)
        return executor

    def handle_task(self, cmd: Envelope) -> Envelope:
        task = cmd.payload.get("task", CALCULATION_TASK)
        self.emit_log(f"received {task} for {cmd.request_id}", cmd.request_id)
        result = {"user_reply_to": cmd.payload.get("user_reply_to"), "user": cmd.payload.get("user")}
        try:
            output = self.executor_for(task).run(cmd.payload["input"])
            result.update(status="ok", output=output)
        except (ExecutorStartupError, CalculationError) as exc:
            result.update(status="failed", error=str(exc))
        self.reply(cmd, "task_result", result)
        self.emit_log(f"dispatched {result['status']} result for {cmd.request_id}", cmd.request_id)
        return Envelope("task_result", cmd.request_id, self.identity.advertise_address, cmd.reply_to, result)

    def on_task_command(self, env: Envelope):
        self.handle_task(env)


def actor_handle_task(actor: Actor, cmd: Envelope) -> Envelope:
    return actor.handle_task(cmd)


class Master(Component):
    def __init__(
        self,
        sim: Simulator,
        identity: ComponentIdentity,
        logger: PeerRef | None = None,
        scheduler_name: str = "RoundRobin",
    ):
        super().__init__(sim, identity, logger)
        if scheduler_name != "RoundRobin":
            # other policies would slot in here
            raise ValueError(f"unsupported scheduler {scheduler_name!r}")
        self.scheduler = SchedulerState()
        self.actors: dict[str, str] = {}
        self.placements: dict[str, int] = {}
        self._pending: dict[str, PeerRef] = {}

    def on_register_actor(self, env: Envelope):
        name = env.payload.get("actor") or env.payload["sender"]
        self.actors[name] = env.reply_to
        self.scheduler.add(name)
        self.emit_log(f"registered actor {name} at {env.reply_to}")
        self.reply(env, "ack", {"status": "ok"})

    def remove_actor(self, name: str):
        self.scheduler.remove(name)
        self.actors.pop(name, None)

    def handle_placement(self, req: Envelope) -> Envelope:
        user = PeerRef(req.payload.get("sender", "?"), req.reply_to)
        try:
            actor = round_robin_next(self.scheduler)
        except EmptyRosterError:
            payload = {"status": "rejected", "reason": "no actors registered"}
            self.reply(req, "final_result", payload)
            self.emit_log(f"rejected {req.request_id}: no actors", req.request_id, "WARNING")
            return Envelope("final_result", req.request_id, self.identity.advertise_address, req.reply_to, payload)
        self._pending[req.request_id] = user
        self.placements[actor] = self.placements.get(actor, 0) + 1
        payload = {
            "task": req.payload.get("task", CALCULATION_TASK),
            "input": req.payload["input"],
            "user": user.name,
            "user_reply_to": user.address,
        }
        target = PeerRef(actor, self.actors[actor])
        self.emit_log(f"placed {req.request_id} on {actor}", req.request_id)
        self.send("task_command", req.request_id, target, payload)
        return Envelope("task_command", req.request_id, self.identity.advertise_address, target.address, payload)

    def on_placement_request(self, env: Envelope):
        self.handle_placement(env)

    def on_task_result(self, env: Envelope):
        user = self._pending.pop(env.request_id, None)
        if user is None:
            log.warning("master got a result for unknown request %s", env.request_id)
            return
        payload = {k: env.payload[k] for k in ("status", "output", "error") if k in env.payload}
        self.send("final_result", env.request_id, user, payload)
        self.emit_log(f"returned {env.request_id} to {user.name}", env.request_id)


def master_handle_placement(master: Master, req: Envelope) -> Envelope:
    return master.handle_placement(req)


@dataclass
class _Reply:
    time: float
    envelope: Envelope


class User(Component):
    """Submits calculation requests and waits for the answer on the virtual clock."""

    def __init__(
        self,
        sim: Simulator,
        identity: ComponentIdentity,
        master: PeerRef,
        timeout_ms: float | None = None,
        logger: PeerRef | None = None,
    ):
        super().__init__(sim, identity, logger)
        self.master = master
        self.timeout_ms = timeout_ms if timeout_ms is not None else 10 * sim.latency.upper_bound_ms(sim.overlay)
        self.replies: dict[str, _Reply] = {}
        self._ids = itertools.count(1)

    def on_final_result(self, env: Envelope):
        self.replies[env.request_id] = _Reply(self.sim.now, env)

    def on_ack(self, env: Envelope):
        if env.payload.get("status") == "undeliverable":
            self.replies[env.request_id] = _Reply(self.sim.now, env)

    def submit(self, inp: CalcInput, master: PeerRef | None = None) -> tuple[CalcOutput, float]:
        target = master or self.master
        request_id = f"{self.name}-{next(self._ids)}"
        sent_at = self.sim.now
        self.send("placement_request", request_id, target, {"task": CALCULATION_TASK, "input": inp.to_json()})
        arrived = self.sim.run_until(lambda: request_id in self.replies, sent_at + self.timeout_ms)
        if not arrived:
            reasons = self.sim.failure_reasons(request_id)
            raise SubmitTimeout(request_id, reasons[0] if reasons else "timeout")
        reply = self.replies.pop(request_id)
        status = reply.envelope.payload.get("status")
        if status == "rejected":
            raise PlacementRejected(reply.envelope.payload.get("reason", "rejected"))
        if status == "undeliverable":
            raise SubmitTimeout(request_id, "undeliverable")
        if status != "ok":
            raise TaskFailed(reply.envelope.payload.get("error", "task failed"))
        return CalcOutput.from_json(reply.envelope.payload["output"]), reply.time - sent_at


def user_submit(user: User, inp: CalcInput, master_address: str | PeerRef | None = None) -> tuple[CalcOutput, float]:
    if isinstance(master_address, str):
        master_address = PeerRef(user.master.name, master_address)
    return user.submit(inp, master_address)
