"""Cluster formation and lifecycle.

The launcher plays the operating-system role from the programming
model: it brings up agents (in-process, or as separate OS processes
for the tcp transport), seeds the registry service on agent 0 that
answers host-creation requests, and designates agent 1 to host the
application's main activity.
"""

from __future__ import annotations

import importlib
import logging
import os
import socket
import subprocess
import sys
import threading
import time
from typing import Any, Callable

from .futures import ExecMode
from .runtime import (
    REGISTRY_KIND,
    Agent,
    HostDirectory,
    KindRegistry,
    RuntimeConfig,
    TraceSink,
    builtin_registry,
)
from .transport import (
    INPROC,
    TCP,
    AgentAddress,
    InprocFabric,
    StartupError,
    TcpEndpoint,
    parse_hostport,
    recv_control,
    send_control,
)

logger = logging.getLogger("objrt.cluster")

JOIN_TIMEOUT_S = 30.0


class ConfigurationError(Exception):
    """Invalid cluster or run configuration."""


def _parse_fuzz(value) -> tuple[int, int] | None:
    if value in (None, "", "off"):
        return None
    if isinstance(value, (tuple, list)):
        lo, hi = value
        return int(lo), int(hi)
    lo, _, hi = str(value).partition(":")
    return int(lo), int(hi or lo)


def _parse_mode(value) -> ExecMode:
    if isinstance(value, ExecMode):
        return value
    if value in (None, ""):
        return ExecMode.CAUSAL_ASYNC
    for mode in ExecMode:
        if value == mode.value:
            return mode
    raise ConfigurationError(f"unknown execution mode {value!r}")


def resolve_registrar(spec: str | Callable) -> Callable[[KindRegistry], None]:
    """Turn 'package.module:callable' into the callable itself."""
    if callable(spec):
        return spec
    module_name, _, attr = spec.partition(":")
    if not attr:
        raise ConfigurationError(f"kind registrar must be module:callable, got {spec!r}")
    module = importlib.import_module(module_name)
    return getattr(module, attr)


def build_registry(registrars) -> KindRegistry:
    registry = builtin_registry()
    for spec in registrars or ():
        resolve_registrar(spec)(registry)
    return registry


def _runtime_config(config: dict) -> RuntimeConfig:
    return RuntimeConfig(
        mode=_parse_mode(config.get("mode")),
        seed=int(config.get("seed", 0)),
        fuzz_us=_parse_fuzz(config.get("fuzz_us")),
        fuzz_prob=float(config.get("fuzz_prob", 1.0)),
        wait_timeout_s=config.get("wait_timeout_s"),
        min_workers=int(config.get("min_workers", 2)),
        pool_ceiling=int(config.get("pool_ceiling", 1024)),
    )


class ClusterHandle:
    """A running cluster: addresses, the main-activity entry point, shutdown."""

    def __init__(self, kind: str, addresses: list[AgentAddress],
                 local_agents: dict[int, Agent], sink: TraceSink,
                 procs: list[subprocess.Popen] | None = None,
                 control_conns: dict[int, socket.socket] | None = None,
                 registry_endpoint: str = ""):
        self.kind = kind
        self.addresses = addresses  # application agents, ids dense from 1
        self.registry_endpoint = registry_endpoint
        self._agents = local_agents
        self._sink = sink
        self._procs = procs or []
        self._control = control_conns or {}
        self._remote_stats: list[dict] = []
        self._mode_set = False
        self._started_running = False
        self._down = False

    @property
    def n_agents(self) -> int:
        return len(self.addresses)

    def agent(self, agent_id: int) -> Agent:
        return self._agents[agent_id]

    def set_mode(self, mode) -> None:
        """Fix the execution mode before the application starts."""
        if self._mode_set:
            raise ConfigurationError("execution mode already set for this run")
        if self._started_running:
            raise ConfigurationError("execution mode cannot change mid-run")
        mode = _parse_mode(mode)
        if self.kind == TCP:
            current = self._agents[1].config.mode
            if mode is not current:
                raise ConfigurationError("tcp clusters fix the mode at spawn time")
        for agent in self._agents.values():
            agent.config.mode = mode
        self._mode_set = True

    def run(self, fn: Callable[..., Any], *args) -> Any:
        """Execute fn as the application's main activity on agent 1."""
        self._started_running = True
        return self._agents[1].run_activity(fn, args)

    def records(self) -> list[dict]:
        if self._sink.records is None:
            return []
        return list(self._sink.records)

    def stats(self) -> list[dict]:
        local = [agent.stats() for agent in self._agents.values()]
        return local + list(self._remote_stats)

    def check_health(self) -> list[dict]:
        """Raise if any agent flagged a protocol problem or leaked a guard."""
        stats = self.stats()
        problems = []
        for st in stats:
            if st["flags"]:
                problems.append(f"agent {st['agent']} flags: {st['flags']}")
            guards = st["guards"]
            if guards["unreleased"] or guards["duplicate_releases"]:
                problems.append(f"agent {st['agent']} guards: {guards}")
        if problems:
            raise AssertionError("cluster health check failed: " + "; ".join(problems))
        return stats

    def shutdown(self) -> list[dict]:
        if self._down:
            return self.stats()
        self._down = True
        for agent_id, conn in self._control.items():
            try:
                send_control(conn, {"shutdown": True})
            except OSError:
                logger.warning("control channel to agent %d already gone", agent_id)
        for agent_id, conn in self._control.items():
            try:
                conn.settimeout(10)
                reply = recv_control(conn.makefile("rb"))
                if reply and "stats" in reply:
                    self._remote_stats.append(reply["stats"])
            except (OSError, ValueError):
                logger.warning("no shutdown reply from agent %d", agent_id)
            finally:
                conn.close()
        for proc in self._procs:
            try:
                proc.wait(timeout=10)
            except subprocess.TimeoutExpired:
                proc.kill()
        for agent in self._agents.values():
            agent.stop()
        stats = self.stats()
        self._sink.close()
        return stats


def spawn_cluster(n_agents: int, kind: str = INPROC,
                  config: dict | None = None) -> ClusterHandle:
    """Start a cluster of n_agents application agents plus the registry.

    Agent ids are dense from 1; agent 0 is the launcher's registry
    service. With the tcp transport, agents 0 and 1 live in the calling
    process and agents 2..n run as separate OS processes on loopback.
    """
    if n_agents < 1:
        raise ConfigurationError("a cluster needs at least one agent")
    config = dict(config or {})
    if "agent_count" in config and int(config["agent_count"]) != n_agents:
        raise ConfigurationError("agent_count config key disagrees with n_agents")
    if kind == INPROC:
        return _spawn_inproc(n_agents, config)
    if kind == TCP:
        return _spawn_tcp(n_agents, config)
    raise ConfigurationError(f"unknown transport kind {kind!r}")


def _spawn_inproc(n_agents: int, config: dict) -> ClusterHandle:
    registry = build_registry(config.get("kinds"))
    rt_config = _runtime_config(config)
    sink = TraceSink(path=config.get("trace_path"),
                     memory=bool(config.get("trace_memory", True)))
    fabric = InprocFabric()
    agents: dict[int, Agent] = {}
    addresses = []
    for agent_id in range(n_agents + 1):
        endpoint = fabric.add_agent(agent_id)
        agents[agent_id] = Agent(agent_id, endpoint, registry, sink, rt_config)
        if agent_id >= 1:
            addresses.append(AgentAddress(agent_id, endpoint.endpoint))
    _seed_registry_object(agents[0], addresses)
    for agent in agents.values():
        agent.start()
    return ClusterHandle(INPROC, addresses, agents, sink)


def _seed_registry_object(agent0: Agent, addresses: list[AgentAddress]):
    oid = agent0.objects.add(REGISTRY_KIND, HostDirectory(addresses))
    assert oid == 1, "registry object must be the first object on agent 0"


def _spawn_tcp(n_agents: int, config: dict) -> ClusterHandle:
    registry = build_registry(config.get("kinds"))
    rt_config = _runtime_config(config)
    listen = config.get("listen", "127.0.0.1:0")
    connect_timeout = int(config.get("connect_timeout_ms", 5000))
    sink = TraceSink(path=config.get("trace_path"),
                     memory=bool(config.get("trace_memory", True)))

    # Bootstrap rendezvous socket: launched agents join here and get the
    # address map back; the connection stays open as a control channel.
    boot = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    boot.bind(parse_hostport(listen))
    boot.listen(n_agents)
    boot_endpoint = "%s:%d" % boot.getsockname()

    local_ids = [0, 1]
    endpoints = {i: TcpEndpoint(i, listen, connect_timeout) for i in local_ids}

    procs: list[subprocess.Popen] = []
    env = dict(os.environ)
    extra_path = config.get("pythonpath") or []
    if extra_path:
        env["PYTHONPATH"] = os.pathsep.join(
            list(extra_path) + [env.get("PYTHONPATH", "")])
    for agent_id in range(2, n_agents + 1):
        argv = [sys.executable, "-m", "objrt", "launch",
                "--registry", boot_endpoint,
                "--agent-id", str(agent_id),
                "--listen", listen,
                "--seed", str(rt_config.seed),
                "--mode", rt_config.mode.value,
                "--connect-timeout-ms", str(connect_timeout)]
        if rt_config.fuzz_us:
            argv += ["--fuzz", "%d:%d" % rt_config.fuzz_us]
        if rt_config.wait_timeout_s:
            argv += ["--wait-timeout", str(rt_config.wait_timeout_s)]
        if config.get("trace_path"):
            argv += ["--trace", f"{config['trace_path']}.agent{agent_id}"]
        for spec in config.get("kinds") or ():
            if not isinstance(spec, str):
                raise ConfigurationError(
                    "tcp clusters need importable kind registrars (module:callable)")
            argv += ["--kinds", spec]
        procs.append(subprocess.Popen(argv, env=env))

    joined: dict[int, tuple[socket.socket, str]] = {}
    boot.settimeout(JOIN_TIMEOUT_S)
    try:
        while len(joined) < n_agents - 1:
            try:
                conn, _ = boot.accept()
            except socket.timeout:
                missing = sorted(set(range(2, n_agents + 1)) - set(joined))
                _abort_spawn(procs, joined)
                raise StartupError(f"agents {missing} never joined the registry")
            msg = recv_control(conn.makefile("rb"))
            if not msg or "join" not in msg:
                conn.close()
                continue
            joined[int(msg["join"])] = (conn, msg["endpoint"])
    finally:
        boot.close()

    address_map = {i: endpoints[i].endpoint for i in local_ids}
    address_map.update({aid: ep for aid, (_, ep) in joined.items()})
    for endpoint in endpoints.values():
        endpoint.set_peers(address_map)
    for agent_id, (conn, _) in joined.items():
        send_control(conn, {"map": {str(k): v for k, v in address_map.items()}})

    agents: dict[int, Agent] = {}
    addresses = [AgentAddress(i, address_map[i]) for i in range(1, n_agents + 1)]
    for agent_id in local_ids:
        agents[agent_id] = Agent(agent_id, endpoints[agent_id], registry, sink,
                                 rt_config)
    _seed_registry_object(agents[0], addresses)
    for agent in agents.values():
        agent.start()
    control = {aid: conn for aid, (conn, _) in joined.items()}
    return ClusterHandle(TCP, addresses, agents, sink, procs, control,
                         registry_endpoint=boot_endpoint)


def _abort_spawn(procs, joined):
    for conn, _ in joined.values():
        conn.close()
    for proc in procs:
        proc.kill()


# --- standalone agent process (tcp transport) --------------------------------


def launch_agent(agent_id: int, registry_endpoint: str, listen: str,
                 config: dict) -> int:
    """Run one agent until the launcher says shutdown; returns exit code.

    Used by ``objrt launch``; the driver's tcp spawner starts one of
    these per remote agent.
    """
    import signal

    registry = build_registry(config.get("kinds"))
    rt_config = _runtime_config(config)
    try:
        endpoint = TcpEndpoint(agent_id, listen,
                               int(config.get("connect_timeout_ms", 5000)))
    except OSError as exc:
        print(f"agent {agent_id}: cannot bind {listen}: {exc}", file=sys.stderr)
        return 1

    try:
        boot = socket.create_connection(parse_hostport(registry_endpoint), timeout=JOIN_TIMEOUT_S)
    except OSError as exc:
        print(f"agent {agent_id}: cannot reach registry {registry_endpoint}: {exc}",
              file=sys.stderr)
        endpoint.close()
        return 1
    send_control(boot, {"join": agent_id, "endpoint": endpoint.endpoint})
    stream = boot.makefile("rb")
    msg = recv_control(stream)
    if not msg or "map" not in msg:
        print(f"agent {agent_id}: registry closed during join", file=sys.stderr)
        endpoint.close()
        return 1
    endpoint.set_peers({int(k): v for k, v in msg["map"].items()})

    sink = TraceSink(path=config.get("trace_path"), memory=False)
    agent = Agent(agent_id, endpoint, registry, sink, rt_config)
    agent.start()
    logger.info("agent %d up at %s", agent_id, endpoint.endpoint)

    # SIGTERM closes the control socket, which unblocks the loop below
    # and takes the same orderly-shutdown path as a launcher request.
    signal.signal(signal.SIGTERM, lambda *_: boot.close())

    try:
        msg = recv_control(stream)
    except (OSError, ValueError):
        msg = None
    if msg and msg.get("shutdown"):
        try:
            send_control(boot, {"bye": True, "stats": agent.stats()})
        except OSError:
            pass
    agent.stop()
    sink.close()
    try:
        boot.close()
    except OSError:
        pass
    return 0
