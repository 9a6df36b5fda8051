"""Named worker functions, chain composition, and guarded application.

A worker function takes an inbox (ordered list of payload values, one
per incoming pipe) plus keyword config, and returns a payload.  Functions
are addressed by registry name so a chain can be described in a manifest
and evaluated on any host where the same names are registered -- no code
ever ships across a connection.

apply_chain() is the single evaluation path used by in-process lanes,
worker servers, and the serial pump: it never raises; every failure
becomes a fault envelope that propagates downstream.
"""

from __future__ import annotations

import os
import shlex
import socket
import subprocess
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

from .codec import _check_domain
from .envelope import USER_ERROR, Envelope, new_fault, payload, propagate
from .errors import DuplicateName, EmptyChain, RegistryFrozen, UnknownFunction


@dataclass(frozen=True)
class FunctionRef:
    """A registry name plus its serializable keyword config."""

    name: str
    kwargs: Mapping[str, Any] = field(default_factory=dict)

    def to_wire(self) -> dict:
        return {"fn": self.name, "kwargs": dict(self.kwargs)}

    @classmethod
    def from_wire(cls, doc: dict) -> "FunctionRef":
        return cls(name=str(doc["fn"]), kwargs=dict(doc.get("kwargs") or {}))


@dataclass(frozen=True)
class WorkerChain:
    """An ordered composition of named functions evaluated within one piper.

    Stage 0 sees the node inbox; every later stage sees a single-element
    inbox holding the previous stage's result.  handles_faults=False (the
    default) short-circuits fault inboxes without invoking user code.
    """

    stages: tuple[FunctionRef, ...]
    handles_faults: bool = False

    def names(self) -> list[str]:
        return [ref.name for ref in self.stages]

    def to_wire(self) -> dict:
        return {
            "stages": [ref.to_wire() for ref in self.stages],
            "handles_faults": self.handles_faults,
        }

    @classmethod
    def from_wire(cls, doc: dict) -> "WorkerChain":
        return cls(
            stages=tuple(FunctionRef.from_wire(d) for d in doc["stages"]),
            handles_faults=bool(doc.get("handles_faults", False)),
        )


class WorkerRegistry:
    """Name -> callable table, frozen before any pipeline or server starts."""

    def __init__(self, include_builtins: bool = True):
        self._entries: dict[str, Callable] = {}
        self._frozen = False
        self._lock = threading.Lock()
        if include_builtins:
            for name, fn in _BUILTINS.items():
                self._entries[name] = fn

    def register(self, name: str, fn: Callable) -> "WorkerRegistry":
        with self._lock:
            if self._frozen:
                raise RegistryFrozen(f"cannot register {name!r} after freeze")
            if name in self._entries:
                raise DuplicateName(f"worker {name!r} already registered")
            self._entries[name] = fn
        return self

    def freeze(self) -> None:
        with self._lock:
            self._frozen = True

    def snapshot(self) -> "WorkerRegistry":
        """A frozen copy for one run or server: the original stays editable
        between runs, while the executing side sees an immutable table."""
        with self._lock:
            copy = WorkerRegistry(include_builtins=False)
            copy._entries = dict(self._entries)
            copy._frozen = True
            return copy

    @property
    def frozen(self) -> bool:
        return self._frozen

    def resolve(self, name: str) -> Callable:
        try:
            return self._entries[name]
        except KeyError:
            raise UnknownFunction(f"no worker named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return sorted(self._entries)


_default_registry: WorkerRegistry | None = None
_default_lock = threading.Lock()


def default_registry() -> WorkerRegistry:
    """The process-global registry (built-ins preloaded)."""
    global _default_registry
    with _default_lock:
        if _default_registry is None:
            _default_registry = WorkerRegistry()
        return _default_registry


def register_function(registry: WorkerRegistry, name: str, fn: Callable) -> WorkerRegistry:
    return registry.register(name, fn)


def import_registry_modules(module_names: Iterable[str]) -> None:
    """Import modules whose import side effect registers workers (server bootstrap)."""
    import importlib

    for mod in module_names:
        importlib.import_module(mod)


def compose_chain(stages, registry: WorkerRegistry | None = None,
                  handles_faults: bool = False) -> WorkerChain:
    """Build a WorkerChain, validating every name against the registry.

    Stages may be FunctionRef objects, plain names, or (name, kwargs) pairs.
    """
    registry = registry or default_registry()
    refs = []
    for stage in stages:
        if isinstance(stage, FunctionRef):
            ref = stage
        elif isinstance(stage, str):
            ref = FunctionRef(stage)
        else:
            name, kwargs = stage
            ref = FunctionRef(name, dict(kwargs))
        if ref.name not in registry:
            raise UnknownFunction(f"no worker named {ref.name!r}")
        _check_domain(dict(ref.kwargs))  # kwargs must survive manifests and the wire
        refs.append(ref)
    if not refs:
        raise EmptyChain("a chain needs at least one stage")
    return WorkerChain(stages=tuple(refs), handles_faults=handles_faults)


def apply_chain(chain: WorkerChain, inbox: list[Envelope], piper: str = "worker",
                registry: WorkerRegistry | None = None) -> Envelope:
    """Evaluate a chain on an inbox; failures come back as fault envelopes.

    Fault short-circuit: with handles_faults=False a fault anywhere in the
    inbox is propagated (hops+1) and no user function runs.  With
    handles_faults=True fault slots are handed to stage 0 as FaultInfo
    markers in place of payload values.
    """
    if not inbox:
        raise ValueError("inbox must hold at least one envelope")
    registry = registry or default_registry()
    idx = inbox[0].item_index
    sub = inbox[0].sub_index

    if not chain.handles_faults:
        for env in inbox:
            if env.is_fault:
                return propagate(env, item_index=idx, sub_index=sub)

    values = [env.fault if env.is_fault else env.value for env in inbox]
    result: Any = None
    for k, ref in enumerate(chain.stages):
        stage_inbox = values if k == 0 else [result]
        try:
            fn = registry.resolve(ref.name)
            result = fn(stage_inbox, **ref.kwargs)
        except Exception as exc:
            return new_fault(piper, k, USER_ERROR, f"{type(exc).__name__}: {exc}", idx, sub)
    return payload(result, idx, sub)


# --- built-in workers -----------------------------------------------------

def _identity(inbox):
    return inbox[0]


def _where(inbox):
    """Report where the call ran; distinct processes yield distinct strings."""
    return "input: %s, host:%s, parent:%s, process:%s, thread:%s" % (
        inbox[0], socket.gethostname(), os.getppid(), os.getpid(), threading.get_ident())


def _io_print(inbox):
    print(inbox[0], flush=True)
    return inbox[0]


def _io_dump_item(inbox, type="file", codec="text-v1", **options):
    from . import ipc

    method = {"tcp": "socket"}.get(type, type)
    return ipc.locator_to_wire(ipc.dump_item(inbox[0], method=method, codec=codec, **options))


def _io_load_item(inbox):
    from . import ipc

    return ipc.load_item(ipc.locator_from_wire(inbox[0]))


def _shell_exec(inbox, cmd=""):
    """Run a subprocess; "{}" in cmd is replaced by the payload, otherwise the
    payload goes in on stdin.  stdout becomes the result payload."""
    if not cmd:
        raise ValueError("shell.exec needs a cmd kwarg")
    text = str(inbox[0])
    argv = shlex.split(cmd)
    stdin = None
    if any("{}" in part for part in argv):
        argv = [part.replace("{}", text) for part in argv]
    else:
        stdin = text
    proc = subprocess.run(argv, input=stdin, capture_output=True, text=True)
    if proc.returncode != 0:
        raise RuntimeError(
            f"exit {proc.returncode}: {proc.stderr.strip() or proc.stdout.strip()}")
    return proc.stdout


_BUILTINS: dict[str, Callable] = {
    "identity": _identity,
    "where": _where,
    "io.print": _io_print,
    "io.dump_item": _io_dump_item,
    "io.load_item": _io_load_item,
    "shell.exec": _shell_exec,
}
