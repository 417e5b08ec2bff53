"""Declarative scenario files: one action per line, ``#`` starts a comment.

    config seed=7 n=4 timeout=500 budget=16 window=10 horizon=600000 latency=1..10 drop=0.0
    byzantine v0 silent
    patient alice
    staff bob
    enroll alice                      # or plain `enroll` for every actor
    share_key alice bob
    grant alice bob body_temperature,blood_pressure
    grant alice bob -                 # empty policy: revoke
    store alice bob body_temperature 3712 as=t1
    retrieve bob alice t1 as=r1
    flood alice 200
    fault at=+0 partition v3 duration=2000
    fault at=1500 crash v2 | recover v2 | heal | drop 0.1 | corrupt_blob v1 [label]
    advance 3000
    settle
    assert heads_equal
    assert committed_count >= 3
    assert access_denied r1
    assert plaintext_match t1 r1
    assert report detections.storage_attack == true
"""

from __future__ import annotations

import json
import operator
import shlex
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Any

from .codec import DataType
from .crypto import Digest
from .ledger import TransactionRejected
from .netsim import ConsensusTimeout, Fault, Partition, SimConfig, Simulation, UnknownNode, seeded_entropy
from .wallet import AccessDenied, DecryptFailure, PatientWallet, StaffWallet, VitalSample


class ScenarioError(Exception):
    def __init__(self, message: str, line: int | None = None) -> None:
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


@dataclass(frozen=True)
class Action:
    verb: str
    args: tuple[str, ...]
    opts: dict[str, str]
    line: int


CONFIG_KEYS = {
    "seed": ("seed", int),
    "n": ("n", int),
    "timeout": ("timeout_ms", int),
    "batch": ("batch_delay_ms", int),
    "budget": ("rate_budget", int),
    "window": ("rate_window", int),
    "block": ("max_block_txs", int),
    "horizon": ("horizon_ms", int),
    "drop": ("drop_prob", float),
    "k": ("replication_k", int),
    "fifo": ("fifo", lambda v: v.lower() in ("1", "true", "yes")),
}

ASSERTIONS = {"heads_equal", "states_equal", "committed_count", "access_denied", "plaintext_match",
              "decrypt_failure", "rejected", "report"}
FAULTS = {"drop", "partition", "heal", "crash", "recover", "corrupt_blob"}

_OPS = {"==": operator.eq, "!=": operator.ne, ">=": operator.ge, "<=": operator.le, ">": operator.gt, "<": operator.lt}


def _split(text: str, lineno: int) -> tuple[str, tuple[str, ...], dict[str, str]]:
    try:
        words = shlex.split(text, comments=True)
    except ValueError as exc:
        raise ScenarioError(str(exc), lineno) from None
    args, opts = [], {}
    for w in words[1:]:
        key, eq, value = w.partition("=")
        if eq and key.isidentifier():
            opts[key] = value
        else:
            args.append(w)
    return words[0], tuple(args), opts


def _data_type(name: str, lineno: int) -> DataType:
    try:
        return DataType.parse(name)
    except (KeyError, ValueError):
        raise ScenarioError(f"unknown data type {name!r}", lineno) from None


def _policy(spec: str, lineno: int) -> frozenset[DataType]:
    if spec in ("-", "{}", "none"):
        return frozenset()
    return frozenset(_data_type(t, lineno) for t in spec.split(",") if t)


def _literal(text: str) -> Any:
    """JSON value if it parses as one (numbers, true/false, [], {}), else the bare word."""
    try:
        return json.loads(text.lower() if text.lower() in ("true", "false") else text)
    except ValueError:
        return text


@dataclass
class Scenario:
    name: str
    config: SimConfig
    actions: list[Action]
    source: str = ""

    # -- parsing -------------------------------------------------------------

    @classmethod
    def parse(cls, text: str, name: str = "scenario") -> "Scenario":
        config = SimConfig()
        actions: list[Action] = []
        actors: dict[str, str] = {}
        labels: dict[str, str] = {}
        seen_action = False
        for lineno, raw in enumerate(text.splitlines(), 1):
            if not raw.strip() or raw.lstrip().startswith("#"):
                continue
            verb, args, opts = _split(raw, lineno)
            if verb == "config":
                if seen_action:
                    raise ScenarioError("config must precede actions", lineno)
                config = cls._apply_config(config, args, opts, lineno)
                continue
            if verb == "byzantine":
                if len(args) != 2:
                    raise ScenarioError("usage: byzantine <node> <profile>", lineno)
                node = cls._node(args[0], config.n, lineno)
                config = cls._rebuild(config, lineno, byzantine={**config.byzantine, node: args[1]})
                continue
            seen_action = True
            cls._check(verb, args, opts, actors, labels, config, lineno)
            actions.append(Action(verb, args, opts, lineno))
        return cls(name, config, actions, text)

    @classmethod
    def load(cls, path: str | Path) -> "Scenario":
        p = Path(path)
        if not p.exists() and not p.suffix:
            bundled = bundled_path(str(path))
            if bundled is not None:
                p = bundled
        try:
            text = p.read_text()
        except OSError as exc:
            raise ScenarioError(f"cannot read scenario: {exc}") from None
        return cls.parse(text, p.stem)

    @staticmethod
    def _rebuild(config: SimConfig, lineno: int, **changes) -> SimConfig:
        try:
            return replace(config, **changes)
        except (TypeError, ValueError) as exc:
            raise ScenarioError(str(exc), lineno) from None

    @classmethod
    def _apply_config(cls, config: SimConfig, args, opts, lineno) -> SimConfig:
        if args:
            raise ScenarioError(f"unexpected config words {args}", lineno)
        changes: dict[str, Any] = {}
        for key, value in opts.items():
            if key == "latency":
                lo, _, hi = value.partition("..")
                try:
                    changes["latency_min"], changes["latency_max"] = int(lo), int(hi or lo)
                except ValueError:
                    raise ScenarioError(f"bad latency {value!r}", lineno) from None
                continue
            if key not in CONFIG_KEYS:
                raise ScenarioError(f"unknown config key {key!r}", lineno)
            attr, conv = CONFIG_KEYS[key]
            try:
                changes[attr] = conv(value)
            except ValueError:
                raise ScenarioError(f"bad value for {key}: {value!r}", lineno) from None
        return cls._rebuild(config, lineno, **changes)

    @staticmethod
    def _node(text: str, n: int, lineno: int) -> int:
        if text.startswith("v") and text[1:].isdigit() and int(text[1:]) < n:
            return int(text[1:])
        raise ScenarioError(f"unknown node {text!r}", lineno)

    @classmethod
    def _check(cls, verb, args, opts, actors, labels, config, lineno) -> None:
        def need(count: int, usage: str) -> None:
            if len(args) != count:
                raise ScenarioError(f"usage: {usage}", lineno)

        def actor(name: str, role: str | None = None) -> None:
            if name not in actors:
                raise ScenarioError(f"undeclared actor {name!r}", lineno)
            if role and actors[name] != role:
                raise ScenarioError(f"{name!r} is not a {role}", lineno)

        def label(name: str, kind: str) -> None:
            if labels.get(name) != kind:
                raise ScenarioError(f"unknown {kind} label {name!r}", lineno)

        if verb in ("patient", "staff"):
            need(1, f"{verb} <name>")
            if args[0] in actors:
                raise ScenarioError(f"actor {args[0]!r} declared twice", lineno)
            actors[args[0]] = verb
        elif verb == "enroll":
            for a in args:
                actor(a)
        elif verb == "share_key":
            need(2, "share_key <patient> <staff>")
            actor(args[0], "patient")
            actor(args[1], "staff")
        elif verb == "grant":
            need(3, "grant <patient> <staff> <type,...|->")
            actor(args[0], "patient")
            actor(args[1])
            _policy(args[2], lineno)
        elif verb == "store":
            need(4, "store <patient> <staff> <type> <value> as=<label>")
            actor(args[0], "patient")
            actor(args[1], "staff")
            _data_type(args[2], lineno)
            if not args[3].lstrip("-").isdigit():
                raise ScenarioError(f"value must be an integer, got {args[3]!r}", lineno)
            if "as" in opts:
                labels[opts["as"]] = "store"
        elif verb == "retrieve":
            need(3, "retrieve <staff> <patient> <store-label> as=<label>")
            actor(args[0])
            actor(args[1], "patient")
            label(args[2], "store")
            if "as" in opts:
                labels[opts["as"]] = "retrieve"
        elif verb == "flood":
            need(2, "flood <actor> <count>")
            actor(args[0])
            if not args[1].isdigit():
                raise ScenarioError("flood count must be an integer", lineno)
            if "as" in opts:
                labels[opts["as"]] = "flood"
        elif verb == "fault":
            if not args or args[0] not in FAULTS or "at" not in opts:
                raise ScenarioError(f"usage: fault at=<ms|+ms> <{'|'.join(sorted(FAULTS))}> ...", lineno)
            at = opts["at"].lstrip("+")
            if not at.isdigit():
                raise ScenarioError(f"bad fault time {opts['at']!r}", lineno)
            kind = args[0]
            if kind in ("crash", "recover", "corrupt_blob", "partition"):
                if len(args) < 2:
                    raise ScenarioError(f"{kind} needs a node", lineno)
                for node in args[1].split(","):
                    cls._node(node, config.n, lineno)
            if kind == "corrupt_blob" and len(args) > 2:
                label(args[2], "store")
            if kind == "drop":
                try:
                    float(args[1])
                except (IndexError, ValueError):
                    raise ScenarioError("drop needs a probability", lineno) from None
        elif verb == "advance":
            need(1, "advance <ms>")
            if not args[0].isdigit():
                raise ScenarioError("advance takes milliseconds", lineno)
        elif verb == "settle":
            need(0, "settle")
        elif verb == "assert":
            if not args or args[0] not in ASSERTIONS:
                raise ScenarioError(f"unknown assertion {' '.join(args)!r}", lineno)
            what = args[0]
            if what in ("access_denied", "decrypt_failure"):
                need(2, f"assert {what} <label>")
                if args[1] not in labels:
                    raise ScenarioError(f"unknown label {args[1]!r}", lineno)
            elif what == "plaintext_match":
                need(3, "assert plaintext_match <store-label> <retrieve-label>")
                label(args[1], "store")
                label(args[2], "retrieve")
            elif what == "committed_count":
                need(3, "assert committed_count <op> <n>")
                if args[1] not in _OPS:
                    raise ScenarioError(f"bad operator {args[1]!r}", lineno)
            elif what == "rejected":
                need(4, "assert rejected <flood-label> <op> <n>")
                label(args[1], "flood")
                if args[2] not in _OPS:
                    raise ScenarioError(f"bad operator {args[2]!r}", lineno)
            elif what == "report":
                need(4, "assert report <field> <op> <value>")
                if args[2] not in _OPS:
                    raise ScenarioError(f"bad operator {args[2]!r}", lineno)
            else:
                need(1, f"assert {what}")
        else:
            raise ScenarioError(f"unknown action {verb!r}", lineno)

    # -- execution ------------------------------------------------------------------

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, config=replace(self.config, seed=seed))

    def execute(self, sim: Simulation) -> None:
        Runner(self, sim).run()


@dataclass
class Runner:
    scenario: Scenario
    sim: Simulation
    actors: dict[str, Any] = field(default_factory=dict)
    stored: dict[str, tuple[str, str, VitalSample, Digest | None]] = field(default_factory=dict)
    results: dict[str, Any] = field(default_factory=dict)
    floods: dict[str, list[Digest]] = field(default_factory=dict)

    def run(self) -> None:
        stalled = False
        for action in self.scenario.actions:
            if stalled and action.verb != "assert":
                continue
            try:
                getattr(self, f"do_{action.verb}")(action)
            except ConsensusTimeout:
                self.sim.horizon_hit = True
                stalled = True
            except UnknownNode as exc:
                raise ScenarioError(f"unknown node {exc}", action.line) from None

    def _wallet(self, name: str):
        return self.actors[name]

    def do_patient(self, a: Action) -> None:
        self._declare(a, PatientWallet)

    def do_staff(self, a: Action) -> None:
        self._declare(a, StaffWallet)

    def _declare(self, a: Action, cls) -> None:
        name = a.args[0]
        wallet = cls(name, entropy=seeded_entropy(self.sim.config.seed, f"wallet:{name}"))
        self.actors[name] = wallet

    def do_enroll(self, a: Action) -> None:
        names = a.args or tuple(self.actors)
        wallets = [self.actors[n] for n in names]
        # announce everyone, then commit the patients' bootstrap records in one batch
        pending = []
        for w in wallets:
            if id(self.sim) in w.enrolled_with:
                continue
            self.sim.announce(w.address, w)
            w.enrolled_with.add(id(self.sim))
            if isinstance(w, PatientWallet):
                pending.append(self.sim.send(w.grant(w.address, ())))
        if pending:
            self.sim.wait(pending)

    def do_share_key(self, a: Action) -> None:
        self.actors[a.args[0]].share_key(self.sim, self.actors[a.args[1]].address)

    def do_grant(self, a: Action) -> None:
        patient, staff = self.actors[a.args[0]], self.actors[a.args[1]]
        receipt = self.sim.submit(patient.grant(staff.address, _policy(a.args[2], a.line)))
        self.results[a.opts.get("as", f"grant@{a.line}")] = receipt

    def do_store(self, a: Action) -> None:
        patient, staff = self.actors[a.args[0]], self.actors[a.args[1]]
        sample = VitalSample(_data_type(a.args[2], a.line), int(a.args[3]), self.sim.now)
        label = a.opts.get("as", f"store@{a.line}")
        try:
            digest = patient.store_vital(self.sim, staff.address, sample)
            outcome: Any = digest
        except AccessDenied:
            digest, outcome = None, None
        except TransactionRejected as exc:
            digest, outcome = None, f"rejected:{exc.reason.value}"
        self.stored[label] = (a.args[0], a.args[1], sample, digest)
        self.results[label] = outcome

    def do_retrieve(self, a: Action) -> None:
        reader, owner = self.actors[a.args[0]], self.actors[a.args[1]]
        _, _, sample, digest = self.stored[a.args[2]]
        label = a.opts.get("as", f"retrieve@{a.line}")
        if digest is None:
            raise ScenarioError(f"{a.args[2]!r} was never stored", a.line)
        if not isinstance(reader, StaffWallet):
            raise ScenarioError("only staff retrieve in scenarios", a.line)
        try:
            self.results[label] = reader.retrieve_vital(self.sim, owner.address, sample.data_type, digest)
        except DecryptFailure:
            self.results[label] = "decrypt_failure"

    def do_flood(self, a: Action) -> None:
        ids = self.sim.flood(a.args[0], int(a.args[1]))
        self.floods[a.opts.get("as", a.args[0])] = ids
        self.sim.wait(ids)

    def do_fault(self, a: Action) -> None:
        at_text = a.opts["at"]
        at = self.sim.now + int(at_text[1:]) if at_text.startswith("+") else int(at_text)
        kind, rest = a.args[0], a.args[1:]
        if kind == "drop":
            self.sim.inject_fault(at, Fault("drop", {"rate": float(rest[0])}))
        elif kind == "partition":
            group = frozenset(rest[0].split(","))
            end = at + int(a.opts["duration"]) if "duration" in a.opts else None
            part = Partition(at, end, (group,))
            self.sim.inject_fault(at, Fault("partition", {"groups": part.groups, "activate": part}))
            if end is not None:
                self.sim.inject_fault(end, Fault("heal", {"partition": part}))
        elif kind == "heal":
            self.sim.inject_fault(at, Fault("heal"))
        elif kind in ("crash", "recover"):
            self.sim.inject_fault(at, Fault(kind, {"node": rest[0]}))
        elif kind == "corrupt_blob":
            params: dict[str, Any] = {"node": rest[0]}
            if len(rest) > 1:
                digest = self.stored[rest[1]][3]
                if digest is None:
                    raise ScenarioError(f"{rest[1]!r} was never stored", a.line)
                params["digest"] = digest
            self.sim.inject_fault(at, Fault("corrupt_blob", params))

    def do_advance(self, a: Action) -> None:
        until = self.sim.now + int(a.args[0])
        self.sim.run_until(lambda: bool(self.sim._queue) and self.sim._queue[0][0] > until or not self.sim._queue)
        self.sim.now = max(self.sim.now, min(until, self.sim.config.horizon_ms))

    def do_settle(self, a: Action) -> None:
        self.sim.settle()

    def do_assert(self, a: Action) -> None:
        what = a.args[0]
        if what in ("heads_equal", "states_equal", "committed_count", "report"):
            self.sim.settle()
        report = self.sim.report()
        text = " ".join(a.args)
        if what == "heads_equal":
            ok, detail = report["heads_equal"], ""
        elif what == "states_equal":
            ok, detail = report["states_equal"], ""
        elif what == "committed_count":
            actual = report["committed_count"]
            ok, detail = _OPS[a.args[1]](actual, int(a.args[2])), f"actual={actual}"
        elif what == "access_denied":
            value = self.results.get(a.args[1], "missing")
            ok, detail = value is None, f"actual={_describe(value)}"
        elif what == "decrypt_failure":
            value = self.results.get(a.args[1], "missing")
            ok, detail = value == "decrypt_failure", f"actual={_describe(value)}"
        elif what == "plaintext_match":
            original = self.stored[a.args[1]][2]
            got = self.results.get(a.args[2])
            ok, detail = got == original, f"stored={_describe(original)} retrieved={_describe(got)}"
        elif what == "rejected":
            ids = self.floods[a.args[1]]
            outcomes = [self.sim.outcome(t) for t in ids]
            rejected = sum(1 for r in outcomes if r is not None and r.outcome == "rejected:rate_limited")
            ok, detail = _OPS[a.args[2]](rejected, int(a.args[3])), f"rate_limited={rejected}/{len(ids)}"
        else:
            path, op, expected = a.args[1], a.args[2], _literal(a.args[3])
            try:
                actual = report.field(path)
            except KeyError:
                ok, detail = False, f"no report field {path!r}"
            else:
                try:
                    ok = bool(_OPS[op](actual, expected))
                except TypeError:
                    ok = False
                detail = f"actual={actual!r}"
        self.sim.assertions.append({"line": a.line, "assertion": text, "ok": bool(ok), "detail": detail})


def _describe(value: Any) -> str:
    if value is None:
        return "denied"
    if isinstance(value, VitalSample):
        return f"{value.data_type.label}={value.value}@{value.captured_at}"
    if isinstance(value, bytes):
        return value.hex()[:16]
    return str(value)


BUNDLED = ("happy_path", "revocation", "unauthorized_read", "byzantine_primary",
           "silent_primary_viewchange", "dos_flood", "storage_tamper", "partition_heal")


def bundled_path(name: str) -> Path | None:
    candidate = resources.files("medledger").joinpath("scenarios", f"{name}.scn")
    return Path(str(candidate)) if candidate.is_file() else None
