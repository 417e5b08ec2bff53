"""Command-line entry point.

Exit codes: 0 success, 1 assertion failure, 2 parse/usage error,
3 horizon exceeded (liveness stall), 4 integrity failure in an inspected file.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import crypto, ledger, netsim
from .codec import hexdump
from .offchain import ContentStore, IntegrityViolation
from .scenario import BUNDLED, Scenario, ScenarioError
from .wallet import PatientWallet, StaffWallet, Wallet, WalletError

EXIT_OK, EXIT_ASSERT, EXIT_PARSE, EXIT_HORIZON, EXIT_CORRUPT = 0, 1, 2, 3, 4
REPORT_DIR_ENV = "MEDLEDGER_REPORT_DIR"


def _exit_code(report: netsim.SimReport) -> int:
    checks = report["assertions"]
    if any(not c["ok"] for c in checks):
        return EXIT_ASSERT
    expects_stall = any(c["ok"] and "outcome" in c["assertion"] for c in checks)
    if report.outcome == "horizon_exceeded" and not expects_stall:
        return EXIT_HORIZON
    return EXIT_OK


def _report_path(args, scenario: Scenario, seed: int) -> Path:
    if args.report and not args.sweep:
        return Path(args.report)
    base = Path(args.report) if args.report else Path(os.environ.get(REPORT_DIR_ENV, "."))
    return base / f"{scenario.name}-seed{seed}.json"


def run_scenario(scenario: Scenario, trace_path: str | None = None, chain_dir: str | None = None) -> netsim.SimReport:
    """Execute a scenario; optionally write the trace and every node's chain and store."""
    trace = None
    if trace_path == "-":
        trace = sys.stderr
    elif trace_path:
        trace = open(trace_path, "w")
    try:
        sim = netsim.Simulation(scenario.config, trace)
        try:
            scenario.execute(sim)
            sim.settle()
        except netsim.ConsensusTimeout:
            sim.horizon_hit = True
        report = sim.report()
    finally:
        if trace not in (None, sys.stderr):
            trace.close()
    if chain_dir:
        out = Path(chain_dir)
        out.mkdir(parents=True, exist_ok=True)
        for i, replica in enumerate(sim.replicas):
            node = netsim.validator_id(i)
            ledger.write_chain(out / ledger.chain_file_name(node), replica.blocks)
            sim.stores[i].local.save(out / f"cas-{node}")
    return report


def _run_one(job: tuple[str, str, int, int | None, str | None, str | None]) -> tuple[int, str]:
    source, name, seed, horizon, trace, chain_dir = job
    scenario = Scenario.parse(source, name).with_seed(seed)
    if horizon is not None:
        scenario.config.horizon_ms = horizon
    report = run_scenario(scenario, trace, chain_dir)
    return _exit_code(report), report.to_json()


def cmd_run(args) -> int:
    try:
        scenario = Scenario.load(args.scenario)
    except ScenarioError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    seed = scenario.config.seed if args.seed is None else args.seed
    seeds = [seed + i for i in range(args.sweep)] if args.sweep else [seed]
    single = len(seeds) == 1
    jobs = [(scenario.source, scenario.name, s, args.horizon, args.trace if single else None,
             args.chain_dir if single else None) for s in seeds]
    try:
        if len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=min(len(jobs), os.cpu_count() or 1)) as pool:
                results = list(pool.map(_run_one, jobs))
        else:
            results = [_run_one(jobs[0])]
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    worst = EXIT_OK
    for s, (code, text) in zip(seeds, results):
        path = _report_path(args, scenario, s)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
        status = {EXIT_OK: "ok", EXIT_ASSERT: "assertion failed", EXIT_HORIZON: "horizon exceeded"}[code]
        print(f"{scenario.name} seed={s}: {status} (report: {path})")
        worst = max(worst, code, key=lambda c: (c != 0, c))
    return worst


def cmd_keygen(args) -> int:
    cls = PatientWallet if args.role == "patient" else StaffWallet
    wallet = cls(args.name or "")
    wallet.save(args.out)
    print(f"{args.role} address {wallet.address.hex()} written to {args.out}")
    return EXIT_OK


def cmd_import(args) -> int:
    try:
        identity = crypto.SigningIdentity(bytes.fromhex(args.secret.strip()))
    except ValueError as exc:
        print(f"invalid secret key: {exc}", file=sys.stderr)
        return EXIT_PARSE
    cls = PatientWallet if args.role == "patient" else StaffWallet
    wallet = cls(args.name or "", identity, nonce=args.nonce)
    wallet.save(args.out)
    print(f"imported {args.role} address {wallet.address.hex()} into {args.out}")
    return EXIT_OK


def cmd_show_key(args) -> int:
    try:
        wallet = Wallet.load(args.keystore)
    except (OSError, ValueError, KeyError, WalletError) as exc:
        print(f"cannot read keystore: {exc}", file=sys.stderr)
        return EXIT_PARSE
    print(f"{wallet.role} {wallet.name or '-'} address {wallet.address.hex()} nonce {wallet.nonce} "
          f"shared keys {len(wallet.keys)}")
    return EXIT_OK


def _load_chain(path: str, genesis: str | None = None) -> tuple[list[ledger.Block] | None, int]:
    try:
        data = Path(path).read_bytes()
        anchor = bytes.fromhex(genesis) if genesis else None
    except OSError as exc:
        print(f"cannot read {path}: {exc}", file=sys.stderr)
        return None, EXIT_PARSE
    except ValueError:
        print("--genesis must be a hex block hash", file=sys.stderr)
        return None, EXIT_PARSE
    verdict = ledger.verify_chain_bytes(data, anchor)
    if not verdict.ok:
        print(f"chain verification failed at height {verdict.first_bad_height}: {verdict.reason}", file=sys.stderr)
        return None, EXIT_CORRUPT
    return ledger.decode_chain(data), EXIT_OK


def cmd_inspect_chain(args) -> int:
    blocks, code = _load_chain(args.chain, args.genesis)
    if blocks is None:
        return code
    for block in blocks:
        h = block.header
        cert = block.certificate
        votes = ",".join(str(s) for s, _ in cert.votes) if cert else "-"
        print(f"height {h.height} hash {block.hash.hex()} prev {h.prev_hash.hex()}")
        print(f"  ts {h.timestamp} proposer {h.proposer} txs {len(block.transactions)} "
              f"tx_root {h.tx_root.hex()[:16]} view {cert.view if cert else '-'} votes {votes}")
        for tx in block.transactions:
            print(f"    tx {tx.id.hex()[:16]} kind {tx.kind.name.lower() if tx.kind else '?'} "
                  f"sender {tx.sender.hex()[:16]} nonce {tx.nonce}")
        if args.hexdump:
            print(hexdump(block.encode()))
    state = ledger.replay(blocks)
    print(f"chain ok: {len(blocks)} blocks, head {state.head_hash.hex()}, state {state.digest().hex()}")
    return EXIT_OK


def cmd_inspect_cas(args) -> int:
    try:
        store = ContentStore.load(args.directory)
    except (OSError, ValueError) as exc:
        print(f"cannot read store: {exc}", file=sys.stderr)
        return EXIT_PARSE
    bad = 0
    for digest in store.digests():
        try:
            size = len(store.get_bytes(digest))
            print(f"{digest.hex()} {size} bytes ok")
        except IntegrityViolation:
            bad += 1
            print(f"{digest.hex()} INTEGRITY VIOLATION")
    print(f"{len(store)} blobs, {bad} corrupted")
    return EXIT_CORRUPT if bad else EXIT_OK


def cmd_audit(args) -> int:
    blocks, code = _load_chain(args.chain, args.genesis)
    if blocks is None:
        return code
    try:
        address = bytes.fromhex(args.address)
    except ValueError:
        print("address must be hex", file=sys.stderr)
        return EXIT_PARSE
    state = ledger.replay(blocks)
    entries = ledger.audit_log(state, address)
    for e in entries:
        print(f"{e.height:>6} {e.tx_id.hex()[:16]} {e.summary()}")
    print(f"{len(entries)} entries")
    return EXIT_OK


def cmd_scenarios(args) -> int:
    for name in BUNDLED:
        print(name)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medledger", description="Permissioned health-data ledger simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute a scenario file (or a bundled scenario name)")
    p.add_argument("scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--trace", metavar="PATH", help="per-message trace; '-' for stderr")
    p.add_argument("--report", metavar="PATH",
                   help=f"report file (a directory with --sweep); default ${REPORT_DIR_ENV} or cwd")
    p.add_argument("--horizon", type=int, metavar="MS")
    p.add_argument("--sweep", type=int, default=0, metavar="N", help="run N consecutive seeds in parallel")
    p.add_argument("--chain-dir", metavar="DIR", help="write every node's chain file and blob store here")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("keygen", help="create a wallet keystore")
    p.add_argument("--role", choices=("patient", "staff"), required=True)
    p.add_argument("--name")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_keygen)

    p = sub.add_parser("import", help="build a keystore from a hex secret key")
    p.add_argument("--role", choices=("patient", "staff"), required=True)
    p.add_argument("--secret", required=True)
    p.add_argument("--name")
    p.add_argument("--nonce", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import)

    p = sub.add_parser("show-key", help="print a keystore's address")
    p.add_argument("keystore")
    p.set_defaults(func=cmd_show_key)

    p = sub.add_parser("inspect-chain", help="verify and dump a chain file")
    p.add_argument("chain")
    p.add_argument("--hexdump", action="store_true")
    p.add_argument("--genesis", metavar="HASH", help="expected genesis block hash (hex)")
    p.set_defaults(func=cmd_inspect_chain)

    p = sub.add_parser("inspect-cas", help="verify every blob in a store directory")
    p.add_argument("directory")
    p.set_defaults(func=cmd_inspect_cas)

    p = sub.add_parser("audit", help="print a patient's audit log from a chain file")
    p.add_argument("chain")
    p.add_argument("address")
    p.add_argument("--genesis", metavar="HASH", help="expected genesis block hash (hex)")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("scenarios", help="list bundled scenarios")
    p.set_defaults(func=cmd_scenarios)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PARSE if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
