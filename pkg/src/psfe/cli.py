"""Command-line entry points for every party plus the attack harness.

Key material lives in flat files under a keys directory: ``signing.key``
and ``decrypt.key`` are secrets (mode 0600), ``verify.pub`` and
``encrypt.pub`` are published. Peer public keys are referenced by path
from the service config files or placed in the client's keys directory
under ``<peer>_verify.pub`` / ``<peer>_encrypt.pub`` names.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import threading

from .clients import AnalystSession, CuratorSession
from .crypto import EncryptionKeyPair, SigningKeyPair, gen_party_keys, hash_bytes
from .dataset import load_csv
from .services import AnalystInfo, CspConfig, CspService, MaConfig, MaService
from .transport import FrameServer, TcpTransport
from .wire import DEFAULT_WINDOW_MS, FnKind

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger("psfe.cli")


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )


def _write_secret(path: str, data: bytes) -> None:
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)


def _read_key(path: str) -> bytes:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) != 32:
        raise SystemExit(f"{path}: expected a raw 32-byte key, got {len(data)} bytes")
    return data


def _load_own_keys(keys_dir: str) -> tuple[EncryptionKeyPair, SigningKeyPair]:
    signing = _read_key(os.path.join(keys_dir, "signing.key"))
    decryption = _read_key(os.path.join(keys_dir, "decrypt.key"))
    from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
    from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey

    verify = Ed25519PrivateKey.from_private_bytes(signing).public_key().public_bytes_raw()
    public = X25519PrivateKey.from_private_bytes(decryption).public_key().public_bytes_raw()
    return EncryptionKeyPair(decryption, public), SigningKeyPair(signing, verify)


def keygen_main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="psfe-keygen", description="Generate a party's key files."
    )
    parser.add_argument("--out", required=True, help="directory for the key files")
    args = parser.parse_args(argv)
    os.makedirs(args.out, exist_ok=True)
    encryption, signing = gen_party_keys()
    _write_secret(os.path.join(args.out, "signing.key"), signing.signing_key)
    _write_secret(os.path.join(args.out, "decrypt.key"), encryption.decryption_key)
    with open(os.path.join(args.out, "verify.pub"), "wb") as fh:
        fh.write(signing.verification_key)
    with open(os.path.join(args.out, "encrypt.pub"), "wb") as fh:
        fh.write(encryption.public_key)
    print(f"wrote key files to {args.out}")
    return 0


def curator_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="psfe-curator")
    sub = parser.add_subparsers(dest="command", required=True)
    setup = sub.add_parser("setup", help="encrypt a dataset and outsource it")
    setup.add_argument("--data", required=True, help="CSV file")
    setup.add_argument("--schema", required=True, help="TOML schema sidecar")
    setup.add_argument("--csp", required=True, help="storage server host:port")
    setup.add_argument("--ma", required=True, help="authority host:port")
    setup.add_argument("--keys", required=True, help="keys directory")
    setup.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)

    encryption, signing = _load_own_keys(args.keys)
    session = CuratorSession(
        encryption,
        signing,
        csp_address=args.csp,
        csp_vk=_read_key(os.path.join(args.keys, "csp_verify.pub")),
        csp_encryption_public=_read_key(os.path.join(args.keys, "csp_encrypt.pub")),
        ma_address=args.ma,
        ma_vk=_read_key(os.path.join(args.keys, "ma_verify.pub")),
        ma_encryption_public=_read_key(os.path.join(args.keys, "ma_encrypt.pub")),
        transport=TcpTransport(),
    )
    report = session.setup(load_csv(args.data, args.schema))
    print(
        f"dataset_ok={report.dataset_ok} lists_ok={report.lists_ok} "
        f"dataset_error={report.dataset_error} lists_error={report.lists_error} "
        f"eds_digest={report.eds_digest.hex()}"
    )
    return 0 if report.complete else 1


def analyst_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="psfe-analyst")
    sub = parser.add_subparsers(dest="command", required=True)
    query = sub.add_parser("query", help="run one aggregate query")
    query.add_argument("--value", required=True, help="value term, e.g. flu")
    query.add_argument("--variable", required=True, help="variable term, e.g. Age")
    query.add_argument("--fn", required=True, choices=["sum", "avg"])
    query.add_argument("--ma", required=True, help="authority host:port")
    query.add_argument("--keys", required=True, help="keys directory")
    query.add_argument(
        "--listen",
        default=os.environ.get("PSFE_ANALYST_ADDR", "127.0.0.1:0"),
        help="address to receive responses on (must match the services' config)",
    )
    query.add_argument("--timeout", type=float, default=10.0)
    query.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)

    encryption, signing = _load_own_keys(args.keys)
    session = AnalystSession(
        encryption,
        signing,
        ma_address=args.ma,
        ma_vk=_read_key(os.path.join(args.keys, "ma_verify.pub")),
        csp_vk=_read_key(os.path.join(args.keys, "csp_verify.pub")),
        transport=TcpTransport(),
        timeout_s=args.timeout,
    )
    host, _, port = args.listen.rpartition(":")
    server = FrameServer(session.handle_frame, host=host or "127.0.0.1", port=int(port))
    server.start()
    try:
        outcome = session.query(args.value, args.variable, FnKind[args.fn.upper()])
    finally:
        server.stop()
    print(
        f"status={outcome.status} value={outcome.value} count={outcome.count} "
        f"epsilon={outcome.epsilon} sensitivity={outcome.sensitivity} "
        f"error_class={outcome.error_class}"
    )
    return 0 if outcome.status == "ok" else 1


def _load_analysts(doc: dict, with_encrypt: bool) -> dict[bytes, AnalystInfo]:
    analysts = {}
    for entry in doc.get("analyst", []):
        vk = _read_key(entry["verify"])
        info = AnalystInfo(
            verification_key=vk,
            address=entry["address"],
            encryption_public=_read_key(entry["encrypt"]) if with_encrypt else None,
        )
        analysts[hash_bytes(vk)] = info
    return analysts


def _serve_forever(server: FrameServer, name: str) -> int:
    print(f"{name} listening on {server.address}", flush=True)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def csp_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="psfe-csp")
    parser.add_argument("--config", required=True, help="TOML config file")
    parser.add_argument(
        "--listen", default=os.environ.get("PSFE_CSP_ADDR", "127.0.0.1:7401")
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)

    with open(args.config, "rb") as fh:
        doc = tomllib.load(fh)
    encryption, signing = _load_own_keys(doc["keys_dir"])
    config = CspConfig(
        curator_vk=_read_key(doc["curator_verify"]),
        ma_vk=_read_key(doc["ma_verify"]),
        ma_address=doc["ma_address"],
        analysts=_load_analysts(doc, with_encrypt=False),
        window_ms=doc.get("window_ms", DEFAULT_WINDOW_MS),
    )
    service = CspService(
        encryption,
        signing,
        config,
        TcpTransport(),
        storage_dir=doc.get("storage_dir"),
    )
    host, _, port = args.listen.rpartition(":")
    server = FrameServer(service.handle_frame, host=host, port=int(port)).start()
    return _serve_forever(server, "storage server")


def ma_main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="psfe-ma")
    parser.add_argument("--config", required=True, help="TOML config file")
    parser.add_argument(
        "--listen", default=os.environ.get("PSFE_MA_ADDR", "127.0.0.1:7402")
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)

    with open(args.config, "rb") as fh:
        doc = tomllib.load(fh)
    encryption, signing = _load_own_keys(doc["keys_dir"])
    config = MaConfig(
        curator_vk=_read_key(doc["curator_verify"]),
        csp_vk=_read_key(doc["csp_verify"]),
        csp_address=doc["csp_address"],
        analysts=_load_analysts(doc, with_encrypt=True),
        default_epsilon=doc.get("default_epsilon", 1.0),
        budget_cap=doc.get("budget_cap"),
        window_ms=doc.get("window_ms", DEFAULT_WINDOW_MS),
    )
    service = MaService(
        encryption,
        signing,
        config,
        TcpTransport(),
        storage_dir=doc.get("storage_dir"),
    )
    host, _, port = args.listen.rpartition(":")
    server = FrameServer(service.handle_frame, host=host, port=int(port)).start()
    return _serve_forever(server, "authority")


def harness_main(argv=None) -> int:
    from . import harness

    parser = argparse.ArgumentParser(prog="psfe-harness")
    sub = parser.add_subparsers(dest="command", required=True)

    attack = sub.add_parser("attack", help="run a wire-level attack")
    attack.add_argument(
        "--name", required=True, choices=["result-substitution", "key-substitution"]
    )
    attack.add_argument("--strategy", required=True)
    attack.add_argument("--runs", type=int, default=1)
    attack.add_argument("--seed", type=int, default=None)

    demo = sub.add_parser("demo", help="run a demonstration")
    demo.add_argument("kind", choices=["differencing"])
    demo.add_argument("--epsilon", type=float, default=0.1)
    demo.add_argument("--trials", type=int, default=10_000)
    demo.add_argument("--seed", type=int, default=None)

    ratio = sub.add_parser("dp-ratio", help="empirical privacy-ratio experiment")
    ratio.add_argument("--epsilon", type=float, default=1.0)
    ratio.add_argument("--trials", type=int, default=100_000)
    ratio.add_argument("--seed", type=int, default=2024)
    ratio.add_argument("--workers", type=int, default=2)

    args = parser.parse_args(argv)
    _setup_logging(False)

    if args.command == "attack":
        runner = (
            harness.run_result_substitution
            if args.name == "result-substitution"
            else harness.run_key_substitution
        )
        verdicts = []
        for i in range(args.runs):
            seed = None if args.seed is None else args.seed + i
            verdicts.append(runner(args.strategy, seed=seed))
        report = {
            "attack": args.name,
            "strategy": args.strategy,
            "runs": args.runs,
            "detected": sum(v.detected for v in verdicts),
            "verdicts": [dataclasses.asdict(v) for v in verdicts],
        }
        print(json.dumps(report, indent=2))
        return 0 if all(v.detected for v in verdicts) else 1

    if args.command == "demo":
        report = harness.run_differencing_demo(args.epsilon, args.trials, seed=args.seed)
        payload = dataclasses.asdict(report)
        payload["stdev_within_tolerance"] = report.stdev_within_tolerance
        print(json.dumps(payload, indent=2))
        ok = report.exact_recovered == 65.0 and report.stdev_within_tolerance
        return 0 if ok else 1

    report = harness.run_dp_ratio_experiment(
        args.epsilon, args.trials, seed=args.seed, workers=args.workers
    )
    payload = dataclasses.asdict(report)
    payload["ok"] = report.ok
    print(json.dumps(payload, indent=2))
    return 0 if report.ok else 1


if __name__ == "__main__":
    sys.exit(harness_main())
