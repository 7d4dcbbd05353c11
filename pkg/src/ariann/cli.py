"""Operator entry point: demos, benchmarks, key generation, and sweeps.

Reports are JSON lines (one record per measurement) validating against
report_schema.json. Exit codes: 0 ok, 1 usage error, 2 protocol abort,
3 acceptance mismatch.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_ABORT = 2
EXIT_MISMATCH = 3


def _emit(report: dict, out_path=None):
    line = json.dumps(report, sort_keys=True)
    if out_path:
        with open(out_path, "a") as fh:
            fh.write(line + "\n")
    print(line)


def _common_flags(sub):
    sub.add_argument("--n", type=int, default=32, help="ring width in bits")
    sub.add_argument("--precision", type=int, default=3,
                     help="decimal fixed-point digits")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--transport", default="local",
                     help="local or tcp[:host:port]")
    sub.add_argument("--role", default="all-in-one",
                     choices=["all-in-one", "dealer", "party0", "party1"])
    sub.add_argument("--batch", type=int, default=1000)
    sub.add_argument("--out", default=None, help="append JSON lines here")
    sub.add_argument("--prep-dir", default=None,
                     help="key material directory for split-role runs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ariann",
        description="2-party secure computation engine (FSS comparisons, "
                    "Beaver protocols, private NN layers)")
    subs = parser.add_subparsers(dest="program", required=True)

    p = subs.add_parser("compare", help="comparison correctness / sign bench")
    p.add_argument("--exhaustive", action="store_true",
                   help="check every (alpha, x) pair at the given width")
    _common_flags(p)

    p = subs.add_parser("bench", help="online-phase benchmark of one protocol")
    p.add_argument("--program", dest="bench_program", required=True,
                   choices=["compare", "relu", "argmax", "maxpool",
                            "maxpool-k2", "matmul", "conv"])
    _common_flags(p)

    p = subs.add_parser("keygen", help="dealer: write key material files")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--kind", default="cmp", choices=["cmp", "eq"])
    _common_flags(p)

    p = subs.add_parser("infer", help="private inference parity demo")
    p.add_argument("--samples", type=int, default=1000)
    _common_flags(p)

    p = subs.add_parser("train", help="private training demo (triple run)")
    p.add_argument("--task", default="xor", choices=["xor", "moons"])
    p.add_argument("--epochs", type=int, default=500)
    p.add_argument("--lr", type=float, default=0.3)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--reveal-loss", action="store_true")
    _common_flags(p)

    p = subs.add_parser("fl-demo", help="2-client federated XOR demo")
    p.add_argument("--rounds", type=int, default=150)
    p.add_argument("--epochs-per-round", type=int, default=2)
    _common_flags(p)

    p = subs.add_parser("precision-sweep",
                        help="agreement vs comparison encoding width")
    p.add_argument("--model", default="toy-mlp", choices=["toy-mlp"])
    p.add_argument("--widths", default="12,16,20,24,28,32")
    p.add_argument("--samples", type=int, default=1000)
    _common_flags(p)

    return parser


def _transport_mode(value: str) -> str:
    if value == "local":
        return "local"
    if value == "tcp" or value.startswith("tcp:"):
        return "tcp"
    raise ValueError(f"unknown transport {value!r}")


def _cmd_compare(args) -> int:
    from . import demos
    if args.exhaustive:
        n = min(args.n, 10)
        report = demos.exhaustive_compare(n)
        _emit(report, args.out)
        return EXIT_OK if report["mismatches"] == 0 else EXIT_MISMATCH
    report = demos.bench("compare", args.batch, args.n, args.precision,
                         args.seed, _transport_mode(args.transport))
    _emit(report, args.out)
    return EXIT_OK


def _cmd_bench(args) -> int:
    from . import demos
    if args.role in ("party0", "party1"):
        return _bench_split_role(args)
    if args.role == "dealer":
        return _bench_dealer(args)
    report = demos.bench(args.bench_program, args.batch, args.n,
                         args.precision, args.seed,
                         _transport_mode(args.transport))
    _emit(report, args.out)
    return EXIT_OK


def _bench_dealer(args) -> int:
    """Dealer role: persist the comparison keys a split-role bench will use."""
    if args.bench_program != "compare":
        print("split-role bench supports --program compare", file=sys.stderr)
        return EXIT_USAGE
    args.kind = "cmp"
    args.count = args.batch
    return _cmd_keygen(args)


def _bench_split_role(args) -> int:
    """One party of a cross-process comparison bench.

    The dealer's key container is read from --prep-dir; the shared input is
    derived deterministically from --seed so both processes hold consistent
    shares without talking to each other. Party 0 listens, party 1 connects.
    Each party appends its output share (hex) to the report so a harness can
    reconstruct.
    """
    import os
    from . import fss
    from .ring import RingTensor
    from .runtime import run_session, tcp_connect, tcp_listen
    from .sharing import encode_fixed, share

    if args.bench_program != "compare":
        print("split-role bench supports --program compare", file=sys.stderr)
        return EXIT_USAGE
    if not args.prep_dir or not args.transport.startswith("tcp:"):
        print("split-role bench needs --prep-dir and --transport tcp:host:port",
              file=sys.stderr)
        return EXIT_USAGE
    _, host, port = args.transport.split(":")
    party = 0 if args.role == "party0" else 1

    path = os.path.join(args.prep_dir, f"cmp_{args.n}_{args.batch}.arnk")
    with open(path, "rb") as fh:
        keys = fss.unpack_keys(fss.deserialize_keys(fh.read()))[party]

    pub = np.random.default_rng(args.seed)
    values = pub.uniform(-100, 100, args.batch)
    my_share = share(encode_fixed(values, args.precision, args.n), pub)[party]
    y = my_share
    y.precision = 0

    def program(session):
        return fss.sign_protocol(session, y, keys)

    start = time.time()
    if party == 0:
        transport, _ = tcp_listen(host, int(port))
    else:
        transport = tcp_connect(host, int(port))
    result, ledger = run_session(party, transport, program)
    report = {"op": "compare", "role": args.role, "n_bits": args.n,
              "batch": args.batch, "rounds": ledger.total_rounds(),
              "bytes": ledger.total_bytes_sent(),
              "wall_time": time.time() - start, "agreement": None,
              "share_hex": result.values.data.astype("<u8").tobytes().hex()}
    _emit(report, args.out)
    return EXIT_OK


def _cmd_keygen(args) -> int:
    import os
    from . import fss
    if not args.prep_dir:
        print("keygen requires --prep-dir", file=sys.stderr)
        return EXIT_USAGE
    os.makedirs(args.prep_dir, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    start = time.time()
    if args.kind == "cmp":
        _, k0, k1 = fss.keygen_cmp(args.n, rng, count=args.count)
    else:
        _, k0, k1 = fss.keygen_eq(args.n, rng, count=args.count)
    blob = fss.serialize_keys(fss.pack_keys(k0, k1))
    path = os.path.join(args.prep_dir, f"{args.kind}_{args.n}_{args.count}.arnk")
    with open(path, "wb") as fh:
        fh.write(blob)
    _emit({"op": "keygen", "kind": args.kind, "n_bits": args.n,
           "count": args.count, "rounds": 0, "bytes": len(blob),
           "wall_time": time.time() - start, "agreement": None,
           "path": path}, args.out)
    return EXIT_OK


def _cmd_infer(args) -> int:
    from . import demos
    report = demos.inference_parity(args.n, args.precision, args.samples,
                                    args.seed or 3,
                                    _transport_mode(args.transport))
    _emit(report, args.out)
    return EXIT_OK if report["agreement"] >= 0.995 else EXIT_MISMATCH


def _cmd_train(args) -> int:
    from . import demos
    n = args.n if args.n != 32 else 40  # training needs truncation headroom
    report = demos.train_demo(args.task, args.epochs, n, args.precision,
                              args.seed or 11, args.lr, args.momentum,
                              allow_loss_reveal=args.reveal_loss)
    _emit(report, args.out)
    return EXIT_OK


def _cmd_fl_demo(args) -> int:
    from . import demos
    n = args.n if args.n != 32 else 40
    report = demos.fl_demo(args.rounds, args.epochs_per_round, n,
                           args.precision, args.seed or 11)
    _emit(report, args.out)
    return EXIT_OK


def _cmd_precision_sweep(args) -> int:
    from . import demos
    widths = tuple(int(w) for w in args.widths.split(","))
    rows = demos.precision_sweep(widths, args.precision, args.samples,
                                 args.seed or 5)
    for row in rows:
        _emit(row, args.out)
    return EXIT_OK


_COMMANDS = {
    "compare": _cmd_compare,
    "bench": _cmd_bench,
    "keygen": _cmd_keygen,
    "infer": _cmd_infer,
    "train": _cmd_train,
    "fl-demo": _cmd_fl_demo,
    "precision-sweep": _cmd_precision_sweep,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    from .runtime import SessionAbort
    try:
        return _COMMANDS[args.program](args)
    except SessionAbort as exc:
        print(f"protocol abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
