"""Command line front end.

Single point or sweep, all in one process::

    cowqkd --preset apd --loss-db 21 --slots 2e9 --out runs/apd21
    cowqkd --preset apd --sweep 6:21:3 --slots 1e9

Two processes talking over TCP (Alice listens, Bob connects)::

    cowqkd --mode tcp --listen 127.0.0.1:7000 --loss-db 21 --out runs/alice
    cowqkd --mode tcp --connect 127.0.0.1:7000 --loss-db 21 --out runs/bob
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness
from .session import run_endpoint


def _slots(text: str) -> int:
    value = float(text)
    if value != int(value):
        raise argparse.ArgumentTypeError(f"slot count must be whole, got {text}")
    return int(value)


def _sweep(text: str) -> tuple[float, ...]:
    try:
        start, stop, step = (float(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError("expected A:B:STEP") from None
    return harness.loss_grid(start, stop, step)


def _drop(text: str) -> tuple[float, float]:
    try:
        t, dv = (float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected T,DV") from None
    return t, dv


def _address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError("expected HOST:PORT")
    return host, int(port)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cowqkd", description="Coherent one-way QKD link simulator.")
    p.add_argument("--preset", default="apd", help="apd, sspd, custom or another named preset")
    where = p.add_mutually_exclusive_group()
    where.add_argument("--loss-db", type=float, default=21.0, help="single loss point")
    where.add_argument("--sweep", type=_sweep, metavar="A:B:STEP", help="inclusive loss sweep")
    p.add_argument("--slots", type=_slots, default=10**8, help="exchange-phase slots per point")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--mu", type=float, help="mean photon number per pulse")
    p.add_argument("--visibility", type=float, help="nominal interferometer visibility")
    p.add_argument("--out", type=Path, help="directory for results.csv, keys and manifest")
    p.add_argument("--mode", choices=("inproc", "queue", "tcp"), default="inproc")
    peer = p.add_mutually_exclusive_group()
    peer.add_argument("--listen", type=_address, metavar="HOST:PORT", help="run Alice, waiting for Bob")
    peer.add_argument("--connect", type=_address, metavar="HOST:PORT", help="run Bob, connecting to Alice")
    p.add_argument("--inject-vis-drop", type=_drop, metavar="T,DV",
                   help="at T seconds the fringe walks off so visibility changes by DV")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _spec(args) -> harness.ExperimentSpec:
    overrides = {k: v for k, v in (("mu", args.mu), ("visibility", args.visibility)) if v is not None}
    points = args.sweep if args.sweep else (args.loss_db,)
    mode = "inproc" if args.listen or args.connect else args.mode
    return harness.ExperimentSpec(preset=args.preset, loss_points=points, slots=args.slots, seed=args.seed,
                                  out=args.out, overrides=overrides, mode=mode, vis_drop=args.inject_vis_drop)


def _run_endpoint(args, spec: harness.ExperimentSpec) -> int:
    if len(spec.loss_points) != 1:
        print("two-process mode runs a single loss point", file=sys.stderr)
        return 2
    role, (host, port) = ("alice", args.listen) if args.listen else ("bob", args.connect)
    cfg = spec.session_config(spec.loss_points[0])
    result = run_endpoint(cfg, role, host, port, listen=role == "alice")
    data = np.packbits(result.key).tobytes()
    digest = hashlib.sha256(data).hexdigest()
    print(f"{role}: {result.key.size} key bits, {len(result.blocks)} blocks, sha256 {digest}")
    if result.halt_reason:
        print(f"{role}: halted ({result.halt_reason})")
    if args.out:
        args.out.mkdir(parents=True, exist_ok=True)
        (args.out / f"{role}.key").write_bytes(data)
        (args.out / f"{role}.json").write_text(json.dumps(
            {"role": role, "bits": int(result.key.size), "sha256": digest, "halt": result.halt_reason},
            indent=2) + "\n")
    return 0 if result.halt_reason is None else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = _spec(args)
    except harness.SpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.listen or args.connect:
        return _run_endpoint(args, spec)
    result = harness.run(spec)
    sys.stdout.write(result.to_csv())
    if len(result.points) > 1:
        print(json.dumps(result.summary(), sort_keys=True), file=sys.stderr)
    print(harness.compare_analytic(result), file=sys.stderr)
    return 0 if all(p.ok for p in result.points) else 1


if __name__ == "__main__":
    sys.exit(main())
