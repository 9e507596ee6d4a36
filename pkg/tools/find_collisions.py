"""Search for pairs of distinct transactions sharing a 6-byte short ID.

Each family fixes every transaction field except the 20-byte sender, of
which only the low 6 bytes vary. Brent cycle detection on
sender -> short_id(tx(sender)) finds a colliding pair in about 2^24 hashes.

    python3 tools/find_collisions.py FIRST_FAMILY COUNT > collisions.jsonl

tests/data/collisions.json is the frozen output of `0 13`.
"""

import argparse
import hashlib
import json
import struct
import sys

from hcblab.core import GWEI, Transaction


def make_step(family: int):
    max_fee = (20 + family) * GWEI
    prio = 1 * GWEI
    tail = struct.pack(">QQQ62sI", 0, max_fee, prio, bytes(62), 0)

    def step(x: bytes) -> bytes:
        # sender is 20 bytes big-endian; the top 14 stay zero
        return hashlib.sha256(bytes(14) + x + tail).digest()[:6]

    return step, max_fee, prio


def brent(f, x0):
    power = lam = 1
    tortoise, hare = x0, f(x0)
    while tortoise != hare:
        if power == lam:
            tortoise, power, lam = hare, power * 2, 0
        hare = f(hare)
        lam += 1
    tortoise = hare = x0
    for _ in range(lam):
        hare = f(hare)
    while True:
        nt, nh = f(tortoise), f(hare)
        if nt == nh:
            return tortoise, hare
        tortoise, hare = nt, nh


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("first_family", type=int)
    ap.add_argument("count", type=int)
    args = ap.parse_args()
    fam, found = args.first_family, 0
    while found < args.count:
        step, max_fee, prio = make_step(fam)
        a, b = brent(step, hashlib.sha256(b"seed%d" % fam).digest()[:6])
        if a != b:
            ta = Transaction(int.from_bytes(a, "big"), 0, max_fee, prio)
            tb = Transaction(int.from_bytes(b, "big"), 0, max_fee, prio)
            assert ta.short_id == tb.short_id and ta.tx_hash != tb.tx_hash
            print(json.dumps({"family": fam, "sender_a": ta.sender, "sender_b": tb.sender,
                              "max_fee": max_fee, "prio": prio, "sid": ta.short_id.hex()}), flush=True)
            found += 1
        fam += 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
