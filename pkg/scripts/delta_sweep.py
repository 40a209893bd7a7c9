"""Literal bytes sent by the delta transfer as a function of block size and edit density.

For each (block size, changed fraction) cell, random files are edited in a
fraction of their blocks and the literal share of the reconstructed file is
averaged.  Output is a plain table, one row per block size.
"""

import argparse
import random
import statistics
import time

from wifiacq import deltasync


def edit_blocks(rng, basis, bs, fraction):
    nblocks = -(-len(basis) // bs)
    chosen = set(rng.sample(range(nblocks), max(1, round(nblocks * fraction)))) if fraction else set()
    out = bytearray()
    for i in range(nblocks):
        block = basis[i * bs:(i + 1) * bs]
        if i in chosen:
            at = rng.randrange(len(block))
            block = block[:at] + rng.randbytes(rng.randint(1, 64)) + block[at + rng.randint(0, 64):]
        out += block
    return bytes(out)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=512 * 1024, help="file size in bytes")
    ap.add_argument("--trials", type=int, default=10)
    ap.add_argument("--block-sizes", type=int, nargs="+", default=[256, 512, 1024, 2048, 4096, 8192])
    ap.add_argument("--fractions", type=float, nargs="+", default=[0.0, 0.01, 0.05, 0.1, 0.25, 0.5])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rng = random.Random(args.seed)
    print("literal share of file size (mean over trials)")
    print("block  " + "".join(f"{f:>9.0%}" for f in args.fractions) + "   ms/MiB")
    for bs in args.block_sizes:
        cells = []
        spent = 0.0
        for fraction in args.fractions:
            shares = []
            for _ in range(args.trials):
                basis = rng.randbytes(args.size)
                source = edit_blocks(rng, basis, bs, fraction)
                sigs = deltasync.build_signatures(basis, bs)
                t = time.perf_counter()
                ops = deltasync.compute_delta(source, sigs)
                spent += time.perf_counter() - t
                assert deltasync.apply_delta(basis, ops, sigs) == source
                shares.append(deltasync.literal_bytes(ops) / len(source))
            cells.append(statistics.fmean(shares))
        mib = args.size * args.trials * len(args.fractions) / (1 << 20)
        print(f"{bs:>5}  " + "".join(f"{c:>9.3f}" for c in cells) + f"   {1000 * spent / mib:6.1f}")


if __name__ == "__main__":
    main()
