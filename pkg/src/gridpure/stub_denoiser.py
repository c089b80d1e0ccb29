"""Reference child process for the external denoiser protocol.

Reads tensor frames from stdin and answers each with one frame of the same
shape on stdout::

    python -m gridpure.stub_denoiser --oracle path/to/dataset
    python -m gridpure.stub_denoiser --zero
"""

from __future__ import annotations

import argparse
import sys
import time

import torch

from .diffusion import OracleDenoiser, build_schedule
from .imagecore import FrameError, read_tensor, write_tensor


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="gridpure.stub_denoiser")
    mode = p.add_mutually_exclusive_group(required=True)
    mode.add_argument("--zero", action="store_true", help="always predict zero noise")
    mode.add_argument("--oracle", metavar="DIR", help="oracle over the PNGs in DIR")
    p.add_argument("--schedule-steps", type=int, default=1000)
    p.add_argument("--delay", type=float, default=0.0, help="seconds to sleep before each reply")
    p.add_argument("--garble", action="store_true", help="reply with a malformed frame")
    args = p.parse_args(argv)

    sched = build_schedule(args.schedule_steps)
    oracle = OracleDenoiser.from_dir(args.oracle) if args.oracle else None
    stdin, stdout = sys.stdin.buffer, sys.stdout.buffer
    while True:
        if not stdin.peek(1):
            return 0
        try:
            x, t = read_tensor(stdin)
        except FrameError as exc:
            print(f"stub_denoiser: {exc}", file=sys.stderr)
            return 1
        if args.delay:
            time.sleep(args.delay)
        if args.garble:
            stdout.write(b"NOPE\n")
            stdout.flush()
            continue
        if oracle is None:
            eps = x * 0.0
        else:
            eps = oracle.eps(torch.as_tensor(x)[None], t, sched)[0].numpy()
        write_tensor(eps, t, stdout)
        stdout.flush()


if __name__ == "__main__":
    sys.exit(main())
