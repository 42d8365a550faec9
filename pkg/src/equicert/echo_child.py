"""Reference external evaluator: echoes its input as a segmentation.

Treats channel 0 of each input tensor as a probability map (clipped to
[0, 1]) and reports the thresholded mask as a one-instance map. Useful for
protocol tests and as a template for wiring real models. --crash-after N
makes the process die after N frames, exercising failure handling.

Run as: python -m equicert.echo_child [--with-instances] [--crash-after N]
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .external import decode_request, encode_response, read_frame, write_frame


def respond(inputs, with_instances: bool):
    outputs = []
    for tensor in inputs:
        grid = tensor[0] if tensor.ndim == 3 else tensor
        probs = np.clip(grid, 0.0, 1.0)
        record = {"seg_probs": probs}
        if with_instances:
            record["instance_map"] = (probs > 0.5).astype(np.float64)
        outputs.append(record)
    return outputs


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--with-instances", action="store_true")
    parser.add_argument("--crash-after", type=int, default=0,
                        help="exit abruptly after this many frames (0 = never)")
    args = parser.parse_args(argv)

    stdin = sys.stdin.buffer
    stdout = sys.stdout.buffer
    frames = 0
    while True:
        try:
            payload = read_frame(stdin)
        except Exception:
            return 0  # parent closed the pipe
        frames += 1
        if args.crash_after and frames > args.crash_after:
            return 13
        inputs = decode_request(payload)
        write_frame(stdout, encode_response(respond(inputs, args.with_instances)))


if __name__ == "__main__":
    sys.exit(main())
