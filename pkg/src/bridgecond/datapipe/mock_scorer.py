"""Reference external scorer speaking the line protocol; also used to exercise failure paths.

    python -m bridgecond.datapipe.mock_scorer [--mode ok|garbled|slow|crash] [--every N] [--delay S]

In the faulty modes every N-th request misbehaves; the others get mock scores.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

from .imageio import read_ppm
from .scorer import SCORE_KEYS, mock_scores


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--mode", choices=("ok", "garbled", "slow", "crash"), default="ok")
    ap.add_argument("--every", type=int, default=2, help="misbehave on every N-th request")
    ap.add_argument("--delay", type=float, default=5.0, help="sleep in slow mode (seconds)")
    args = ap.parse_args(argv)
    for n, line in enumerate(sys.stdin, 1):
        faulty = args.mode != "ok" and n % args.every == 0
        if faulty and args.mode == "crash":
            return 1
        if faulty and args.mode == "garbled":
            print("this is not json", flush=True)
            continue
        if faulty and args.mode == "slow":
            time.sleep(args.delay)
        req = json.loads(line)
        s = mock_scores(read_ppm(req["src_path"]), read_ppm(req["tgt_path"]), None)
        print(json.dumps({k: s[k] for k in SCORE_KEYS}), flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
