#!/usr/bin/env python3
"""Overfitting A/B at desk scale: shuffle regularizer on vs off, paired seeds.

Uses the packaged experiment defaults; pass --seeds / --out / --set to vary.
SLWS_THREADS=2 runs the paired arms on two cores.
"""

import sys

from vimshuffle.cli import main

if __name__ == "__main__":
    sys.exit(main(["ab-experiment", *sys.argv[1:]]))
