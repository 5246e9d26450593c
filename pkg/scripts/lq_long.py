#!/usr/bin/env python3
"""Long-series scaling of the adaptive smoother (use --J 100/200/300/1000)."""

import sys

from pismooth.cli import main

if __name__ == "__main__":
    sys.exit(main(["experiment", "lq-long", *sys.argv[1:]]))
