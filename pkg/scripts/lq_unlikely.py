#!/usr/bin/env python3
"""Full method comparison on the unlikely-terminal-observation problem."""

import sys

from pismooth.cli import main

if __name__ == "__main__":
    sys.exit(main(["experiment", "lq-unlikely", *sys.argv[1:]]))
