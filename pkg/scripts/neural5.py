#!/usr/bin/env python3
"""Nonlinear 5-D network comparison (APIS vs FS vs FFBSi)."""

import sys

from pismooth.cli import main

if __name__ == "__main__":
    sys.exit(main(["experiment", "neural5", *sys.argv[1:]]))
