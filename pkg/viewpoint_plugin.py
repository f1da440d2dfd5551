#!/usr/bin/env python3
import sys

from viewpoint_planner import cli

if __name__ == "__main__":
    sys.exit(cli.run())
