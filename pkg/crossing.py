#!/usr/bin/env python3
import sys

if __name__ == "__main__":
    from crossing_tool.cli import main

    sys.exit(main())
