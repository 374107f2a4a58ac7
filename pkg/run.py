# run.py
"""
Launch script for the scale-then-compress toolkit.
Runs the command-line interface from a source checkout.
"""

import os
import sys


def main():
    """Run the CLI with src/ on the import path"""
    script_dir = os.path.dirname(os.path.abspath(__file__))
    sys.path.insert(0, os.path.join(script_dir, "src"))

    from scale_then_compress.cli import main as cli_main

    try:
        return cli_main()
    except KeyboardInterrupt:
        print("Stopped by user", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
