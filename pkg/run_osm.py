#!/usr/bin/env python3
"""
Run script for OpenSetMargin - Main entry point for launching the command line.
Installs signal handlers and hands the arguments to the osm command.
"""

import signal
import sys


def run_app():
    """Run the osm command line"""
    def signal_handler(sig, frame):
        print("Received signal to terminate. Shutting down...")
        sys.exit(130)

    signal.signal(signal.SIGINT, signal_handler)
    signal.signal(signal.SIGTERM, signal_handler)

    from openset_margin.main import main
    try:
        return main()
    except KeyboardInterrupt:
        print("Keyboard interrupt received. Shutting down...")
        return 130


if __name__ == "__main__":
    sys.exit(run_app())
