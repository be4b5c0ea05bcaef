"""
Physics-informed Gaussian PDE solver: command-line entry point.

    python main.py run --preset helmholtz
    python main.py serve --port 8000
"""
import sys

from pigs.cli import main

if __name__ == "__main__":
    sys.exit(main())
