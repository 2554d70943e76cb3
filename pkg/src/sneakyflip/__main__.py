"""Module entry point so ``python -m sneakyflip`` behaves like the script."""

import sys

from .cli import main

if __name__ == "__main__":
    sys.exit(main())
