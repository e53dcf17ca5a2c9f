"""Compiled kernels versus the numpy fallback; see ``facadeseg.bench``."""
import sys

from facadeseg.bench import main

if __name__ == "__main__":
    sys.exit(main(sys.argv[1:]))
