'''
egclmil / __main__.py

Enables direct module execution via `python -m egclmil`

The console script `egclmil` declared in pyproject.toml points at the same
cli.main() function; this file makes the subcommands available during
development without installing the package.
'''
import sys

from .cli import main


if __name__ == '__main__':
    sys.exit(main())
