# Coverage model command-line entry point
# Run with: python -m src.coverage_model.main <subcommand> [options]
import sys

from src.coverage_model.cli.commands import main

if __name__ == "__main__":
    sys.exit(main())
