#!/usr/bin/env python3
"""
switchdit terminal entry point - train, sample and inspect Switch-DiT models.
"""

import sys
from pathlib import Path

# Add the current directory to Python path for imports
current_dir = Path(__file__).parent
sys.path.insert(0, str(current_dir))


def main():
    """Main entry point for the switchdit command."""
    env_file = current_dir / ".env"
    if env_file.exists():
        from dotenv import load_dotenv

        load_dotenv(env_file)

    from switchdit.cli import run

    try:
        sys.exit(run())
    except KeyboardInterrupt:
        print("\nswitchdit interrupted.")
        sys.exit(130)


if __name__ == "__main__":
    main()
