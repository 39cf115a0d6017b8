"""
hybridtower - Launcher Script
"""
import sys
from pathlib import Path

# Add project root to path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from hybridtower.utils.logger import get_logger

logger = get_logger("launcher")


def main():
    """Main entry point"""
    try:
        from hybridtower.main import main as run_cli
        return run_cli(sys.argv[1:])
    except KeyboardInterrupt:
        logger.info("\nShutting down...")
        return 1
    except Exception as e:
        logger.exception(f"Fatal error: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
