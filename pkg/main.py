# main.py
import os
import sys
import signal
import logging
from config.settings import Config
from src.cli import run


def setup_logging(out_dir: str = Config.OUTPUT_DIR, command: str = 'run'):
    """Configure logging to stdout and <out>/logs/run_<command>.log."""
    log_dir = os.path.join(out_dir, 'logs')
    if not os.path.exists(log_dir):
        os.makedirs(log_dir)

    log_filename = os.path.join(log_dir, f"run_{command.replace('-', '_')}.log")

    logging.basicConfig(
        level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
        format='%(asctime)s [%(levelname)s] %(name)s: %(message)s',
        handlers=[
            logging.FileHandler(log_filename, mode='w'),
            logging.StreamHandler(sys.stdout)
        ],
        force=True
    )


def signal_handler(signum, frame):
    """Stop a long run cleanly on Ctrl+C / SIGTERM."""
    print("\n\nInterrupted, stopping run...")
    sys.exit(130)


def main(argv=None) -> int:
    """Main entry point."""
    signal.signal(signal.SIGINT, signal_handler)
    signal.signal(signal.SIGTERM, signal_handler)

    try:
        return run(argv, setup_logging=setup_logging)
    except Exception as e:
        logging.getLogger(__name__).error(f"Fatal error: {e}", exc_info=True)
        return 3


if __name__ == "__main__":
    sys.exit(main())
