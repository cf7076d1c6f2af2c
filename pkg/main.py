from __future__ import annotations

import os
import logging
import sys

from dotenv import load_dotenv

load_dotenv()

logging.basicConfig(level=os.environ.get("LOG_LEVEL", "INFO"))
logger = logging.getLogger("chaos_lab")

from app.cli import main  # noqa: E402


if __name__ == "__main__":
    sys.exit(main())
