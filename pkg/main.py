#!/usr/bin/env python3
"""
SMAR - whole-page reranker toolkit
Usage: python main.py <command> [options]   (python main.py --help for the list)
"""

import os
import sys

# Add project root to path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from smar.cli import main  # noqa: E402

if __name__ == "__main__":
    sys.exit(main())
