#!/usr/bin/env python3
"""
mcast - Application-layer multicast overlay
Main entry point for the mcast CLI.
"""

import sys
from pathlib import Path

# Add the project root to Python path
project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from almcast.cli.main import app

if __name__ == "__main__":
    app()
