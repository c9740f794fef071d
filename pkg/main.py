#!/usr/bin/env python3
"""
h-PMD experiment runner
Main entry point for the command-line application
"""

import os
import sys

# Add the project root to the Python path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from src.cli.experiment_cli import main

if __name__ == "__main__":
    sys.exit(main())
