#!/usr/bin/env python3
"""
Utility functions for the RKESim project.
"""
import os
import json
import logging
from typing import Any, Dict, Optional

from dotenv import load_dotenv

logger = logging.getLogger('rkesim')

# Project paths
PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CONFIG_DIR = os.path.join(PROJECT_ROOT, "config")
SCENARIO_DIR = os.path.join(CONFIG_DIR, "scenarios")
OUTPUT_DIR = os.path.join(PROJECT_ROOT, "output")

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'

# Exit codes shared by main.py and the tools
EXIT_OK = 0
EXIT_INVARIANT_VIOLATION = 1
EXIT_CONFIG_ERROR = 2


def load_environment() -> None:
    """
    Load RKESIM_* settings from a .env file in the project root, if present.

    Variables already set in the environment win over the file.
    """
    env_path = os.path.join(PROJECT_ROOT, ".env")
    if os.path.exists(env_path):
        load_dotenv(env_path, override=False)
        logger.debug(f"Environment loaded from {env_path}")


def configure_logging(level: Optional[str] = None, log_file: Optional[str] = None) -> None:
    """
    Configure the root 'rkesim' logger.

    Args:
        level: Log level name (if None, uses RKESIM_LOG_LEVEL or INFO)
        log_file: Optional log file (if None, uses RKESIM_LOG_FILE when set)
    """
    level_name = (level or os.getenv("RKESIM_LOG_LEVEL") or "INFO").upper()
    log_file = log_file or os.getenv("RKESIM_LOG_FILE")

    handlers = [logging.StreamHandler()]
    if log_file:
        ensure_directory(os.path.dirname(os.path.abspath(log_file)))
        handlers.append(logging.FileHandler(log_file))

    root = logging.getLogger('rkesim')
    root.handlers.clear()
    formatter = logging.Formatter(LOG_FORMAT)
    for handler in handlers:
        handler.setFormatter(formatter)
        root.addHandler(handler)
    root.setLevel(getattr(logging, level_name, logging.INFO))
    root.propagate = False


def get_output_dir(override: Optional[str] = None) -> str:
    """
    Resolve the directory where traces and reports are written.

    Args:
        override: Explicit directory from the command line

    Returns:
        str: Absolute output directory (created if missing)
    """
    path = override or os.getenv("RKESIM_OUTPUT_DIR") or OUTPUT_DIR
    path = os.path.abspath(path)
    ensure_directory(path)
    return path


def get_config_dir() -> str:
    """
    Resolve the configuration directory (RKESIM_CONFIG_DIR or config/).

    Returns:
        str: Configuration directory
    """
    return os.getenv("RKESIM_CONFIG_DIR") or CONFIG_DIR


def ensure_directory(path: str) -> bool:
    """
    Ensure a directory exists.

    Args:
        path: Directory path

    Returns:
        bool: True if successful, False otherwise
    """
    try:
        os.makedirs(path, exist_ok=True)
        return True
    except OSError as e:
        logger.error(f"Error creating directory {path}: {e}")
        return False


def write_json(data: Dict[str, Any], path: str) -> str:
    """
    Write a report as canonical JSON (sorted keys, fixed indentation).

    Args:
        data: JSON-serialisable mapping
        path: Destination file

    Returns:
        str: The path written
    """
    ensure_directory(os.path.dirname(os.path.abspath(path)))
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(data, f, ensure_ascii=False, indent=2, sort_keys=True)
        f.write("\n")
    logger.info(f"Report written to: {path}")
    return path


def write_lines(lines, path: str) -> str:
    """
    Write text lines with '\\n' endings regardless of platform.

    Args:
        lines: Iterable of strings without line terminators
        path: Destination file

    Returns:
        str: The path written
    """
    ensure_directory(os.path.dirname(os.path.abspath(path)))
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        for line in lines:
            f.write(line)
            f.write("\n")
    logger.info(f"Trace written to: {path}")
    return path
