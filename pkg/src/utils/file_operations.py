"""
File Operations Module for CLOAK

This module contains functions for secure file handling, validation,
atomic writes and export of bench reports in CSV, JSON and XLSX form.
"""

import os
import sys
import csv
import hashlib
import tempfile
import stat
import platform
import logging
from pathlib import Path
from datetime import datetime
from typing import Iterable, List, Sequence

import orjson
from openpyxl import Workbook

logger = logging.getLogger(__name__)

# Import version from main.py
sys.path.insert(0, str(Path(__file__).parent.parent.parent))
from main import CLOAK_VERSION, CLOAK_BUILD_DATE

# Maximum input file size (in MB) the program will load
sizeinmb = 256


def secure_temp_file(suffix="", prefix="cloak_", dir=None):
    """Create a secure temporary file with restricted permissions"""
    logger.debug(f"Creating secure temporary file with prefix={prefix}, suffix={suffix}")

    fd, path = tempfile.mkstemp(suffix=suffix, prefix=prefix, dir=dir)

    # Owner read/write only
    if platform.system() != "Windows":
        os.chmod(path, stat.S_IRUSR | stat.S_IWUSR)

    logger.debug(f"Secure temporary file created: {path}")
    return fd, path


def atomic_write_bytes(target, data: bytes):
    """Write to a temp file in the target directory, fsync, then rename over the target"""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_path = secure_temp_file(suffix=".tmp", dir=str(target.parent))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, target)
    except BaseException:
        if os.path.exists(tmp_path):
            os.unlink(tmp_path)
        raise
    logger.debug(f"Atomically wrote {len(data)} bytes to {target}")
    return target


def sanitize_filename(filename):
    """Sanitize filename to prevent path traversal attacks"""
    dangerous_chars = '<>:"/\\|?*'
    for char in dangerous_chars:
        filename = filename.replace(char, '_')

    filename = os.path.basename(filename)

    if len(filename) > 200:
        name, ext = os.path.splitext(filename)
        filename = name[:200-len(ext)] + ext
        logger.debug("Filename truncated to 200 characters")

    return filename


def validate_file_path(file_path, allowed_extensions=None):
    """Validate an input file path; returns (is_valid, absolute path or error message)"""
    logger.info(f"Validating file path: {file_path}")

    try:
        abs_path = os.path.abspath(file_path)

        if not os.path.exists(abs_path):
            logger.warning(f"File does not exist: {abs_path}")
            return False, "File does not exist"

        if not os.path.isfile(abs_path):
            logger.warning(f"Path is not a file: {abs_path}")
            return False, "Path is not a file"

        if allowed_extensions:
            file_ext = os.path.splitext(abs_path)[1].lower()
            if file_ext not in [ext.lower() for ext in allowed_extensions]:
                logger.warning(f"File extension {file_ext} not in allowed list")
                return False, f"File extension not allowed. Allowed: {allowed_extensions}"

        file_size = os.path.getsize(abs_path)
        max_size = sizeinmb * 1024 * 1024
        if file_size > max_size:
            logger.warning(f"File too large: {file_size} bytes")
            return False, f"File too large. Maximum size: {sizeinmb}MB"

        return True, abs_path

    except Exception as e:
        logger.error(f"Path validation error: {e}", exc_info=True)
        return False, f"Path validation error: {str(e)}"


def validate_folder_path(folder_path, create=False):
    """Validate an output folder; returns (is_valid, absolute path or error message)"""
    logger.info(f"Validating folder path: {folder_path}")

    try:
        abs_path = os.path.abspath(folder_path)

        if not os.path.exists(abs_path):
            if not create:
                logger.warning(f"Folder does not exist: {abs_path}")
                return False, "Folder does not exist"
            os.makedirs(abs_path, exist_ok=True)
            logger.info(f"Created folder: {abs_path}")

        if not os.path.isdir(abs_path):
            logger.warning(f"Path is not a folder: {abs_path}")
            return False, "Path is not a folder"

        if not os.access(abs_path, os.W_OK):
            logger.warning(f"Folder is not writable: {abs_path}")
            return False, "Folder is not writable"

        return True, abs_path

    except Exception as e:
        logger.error(f"Folder validation error: {e}", exc_info=True)
        return False, f"Folder validation error: {str(e)}"


def get_file_hash(file_path) -> str:
    """Calculate SHA256 hash of a file"""
    hash_sha256 = hashlib.sha256()
    chunk_size = 65536

    with open(file_path, "rb") as f:
        while chunk := f.read(chunk_size):
            hash_sha256.update(chunk)

    file_hash = hash_sha256.hexdigest()
    logger.debug(f"Hash of {file_path}: {file_hash[:16]}...")
    return file_hash


def get_file_hash_safe(file_path):
    """Safely get file hash with error handling"""
    try:
        return get_file_hash(file_path)
    except Exception as e:
        logger.error(f"Error getting file hash for {file_path}: {e}")
        return None


def write_csv_rows(output_path, headers: Sequence[str], rows: Iterable[Sequence]):
    """Write a CSV file with a header row; identical input yields identical bytes"""
    logger.info(f"Writing CSV to: {output_path}")
    with open(output_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(headers)
        count = 0
        for row in rows:
            writer.writerow(row)
            count += 1
    logger.info(f"CSV written successfully: {output_path} ({count} rows)")
    return output_path


def write_json_report(output_path, report: dict, system_info: dict = None):
    """Write a JSON bench report with run metadata"""
    logger.info(f"Writing JSON report to: {output_path}")
    document = {
        "metadata": {
            "generator": f"CLOAK v{CLOAK_VERSION} ({CLOAK_BUILD_DATE})",
            "generated_on": datetime.now().isoformat(),
        },
        "system_information": system_info or {},
        **report,
    }
    with open(output_path, "wb") as f:
        f.write(orjson.dumps(document, option=orjson.OPT_INDENT_2 | orjson.OPT_NON_STR_KEYS))
    logger.info(f"JSON report written successfully: {output_path}")
    return output_path


def write_excel_report(output_path, sheets: dict, system_info: dict = None):
    """Write an XLSX workbook: one worksheet per (title -> (headers, rows)) plus run details"""
    logger.info(f"Writing Excel report to: {output_path}")

    wb = Workbook()
    wb.remove(wb.active)

    for title, (headers, rows) in sheets.items():
        ws = wb.create_sheet(title[:31])
        ws.append(list(headers))
        for row in rows:
            ws.append(list(row))

    ws_details = wb.create_sheet("Run Details")
    ws_details.append(["CLOAK Bench Report"])
    ws_details.append([])
    ws_details.append(["Field", "Value"])
    ws_details.append(["Version", CLOAK_VERSION])
    ws_details.append(["Build Date", CLOAK_BUILD_DATE])
    for key, value in (system_info or {}).items():
        ws_details.append([key.replace("_", " ").title(), str(value)])
    ws_details.column_dimensions['A'].width = 30
    ws_details.column_dimensions['B'].width = 60

    wb.save(output_path)
    logger.info(f"Excel report written successfully: {output_path}")
    return output_path


def log_report_hash(output_path, logger_instance=None):
    """Calculate and log the SHA256 hash of a generated report"""
    if logger_instance is None:
        logger_instance = logger

    hash_value = get_file_hash_safe(output_path)
    if hash_value:
        logger_instance.info(f"Report generated: {output_path}")
        logger_instance.info(f"Report SHA256 hash: {hash_value}")
    else:
        logger_instance.error(f"Failed to calculate hash for report: {output_path}")
    return hash_value
