"""
System Information Gathering Module for CLOAK

This module gathers host, interpreter and contract-code details that are
attached to bench exports so timing figures can be read in context.
"""

import os
import sys
import inspect
import platform
import logging
from datetime import datetime
from pathlib import Path

import psutil

logger = logging.getLogger(__name__)

sys.path.insert(0, str(Path(__file__).parent.parent.parent))
from main import CLOAK_VERSION, CLOAK_BUILD_DATE


def get_system_info(output_dir=None, execution_mode="CLI", contract_registry=None):
    """Gather system and configuration information for bench reports"""
    logger.info("Gathering system information for report generation")

    output_dir = output_dir or os.getcwd()

    system_info = {
        "cloak_version": CLOAK_VERSION,
        "cloak_build_date": CLOAK_BUILD_DATE,
        "report_generated_on": datetime.now().isoformat(),
        "python_interpreter_version": sys.version,
        "operating_system": platform.system(),
        "os_release": platform.release(),
        "system_architecture": platform.machine(),
        "processor_type": platform.processor(),
        "cpu_count_logical": psutil.cpu_count(logical=True),
        "cpu_count_physical": psutil.cpu_count(logical=False),
        "system_ram_total": get_system_ram(),
        "output_disk_space_available": get_disk_space(output_dir),
        "execution_mode": execution_mode,
    }

    if execution_mode == "CLI":
        system_info["cli_arguments"] = " ".join(sys.argv)

    if contract_registry:
        system_info["contract_hashes"] = get_contract_hashes(contract_registry)
        logger.info(f"Hashed {len(system_info['contract_hashes'])} contract module(s)")

    logger.debug(f"System info collected: OS={system_info['operating_system']}, "
                 f"Architecture={system_info['system_architecture']}")
    return system_info


def get_contract_hashes(registry):
    """SHA256 of every loaded contract module, for integrity verification of bench runs"""
    from .file_operations import get_file_hash_safe

    contract_hashes = {}
    for name in registry.get_contract_names():
        module = inspect.getmodule(registry.get_contract(name))
        if module is None or not getattr(module, "__file__", None):
            logger.warning(f"Could not determine file path for contract: {name}")
            contract_hashes[name] = {"error": "Could not determine contract file path"}
            continue
        file_path = os.path.abspath(module.__file__)
        contract_hashes[name] = {
            "file_path": file_path,
            "sha256_hash": get_file_hash_safe(file_path),
        }
    return contract_hashes


def get_system_ram():
    """Total system RAM"""
    try:
        total_ram_gb = psutil.virtual_memory().total / (1024**3)
        return f"{total_ram_gb:.2f} GB"
    except Exception as e:
        logger.warning(f"RAM detection failed: {e}")
        return "Unable to determine"


def get_disk_space(path):
    """Available disk space for a given path"""
    try:
        usage = psutil.disk_usage(path)
        free_gb = usage.free / (1024**3)
        total_gb = usage.total / (1024**3)
        return f"{free_gb:.2f} GB free of {total_gb:.2f} GB total"
    except Exception as e:
        logger.error(f"Error getting disk space: {e}")
        return "Unable to determine disk space"
