"""
CLOAK Utils Components
Contains configuration, file operations and system information
"""
