"""
CLOAK CLI Components
Contains the command-line interface and workspace handling
"""
