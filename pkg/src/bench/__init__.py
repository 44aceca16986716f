"""
CLOAK Bench Components
Contains scenario replay and the scaling experiments
"""
