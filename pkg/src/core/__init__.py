"""
CLOAK Core Components
Contains the choreography model, policies, encryption, ledger, content store and engine
"""
