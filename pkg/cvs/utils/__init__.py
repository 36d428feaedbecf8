"""
Utility functions initialization
"""

from .helpers import (
    OutputLock,
    atomic_replace_dir,
    atomic_write_json,
    atomic_write_text,
    config_hash,
    derive_seed,
    read_tsv,
    seed_everything,
    setup_logging,
    write_tsv,
)

__all__ = [
    'OutputLock',
    'atomic_replace_dir',
    'atomic_write_json',
    'atomic_write_text',
    'config_hash',
    'derive_seed',
    'read_tsv',
    'seed_everything',
    'setup_logging',
    'write_tsv',
]
