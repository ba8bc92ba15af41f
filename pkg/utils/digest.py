"""
Canonical 64-bit digests for configs, architectures and artifacts
"""
import hashlib
import json


def digest_text(text):
    """Return the 64-bit BLAKE2b digest of a string as an unsigned int"""
    h = hashlib.blake2b(text.encode('utf-8'), digest_size=8)
    return int.from_bytes(h.digest(), 'little')


def canonical_json(payload):
    """Render a JSON-compatible payload with sorted keys and no whitespace"""
    return json.dumps(payload, sort_keys=True, separators=(',', ':'), default=_coerce)


def digest_payload(payload):
    """Digest of the canonical JSON rendering of a payload"""
    return digest_text(canonical_json(payload))


def format_digest(value):
    """Hex rendering used in file names, CSV metadata and log lines"""
    return f'{value:016x}'


def _coerce(value):
    # numpy scalars and tuples sneak into configs
    if hasattr(value, 'item'):
        return value.item()
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    raise TypeError(f'Cannot canonicalize {type(value).__name__}')


def digest_bytes(data):
    """64-bit BLAKE2b digest of raw bytes"""
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), 'little')
