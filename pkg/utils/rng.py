"""
Named counter-based random streams
Each stream is a numpy Generator over a Philox bit generator whose key is
derived from (seed, stream name, indices). Streams with different names or
indices are independent; the same triple always replays the same draws.
"""
import hashlib

import numpy as np

# Streams used across the code base
DATA = 'data'
INIT = 'init'
NOISE = 'noise'
PROJECTIONS = 'projections'


def stream(seed, name, *index):
    """
    Open a reproducible random stream

    Args:
        seed (int): run seed
        name (str): stream name (data, init, noise, projections, ...)
        *index (int): extra keys such as trajectory or member indices

    Returns:
        numpy.random.Generator: generator backed by Philox
    """
    material = ':'.join([str(int(seed)), str(name)] + [str(int(i)) for i in index])
    digest = hashlib.blake2b(material.encode('utf-8'), digest_size=16).digest()
    key = np.frombuffer(digest, dtype='<u8').copy()
    return np.random.Generator(np.random.Philox(key=key))


def child_seed(seed, name, *index):
    """Derive an integer seed for APIs that take a plain int"""
    material = ':'.join([str(int(seed)), str(name)] + [str(int(i)) for i in index])
    digest = hashlib.blake2b(material.encode('utf-8'), digest_size=8).digest()
    return int.from_bytes(digest, 'little') & 0x7FFFFFFFFFFFFFFF
