from hashlib import blake2b
import json

from cachetools import LRUCache


# Quantile lookups repeat for every replicate of a simulation cell
quantile_cache = LRUCache(maxsize=4096)

# Built-in datasets are parsed once per process
dataset_cache = LRUCache(maxsize=16)


def checksum(data: bytes) -> str:
    return blake2b(data, digest_size=16).hexdigest()


def canonical_key(obj: dict) -> str:
    canonical = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return checksum(canonical.encode())
