"""Master-seed derivation.

Every stochastic component gets its own seed derived from the run's master
seed and a component label, so adding a component never shifts the streams
of existing ones. The derivation (sha256 over ``"<master>:<label>"``, first
8 bytes, little-endian, masked to 63 bits) is part of the reproducibility
contract and recorded in run manifests.
"""

import hashlib


def component_seed(master: int, label: str) -> int:
    digest = hashlib.sha256(f"{master}:{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF
