"""Binary Morgan (ECFP-like) fingerprints for the RF and DNN baselines."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np
from rdkit import Chem
from rdkit.Chem import rdFingerprintGenerator

ALLOWED_NBITS = (128, 256, 512, 1024, 2048)
RADIUS = 2


class FingerprintConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Fingerprint:
    bits: np.ndarray
    nbits: int
    radius: int = RADIUS

    def __post_init__(self):
        if len(self.bits) != self.nbits:
            raise ValueError("bit vector length does not match nbits")


@dataclass
class FingerprintMatrix:
    rows: np.ndarray
    compound_ids: list[str]
    nbits: int
    radius: int = RADIUS

    @property
    def order_hash(self) -> str:
        return hashlib.sha256("\n".join(self.compound_ids).encode()).hexdigest()[:16]


def _check(radius: int, nbits: int) -> None:
    if nbits not in ALLOWED_NBITS:
        raise FingerprintConfigError(f"nbits must be one of {ALLOWED_NBITS}, got {nbits}")
    if radius != RADIUS:
        raise FingerprintConfigError(f"radius is fixed at {RADIUS}, got {radius}")


@lru_cache(maxsize=None)
def _generator(radius: int):
    # fpSize is irrelevant for the sparse (unfolded) path; folding is done here
    return rdFingerprintGenerator.GetMorganGenerator(radius=radius)


def _mol(structure):
    mol = Chem.MolFromSmiles(structure) if isinstance(structure, str) else structure
    if mol is None:
        raise ValueError(f"cannot parse structure {structure!r}")
    return mol


def morgan_ids(structure, radius: int = RADIUS) -> list[int]:
    """Unfolded 32-bit environment identifiers (sorted, unique)."""
    fp = _generator(radius).GetSparseCountFingerprint(_mol(structure))
    return sorted(fp.GetNonzeroElements())


def fold(ids: Sequence[int], nbits: int) -> np.ndarray:
    bits = np.zeros(nbits, dtype=np.uint8)
    bits[np.asarray(ids, dtype=np.int64) % nbits] = 1
    return bits


def morgan_fp(structure, radius: int = RADIUS, nbits: int = 2048) -> Fingerprint:
    """Binary Morgan fingerprint: environment ids modulo ``nbits``, counts collapsed to presence."""
    _check(radius, nbits)
    return Fingerprint(fold(morgan_ids(structure, radius), nbits), nbits, radius)


def fp_matrix(curated: Sequence, radius: int = RADIUS, nbits: int = 2048) -> FingerprintMatrix:
    _check(radius, nbits)
    if not curated:
        raise ValueError("empty data set")
    rows = np.zeros((len(curated), nbits), dtype=np.uint8)
    for i, c in enumerate(curated):
        try:
            rows[i] = morgan_fp(c.structure, radius, nbits).bits
        except ValueError as exc:
            raise ValueError(f"fingerprinting failed for {c.compound_id}: {exc}") from exc
    return FingerprintMatrix(rows, [c.compound_id for c in curated], nbits, radius)


def save_matrix(m: FingerprintMatrix, path: str | Path) -> None:
    """Write ``<path>.npz`` (packed bits) plus a ``<path>.json`` sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(path.with_suffix(".npz"), bits=np.packbits(m.rows, axis=1))
    sidecar = {"nbits": m.nbits, "radius": m.radius, "order_hash": m.order_hash, "compound_ids": m.compound_ids}
    path.with_suffix(".json").write_text(json.dumps(sidecar))


def load_matrix(path: str | Path) -> FingerprintMatrix:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    packed = np.load(path.with_suffix(".npz"))["bits"]
    rows = np.unpackbits(packed, axis=1)[:, : meta["nbits"]]
    m = FingerprintMatrix(rows, meta["compound_ids"], meta["nbits"], meta["radius"])
    if m.order_hash != meta["order_hash"]:
        raise ValueError(f"{path}: compound order hash mismatch")
    return m
