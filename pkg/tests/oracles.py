"""Independent reference implementations used only by the tests."""

from __future__ import annotations

import numpy as np
from rdkit import Chem


def morgan_environments(smiles: str, radius: int = 2) -> set:
    """Distinct circular atom environments, identified structurally rather than by hashing.

    Layer-0 identity is the connectivity invariant tuple; layer ``r`` identity
    is ``(r, own identity, sorted((bond type, neighbour identity)))``. An
    environment whose bond set duplicates one already seen is dropped and its
    atom stops growing, mirroring the circular-fingerprint rules.
    """
    mol = Chem.MolFromSmiles(smiles)
    n = mol.GetNumAtoms()
    ident = []
    for a in mol.GetAtoms():
        iso = a.GetIsotope()
        delta_mass = 0 if iso == 0 else iso - round(Chem.GetPeriodicTable().GetAtomicWeight(a.GetAtomicNum()))
        ident.append((a.GetAtomicNum(), a.GetTotalDegree(), a.GetTotalNumHs(), a.GetFormalCharge(),
                      delta_mass, int(a.IsInRing())))
    features = set(ident)
    nbhd = [frozenset() for _ in range(n)]
    dead = [False] * n
    seen: list[frozenset] = []
    for layer in range(radius):
        new_ident = list(ident)
        new_nbhd = list(nbhd)
        this_round = []
        for i in range(n):
            if dead[i]:
                continue
            atom = mol.GetAtomWithIdx(i)
            if atom.GetDegree() == 0:
                dead[i] = True
                continue
            bonds = set()
            nbrs = []
            for b in atom.GetBonds():
                j = b.GetOtherAtomIdx(i)
                bonds.add(b.GetIdx())
                bonds |= nbhd[j]
                nbrs.append((str(b.GetBondType()), ident[j]))
            new_ident[i] = (layer + 1, ident[i], tuple(sorted(nbrs)))
            new_nbhd[i] = frozenset(bonds)
            this_round.append((sorted(new_nbhd[i]), i))
        # bond-set duplicates resolved in a fixed order; identity ties do not matter for the count
        for _, i in sorted(this_round):
            if new_nbhd[i] in seen:
                dead[i] = True
            else:
                seen.append(new_nbhd[i])
                features.add(new_ident[i])
        ident, nbhd = new_ident, new_nbhd
    return features


def normal_equations(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.linalg.solve(X.T @ X, X.T @ y)


def brute_force_rmse(obs, pred) -> float:
    total = 0.0
    for o, p in zip(obs, pred):
        total += (o - p) ** 2
    return (total / len(obs)) ** 0.5
