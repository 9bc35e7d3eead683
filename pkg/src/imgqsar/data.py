"""Bioactivity acquisition, curation, pIC50 aggregation and data splitting."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import tempfile
import time
from collections import Counter, OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence
from urllib.parse import urljoin

import numpy as np
import requests
from rdkit import Chem, RDLogger
from rdkit.Chem.MolStandardize import rdMolStandardize

from .catalog import CatalogEntry

log = logging.getLogger(__name__)

RELATIONS = ("=", ">", "<", ">=", "<=", "~")
CONCENTRATION_UNITS = {"pM", "nM", "uM", "µM", "mM", "M", "ug.mL-1", "ng/ml", "ug/ml", "mg/ml"}

# Elements allowed in the retained fragment; anything else rejects the record.
ORGANIC_ELEMENTS = frozenset({"H", "B", "C", "N", "O", "F", "Si", "P", "S", "Cl", "Se", "Br", "I"})

SPLIT_FRACTIONS = (0.70, 0.15, 0.15)
MIN_SPLIT_SIZE = 10

DEFAULT_ENDPOINT = "https://www.ebi.ac.uk/chembl/api/data"
ENDPOINT_VERSION = "chembl-rest-v1"
ENDPOINT_ENV = "IMGQSAR_ENDPOINT"
PAGE_SIZE_ENV = "IMGQSAR_PAGE_SIZE"
CACHE_DIR_ENV = "IMGQSAR_CACHE_DIR"


@dataclass(frozen=True)
class BioactivityRecord:
    compound_id: str
    smiles: str
    target_id: str
    value: float
    relation: str
    unit: str

    def __post_init__(self):
        if not self.compound_id or not self.target_id:
            raise ValueError("compound_id and target_id must be non-empty")
        if self.relation not in RELATIONS:
            raise ValueError(f"unknown relation {self.relation!r}")
        if self.unit in CONCENTRATION_UNITS and not self.value > 0:
            raise ValueError(f"{self.compound_id}: concentration must be positive, got {self.value}")


@dataclass(frozen=True)
class CuratedCompound:
    compound_id: str
    structure: str
    pic50: float
    target_id: str = ""


@dataclass
class DatasetSplit:
    seed: int
    train_ids: list[str]
    val_ids: list[str]
    test_ids: list[str]
    fractions: tuple[float, float, float] = SPLIT_FRACTIONS

    def sizes(self) -> tuple[int, int, int]:
        return len(self.train_ids), len(self.val_ids), len(self.test_ids)

    def to_json(self) -> str:
        return json.dumps(
            {"seed": self.seed, "train_ids": self.train_ids, "val_ids": self.val_ids, "test_ids": self.test_ids},
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "DatasetSplit":
        d = json.loads(text)
        return cls(int(d["seed"]), list(d["train_ids"]), list(d["val_ids"]), list(d["test_ids"]))


@dataclass
class CurationReport:
    n_raw: int = 0
    n_filtered: int = 0
    n_pairs: int = 0
    n_curated: int = 0
    rejected_values: int = 0
    rejected_structures: Counter = field(default_factory=Counter)


class FetchError(RuntimeError):
    def __init__(self, source_id: str, message: str, retryable: bool = False):
        super().__init__(f"{source_id}: {message}")
        self.source_id = source_id
        self.retryable = retryable


class StructureRejected(ValueError):
    """Raised by :func:`standardize_structure` for structures excluded by curation."""

    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


# ---------------------------------------------------------------------------
# acquisition


def _cache_path(cache_dir: Path, source_id: str) -> Path:
    return Path(cache_dir) / f"{source_id}__{ENDPOINT_VERSION}.jsonl"


def _atomic_write_lines(path: Path, lines: Iterable[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def parse_activity_row(row: dict, target_id: str) -> BioactivityRecord:
    value = row.get("standard_value")
    return BioactivityRecord(
        compound_id=str(row.get("molecule_chembl_id") or ""),
        smiles=str(row.get("canonical_smiles") or ""),
        target_id=target_id,
        value=float(value) if value is not None else math.nan,
        relation=str(row.get("standard_relation") or ""),
        unit=str(row.get("standard_units") or ""),
    )


def _rows_to_records(rows: list[dict], source_id: str) -> list[BioactivityRecord]:
    records, bad = [], 0
    for row in rows:
        try:
            rec = parse_activity_row(row, source_id)
            if not rec.smiles:
                raise ValueError("missing structure")
        except (ValueError, TypeError):
            bad += 1
            continue
        records.append(rec)
    if bad:
        log.warning("%s: skipped %d malformed activity rows", source_id, bad)
    return records


class ChemblClient:
    """Minimal paging client for the ChEMBL REST activity/assay resources."""

    def __init__(self, base_url: str | None = None, page_size: int | None = None,
                 session: requests.Session | None = None, retries: int = 3, timeout: float = 60.0):
        self.base_url = (base_url or os.environ.get(ENDPOINT_ENV, DEFAULT_ENDPOINT)).rstrip("/")
        self.page_size = int(page_size or os.environ.get(PAGE_SIZE_ENV, 1000))
        self.session = session or requests.Session()
        self.retries = retries
        self.timeout = timeout

    def _get(self, url: str, params: dict | None, source_id: str) -> dict:
        delay = 1.0
        for attempt in range(self.retries):
            try:
                resp = self.session.get(url, params=params, timeout=self.timeout)
            except requests.RequestException as exc:
                if attempt == self.retries - 1:
                    raise FetchError(source_id, f"source unreachable ({exc})", retryable=True) from exc
                time.sleep(delay)
                delay *= 2
                continue
            if resp.status_code == 404:
                raise FetchError(source_id, "unknown identifier (HTTP 404)")
            if resp.status_code >= 500:
                if attempt == self.retries - 1:
                    raise FetchError(source_id, f"server error {resp.status_code}", retryable=True)
                time.sleep(delay)
                delay *= 2
                continue
            if resp.status_code != 200:
                raise FetchError(source_id, f"HTTP {resp.status_code}")
            return resp.json()
        raise FetchError(source_id, "exhausted retries", retryable=True)

    def _paged(self, resource: str, key: str, params: dict, source_id: str) -> list[dict]:
        url = f"{self.base_url}/{resource}.json"
        params = dict(params, limit=self.page_size, offset=0)
        out: list[dict] = []
        while url:
            payload = self._get(url, params, source_id)
            out.extend(payload.get(key, []))
            nxt = (payload.get("page_meta") or {}).get("next")
            url = urljoin(self.base_url + "/", nxt) if nxt else None
            params = None  # next link already carries the query
        return out

    def activities(self, entry: CatalogEntry) -> list[dict]:
        if entry.kind == "cell_line":
            assays = self._paged("assay", "assays", {"cell_chembl_id": entry.source_id}, entry.source_id)
            assay_ids = sorted({a["assay_chembl_id"] for a in assays if a.get("assay_chembl_id")})
            rows: list[dict] = []
            for i in range(0, len(assay_ids), 50):
                chunk = ",".join(assay_ids[i:i + 50])
                rows.extend(self._paged("activity", "activities",
                                        {"assay_chembl_id__in": chunk, "standard_type": "IC50"}, entry.source_id))
        else:
            rows = self._paged("activity", "activities",
                               {"target_chembl_id": entry.source_id, "standard_type": "IC50"}, entry.source_id)
        if not rows:
            raise FetchError(entry.source_id, "no activity rows returned (unknown identifier?)")
        return rows


def fetch_bioactivities(entry: CatalogEntry, cache_dir: str | Path | None = None,
                        client: ChemblClient | None = None, offline: bool = False) -> list[BioactivityRecord]:
    """Return all IC50 activity rows for a catalog entry, using an on-disk JSON-lines cache.

    The cache holds the raw REST rows, one JSON object per line, in
    ``<cache_dir>/<source_id>__<endpoint version>.jsonl``. A warm cache never
    touches the network.
    """
    cache_dir = Path(cache_dir or os.environ.get(CACHE_DIR_ENV, ".imgqsar_cache"))
    path = _cache_path(cache_dir, entry.source_id)
    if path.exists():
        with open(path, encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
    else:
        if offline:
            raise FetchError(entry.source_id, f"offline mode and no cache at {path}")
        rows = (client or ChemblClient()).activities(entry)
        _atomic_write_lines(path, (json.dumps(r, sort_keys=True) for r in rows))
    return _rows_to_records(rows, entry.source_id)


def read_records_jsonl(path: str | Path, target_id: str) -> list[BioactivityRecord]:
    with open(path, encoding="utf-8") as fh:
        rows = [json.loads(line) for line in fh if line.strip()]
    return _rows_to_records(rows, target_id)


# ---------------------------------------------------------------------------
# curation


def filter_records(records: Iterable[BioactivityRecord]) -> list[BioactivityRecord]:
    return [r for r in records if r.unit == "nM" and r.relation == "="]


def _heavy_atoms(mol) -> int:
    return mol.GetNumHeavyAtoms()


def _total_atoms(mol) -> int:
    return mol.GetNumAtoms() + sum(a.GetTotalNumHs() for a in mol.GetAtoms())


def largest_fragment(mol):
    """Fragment with most heavy atoms; ties by total atoms, then smallest canonical SMILES."""
    frags = Chem.GetMolFrags(mol, asMols=True, sanitizeFrags=False)
    return min(frags, key=lambda f: (-_heavy_atoms(f), -_total_atoms(f), Chem.MolToSmiles(f)))


_normalizer = None
_uncharger = None


def standardize_structure(smiles: str) -> str:
    """Canonical SMILES of the standardized parent structure.

    Counterions and solvents are stripped by keeping the largest fragment;
    the retained fragment must be built from :data:`ORGANIC_ELEMENTS` only.
    Raises :class:`StructureRejected` with a reason code otherwise.
    """
    global _normalizer, _uncharger
    if _normalizer is None:
        _normalizer = rdMolStandardize.Normalizer()
        _uncharger = rdMolStandardize.Uncharger()
    with _quiet_rdkit():
        mol = Chem.MolFromSmiles(smiles) if smiles else None
    if mol is None:
        raise StructureRejected("parse_error", smiles)
    if mol.GetNumAtoms() == 0:
        raise StructureRejected("empty", smiles)
    frag = largest_fragment(mol)
    bad = sorted({a.GetSymbol() for a in frag.GetAtoms()} - ORGANIC_ELEMENTS)
    if bad:
        raise StructureRejected("inorganic", ",".join(bad))
    with _quiet_rdkit():
        frag = _normalizer.normalize(frag)
        frag = _uncharger.uncharge(frag)
        out = Chem.MolToSmiles(frag)
    if Chem.MolFromSmiles(out) is None:
        raise StructureRejected("sanitize_error", smiles)
    return out


class _quiet_rdkit:
    def __enter__(self):
        RDLogger.DisableLog("rdApp.*")

    def __exit__(self, *exc):
        RDLogger.EnableLog("rdApp.*")


def ic50_nm_to_pic50(value_nm: float) -> float:
    return -math.log10(value_nm * 1e-9)


def aggregate_to_pic50(records: Iterable[BioactivityRecord],
                       report: CurationReport | None = None) -> list[CuratedCompound]:
    """Average pIC50 per (compound, target) pair, in order of first appearance."""
    groups: "OrderedDict[tuple[str, str], list]" = OrderedDict()
    for r in records:
        if not (r.value > 0) or not math.isfinite(r.value):
            log.warning("rejecting %s/%s: non-positive IC50 %r", r.compound_id, r.target_id, r.value)
            if report is not None:
                report.rejected_values += 1
            continue
        key = (r.compound_id, r.target_id)
        if key not in groups:
            groups[key] = [r.smiles, []]
        groups[key][1].append(ic50_nm_to_pic50(r.value))
    return [CuratedCompound(cid, smi, float(np.mean(vals)), tid) for (cid, tid), (smi, vals) in groups.items()]


def curate(records: Sequence[BioactivityRecord]) -> tuple[list[CuratedCompound], CurationReport]:
    """Filter, aggregate and standardize raw records into a modelable data set."""
    report = CurationReport(n_raw=len(records))
    kept = filter_records(records)
    report.n_filtered = len(kept)
    pairs = aggregate_to_pic50(kept, report)
    report.n_pairs = len(pairs)
    out = []
    for c in pairs:
        try:
            structure = standardize_structure(c.structure)
        except StructureRejected as exc:
            report.rejected_structures[exc.reason] += 1
            continue
        out.append(CuratedCompound(c.compound_id, structure, c.pic50, c.target_id))
    report.n_curated = len(out)
    if report.rejected_structures:
        log.info("structure rejections: %s", dict(report.rejected_structures))
    return out, report


# ---------------------------------------------------------------------------
# splitting


def split_sizes(n: int) -> tuple[int, int, int]:
    n_train = math.floor(SPLIT_FRACTIONS[0] * n)
    n_val = math.floor(SPLIT_FRACTIONS[1] * n)
    return n_train, n_val, n - n_train - n_val


def split_dataset(curated: Sequence[CuratedCompound] | Sequence[str], seed: int) -> DatasetSplit:
    """Random 70/15/15 split.

    The permutation is drawn from numpy's PCG64 generator seeded with ``seed``
    (``np.random.Generator(np.random.PCG64(seed)).permutation(N)``) and cut
    contiguously into train, validation and test.
    """
    ids = [c if isinstance(c, str) else c.compound_id for c in curated]
    n = len(ids)
    if n < MIN_SPLIT_SIZE:
        raise ValueError(f"need at least {MIN_SPLIT_SIZE} compounds to split, got {n}")
    if len(set(ids)) != n:
        raise ValueError("compound ids must be unique")
    perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    n_train, n_val, _ = split_sizes(n)
    order = [ids[i] for i in perm]
    return DatasetSplit(seed, order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])


# ---------------------------------------------------------------------------
# file formats

def write_curated_csv(curated: Iterable[CuratedCompound], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["compound_id", "smiles", "pic50"])
        for c in curated:
            w.writerow([c.compound_id, c.structure, repr(float(c.pic50))])


def read_curated_csv(path: str | Path, target_id: str = "") -> list[CuratedCompound]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [CuratedCompound(row["compound_id"], row["smiles"], float(row["pic50"]), target_id)
                for row in csv.DictReader(fh)]


FIXTURE_DIR = Path(__file__).parent / "fixtures"

DESK_FIXTURES = {
    # ChEMBL assay CHEMBL2321810 pIC50 series shipped with RDKit Contrib/FreeWilson
    "CHEMBL2321810": FIXTURE_DIR / "chembl2321810.csv",
    # c-Met ligand affinities shipped with RDKit Contrib/FreeWilson, as -log10 Kd
    "cMet": FIXTURE_DIR / "cmet.csv",
}


def load_fixture(name: str, max_compounds: int | None = None, seed: int = 0) -> list[CuratedCompound]:
    """Load a vendored curated data set, optionally subsampled reproducibly."""
    data = read_curated_csv(DESK_FIXTURES[name], target_id=name)
    if max_compounds is not None and len(data) > max_compounds:
        idx = np.sort(np.random.Generator(np.random.PCG64(seed)).choice(len(data), max_compounds, replace=False))
        data = [data[i] for i in idx]
    return data
