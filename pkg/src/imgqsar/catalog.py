"""Catalog of the 33 ChEMBL 23 IC50 data sets (8 cell lines, 25 protein targets)."""

from __future__ import annotations

from dataclasses import dataclass


@dataclass(frozen=True)
class CatalogEntry:
    name: str
    source_id: str
    expected_count: int
    kind: str  # "cell_line" or "target"
    description: str = ""


@dataclass(frozen=True)
class DatasetCatalog:
    entries: tuple[CatalogEntry, ...]

    def __post_init__(self):
        names = [e.name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("catalog names must be unique")
        for e in self.entries:
            if e.expected_count <= 0:
                raise ValueError(f"{e.name}: expected_count must be positive")

    def __getitem__(self, name: str) -> CatalogEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(f"unknown data set {name!r}")

    def __contains__(self, name: str) -> bool:
        return any(e.name == name for e in self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def names(self, kind: str | None = None) -> list[str]:
        return [e.name for e in self.entries if kind is None or e.kind == kind]


_CELL_LINES = [
    ("A2780", "CHEMBL3308421", 2255, "Ovarian carcinoma cells"),
    ("CCRF-CEM", "CHEMBL3307641", 3047, "T-cell leukemia"),
    ("DU-145", "CHEMBL3308034", 2512, "Prostate carcinoma"),
    ("HCT-15", "CHEMBL3307945", 994, "Colon adenocarcinoma cells"),
    ("KB", "CHEMBL3307959", 2731, "Squamous cell carcinoma"),
    ("LoVo", "CHEMBL3307691", 1120, "Colon adenocarcinoma cells"),
    ("PC-3", "CHEMBL3307570", 4294, "Prostate carcinoma cells"),
    ("SK-OV-3", "CHEMBL3307746", 1589, "Ovarian carcinoma cells"),
]

_TARGETS = [
    ("A2a", "CHEMBL1867", 203, "Alpha-2a adrenergic receptor"),
    ("ABL1", "CHEMBL1862", 773, "Tyrosine-protein kinase ABL"),
    ("Acetylcholinesterase", "CHEMBL220", 3159, "Acetylcholinesterase"),
    ("Androgen", "CHEMBL1871", 1290, "Androgen Receptor"),
    ("Aurora-A", "CHEMBL4722", 2125, "Serine/threonine-protein kinase Aurora-A"),
    ("B-raf", "CHEMBL5145", 1730, "Serine/threonine-protein kinase B-raf"),
    ("Cannabinoid", "CHEMBL218", 1116, "Cannabinoid CB1 receptor"),
    ("Carbonic", "CHEMBL205", 603, "Carbonic anhydrase II"),
    ("Caspase", "CHEMBL2334", 1606, "Caspase-3"),
    ("Coagulation", "CHEMBL204", 1700, "Thrombin"),
    ("COX-1", "CHEMBL221", 1343, "Cyclooxygenase-1"),
    ("COX-2", "CHEMBL230", 2855, "Cyclooxygenase-2"),
    ("Dihydrofolate", "CHEMBL202", 584, "Dihydrofolate reductase"),
    ("Dopamine", "CHEMBL217", 479, "Dopamine D2 receptor"),
    ("Ephrin", "CHEMBL222", 1740, "Norepinephrine transporter"),
    ("erbB1", "CHEMBL203", 4868, "Epidermal growth factor receptor erbB1"),
    ("Estrogen", "CHEMBL206", 1705, "Estrogen receptor alpha"),
    ("Glucocorticoid", "CHEMBL2034", 1447, "Glucocorticoid receptor"),
    ("Glycogen", "CHEMBL262", 1757, "Glycogen synthase kinase-3 beta"),
    ("HERG", "CHEMBL240", 5207, "HERG"),
    ("JAK2", "CHEMBL2971", 2655, "Tyrosine-protein kinase JAK2"),
    ("LCK", "CHEMBL258", 1352, "Tyrosine-protein kinase LCK"),
    ("Monoamine", "CHEMBL1951", 1379, "Monoamine oxidase A"),
    ("Opioid", "CHEMBL233", 840, "Mu opioid receptor"),
    ("Vanilloid", "CHEMBL4794", 1923, "Vanilloid receptor"),
]

CATALOG = DatasetCatalog(
    tuple(CatalogEntry(n, s, c, "cell_line", d) for n, s, c, d in _CELL_LINES)
    + tuple(CatalogEntry(n, s, c, "target", d) for n, s, c, d in _TARGETS)
)

CYTOTOXICITY_SETS = CATALOG.names("cell_line")
