"""Deterministic 224x224 Kekule depictions and the flip/rotate training augmentations."""

from __future__ import annotations

import hashlib
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import rdkit
from PIL import Image
from rdkit import Chem
from rdkit.Chem.Draw import rdMolDraw2D

log = logging.getLogger(__name__)

CANVAS = 224
DEFAULT_DENSITY = 800
# RDKit's default bond width, in pixels of the final 224 canvas
BASE_LINE_WIDTH = 2.0
MIN_RENDER_FRACTION = 0.99


@dataclass(frozen=True)
class RenderParams:
    canvas: int = CANVAS
    density: int = DEFAULT_DENSITY
    background: str = "white"
    resample: str = "box"
    kekulize: bool = True

    def __post_init__(self):
        if self.canvas != CANVAS:
            raise ValueError(f"canvas is fixed at {CANVAS}x{CANVAS}")
        if self.density < self.canvas:
            raise ValueError("density must be at least the canvas edge")
        if self.resample != "box":
            raise ValueError("only area-averaging ('box') resampling is supported")

    @property
    def hash(self) -> str:
        payload = dict(asdict(self), rdkit=rdkit.__version__)
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class CompoundImage:
    pixels: np.ndarray
    compound_id: str = ""
    render_params_hash: str = ""

    def __post_init__(self):
        if self.pixels.shape != (CANVAS, CANVAS, 3) or self.pixels.dtype != np.uint8:
            raise ValueError(f"expected ({CANVAS}, {CANVAS}, 3) uint8, got {self.pixels.shape} {self.pixels.dtype}")


@dataclass(frozen=True)
class AugmentPolicy:
    enabled: bool = True
    p_hflip: float = field(default=0.5, init=False)
    p_vflip: float = field(default=0.5, init=False)
    p_rot90: float = field(default=0.5, init=False)


class RenderError(RuntimeError):
    def __init__(self, compound_id: str, message: str):
        super().__init__(f"{compound_id}: {message}")
        self.compound_id = compound_id


class RenderBatchError(RuntimeError):
    def __init__(self, failures: dict, total: int):
        super().__init__(f"{len(failures)} of {total} compounds failed to render")
        self.failures = failures


def render_structure(structure: str, params: RenderParams = RenderParams(), compound_id: str = "") -> CompoundImage:
    """Render a SMILES string to a 224x224 RGB image.

    The molecule is drawn with RDKit's Cairo backend on a ``density`` x
    ``density`` raster (bond width scaled so it matches a native 224 drawing),
    then area-averaged down to the canvas.
    """
    mol = Chem.MolFromSmiles(structure)
    if mol is None:
        raise RenderError(compound_id, f"unparseable structure {structure!r}")
    try:
        mol = rdMolDraw2D.PrepareMolForDrawing(mol, kekulize=params.kekulize)
    except Exception as exc:  # RDKit raises assorted runtime errors from layout/kekulization
        raise RenderError(compound_id, f"layout failed: {exc}") from exc
    scale = params.density / params.canvas
    drawer = rdMolDraw2D.MolDraw2DCairo(params.density, params.density)
    opts = drawer.drawOptions()
    opts.bondLineWidth = BASE_LINE_WIDTH * scale
    opts.scaleBondWidth = False
    opts.setBackgroundColour((1.0, 1.0, 1.0, 1.0))
    drawer.DrawMolecule(mol)
    drawer.FinishDrawing()
    big = Image.open(io.BytesIO(drawer.GetDrawingText())).convert("RGB")
    small = big.resize((params.canvas, params.canvas), Image.BOX)
    pixels = np.asarray(small, dtype=np.uint8).copy()
    if pixels.min() == pixels.max():
        raise RenderError(compound_id, "blank render")
    return CompoundImage(pixels, compound_id, params.hash)


# -- augmentation -------------------------------------------------------------

def hflip(pixels: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(pixels[:, ::-1])


def vflip(pixels: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(pixels[::-1])


def rot90(pixels: np.ndarray, k: int = 1) -> np.ndarray:
    return np.ascontiguousarray(np.rot90(pixels, k, axes=(0, 1)))


def augment(image, policy: AugmentPolicy, rng: np.random.Generator):
    """Random horizontal flip, vertical flip and 90/180/270 degree rotation.

    Each transform fires independently with probability 0.5, in that order.
    Four values are always drawn from ``rng`` so the stream stays aligned
    across images. Accepts a :class:`CompoundImage` or a raw HxWxC array and
    returns the same kind.
    """
    pixels = image.pixels if isinstance(image, CompoundImage) else image
    u = rng.random(3)
    k = int(rng.integers(1, 4))
    if policy.enabled:
        if u[0] < policy.p_hflip:
            pixels = hflip(pixels)
        if u[1] < policy.p_vflip:
            pixels = vflip(pixels)
        if u[2] < policy.p_rot90:
            pixels = rot90(pixels, k)
    if isinstance(image, CompoundImage):
        return CompoundImage(pixels, image.compound_id, image.render_params_hash)
    return pixels


# -- data set rendering ---------------------------------------------------------

def _png_bytes(pixels: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(pixels, "RGB").save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def _render_one(args):
    cid, smiles, params = args
    try:
        return cid, _png_bytes(render_structure(smiles, params, cid).pixels), None
    except RenderError as exc:
        return cid, None, str(exc)


def render_dataset(curated: Sequence, params: RenderParams = RenderParams(), out_dir: str | Path = "images",
                   workers: int = 1) -> dict:
    """Render every compound to ``<out_dir>/<compound_id>.png`` and write ``manifest.json``.

    Raises :class:`RenderBatchError` when fewer than 99% of compounds render.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(c.compound_id, c.structure, params) for c in curated]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_render_one, jobs, chunksize=16))
    else:
        results = [_render_one(j) for j in jobs]

    images, failures = {}, {}
    for cid, png, err in results:
        if png is None:
            failures[cid] = err
            log.warning("render failed: %s", err)
            continue
        path = out_dir / f"{cid}.png"
        if not (path.exists() and path.read_bytes() == png):
            tmp = path.with_suffix(".png.tmp")
            tmp.write_bytes(png)
            os.replace(tmp, path)
        images[cid] = {"path": path.name, "params_hash": params.hash}
    manifest = {"params": asdict(params), "params_hash": params.hash, "images": images, "failures": failures}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    if jobs and len(images) < MIN_RENDER_FRACTION * len(jobs):
        raise RenderBatchError(failures, len(jobs))
    return manifest


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def load_images(out_dir: str | Path, ids: Iterable[str]) -> np.ndarray:
    out_dir = Path(out_dir)
    return np.stack([load_image(out_dir / f"{cid}.png") for cid in ids])


def render_many(curated: Sequence, params: RenderParams = RenderParams()) -> tuple[list[str], np.ndarray, dict]:
    """In-memory variant of :func:`render_dataset`: returns ids, an (N, 224, 224, 3) stack and failures."""
    ids, arrays, failures = [], [], {}
    for c in curated:
        try:
            arrays.append(render_structure(c.structure, params, c.compound_id).pixels)
            ids.append(c.compound_id)
        except RenderError as exc:
            failures[c.compound_id] = str(exc)
    stack = np.stack(arrays) if arrays else np.zeros((0, CANVAS, CANVAS, 3), np.uint8)
    return ids, stack, failures
