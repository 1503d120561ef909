"""Challenge label ids, the consolidated 46-structure space, and dense indices."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Optional

import numpy as np

from .grid import LabelGrid

log = logging.getLogger(__name__)

# consolidated id -> (name, ranked)
CONSOLIDATED = {
    0: ("Background", False),
    1: ("Lower Jawbone", True),
    2: ("Upper Jawbone", True),
    3: ("Left Inferior Alveolar Canal", True),
    4: ("Right Inferior Alveolar Canal", True),
    5: ("Left Maxillary Sinus", True),
    6: ("Right Maxillary Sinus", True),
    7: ("Pharynx", True),
    8: ("Bridge", False),
    9: ("Crown", False),
    10: ("Implant", False),
    11: ("Upper Right Central Incisor", True),
    12: ("Upper Right Lateral Incisor", True),
    13: ("Upper Right Canine", True),
    14: ("Upper Right First Premolar", True),
    15: ("Upper Right Second Premolar", True),
    16: ("Upper Right First Molar", True),
    17: ("Upper Right Second Molar", True),
    18: ("Upper Right Third Molar (Wisdom Tooth)", True),
    21: ("Upper Left Central Incisor", True),
    22: ("Upper Left Lateral Incisor", True),
    23: ("Upper Left Canine", True),
    24: ("Upper Left First Premolar", True),
    25: ("Upper Left Second Premolar", True),
    26: ("Upper Left First Molar", True),
    27: ("Upper Left Second Molar", True),
    28: ("Upper Left Third Molar (Wisdom Tooth)", True),
    31: ("Lower Left Central Incisor", True),
    32: ("Lower Left Lateral Incisor", True),
    33: ("Lower Left Canine", True),
    34: ("Lower Left First Premolar", True),
    35: ("Lower Left Second Premolar", True),
    36: ("Lower Left First Molar", True),
    37: ("Lower Left Second Molar", True),
    38: ("Lower Left Third Molar (Wisdom Tooth)", True),
    41: ("Lower Right Central Incisor", True),
    42: ("Lower Right Lateral Incisor", True),
    43: ("Lower Right Canine", True),
    44: ("Lower Right First Premolar", True),
    45: ("Lower Right Second Premolar", True),
    46: ("Lower Right First Molar", True),
    47: ("Lower Right Second Molar", True),
    48: ("Lower Right Third Molar (Wisdom Tooth)", True),
    50: ("Tooth Pulp", True),
    51: ("Left Incisive Nerve", True),
    52: ("Right Incisive Nerve", True),
    53: ("Lingual Nerve", True),
}

MANDIBLE = 1
PHARYNX = 7
PULP = 50
NERVES = (51, 52, 53)
PULP_SOURCE = range(111, 149)
CANAL_SOURCE = (103, 104, 105)
DEFAULT_CANAL_ORDER = {103: 51, 104: 52, 105: 53}


class UnknownLabelError(ValueError):
    pass


@dataclass(frozen=True)
class LabelEntry:
    challenge_id: int
    dense_id: int
    name: str
    ranked: bool


class LabelTable:
    """Mapping between challenge/consolidated ids and the dense index space.

    Several challenge ids may share a dense id (pulp sources, canal sources);
    the inverse direction maps each dense id to the smallest challenge id
    carrying it, which for the builtin table is the consolidated id.
    """

    def __init__(self, entries: Iterable[LabelEntry]):
        self.entries = tuple(sorted(entries, key=lambda e: (e.dense_id, e.challenge_id)))
        to_dense: dict[int, int] = {}
        to_challenge: dict[int, int] = {}
        names: dict[int, str] = {}
        ranked: dict[int, bool] = {}
        for e in self.entries:
            if e.challenge_id in to_dense:
                raise ValueError(f"duplicate challenge id {e.challenge_id}")
            to_dense[e.challenge_id] = e.dense_id
            if e.dense_id not in to_challenge:
                to_challenge[e.dense_id] = e.challenge_id
                names[e.dense_id] = e.name
                ranked[e.dense_id] = e.ranked
        dense = sorted(to_challenge)
        if dense != list(range(len(dense))):
            raise ValueError("dense ids must be contiguous from 0")
        if to_dense.get(0, 0) != 0 or to_challenge.get(0) != 0:
            raise ValueError("background must map 0 <-> 0")
        self._to_dense = to_dense
        self._to_challenge = to_challenge
        self._names = names
        self._ranked = ranked

    @property
    def n_dense(self) -> int:
        return len(self._to_challenge)

    def dense(self, challenge_id: int) -> int:
        return self._to_dense[challenge_id]

    def challenge(self, dense_id: int) -> int:
        return self._to_challenge[dense_id]

    def name(self, consolidated_id: int) -> str:
        return self._names[self._to_dense[consolidated_id]]

    def consolidated_ids(self) -> list[int]:
        return [self._to_challenge[d] for d in range(self.n_dense)]

    def ranked_ids(self) -> list[int]:
        """Consolidated ids of ranked (scored) structures, ascending."""
        return [self._to_challenge[d] for d in range(self.n_dense) if self._ranked[d]]

    def lookup_array(self, direction: str, default: int = -1) -> np.ndarray:
        mapping = self._mapping(direction)
        lut = np.full(max(mapping) + 1, default, dtype=np.int64)
        for k, v in mapping.items():
            lut[k] = v
        return lut

    def _mapping(self, direction):
        if direction == "to-dense":
            return self._to_dense
        if direction == "to-challenge":
            return self._to_challenge
        raise ValueError(f"direction must be 'to-dense' or 'to-challenge', got {direction!r}")

    # manifest I/O -----------------------------------------------------------

    def to_manifest(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        for e in sorted(self.entries, key=lambda e: e.challenge_id):
            w.writerow([e.challenge_id, e.dense_id, e.name, "1" if e.ranked else "0"])
        return buf.getvalue()

    @classmethod
    def from_manifest(cls, text: str) -> "LabelTable":
        entries = []
        for lineno, row in enumerate(csv.reader(io.StringIO(text)), 1):
            if not row or row[0].strip().startswith("#"):
                continue
            if row[0].strip() == "challenge_id":
                continue
            if len(row) != 4:
                raise ValueError(f"table line {lineno}: expected 4 fields, got {len(row)}")
            cid, did, name, ranked = (f.strip() for f in row)
            if ranked.lower() not in ("0", "1", "true", "false"):
                raise ValueError(f"table line {lineno}: ranked must be 0/1/true/false")
            entries.append(LabelEntry(int(cid), int(did), name, ranked.lower() in ("1", "true")))
        return cls(entries)

    @classmethod
    def load(cls, path) -> "LabelTable":
        return cls.from_manifest(Path(path).read_text(encoding="utf-8"))

    def __eq__(self, other):
        return isinstance(other, LabelTable) and self.entries == other.entries


def builtin_table(canal_order: Optional[Mapping[int, int]] = None) -> LabelTable:
    """The canonical table: 47 dense labels, 43 of them ranked.

    ``canal_order`` overrides which consolidated nerve id each of the canal
    source ids 103-105 maps to.
    """
    canal_order = dict(DEFAULT_CANAL_ORDER if canal_order is None else canal_order)
    if sorted(canal_order) != list(CANAL_SOURCE) or sorted(canal_order.values()) != list(NERVES):
        raise ValueError("canal_order must map 103, 104, 105 onto 51, 52, 53")
    dense_of = {cid: i for i, cid in enumerate(sorted(CONSOLIDATED))}
    entries = [LabelEntry(cid, dense_of[cid], name, ranked) for cid, (name, ranked) in CONSOLIDATED.items()]
    pulp_name = CONSOLIDATED[PULP][0]
    entries += [LabelEntry(src, dense_of[PULP], pulp_name, True) for src in PULP_SOURCE]
    for src, nerve in canal_order.items():
        entries.append(LabelEntry(src, dense_of[nerve], CONSOLIDATED[nerve][0], True))
    return LabelTable(entries)


def apply_remap(lbl: LabelGrid, table: LabelTable, direction: str, on_unknown: str = "error") -> LabelGrid:
    """Substitute every voxel label through ``table`` in the given direction.

    Unknown labels raise :class:`UnknownLabelError` (naming the id and its
    voxel count) or, with ``on_unknown="background"``, become 0 with a warning.
    """
    if on_unknown not in ("error", "background"):
        raise ValueError(f"on_unknown must be 'error' or 'background', got {on_unknown!r}")
    lut = table.lookup_array(direction)
    values, counts = np.unique(lbl.data, return_counts=True)
    top = int(values[-1])
    if top >= len(lut):
        lut = np.concatenate([lut, np.full(top + 1 - len(lut), -1, dtype=lut.dtype)])
    bad = [(int(v), int(c)) for v, c in zip(values, counts) if lut[v] < 0]
    if bad:
        desc = ", ".join(f"id {v} ({c} voxels)" for v, c in bad)
        if on_unknown == "error":
            raise UnknownLabelError(f"labels without a {direction} mapping: {desc}")
        log.warning("mapping unknown labels to background: %s", desc)
        lut = np.where(lut < 0, 0, lut)
    return lbl.with_data(lut[lbl.data].astype(np.uint16))
