"""The learnable parameter vector: named, bounded blocks with a flat view and a JSON snapshot."""

from dataclasses import dataclass
import json

import numpy as np

SNAPSHOT_FORMAT = "safe-mpcrl-theta"
SNAPSHOT_VERSION = 1


@dataclass
class ThetaBlock:
    """One named block of parameters.

    Attributes
    ----------
    name : str
        The block name (e.g. ``"F"``, ``"omega_bar"``, ``"W1"``).
    values : numpy.ndarray
        The current values.
    lower, upper : numpy.ndarray
        Per-entry bounds with the same shape (may be infinite).
    """

    name: str
    values: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.values = np.array(self.values, dtype=float)
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), self.values.shape).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), self.values.shape).copy()
        if np.any(self.lower > self.upper):
            raise ValueError(f"Block {self.name} has a lower bound above its upper bound.")

    @property
    def shape(self):
        """The block shape."""
        return self.values.shape

    @property
    def size(self):
        """The number of entries."""
        return self.values.size


class ThetaVector:
    """An ordered collection of named parameter blocks.

    The flat order concatenates the blocks in insertion order, each row-major.

    Parameters
    ----------
    blocks : list of ThetaBlock
        The blocks, names unique.
    """

    def __init__(self, blocks):
        self._blocks = {}
        for block in blocks:
            if block.name in self._blocks:
                raise ValueError(f"Duplicate theta block {block.name}.")
            self._blocks[block.name] = block

    def __len__(self):
        return sum(block.size for block in self._blocks.values())

    def __contains__(self, name):
        return name in self._blocks

    def __getitem__(self, name):
        if name not in self._blocks:
            raise KeyError(f"Unknown theta block {name}.")
        return self._blocks[name].values.copy()

    def __repr__(self):
        parts = ", ".join(f"{b.name}{list(b.shape)}" for b in self._blocks.values())
        return f"ThetaVector({parts})"

    @property
    def names(self):
        """The block names in flat order."""
        return list(self._blocks)

    def blocks(self):
        """The blocks in flat order."""
        return list(self._blocks.values())

    def slices(self):
        """Map each block name to its slice in the flat vector."""
        out = {}
        idx = 0
        for block in self._blocks.values():
            out[block.name] = slice(idx, idx + block.size)
            idx += block.size
        return out

    def flat(self):
        """All values as one vector."""
        if len(self._blocks) == 0:
            return np.zeros(0)
        return np.concatenate([b.values.ravel() for b in self._blocks.values()])

    def lower(self):
        """The flat lower bounds."""
        return np.concatenate([b.lower.ravel() for b in self._blocks.values()])

    def upper(self):
        """The flat upper bounds."""
        return np.concatenate([b.upper.ravel() for b in self._blocks.values()])

    def with_flat(self, flat):
        """Return a copy holding new flat values (bounds unchanged).

        Parameters
        ----------
        flat : array_like
            The new values in flat order.

        Returns
        -------
        ThetaVector
            The new vector.
        """
        flat = np.asarray(flat, dtype=float).reshape(-1)
        if flat.shape[0] != len(self):
            raise ValueError(f"Expected {len(self)} theta entries, got {flat.shape[0]}.")
        blocks = []
        for block, sl in zip(self._blocks.values(), self.slices().values()):
            blocks.append(ThetaBlock(block.name, flat[sl].reshape(block.shape), block.lower, block.upper))
        return ThetaVector(blocks)

    def with_block(self, name, values):
        """Return a copy with one block replaced."""
        if name not in self._blocks:
            raise KeyError(f"Unknown theta block {name}.")
        blocks = []
        for block in self._blocks.values():
            if block.name == name:
                values = np.asarray(values, dtype=float).reshape(block.shape)
                block = ThetaBlock(name, values, block.lower, block.upper)
            blocks.append(block)
        return ThetaVector(blocks)

    def within_bounds(self, tol=0.0):
        """Whether every entry lies within its bounds."""
        flat = self.flat()
        return bool(np.all(flat >= self.lower() - tol) and np.all(flat <= self.upper() + tol))

    def same_layout(self, other):
        """Whether two vectors have identical block names and shapes."""
        return [(b.name, b.shape) for b in self.blocks()] == [(b.name, b.shape) for b in other.blocks()]

    def values_record(self):
        """Block name to nested list of values."""
        return {b.name: b.values.tolist() for b in self._blocks.values()}

    def to_dict(self):
        """The snapshot document (infinite bounds become null)."""

        def _bounds(arr):
            return [None if not np.isfinite(v) else float(v) for v in arr.ravel()]

        return {
            "format": SNAPSHOT_FORMAT,
            "version": SNAPSHOT_VERSION,
            "blocks": [
                {
                    "name": b.name,
                    "shape": list(b.shape),
                    "values": [float(v) for v in b.values.ravel()],
                    "lower": _bounds(b.lower),
                    "upper": _bounds(b.upper),
                }
                for b in self._blocks.values()
            ],
        }

    def to_json(self):
        """The snapshot as JSON text (shortest round-trip floats)."""
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, document):
        """Rebuild a vector from a snapshot document.

        Parameters
        ----------
        document : dict
            The output of ``to_dict``.

        Returns
        -------
        ThetaVector
            The parameters.
        """
        if document.get("format") != SNAPSHOT_FORMAT:
            raise ValueError(f"Not a theta snapshot (format {document.get('format')!r}).")
        if document.get("version") != SNAPSHOT_VERSION:
            raise ValueError(f"Unsupported theta snapshot version {document.get('version')}.")

        blocks = []
        for entry in document["blocks"]:
            shape = tuple(entry["shape"])
            lower = [-np.inf if v is None else v for v in entry["lower"]]
            upper = [np.inf if v is None else v for v in entry["upper"]]
            blocks.append(
                ThetaBlock(
                    entry["name"],
                    np.asarray(entry["values"], dtype=float).reshape(shape),
                    np.asarray(lower, dtype=float).reshape(shape),
                    np.asarray(upper, dtype=float).reshape(shape),
                )
            )
        return cls(blocks)

    @classmethod
    def from_json(cls, text):
        """Rebuild a vector from snapshot JSON text."""
        return cls.from_dict(json.loads(text))

    def save(self, path):
        """Write the snapshot to a file."""
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def load(cls, path):
        """Read a snapshot file."""
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(fh.read())
