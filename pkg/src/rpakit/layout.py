"""Tiled memory layout model: implicit padding, narrow-type packing, and the
logical-to-physical index mapping.

The last two dimensions of a tensor are organized into tiles of shape
(sublanes, 128). Within one tile, `packing` consecutive logical rows share a
32-bit physical word: for 16-bit elements rows 2i and 2i+1 interleave, the
even row in the low half-word and the odd row in the high half-word. Nothing
in the numeric engine is physically rearranged; this module is a pure index
and footprint model used for accounting and DMA sizing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .errors import InvalidDtype, InvalidShape
from .numerics import packing_for_bits

LANES = 128
# One DMA chunk is 128 lanes of one physical word row: 128 x 32 bits.
CHUNK_BYTES = 512


@dataclass(frozen=True)
class TileSpec:
    """Tile applied to the trailing two dimensions."""

    sublanes: int
    lanes: int = LANES
    packing: int = 1

    def __post_init__(self):
        if self.lanes != LANES:
            raise InvalidShape(f"lanes is fixed at {LANES}, got {self.lanes}")
        if self.packing not in (1, 2, 4):
            raise InvalidDtype(f"packing must be 1, 2 or 4, got {self.packing}")
        if self.sublanes <= 0 or self.sublanes % self.packing != 0:
            raise InvalidShape(
                f"sublanes must be a positive multiple of packing, got "
                f"{self.sublanes} with packing {self.packing}"
            )


@dataclass(frozen=True)
class TiledLayout:
    """A logical shape plus the tile and element width that realize it."""

    logical_shape: tuple
    tile: TileSpec
    element_bits: int

    def __post_init__(self):
        object.__setattr__(self, "logical_shape", tuple(int(d) for d in self.logical_shape))
        if not self.logical_shape or any(d <= 0 for d in self.logical_shape):
            raise InvalidShape(f"logical shape must be positive, got {self.logical_shape}")
        if self.element_bits not in (8, 16, 32):
            raise InvalidDtype(f"element_bits must be 8, 16 or 32, got {self.element_bits}")
        if self.tile.packing != packing_for_bits(self.element_bits):
            raise InvalidDtype(
                f"tile packing {self.tile.packing} inconsistent with "
                f"{self.element_bits}-bit elements"
            )

    def to_json(self) -> str:
        return json.dumps(
            {
                "shape": list(self.logical_shape),
                "tile": {
                    "sublanes": self.tile.sublanes,
                    "lanes": self.tile.lanes,
                    "packing": self.tile.packing,
                },
                "element_bits": self.element_bits,
            }
        )

    @staticmethod
    def from_json(text: str) -> "TiledLayout":
        rec = json.loads(text)
        tile = rec["tile"]
        return TiledLayout(
            tuple(rec["shape"]),
            TileSpec(tile["sublanes"], tile.get("lanes", LANES), tile.get("packing", 1)),
            rec["element_bits"],
        )


def min_tile_for(second_minor: int, element_bits: int) -> TileSpec:
    """The minimum legal tile T(packing, 128) for the given element width.

    Forcing the second-minor extent to equal the packing factor is what lets
    a kernel avoid implicit sublane padding entirely.
    """
    if second_minor < 1:
        raise InvalidShape(f"second-minor extent must be >= 1, got {second_minor}")
    p = packing_for_bits(element_bits)
    return TileSpec(sublanes=p, packing=p)


def padded_footprint(layout: TiledLayout) -> tuple:
    """Implicit-padding-inclusive shape and its size in bytes."""
    shape = layout.logical_shape
    if len(shape) < 2:
        raise InvalidShape(f"need rank >= 2 to tile the trailing dims, got shape {shape}")
    s, l = layout.tile.sublanes, layout.tile.lanes
    padded = shape[:-2] + (
        math.ceil(shape[-2] / s) * s,
        math.ceil(shape[-1] / l) * l,
    )
    nbytes = math.prod(padded) * layout.element_bits // 8
    return padded, nbytes


def logical_to_physical(layout: TiledLayout, index) -> int:
    """Linear element offset of a logical multi-index.

    Tiles are laid out row-major over the padded trailing dims; leading dims
    are row-major planes. Within a tile, `packing` consecutive rows share one
    word, sub-word position = row % packing.
    """
    index = tuple(int(i) for i in index)
    shape = layout.logical_shape
    if len(index) != len(shape):
        raise IndexError(f"index rank {len(index)} != shape rank {len(shape)}")
    if any(not (0 <= i < d) for i, d in zip(index, shape)):
        raise IndexError(f"index {index} out of range for shape {shape}")
    padded, _ = padded_footprint(layout)
    s, l, p = layout.tile.sublanes, layout.tile.lanes, layout.tile.packing

    r, c = index[-2], index[-1]
    tiles_per_row = padded[-1] // l
    tile_idx = (r // s) * tiles_per_row + (c // l)
    row_in_tile = r % s
    within = ((row_in_tile // p) * l + (c % l)) * p + row_in_tile % p
    offset = tile_idx * s * l + within

    stride = math.prod(padded[-2:])
    for dim, i in zip(reversed(shape[:-2]), reversed(index[:-2])):
        offset += i * stride
        stride *= dim
    return offset


def physical_to_logical(layout: TiledLayout, offset: int):
    """Inverse of logical_to_physical; raises IndexError on padding slots."""
    padded, _ = padded_footprint(layout)
    plane = math.prod(padded[-2:])
    lead = offset // plane
    rem = offset % plane
    lead_index = []
    for dim in reversed(layout.logical_shape[:-2]):
        lead_index.append(lead % dim)
        lead //= dim
    if lead:
        raise IndexError(f"offset {offset} beyond the layout extent")
    lead_index.reverse()

    s, l, p = layout.tile.sublanes, layout.tile.lanes, layout.tile.packing
    tiles_per_row = padded[-1] // l
    tile_idx, within = divmod(rem, s * l)
    word, sub = divmod(within, p)
    w_row, col = divmod(word, l)
    r = (tile_idx // tiles_per_row) * s + w_row * p + sub
    c = (tile_idx % tiles_per_row) * l + col
    shape = layout.logical_shape
    if r >= shape[-2] or c >= shape[-1]:
        raise IndexError(f"offset {offset} lands in padding at row {r}, col {c}")
    return tuple(lead_index) + (r, c)


def _chunk_labels(n: int):
    """A, B, ..., Z, AA, AB, ... for n chunks."""
    labels = []
    for k in range(n):
        name = ""
        k += 1
        while k:
            k, rem = divmod(k - 1, 26)
            name = chr(ord("A") + rem) + name
        labels.append(name)
    return labels


def physical_chunk_order(layout: TiledLayout) -> str:
    """Order of 128-element logical chunks in physical memory.

    Chunks are labelled row-major over the logical view (A, B, C, ...) in
    spans of 128 elements, then sorted by the physical offset of each chunk's
    first element. Requires a 2-D layout with lane-aligned columns.
    """
    shape = layout.logical_shape
    if len(shape) != 2:
        raise InvalidShape(f"chunk enumeration needs a 2-D layout, got rank {len(shape)}")
    if shape[1] % LANES != 0:
        raise InvalidShape(f"columns must be a multiple of {LANES}, got {shape[1]}")
    per_row = shape[1] // LANES
    labels = _chunk_labels(shape[0] * per_row)
    order = sorted(
        range(len(labels)),
        key=lambda k: logical_to_physical(layout, (k // per_row, (k % per_row) * LANES)),
    )
    return "".join(labels[k] for k in order)


def classify_slice(layout: TiledLayout, axis: int, start: int, stop: int) -> str:
    """Cost class of slicing [start, stop) along `axis`.

    Slices on untiled (leading) axes are free. On the trailing two axes a
    slice is free only when it covers whole tiles; otherwise the data must be
    unpacked, blended and repacked.
    """
    shape = layout.logical_shape
    axis = axis % len(shape)
    if not (0 <= start < stop <= shape[axis]):
        raise IndexError(f"slice [{start}, {stop}) out of range for axis {axis}")
    if axis < len(shape) - 2:
        return "free"
    extent = layout.tile.sublanes if axis == len(shape) - 2 else layout.tile.lanes
    aligned = start % extent == 0 and (stop % extent == 0 or stop == shape[axis])
    return "free" if aligned else "repack"
