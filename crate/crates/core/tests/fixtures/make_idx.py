"""Writes the tiny IDX fixture used by tests/idx.rs: 4 images of 3x2 pixels."""
import struct
from pathlib import Path

here = Path(__file__).parent
pixels = bytes((i * 50 + r * 2 + c * 7) % 256 for i in range(4) for r in range(3) for c in range(2))
labels = bytes([3, 0, 2, 1])
(here / "tiny-images.idx3-ubyte").write_bytes(struct.pack(">BBBBIII", 0, 0, 8, 3, 4, 3, 2) + pixels)
(here / "tiny-labels.idx1-ubyte").write_bytes(struct.pack(">BBBBI", 0, 0, 8, 1, 4) + labels)
