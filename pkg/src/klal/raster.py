"""Aliased rasterisation onto RGB byte images, plus PPM/PNG encoding."""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import GraphScene, PatchGrid, Point, Polyline

PALETTE = {
    "white": (255, 255, 255),
    "black": (0, 0, 0),
    "red": (220, 0, 0),
    "blue": (0, 0, 220),
    "gray": (160, 160, 160),
}

# 5x7 bitmaps, one string per row, '#' = ink.
GLYPHS = {
    "A": [".###.", "#...#", "#...#", "#####", "#...#", "#...#", "#...#"],
    "B": ["####.", "#...#", "#...#", "####.", "#...#", "#...#", "####."],
    "C": [".###.", "#...#", "#....", "#....", "#....", "#...#", ".###."],
    "D": ["####.", "#...#", "#...#", "#...#", "#...#", "#...#", "####."],
    "E": ["#####", "#....", "#....", "####.", "#....", "#....", "#####"],
    "F": ["#####", "#....", "#....", "####.", "#....", "#....", "#...."],
    "G": [".###.", "#...#", "#....", "#.###", "#...#", "#...#", ".###."],
}


@dataclass(frozen=True)
class Image:
    width: int
    height: int
    pixels: bytes  # row-major RGB

    def __post_init__(self):
        if len(self.pixels) != 3 * self.width * self.height:
            raise ValueError(f"pixel buffer has {len(self.pixels)} bytes, expected {3 * self.width * self.height}")

    @classmethod
    def blank(cls, width: int, height: int, color: str = "white") -> Image:
        arr = np.empty((height, width, 3), dtype=np.uint8)
        arr[:] = PALETTE[color]
        return cls.from_array(arr)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> Image:
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        h, w, c = arr.shape
        if c != 3:
            raise ValueError("expected an H x W x 3 array")
        return cls(w, h, arr.tobytes())

    def array(self) -> np.ndarray:
        return np.frombuffer(self.pixels, dtype=np.uint8).reshape(self.height, self.width, 3)


@dataclass(frozen=True)
class Style:
    stroke: int = 2


@dataclass
class Scene:
    """Drawing primitives in paint order: grid lines, cells, strokes, glyphs."""

    width: int = 64
    height: int = 64
    cells: list[tuple[int, int, int, int, str]] = field(default_factory=list)  # x0, y0, x1, y1 (exclusive), color
    grid: PatchGrid | None = None
    strokes: list[Polyline] = field(default_factory=list)
    glyphs: list[tuple[str, Point, str]] = field(default_factory=list)

    @classmethod
    def from_graph(cls, scene: GraphScene) -> Scene:
        return cls(
            width=scene.width,
            height=scene.height,
            strokes=list(scene.paths),
            glyphs=[(n.label, n.center, "black") for n in scene.nodes],
        )


def _stamp(arr: np.ndarray, x: int, y: int, w: int, rgb) -> None:
    x0 = x - (w - 1) // 2
    y0 = y - (w - 1) // 2
    h, wd = arr.shape[:2]
    arr[max(0, y0) : min(h, y0 + w), max(0, x0) : min(wd, x0 + w)] = rgb


def draw_line(arr: np.ndarray, a: Point, b: Point, width: int, rgb) -> None:
    """Bresenham between rounded endpoints, stamping a width x width square."""
    x0, y0 = int(round(a[0])), int(round(a[1]))
    x1, y1 = int(round(b[0])), int(round(b[1]))
    dx, sx = abs(x1 - x0), (1 if x0 < x1 else -1)
    dy, sy = -abs(y1 - y0), (1 if y0 < y1 else -1)
    err = dx + dy
    while True:
        _stamp(arr, x0, y0, width, rgb)
        if x0 == x1 and y0 == y1:
            break
        e2 = 2 * err
        if e2 >= dy:
            err += dy
            x0 += sx
        if e2 <= dx:
            err += dx
            y0 += sy


def draw_glyph(arr: np.ndarray, char: str, center: Point, rgb) -> None:
    rows = GLYPHS[char]
    x0 = int(round(center[0])) - 2
    y0 = int(round(center[1])) - 3
    h, w = arr.shape[:2]
    # white halo keeps labels legible over strokes
    arr[max(0, y0 - 1) : min(h, y0 + 8), max(0, x0 - 1) : min(w, x0 + 6)] = PALETTE["white"]
    for r, line in enumerate(rows):
        for c, ch in enumerate(line):
            if ch == "#" and 0 <= y0 + r < h and 0 <= x0 + c < w:
                arr[y0 + r, x0 + c] = rgb


def rasterize(scene: Scene, style: Style = Style()) -> Image:
    arr = np.empty((scene.height, scene.width, 3), dtype=np.uint8)
    arr[:] = PALETTE["white"]
    if scene.grid is not None:
        p = scene.grid.patch
        arr[:, :: p] = PALETTE["gray"]
        arr[:: p, :] = PALETTE["gray"]
    for x0, y0, x1, y1, color in scene.cells:
        arr[y0:y1, x0:x1] = PALETTE[color]
    for line in scene.strokes:
        for a, b in line.segments():
            draw_line(arr, a, b, style.stroke, PALETTE[line.color])
    for char, center, color in scene.glyphs:
        draw_glyph(arr, char, center, PALETTE[color])
    return Image.from_array(arr)


# -- encoding -----------------------------------------------------------------------
def encode_ppm(img: Image) -> bytes:
    return f"P6\n{img.width} {img.height}\n255\n".encode("ascii") + img.pixels


def decode_ppm(data: bytes) -> Image:
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise ValueError("only binary 8-bit PPM (P6, maxval 255) is supported")
    w, h = int(tokens[1]), int(tokens[2])
    body = data[pos + 1 : pos + 1 + 3 * w * h]
    if len(body) != 3 * w * h:
        raise ValueError("truncated PPM pixel data")
    return Image(w, h, body)


def write_ppm(path, img: Image) -> None:
    Path(path).write_bytes(encode_ppm(img))


def read_ppm(path) -> Image:
    return decode_ppm(Path(path).read_bytes())


def _png_chunk(kind: bytes, data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + kind + data + struct.pack(">I", zlib.crc32(data, zlib.crc32(kind)))


def encode_png(img: Image) -> bytes:
    stride = 3 * img.width
    raw = b"".join(b"\0" + img.pixels[y * stride : (y + 1) * stride] for y in range(img.height))
    return (
        b"\x89PNG\r\n\x1a\n"
        + _png_chunk(b"IHDR", struct.pack(">IIBBBBB", img.width, img.height, 8, 2, 0, 0, 0))
        + _png_chunk(b"IDAT", zlib.compress(raw, 9))
        + _png_chunk(b"IEND", b"")
    )


def write_png(path, img: Image) -> None:
    Path(path).write_bytes(encode_png(img))
