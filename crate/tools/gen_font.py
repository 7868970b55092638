#!/usr/bin/env python3
"""Rasterize DejaVu Sans Mono into the 8x16 glyph blob used by the renderer.

Blob layout (all integers little-endian):
  magic   4 bytes  b"GF16"
  width   u8       8
  height  u8       16
  count   u16      number of glyphs
  then `count` records of:
    codepoint u32
    rows      16 bytes, one per row top to bottom, bit 7 = leftmost pixel
"""
import struct
import sys

from PIL import Image, ImageDraw, ImageFont

FONT = "/usr/share/fonts/truetype/dejavu/DejaVuSansMono.ttf"
CHARS = (
    " "
    + "abcdefghijklmnopqrstuvwxyz"
    + "ABCDEFGHIJKLMNOPQRSTUVWXYZ"
    + "0123456789"
    + "äöüÄÖÜß"
    + "-.'"
)
W, H = 8, 16
SIZE = 13
BASELINE = 12
THRESHOLD = 110


def glyph_rows(font, ch):
    scale = 4
    big = ImageFont.truetype(FONT, SIZE * scale)
    img = Image.new("L", (W * scale, H * scale), 0)
    d = ImageDraw.Draw(img)
    ascent, _ = big.getmetrics()
    bbox = d.textbbox((0, 0), ch, font=big)
    adv = big.getlength(ch)
    x = (W * scale - adv) / 2
    y = BASELINE * scale - ascent
    d.text((x, y), ch, font=big, fill=255)
    small = img.resize((W, H), Image.BOX)
    rows = []
    for r in range(H):
        byte = 0
        for c in range(W):
            if small.getpixel((c, r)) >= THRESHOLD:
                byte |= 0x80 >> c
        rows.append(byte)
    return rows


def main(out):
    font = ImageFont.truetype(FONT, SIZE)
    blob = bytearray(b"GF16")
    blob += struct.pack("<BBH", W, H, len(CHARS))
    for ch in CHARS:
        blob += struct.pack("<I", ord(ch))
        blob += bytes(glyph_rows(font, ch))
    with open(out, "wb") as f:
        f.write(blob)


if __name__ == "__main__":
    main(sys.argv[1])
