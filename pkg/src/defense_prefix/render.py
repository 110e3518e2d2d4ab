"""Bundled fonts, the 8-colour palette and shadowed text drawing."""

from __future__ import annotations

from functools import lru_cache
from pathlib import Path

from PIL import Image, ImageDraw, ImageFont

FONT_DIR = Path(__file__).parent / "fonts"

# Open-licensed stand-ins for Roman / Courier / Times (see fonts/LICENSE_*).
CLASSIFICATION_FONTS = {
    "roman": "DejaVuSerif.ttf",
    "courier": "DejaVuSansMono.ttf",
    "times": "STIXGeneral.ttf",
}
DETECTION_FONT = "DejaVuSans"
_FONT_FILES = {**CLASSIFICATION_FONTS, DETECTION_FONT: "DejaVuSans.ttf"}

COLORS = {
    "red": (255, 0, 0),
    "green": (0, 255, 0),
    "blue": (0, 0, 255),
    "cyan": (0, 255, 255),
    "magenta": (255, 0, 255),
    "yellow": (255, 255, 0),
    "white": (255, 255, 255),
    "black": (0, 0, 0),
}
COLOR_NAMES = tuple(COLORS)

# 1-pixel outline drawn in the shadow colour under the main glyphs.
SHADOW_OFFSETS = ((-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1))
SHADOW_PX = 1


@lru_cache(maxsize=512)
def load_font(name: str, size: int) -> ImageFont.FreeTypeFont:
    try:
        filename = _FONT_FILES[name]
    except KeyError:
        raise ValueError(f"unknown font {name!r}; choose from {sorted(_FONT_FILES)}") from None
    return ImageFont.truetype(str(FONT_DIR / filename), size)


def text_extent(font: ImageFont.FreeTypeFont, text: str) -> tuple[int, int]:
    """Width and height of the tight ink box of ``text`` (shadow excluded)."""
    left, top, right, bottom = font.getbbox(text)
    return right - left, bottom - top


def footprint(font: ImageFont.FreeTypeFont, text: str) -> tuple[int, int]:
    """Width and height including the shadow outline on every side."""
    w, h = text_extent(font, text)
    return w + 2 * SHADOW_PX, h + 2 * SHADOW_PX


def draw_shadowed_text(img: Image.Image, x: int, y: int, text: str, font, color, shadow) -> None:
    """Draw ``text`` with its ink box's top-left corner at ``(x, y)``."""
    if isinstance(color, str):
        color = COLORS[color]
    if isinstance(shadow, str):
        shadow = COLORS[shadow]
    left, top, _, _ = font.getbbox(text)
    ox, oy = x - left, y - top
    draw = ImageDraw.Draw(img)
    for dx, dy in SHADOW_OFFSETS:
        draw.text((ox + dx, oy + dy), text, font=font, fill=shadow)
    draw.text((ox, oy), text, font=font, fill=color)
