from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image, ImageDraw

from deffgan.pyramid import load_image

FACES = [
    # background, skin, hair, eye, mouth, face width ratio
    ((70, 110, 160), (225, 185, 150), (60, 40, 25), (40, 70, 120), (170, 60, 60), 0.34),
    ((150, 170, 110), (200, 150, 110), (200, 160, 70), (60, 110, 60), (150, 50, 70), 0.30),
    ((120, 90, 140), (235, 200, 170), (20, 20, 20), (90, 60, 30), (190, 80, 80), 0.37),
]


def draw_face(size: int, variant: int) -> Image.Image:
    """Cartoon face drawn at 4x and box-filtered down."""
    bg, skin, hair, eye, mouth, fw = FACES[variant % len(FACES)]
    s = size * 4
    img = Image.new("RGB", (s, s), bg)
    d = ImageDraw.Draw(img)
    for y in range(s):
        shade = int(30 * y / s)
        d.line([(0, y), (s, y)], fill=tuple(max(0, c - shade) for c in bg))
    cx, cy = s / 2, s * 0.55
    rw, rh = s * fw, s * 0.40
    d.ellipse([cx - rw * 1.08, cy - rh * 1.15, cx + rw * 1.08, cy + rh * 0.6], fill=hair)
    d.ellipse([cx - rw, cy - rh, cx + rw, cy + rh], fill=skin)
    ex, ey, er = rw * 0.42, cy - rh * 0.15, s * 0.045
    for sx in (-1, 1):
        d.ellipse([cx + sx * ex - er * 1.6, ey - er, cx + sx * ex + er * 1.6, ey + er], fill=(245, 245, 245))
        d.ellipse([cx + sx * ex - er * 0.8, ey - er * 0.8, cx + sx * ex + er * 0.8, ey + er * 0.8], fill=eye)
    d.polygon([(cx, ey + er), (cx - er, cy + rh * 0.2), (cx + er, cy + rh * 0.2)],
              fill=tuple(int(c * 0.85) for c in skin))
    d.chord([cx - rw * 0.45, cy + rh * 0.2, cx + rw * 0.45, cy + rh * 0.6], 0, 180, fill=mouth)
    return img.resize((size, size), Image.Resampling.BOX)


def write_faces(directory: Path, n: int = 2, size: int = 64) -> list[Path]:
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n):
        p = directory / f"face_{i}.png"
        draw_face(size, i).save(p)
        paths.append(p)
    return paths


@pytest.fixture
def face_dir(tmp_path):
    d = tmp_path / "faces"
    write_faces(d, 2, 64)
    return d


def face_samples(n: int = 2, size: int = 64, tmp: Path = None):
    import tempfile

    base = Path(tmp or tempfile.mkdtemp())
    paths = write_faces(base / f"faces_{size}", n, size)
    return [load_image(p, size, class_id=i) for i, p in enumerate(paths)]


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)
