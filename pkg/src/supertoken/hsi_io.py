"""Cube, label-map and palette file formats plus a synthetic scene generator.

Cube files are a plain-text header (``key = value`` per line) next to a raw
sidecar holding little-endian float32 samples in band-sequential order.
``scene.hdr`` always pairs with ``scene.raw``.  Label and class maps are
16-bit binary PGM (P5, big-endian samples); colourised maps are binary PPM.
"""

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Xoshiro256

IGNORE = 65535

_REQUIRED_KEYS = ("height", "width", "bands", "dtype", "interleave", "byteorder")


class FormatError(ValueError):
    """Raised for malformed or inconsistent files and invalid data."""


@dataclass
class HsiCube:
    """Radiance cube held as an ``(H, W, D)`` array."""

    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise FormatError(f"cube data must be 3-D (H, W, D), got shape {self.data.shape}")
        h, w, d = self.data.shape
        if h < 1 or w < 1:
            raise FormatError("height and width must be >= 1")
        if d < 1:
            raise FormatError("bands must be ≥ 1")
        bad = np.flatnonzero(~np.isfinite(self.data.transpose(2, 0, 1)))
        if bad.size:
            raise FormatError(f"non-finite value at band-sequential index {int(bad[0])}")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def bands(self):
        return self.data.shape[2]

    @property
    def num_pixels(self):
        return self.height * self.width

    def pixels(self):
        """``(N, D)`` view in row-major pixel order."""
        return self.data.reshape(self.num_pixels, self.bands)


@dataclass
class LabelMap:
    """Ground-truth class id per pixel; ``IGNORE`` marks unlabeled pixels."""

    class_ids: np.ndarray

    def __post_init__(self):
        self.class_ids = np.asarray(self.class_ids)
        if self.class_ids.ndim != 2:
            raise FormatError(f"label map must be 2-D, got shape {self.class_ids.shape}")
        if self.class_ids.size and (self.class_ids.min() < 0 or self.class_ids.max() > IGNORE):
            raise FormatError("label ids must lie in [0, 65535]")
        self.class_ids = self.class_ids.astype(np.int64)

    @property
    def height(self):
        return self.class_ids.shape[0]

    @property
    def width(self):
        return self.class_ids.shape[1]

    def validate(self, num_classes):
        ids = self.class_ids[self.class_ids != IGNORE]
        if ids.size and ids.max() >= num_classes:
            raise FormatError(f"label id {int(ids.max())} >= num_classes {num_classes}")


@dataclass
class ClassMap(LabelMap):
    """Predicted class per pixel."""


# -- cubes -------------------------------------------------------------------


def data_path_for(header_path):
    return Path(header_path).with_suffix(".raw")


def write_cube(cube, path):
    """Write ``path`` (header) and its ``.raw`` sidecar."""
    path = Path(path)
    header = (
        f"height = {cube.height}\n"
        f"width = {cube.width}\n"
        f"bands = {cube.bands}\n"
        "dtype = float32\n"
        "interleave = bsq\n"
        "byteorder = le\n"
    )
    bsq = np.ascontiguousarray(cube.data.transpose(2, 0, 1), dtype="<f4")
    try:
        path.write_text(header, encoding="ascii")
        data_path_for(path).write_bytes(bsq.tobytes())
    except OSError as exc:
        raise FormatError(f"cannot write cube to {path}: {exc}") from exc


def parse_header(text):
    meta = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"header line {lineno} is not 'key = value': {line!r}")
        key, value = line.split("=", 1)
        meta[key.strip().lower()] = value.strip()
    missing = [k for k in _REQUIRED_KEYS if k not in meta]
    if missing:
        raise FormatError(f"header missing keys: {', '.join(missing)}")
    dims = {}
    for key in ("height", "width", "bands"):
        try:
            dims[key] = int(meta[key])
        except ValueError:
            raise FormatError(f"header key {key} is not an integer: {meta[key]!r}") from None
    if dims["bands"] < 1:
        raise FormatError("bands must be ≥ 1")
    if dims["height"] < 1 or dims["width"] < 1:
        raise FormatError("height and width must be ≥ 1")
    expected = {"dtype": "float32", "interleave": "bsq", "byteorder": "le"}
    for key, want in expected.items():
        if meta[key].lower() != want:
            raise FormatError(f"unsupported {key} {meta[key]!r}; expected {want}")
    return dims


def read_cube(header_path):
    header_path = Path(header_path)
    if not header_path.exists():
        raise FormatError(f"header not found: {header_path}")
    dims = parse_header(header_path.read_text(encoding="ascii"))
    h, w, d = dims["height"], dims["width"], dims["bands"]
    raw_path = data_path_for(header_path)
    if not raw_path.exists():
        raise FormatError(f"data file not found: {raw_path}")
    raw = raw_path.read_bytes()
    expected = h * w * d * 4
    if len(raw) != expected:
        raise FormatError(f"data file {raw_path} has {len(raw)} bytes, expected {expected}")
    bsq = np.frombuffer(raw, dtype="<f4").reshape(d, h, w)
    return HsiCube(bsq.transpose(1, 2, 0).astype(np.float32))


# -- netpbm ------------------------------------------------------------------


def _pnm_header(magic, width, height, maxval):
    return f"{magic}\n{width} {height}\n{maxval}\n".encode("ascii")


def _read_pnm(path):
    """Return (magic, width, height, maxval, payload bytes)."""
    buf = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"truncated netpbm header in {path}")
        tokens.append(buf[start:pos].decode("ascii"))
    pos += 1  # single whitespace byte after maxval
    magic = tokens[0]
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"garbled netpbm header in {path}") from None
    return magic, width, height, maxval, buf[pos:]


def write_label_map(label_map, path):
    """16-bit P5 PGM; works for both ``LabelMap`` and ``ClassMap``."""
    ids = label_map.class_ids
    body = np.ascontiguousarray(ids, dtype=">u2").tobytes()
    Path(path).write_bytes(_pnm_header("P5", ids.shape[1], ids.shape[0], 65535) + body)


def read_label_map(path, shape=None, cls=LabelMap):
    magic, width, height, maxval, payload = _read_pnm(path)
    if magic != "P5":
        raise FormatError(f"{path}: expected P5 PGM, got {magic}")
    if maxval != 65535:
        raise FormatError(f"{path}: expected 16-bit label map (maxval 65535), got maxval {maxval}")
    if shape is not None and tuple(shape) != (height, width):
        raise FormatError(f"{path}: dimensions {height}x{width} do not match expected {shape[0]}x{shape[1]}")
    need = width * height * 2
    if len(payload) < need:
        raise FormatError(f"{path}: pixel data has {len(payload)} bytes, expected {need}")
    ids = np.frombuffer(payload[:need], dtype=">u2").reshape(height, width)
    return cls(ids.astype(np.int64))


def read_class_map(path, shape=None):
    return read_label_map(path, shape, cls=ClassMap)


write_class_map = write_label_map


def write_color_map(class_map, palette, path):
    """Binary P6 PPM, colouring each pixel by ``palette[class_id]``.

    ``IGNORE`` pixels are drawn black.
    """
    ids = class_map.class_ids
    pal = np.asarray(palette, dtype=np.int64)
    labeled = ids != IGNORE
    if labeled.any() and ids[labeled].max() >= len(pal):
        raise FormatError(f"palette has {len(pal)} entries but map uses class {int(ids[labeled].max())}")
    rgb = np.zeros(ids.shape + (3,), dtype=np.uint8)
    rgb[labeled] = pal[ids[labeled]].astype(np.uint8)
    Path(path).write_bytes(_pnm_header("P6", ids.shape[1], ids.shape[0], 255) + rgb.tobytes())


def read_ppm(path):
    magic, width, height, maxval, payload = _read_pnm(path)
    if magic != "P6" or maxval != 255:
        raise FormatError(f"{path}: expected 8-bit P6 PPM")
    return np.frombuffer(payload[: width * height * 3], dtype=np.uint8).reshape(height, width, 3)


def default_palette(num_classes):
    """Deterministic, visually distinct-ish colours (golden-angle hues)."""
    import colorsys

    out = []
    for c in range(num_classes):
        r, g, b = colorsys.hsv_to_rgb((c * 0.618033988749895) % 1.0, 0.75, 0.95)
        out.append((int(round(r * 255)), int(round(g * 255)), int(round(b * 255))))
    return out


def read_palette(path):
    entries = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 'class r g b'")
        cls, r, g, b = (int(p) for p in parts)
        if not all(0 <= v <= 255 for v in (r, g, b)):
            raise FormatError(f"{path}:{lineno}: colour components must be in [0, 255]")
        entries[cls] = (r, g, b)
    if sorted(entries) != list(range(len(entries))):
        raise FormatError(f"{path}: palette classes must be 0..n-1 without gaps")
    return [entries[c] for c in range(len(entries))]


def write_palette(palette, path):
    Path(path).write_text("".join(f"{c} {r} {g} {b}\n" for c, (r, g, b) in enumerate(palette)))


# -- synthetic scenes --------------------------------------------------------


@dataclass
class SceneSpec:
    height: int
    width: int
    bands: int
    num_classes: int
    class_spectra: np.ndarray
    noise_sigma: float
    # (row0, col0, row1, col1, class_id), half-open; later rectangles paint over earlier ones
    regions: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        self.class_spectra = np.asarray(self.class_spectra, dtype=np.float64)
        if self.num_classes < 1:
            raise FormatError("num_classes must be ≥ 1")
        if self.noise_sigma < 0:
            raise FormatError("noise_sigma must be ≥ 0")
        if self.class_spectra.shape != (self.num_classes, self.bands):
            raise FormatError(
                f"class_spectra shape {self.class_spectra.shape} != ({self.num_classes}, {self.bands})"
            )


def make_synthetic_scene(spec):
    """Render ``spec`` into a float32 cube and its label map.

    Noise is drawn band-major: all pixels of band 0 in row-major order, then
    band 1, and so on.
    """
    labels = np.full((spec.height, spec.width), -1, dtype=np.int64)
    for r0, c0, r1, c1, cls in spec.regions:
        if not 0 <= cls < spec.num_classes:
            raise FormatError(f"region class {cls} outside [0, {spec.num_classes})")
        labels[max(r0, 0) : min(r1, spec.height), max(c0, 0) : min(c1, spec.width)] = cls
    uncovered = np.argwhere(labels < 0)
    if uncovered.size:
        r, c = uncovered[0]
        raise FormatError(f"region layout leaves {len(uncovered)} pixels uncovered, first at ({r}, {c})")
    data = spec.class_spectra[labels]
    if spec.noise_sigma > 0:
        n = spec.height * spec.width * spec.bands
        noise = Xoshiro256(spec.seed).normal(n).reshape(spec.bands, spec.height, spec.width)
        data = data + spec.noise_sigma * noise.transpose(1, 2, 0)
    return HsiCube(data.astype(np.float32)), LabelMap(labels)


def quadrant_layout(height, width, classes=(0, 1, 2, 3), row_split=None, col_split=None):
    """Four rectangles meeting at ``(row_split, col_split)``, default the centre."""
    h2 = height // 2 if row_split is None else row_split
    w2 = width // 2 if col_split is None else col_split
    return [
        (0, 0, h2, w2, classes[0]),
        (0, w2, h2, width, classes[1]),
        (h2, 0, height, w2, classes[2]),
        (h2, w2, height, width, classes[3]),
    ]


def patchwork_layout(height, width, num_classes, num_rects, seed):
    """A full-cover background plus ``num_rects`` random rectangles painted over it."""
    rng = Xoshiro256(seed)
    regions = [(0, 0, height, width, 0)]
    for k in range(num_rects):
        r0 = int(rng.integers(1, height)[0])
        c0 = int(rng.integers(1, width)[0])
        rh = 4 + int(rng.integers(1, max(height // 2, 1))[0])
        cw = 4 + int(rng.integers(1, max(width // 2, 1))[0])
        regions.append((r0, c0, min(r0 + rh, height), min(c0 + cw, width), (k + 1) % num_classes))
    return regions


def separated_spectra(num_classes, bands, min_distance, seed, scale=1.0):
    """Smooth random class spectra with pairwise L2 distance ≥ ``min_distance``.

    Each spectrum is a positive baseline plus a few random Gaussian bumps;
    candidates too close to an accepted spectrum are redrawn.
    """
    rng = Xoshiro256(seed)
    grid = np.linspace(0.0, 1.0, bands)
    accepted = []
    for _ in range(10000):
        if len(accepted) == num_classes:
            break
        base = 0.2 + 0.3 * rng.uniform(1)[0]
        centers = rng.uniform(3)
        heights = rng.uniform(3, -1.0, 1.0)
        widths = rng.uniform(3, 0.08, 0.3)
        spec = base + sum(a * np.exp(-0.5 * ((grid - c) / w) ** 2) for a, c, w in zip(heights, centers, widths))
        spec = scale * spec
        if all(np.linalg.norm(spec - other) >= min_distance for other in accepted):
            accepted.append(spec)
    if len(accepted) < num_classes:
        raise FormatError("could not draw spectra with the requested separation")
    return np.array(accepted)
